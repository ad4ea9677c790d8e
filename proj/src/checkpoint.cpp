// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout, all integers and floats little-endian:
//   8 bytes  magic "LGACKPT\0"
//   u32      version (1)
//   u32      reserved (0)
//   u64 x 6  n_layers d_model n_heads d_mlp context_len vocab_size
//   u64      init seed
//   u64      artifact tag (config hash of the producing run, 0 if none)
//   u64      parameter count
//   f64 x N  parameters in canonical order, each matrix row-major
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "lga/error.hpp"
#include "lga/model.hpp"

namespace lga {

namespace {

constexpr std::array<char, 8> kMagic = {'L', 'G', 'A', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 8 + 4 + 4 + 8 * 6 + 8 + 8 + 8;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t at = 0;
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    at += 8;
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    at += 4;
    return v;
  }
};

}  // namespace

void Transformer::save(const std::filesystem::path& path, std::uint64_t tag) const {
  std::string out;
  const Vec flat = params_.flatten();
  out.reserve(kHeaderBytes + 8 * static_cast<std::size_t>(flat.size()));
  out.append(kMagic.data(), kMagic.size());
  put_u32(out, kVersion);
  put_u32(out, 0);
  for (auto v : {cfg_.n_layers, cfg_.d_model, cfg_.n_heads, cfg_.d_mlp, cfg_.context_len, cfg_.vocab_size})
    put_u64(out, v);
  put_u64(out, seed_);
  put_u64(out, tag);
  put_u64(out, static_cast<std::uint64_t>(flat.size()));
  for (Eigen::Index i = 0; i < flat.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(flat[i]));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Transformer Transformer::load(const std::filesystem::path& path, const ModelConfig* expected, std::uint64_t* tag) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInput(path.string());
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < kMagic.size() || std::memcmp(buf.data(), kMagic.data(), kMagic.size()) != 0)
    throw FormatError("checkpoint: bad magic");
  if (buf.size() < kHeaderBytes) throw CorruptionError("checkpoint: truncated header");
  Reader r{buf, kMagic.size()};
  if (r.u32() != kVersion) throw FormatError("checkpoint: unsupported version");
  r.u32();
  ModelConfig cfg;
  cfg.n_layers = r.u64();
  cfg.d_model = r.u64();
  cfg.n_heads = r.u64();
  cfg.d_mlp = r.u64();
  cfg.context_len = r.u64();
  cfg.vocab_size = r.u64();
  const std::uint64_t seed = r.u64();
  const std::uint64_t stored_tag = r.u64();
  const std::uint64_t count = r.u64();
  if (expected && !(cfg == *expected)) throw FormatError("checkpoint: config does not match the expected model");
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }

  Transformer m;
  m.cfg_ = cfg;
  m.seed_ = seed;
  m.params_ = Parameters::zeros(cfg);
  if (count != m.params_.size()) throw CorruptionError("checkpoint: parameter count disagrees with config");
  if (buf.size() != kHeaderBytes + 8 * count) throw CorruptionError("checkpoint: payload size mismatch");
  m.params_.visit([&](auto& t) {
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = std::bit_cast<double>(r.u64());
  });
  if (tag) *tag = stored_tag;
  return m;
}

}  // namespace lga
