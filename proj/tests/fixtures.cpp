// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <cmath>
#include <map>
#include <mutex>

namespace lga::testing {

const TrainedWorld& trained_small() {
  static const TrainedWorld w = [] {
    TrainedWorld t;
    t.world = generate_world(1, 10, 4, 30);
    t.vocab = t.world.vocabulary();
    ModelConfig cfg;
    cfg.vocab_size = t.vocab.size();
    t.model = init_model(cfg, 1);
    t.log = train_memorize(t.model, t.world, 1.0, 4000, 1);
    t.edits = build_edit_set(t.world, t.world.facts.size(), 1);
    return t;
  }();
  return w;
}

const CovarianceEstimate& small_covariance(std::size_t layer) {
  static std::mutex mu;
  static std::map<std::size_t, CovarianceEstimate> cache;
  std::lock_guard lock(mu);
  auto it = cache.find(layer);
  if (it == cache.end()) {
    const auto& t = trained_small();
    it = cache.emplace(layer, estimate_covariance(t.model, t.world, layer, 1e-2)).first;
  }
  return it->second;
}

ToyModel random_tiny_model(std::uint64_t seed, std::size_t vocab) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 4;
  c.d_mlp = 64;
  c.context_len = 32;
  c.vocab_size = vocab;
  ToyModel m = init_model(c, seed);
  Rng rng(mix_seed(seed, 77));
  m.params().visit([&](auto& t) {
    const double sd = t.rows() == 1 ? 0.5 : 1.0 / std::sqrt(static_cast<double>(t.rows()));
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = sd * rng.normal();
  });
  for (auto& b : m.params().blocks) {
    b.ln1_g.array() += 1.0;
    b.ln2_g.array() += 1.0;
  }
  m.params().lnf_g.array() += 1.0;
  return m;
}

TokenSeq random_sequence(Rng& rng, std::size_t n, std::size_t vocab) {
  TokenSeq s{kBos};
  while (s.size() < n) s.push_back(static_cast<TokenId>(3 + rng.below(vocab - 3)));
  return s;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("lga_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace lga::testing
