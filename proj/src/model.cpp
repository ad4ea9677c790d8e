// SPDX-License-Identifier: Apache-2.0
#include "lga/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "lga/error.hpp"
#include "lga/random.hpp"

namespace lga {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;

/// Row-wise LayerNorm. Writes the normalised input and inverse std for the
/// reverse pass.
Mat layer_norm(const Mat& x, const RowVec& g, const RowVec& b, Mat& xhat, Vec& rstd) {
  const auto n = static_cast<double>(x.cols());
  const Vec mean = x.rowwise().sum() / n;
  xhat = x.colwise() - mean;
  rstd = ((xhat.array().square().rowwise().sum() / n) + kLnEps).rsqrt().matrix();
  xhat = rstd.asDiagonal() * xhat;
  return (xhat.array().rowwise() * g.array()).rowwise() + b.array();
}

Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& rstd, const RowVec& g,
                        RowVec* dg, RowVec* db) {
  if (dg) *dg += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (db) *db += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * g.array();
  const auto n = static_cast<double>(dy.cols());
  const Vec mean_d = dxhat.rowwise().sum() / n;
  const Vec mean_dx = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / n;
  Mat dx = dxhat.colwise() - mean_d;
  dx.array() -= xhat.array().colwise() * mean_dx.array();
  return rstd.asDiagonal() * dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return cdf + x * pdf;
}

void apply_patches(const std::vector<Patch>& patches, Patch::Site site, std::size_t layer, Mat& x,
                   std::vector<bool>* replaced = nullptr) {
  for (const auto& p : patches) {
    if (p.site != site || (site != Patch::Site::Embedding && p.layer != layer)) continue;
    if (p.pos >= static_cast<std::size_t>(x.rows())) throw InvalidArgument("patch position out of range");
    if (p.additive) {
      x.row(static_cast<Eigen::Index>(p.pos)) += p.value;
    } else {
      x.row(static_cast<Eigen::Index>(p.pos)) = p.value;
      if (replaced) (*replaced)[p.pos] = true;
    }
  }
}

void check_sequence(const ModelConfig& cfg, const TokenSeq& seq) {
  if (seq.empty()) throw InvalidArgument("empty sequence");
  if (seq.size() > cfg.context_len) throw InvalidArgument("sequence longer than context");
  for (auto t : seq)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) throw InvalidArgument("token id out of range");
}

}  // namespace

// ---------------------------------------------------------------- config / params

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || context_len == 0)
    throw InvalidArgument("model config: dimensions must be positive");
  if (d_model % n_heads != 0) throw InvalidArgument("model config: d_model must be divisible by n_heads");
  if (vocab_size < 4) throw InvalidArgument("model config: vocabulary too small");
}

Parameters Parameters::zeros(const ModelConfig& c) {
  Parameters p;
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto m = static_cast<Eigen::Index>(c.d_mlp);
  const auto v = static_cast<Eigen::Index>(c.vocab_size);
  p.tok_emb = Mat::Zero(v, d);
  p.pos_emb = Mat::Zero(static_cast<Eigen::Index>(c.context_len), d);
  p.blocks.resize(c.n_layers);
  for (auto& b : p.blocks) {
    b.ln1_g = RowVec::Zero(d), b.ln1_b = RowVec::Zero(d);
    b.w_qkv = Mat::Zero(d, 3 * d), b.b_qkv = RowVec::Zero(3 * d);
    b.w_proj = Mat::Zero(d, d), b.b_proj = RowVec::Zero(d);
    b.ln2_g = RowVec::Zero(d), b.ln2_b = RowVec::Zero(d);
    b.w_in = Mat::Zero(d, m), b.b_in = RowVec::Zero(m);
    b.w_out = Mat::Zero(m, d), b.b_out = RowVec::Zero(d);
  }
  p.lnf_g = RowVec::Zero(d), p.lnf_b = RowVec::Zero(d);
  p.head = Mat::Zero(d, v);
  return p;
}

std::size_t Parameters::size() const {
  std::size_t n = 0;
  visit([&](const auto& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

namespace {
template <typename Derived>
void append_row_major(const Eigen::MatrixBase<Derived>& t, Vec& out, Eigen::Index& at) {
  for (Eigen::Index r = 0; r < t.rows(); ++r)
    for (Eigen::Index c = 0; c < t.cols(); ++c) out[at++] = t(r, c);
}
}  // namespace

Vec Parameters::flatten() const {
  Vec out(static_cast<Eigen::Index>(size()));
  Eigen::Index at = 0;
  visit([&](const auto& t) { append_row_major(t, out, at); });
  return out;
}

std::vector<std::span<double>> Parameters::spans() {
  std::vector<std::span<double>> out;
  visit([&](auto& t) { out.emplace_back(t.data(), static_cast<std::size_t>(t.size())); });
  return out;
}

std::vector<std::span<const double>> Parameters::spans() const {
  std::vector<std::span<const double>> out;
  visit([&](const auto& t) { out.emplace_back(t.data(), static_cast<std::size_t>(t.size())); });
  return out;
}

bool Parameters::all_finite() const {
  bool ok = true;
  visit([&](const auto& t) { ok = ok && t.allFinite(); });
  return ok;
}

Vec mlp_slice(const Parameters& p, std::size_t layer) {
  const auto& b = p.blocks.at(layer);
  Vec out(b.w_in.size() + b.w_out.size() + b.b_in.size() + b.b_out.size());
  Eigen::Index at = 0;
  append_row_major(b.w_in, out, at);
  append_row_major(b.w_out, out, at);
  append_row_major(b.b_in, out, at);
  append_row_major(b.b_out, out, at);
  return out;
}

// ---------------------------------------------------------------- model

Transformer::Transformer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  params_ = Parameters::zeros(cfg_);
  Rng rng(mix_seed(seed, 100));
  const double std = 0.02;
  const double resid_std = std / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  const auto gauss = [&](Mat& m, double s) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = s * rng.normal();
  };
  gauss(params_.tok_emb, std);
  gauss(params_.pos_emb, std);
  for (auto& b : params_.blocks) {
    b.ln1_g.setOnes();
    b.ln2_g.setOnes();
    gauss(b.w_qkv, std);
    gauss(b.w_proj, resid_std);
    gauss(b.w_in, std);
    gauss(b.w_out, resid_std);
  }
  params_.lnf_g.setOnes();
  gauss(params_.head, std);
}

ToyModel init_model(const ModelConfig& cfg, std::uint64_t seed) { return Transformer(cfg, seed); }

Mat Transformer::forward(const TokenSeq& seq, const std::vector<Patch>& patches, ForwardCache* cache) const {
  return forward_batch({seq}, patches, cache);
}

Mat Transformer::forward_batch(const std::vector<TokenSeq>& batch, const std::vector<Patch>& patches,
                               ForwardCache* cache) const {
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  const bool keep = cache != nullptr;
  c.tokens.clear();
  c.seg_start.assign(1, 0);
  c.positions.clear();
  for (const auto& s : batch) {
    check_sequence(cfg_, s);
    c.tokens.insert(c.tokens.end(), s.begin(), s.end());
    for (std::size_t t = 0; t < s.size(); ++t) c.positions.push_back(t);
    c.seg_start.push_back(c.tokens.size());
  }
  c.patches = patches;
  const auto rows = static_cast<Eigen::Index>(c.tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg_.d_model);
  const auto hd = static_cast<Eigen::Index>(cfg_.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Mat x(rows, d);
  for (Eigen::Index r = 0; r < rows; ++r)
    x.row(r) = params_.tok_emb.row(c.tokens[static_cast<std::size_t>(r)]) +
               params_.pos_emb.row(static_cast<Eigen::Index>(c.positions[static_cast<std::size_t>(r)]));
  apply_patches(patches, Patch::Site::Embedding, 0, x);

  c.layers.resize(keep ? cfg_.n_layers : 0);
  ForwardCache::Layer scratch;
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const auto& bp = params_.blocks[l];
    ForwardCache::Layer& L = keep ? c.layers[l] : scratch;
    apply_patches(patches, Patch::Site::ResidualIn, l, x);
    L.x_in = x;

    L.h1 = layer_norm(x, bp.ln1_g, bp.ln1_b, L.xhat1, L.rstd1);
    L.qkv = (L.h1 * bp.w_qkv).rowwise() + bp.b_qkv;
    L.attn.setZero(rows, d);
    L.probs.assign(keep ? cfg_.n_heads * batch.size() : 0, Mat());
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto r0 = static_cast<Eigen::Index>(c.seg_start[s]);
      const auto n = static_cast<Eigen::Index>(c.seg_start[s + 1] - c.seg_start[s]);
      for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        const auto q = L.qkv.block(r0, off, n, hd);
        const auto k = L.qkv.block(r0, d + off, n, hd);
        const auto v = L.qkv.block(r0, 2 * d + off, n, hd);
        Mat p = (q * k.transpose()) * scale;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double mx = p.row(i).head(i + 1).maxCoeff();
          double z = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) z += (p(i, j) = std::exp(p(i, j) - mx));
          p.row(i).head(i + 1) /= z;
          p.row(i).tail(n - i - 1).setZero();
        }
        L.attn.block(r0, off, n, hd) = p * v;
        if (keep) L.probs[s * cfg_.n_heads + h] = std::move(p);
      }
    }
    x += (L.attn * bp.w_proj).rowwise() + bp.b_proj;
    L.x_mid = x;

    L.h2 = layer_norm(x, bp.ln2_g, bp.ln2_b, L.xhat2, L.rstd2);
    L.u = (L.h2 * bp.w_in).rowwise() + bp.b_in;
    L.k = L.u.unaryExpr(&gelu);
    L.mlp_out = (L.k * bp.w_out).rowwise() + bp.b_out;
    L.mlp_replaced.assign(static_cast<std::size_t>(rows), false);
    apply_patches(patches, Patch::Site::MlpOut, l, L.mlp_out, &L.mlp_replaced);
    x += L.mlp_out;
  }
  apply_patches(patches, Patch::Site::ResidualIn, cfg_.n_layers, x);
  c.x_final = x;
  c.h_f = layer_norm(x, params_.lnf_g, params_.lnf_b, c.xhat_f, c.rstd_f);
  return c.h_f * params_.head;
}

std::vector<RowVec> Transformer::backward(const ForwardCache& c, const Mat& dlogits, Parameters* grad,
                                          const BackwardOptions& opts) const {
  if (opts.stop_layer >= cfg_.n_layers) throw InvalidArgument("backward: stop_layer out of range");
  const bool all = !opts.mlp_only && grad;
  const auto rows = static_cast<Eigen::Index>(c.tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg_.d_model);
  const auto hd = static_cast<Eigen::Index>(cfg_.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<RowVec> patch_grads(c.patches.size());

  const auto collect = [&](Patch::Site site, std::size_t layer, Mat& dx) {
    for (std::size_t i = 0; i < c.patches.size(); ++i) {
      const auto& p = c.patches[i];
      if (p.site != site || (site != Patch::Site::Embedding && p.layer != layer)) continue;
      const auto r = static_cast<Eigen::Index>(p.pos);
      if (p.additive) {
        patch_grads[i] = dx.row(r);
      } else {
        dx.row(r).setZero();
      }
    }
  };

  if (all) grad->head.noalias() += c.h_f.transpose() * dlogits;
  const Mat dhf = dlogits * params_.head.transpose();
  Mat dx = layer_norm_backward(dhf, c.xhat_f, c.rstd_f, params_.lnf_g, all ? &grad->lnf_g : nullptr,
                               all ? &grad->lnf_b : nullptr);
  collect(Patch::Site::ResidualIn, cfg_.n_layers, dx);

  for (std::size_t l = cfg_.n_layers; l-- > opts.stop_layer;) {
    const auto& bp = params_.blocks[l];
    const auto& L = c.layers[l];
    BlockParams* gb = grad ? &grad->blocks[l] : nullptr;

    // MLP
    Mat dmlp = dx;
    collect(Patch::Site::MlpOut, l, dmlp);
    for (Eigen::Index r = 0; r < rows; ++r)
      if (L.mlp_replaced[static_cast<std::size_t>(r)]) dmlp.row(r).setZero();
    if (gb) {
      gb->w_out.noalias() += L.k.transpose() * dmlp;
      gb->b_out += dmlp.colwise().sum();
    }
    Mat du = (dmlp * bp.w_out.transpose()).cwiseProduct(L.u.unaryExpr(&gelu_grad));
    if (gb) {
      gb->w_in.noalias() += L.h2.transpose() * du;
      gb->b_in += du.colwise().sum();
    }
    const Mat dh2 = du * bp.w_in.transpose();
    dx += layer_norm_backward(dh2, L.xhat2, L.rstd2, bp.ln2_g, all ? &gb->ln2_g : nullptr,
                              all ? &gb->ln2_b : nullptr);

    // Attention
    if (all) {
      gb->w_proj.noalias() += L.attn.transpose() * dx;
      gb->b_proj += dx.colwise().sum();
    }
    const Mat dattn = dx * bp.w_proj.transpose();
    Mat dqkv = Mat::Zero(rows, 3 * d);
    const std::size_t n_seg = c.seg_start.size() - 1;
    for (std::size_t s = 0; s < n_seg; ++s) {
      const auto r0 = static_cast<Eigen::Index>(c.seg_start[s]);
      const auto n = static_cast<Eigen::Index>(c.seg_start[s + 1] - c.seg_start[s]);
      for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        const Mat& p = L.probs[s * cfg_.n_heads + h];
        const auto q = L.qkv.block(r0, off, n, hd);
        const auto k = L.qkv.block(r0, d + off, n, hd);
        const auto v = L.qkv.block(r0, 2 * d + off, n, hd);
        const auto dout = dattn.block(r0, off, n, hd);
        const Mat dp = dout * v.transpose();
        dqkv.block(r0, 2 * d + off, n, hd).noalias() = p.transpose() * dout;
        const Vec rowdot = (dp.array() * p.array()).rowwise().sum();
        const Mat ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale;
        dqkv.block(r0, off, n, hd).noalias() = ds * k;
        dqkv.block(r0, d + off, n, hd).noalias() = ds.transpose() * q;
      }
    }
    if (all) {
      gb->w_qkv.noalias() += L.h1.transpose() * dqkv;
      gb->b_qkv += dqkv.colwise().sum();
    }
    const Mat dh1 = dqkv * bp.w_qkv.transpose();
    dx += layer_norm_backward(dh1, L.xhat1, L.rstd1, bp.ln1_g, all ? &gb->ln1_g : nullptr,
                              all ? &gb->ln1_b : nullptr);
    collect(Patch::Site::ResidualIn, l, dx);
  }
  if (opts.stop_layer > 0) return patch_grads;

  collect(Patch::Site::Embedding, 0, dx);
  if (all) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      grad->tok_emb.row(c.tokens[static_cast<std::size_t>(r)]) += dx.row(r);
      grad->pos_emb.row(static_cast<Eigen::Index>(c.positions[static_cast<std::size_t>(r)])) += dx.row(r);
    }
  }
  return patch_grads;
}

double next_token_loss(const Mat& logits, const ForwardCache& c, Mat* dlogits) {
  std::size_t count = 0;
  for (std::size_t s = 0; s + 1 < c.seg_start.size(); ++s) count += c.seg_start[s + 1] - c.seg_start[s] - 1;
  if (count == 0) throw InvalidArgument("loss needs sequences of length >= 2");
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t s = 0; s + 1 < c.seg_start.size(); ++s) {
    for (std::size_t r = c.seg_start[s]; r + 1 < c.seg_start[s + 1]; ++r) {
      const auto row = logits.row(static_cast<Eigen::Index>(r));
      const double mx = row.maxCoeff();
      const RowVec e = (row.array() - mx).exp();
      const double z = e.sum();
      const auto target = static_cast<Eigen::Index>(c.tokens[r + 1]);
      total += -(row(target) - mx - std::log(z));
      if (dlogits) {
        dlogits->row(static_cast<Eigen::Index>(r)) = e * (inv / z);
        (*dlogits)(static_cast<Eigen::Index>(r), target) -= inv;
      }
    }
  }
  return total * inv;
}

Mat Transformer::logits(const TokenSeq& seq, const std::vector<Patch>& patches) const {
  return forward(seq, patches, nullptr);
}

Mat Transformer::logits(const TokenSeq& seq, ActivationTrace& trace, const std::vector<Patch>& patches) const {
  ForwardCache c;
  Mat out = forward(seq, patches, &c);
  trace = {};
  for (const auto& L : c.layers) {
    trace.residual.push_back(L.x_in);
    trace.residual_mid.push_back(L.x_mid);
    trace.mlp_in.push_back(L.h2);
    trace.key.push_back(L.k);
    trace.mlp_out.push_back(L.mlp_out);
  }
  return out;
}

ActivationTrace Transformer::capture_activations(const TokenSeq& seq) const {
  ActivationTrace t;
  logits(seq, t);
  return t;
}

double Transformer::loss_full(const TokenSeq& seq) const {
  if (seq.size() < 2) throw InvalidArgument("loss_full: sequence needs at least 2 tokens");
  ForwardCache c;
  const Mat lg = forward(seq, {}, &c);
  return next_token_loss(lg, c, nullptr);
}

double Transformer::full_gradient(const TokenSeq& seq, Parameters& grad) const {
  if (seq.size() < 2) throw InvalidArgument("full_gradient: sequence needs at least 2 tokens");
  ForwardCache c;
  const Mat lg = forward(seq, {}, &c);
  Mat dl;
  const double loss = next_token_loss(lg, c, &dl);
  grad = Parameters::zeros(cfg_);
  backward(c, dl, &grad);
  return loss;
}

LayerGradient Transformer::layer_gradient(const TokenSeq& seq, std::size_t layer) const {
  if (layer >= cfg_.n_layers) throw InvalidArgument("layer_gradient: layer out of range");
  if (seq.size() < 2) throw InvalidArgument("layer_gradient: sequence needs at least 2 tokens");
  ForwardCache c;
  const Mat lg = forward(seq, {}, &c);
  Mat dl;
  next_token_loss(lg, c, &dl);
  Parameters g = Parameters::zeros(cfg_);
  backward(c, dl, &g, {.stop_layer = layer, .mlp_only = true});
  return {layer, mlp_slice(g, layer)};
}

std::vector<LayerGradient> Transformer::all_layer_gradients(const TokenSeq& seq) const {
  if (seq.size() < 2) throw InvalidArgument("all_layer_gradients: sequence needs at least 2 tokens");
  ForwardCache c;
  const Mat lg = forward(seq, {}, &c);
  Mat dl;
  next_token_loss(lg, c, &dl);
  Parameters g = Parameters::zeros(cfg_);
  backward(c, dl, &g, {.stop_layer = 0, .mlp_only = true});
  std::vector<LayerGradient> out;
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) out.push_back({l, mlp_slice(g, l)});
  return out;
}

namespace {
Eigen::Index argmax_lowest(const Eigen::Ref<const RowVec>& row) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j)
    if (row(j) > row(best)) best = j;
  return best;
}
}  // namespace

TokenSeq Transformer::greedy_decode(const TokenSeq& prompt, std::size_t max_new,
                                    const std::vector<Patch>& patches) const {
  TokenSeq seq = prompt;
  TokenSeq out;
  while (out.size() < max_new && seq.size() < cfg_.context_len) {
    const Mat lg = logits(seq, patches);
    const auto next = static_cast<TokenId>(argmax_lowest(lg.row(lg.rows() - 1)));
    out.push_back(next);
    seq.push_back(next);
    if (next == kEos) break;
  }
  return out;
}

bool Transformer::predicts(const TokenSeq& prompt, const TokenSeq& answer,
                           const std::vector<Patch>& patches) const {
  if (answer.empty()) return true;
  TokenSeq seq = prompt;
  seq.insert(seq.end(), answer.begin(), answer.end() - 1);
  const Mat lg = logits(seq, patches);
  for (std::size_t i = 0; i < answer.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(prompt.size() - 1 + i);
    if (argmax_lowest(lg.row(r)) != answer[i]) return false;
  }
  return true;
}

double Transformer::answer_nll(const TokenSeq& prompt, const TokenSeq& answer,
                               const std::vector<Patch>& patches) const {
  if (answer.empty()) return 0.0;
  TokenSeq seq = prompt;
  seq.insert(seq.end(), answer.begin(), answer.end() - 1);
  const Mat lg = logits(seq, patches);
  double nll = 0.0;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    const auto row = lg.row(static_cast<Eigen::Index>(prompt.size() - 1 + i));
    const double mx = row.maxCoeff();
    nll -= row(answer[i]) - mx - std::log((row.array() - mx).exp().sum());
  }
  return nll;
}

}  // namespace lga
