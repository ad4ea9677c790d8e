// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lga/fwd.hpp"

namespace lga {

struct FactWorld;

/// Variance epsilon of every LayerNorm.
inline constexpr double kLnEps = 1e-5;

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 256;
  std::size_t context_len = 32;
  std::size_t vocab_size = 0;

  /// Throws InvalidArgument.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  /// W_in + W_out + b_in + b_out of one layer.
  std::size_t mlp_param_count() const { return 2 * d_model * d_mlp + d_mlp + d_model; }

  bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
  RowVec ln1_g, ln1_b;
  Mat w_qkv;  // d_model x 3 d_model
  RowVec b_qkv;
  Mat w_proj;  // d_model x d_model
  RowVec b_proj;
  RowVec ln2_g, ln2_b;
  Mat w_in;  // d_model x d_mlp
  RowVec b_in;
  Mat w_out;  // d_mlp x d_model
  RowVec b_out;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(self.ln1_g), f(self.ln1_b), f(self.w_qkv), f(self.b_qkv), f(self.w_proj), f(self.b_proj);
    f(self.ln2_g), f(self.ln2_b), f(self.w_in), f(self.b_in), f(self.w_out), f(self.b_out);
  }
};

/// All trainable tensors. Activations are row vectors: y = x W + b.
///
/// Canonical order (checkpoints, flattening): tok_emb, pos_emb, then per block
/// ln1_g ln1_b w_qkv b_qkv w_proj b_proj ln2_g ln2_b w_in b_in w_out b_out,
/// then lnf_g lnf_b head. Every matrix is flattened row-major.
struct Parameters {
  Mat tok_emb;  // vocab x d_model
  Mat pos_emb;  // context x d_model
  std::vector<BlockParams> blocks;
  RowVec lnf_g, lnf_b;
  Mat head;  // d_model x vocab

  static Parameters zeros(const ModelConfig& cfg);

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t size() const;
  /// Raw storage of every tensor in canonical order (storage is column-major).
  std::vector<std::span<double>> spans();
  std::vector<std::span<const double>> spans() const;
  /// Row-major flattening in canonical order.
  Vec flatten() const;
  bool all_finite() const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(self.tok_emb), f(self.pos_emb);
    for (auto& b : self.blocks) BlockParams::visit(b, f);
    f(self.lnf_g), f(self.lnf_b), f(self.head);
  }
};

/// Gradient of the loss restricted to one layer's MLP parameters, flattened
/// as W_in row-major, W_out row-major, b_in, b_out.
struct LayerGradient {
  std::size_t layer = 0;
  Vec flat;
};

/// Slice of a full-parameter tensor set in LayerGradient order.
Vec mlp_slice(const Parameters& p, std::size_t layer);

/// Forward-pass intervention applied to one row.
struct Patch {
  enum class Site {
    Embedding,   // token + positional embedding output
    ResidualIn,  // residual stream entering block `layer`
    MlpOut,      // MLP output (after b_out) of block `layer`
  };
  Site site = Site::MlpOut;
  std::size_t layer = 0;
  std::size_t pos = 0;
  RowVec value;
  bool additive = true;
};

/// Per-layer, per-position activations recorded during a forward pass.
struct ActivationTrace {
  std::vector<Mat> residual;      // entering block: seq x d_model
  std::vector<Mat> residual_mid;  // after attention: seq x d_model
  std::vector<Mat> mlp_in;        // normalised MLP input: seq x d_model
  std::vector<Mat> key;           // post-GELU activation feeding W_out: seq x d_mlp
  std::vector<Mat> mlp_out;       // seq x d_model
};

/// Intermediate values kept by a forward pass for the reverse pass.
struct ForwardCache;

struct BackwardOptions {
  /// Lowest block whose parameters receive gradients; lower blocks are skipped.
  std::size_t stop_layer = 0;
  /// Only accumulate MLP weight gradients (activation gradients still flow).
  bool mlp_only = false;
};

struct TrainingLog {
  struct Entry {
    std::size_t step = 0;
    double loss = 0.0;
    double accuracy = 0.0;
  };
  enum class Status { Converged, Underfit };

  std::vector<Entry> entries;
  std::size_t steps = 0;
  double final_accuracy = 0.0;
  double final_answer_nll = 0.0;
  Status status = Status::Underfit;

  bool operator==(const TrainingLog& o) const;
  std::string to_text() const;
};

struct TrainOptions {
  double learning_rate = 3e-3;
  std::size_t batch_size = 32;
  /// Accuracy is measured every `eval_every` steps.
  std::size_t eval_every = 50;
  double grad_clip = 1.0;
  /// Convergence also needs every answer + EOS at or below this mean
  /// per-token NLL. Infinity disables the check.
  double stop_answer_nll = 0.05;
};

/// Decoder-only pre-LayerNorm transformer with GELU MLPs.
class Transformer {
 public:
  Transformer() = default;
  Transformer(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  Parameters& params() { return params_; }
  const Parameters& params() const { return params_; }

  /// Logits for every position of `seq` (seq x vocab).
  Mat logits(const TokenSeq& seq, const std::vector<Patch>& patches = {}) const;
  /// Forward pass that also records the activation trace.
  Mat logits(const TokenSeq& seq, ActivationTrace& trace, const std::vector<Patch>& patches = {}) const;

  /// Mean next-token NLL over every position of `seq` (which includes BOS).
  double loss_full(const TokenSeq& seq) const;

  /// Loss and its gradient with respect to every parameter.
  double full_gradient(const TokenSeq& seq, Parameters& grad) const;

  LayerGradient layer_gradient(const TokenSeq& seq, std::size_t layer) const;
  /// One reverse pass yielding every layer's MLP gradient.
  std::vector<LayerGradient> all_layer_gradients(const TokenSeq& seq) const;

  /// Argmax decoding; ties go to the lowest token id; stops after EOS.
  TokenSeq greedy_decode(const TokenSeq& prompt, std::size_t max_new,
                         const std::vector<Patch>& patches = {}) const;
  /// True iff greedy decoding of `prompt` begins with `answer` (single pass).
  bool predicts(const TokenSeq& prompt, const TokenSeq& answer,
                const std::vector<Patch>& patches = {}) const;
  /// Sum of -log p(answer | prompt) over answer tokens.
  double answer_nll(const TokenSeq& prompt, const TokenSeq& answer,
                    const std::vector<Patch>& patches = {}) const;

  ActivationTrace capture_activations(const TokenSeq& seq) const;

  // Lower-level entry points used by editors and attribution.
  Mat forward(const TokenSeq& seq, const std::vector<Patch>& patches, ForwardCache* cache) const;
  /// Sequences stacked row-wise; attention never crosses a sequence boundary.
  /// Patch positions index the stacked rows.
  Mat forward_batch(const std::vector<TokenSeq>& batch, const std::vector<Patch>& patches,
                    ForwardCache* cache) const;
  /// Reverse pass from d(loss)/d(logits). Returns gradients of additive patches.
  std::vector<RowVec> backward(const ForwardCache& cache, const Mat& dlogits, Parameters* grad,
                               const BackwardOptions& opts = {}) const;

  void save(const std::filesystem::path& path, std::uint64_t tag = 0) const;
  /// Throws FormatError / CorruptionError. If `expected` is given the stored
  /// config must match it.
  static Transformer load(const std::filesystem::path& path, const ModelConfig* expected = nullptr,
                          std::uint64_t* tag = nullptr);

 private:
  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  Parameters params_;
};

using ToyModel = Transformer;

struct ForwardCache {
  struct Layer {
    Mat x_in, xhat1, h1, qkv, attn, x_mid, xhat2, h2, u, k, mlp_out;
    Vec rstd1, rstd2;
    std::vector<Mat> probs;  // per head, seq x seq
    std::vector<bool> mlp_replaced;
  };
  TokenSeq tokens;
  std::vector<std::size_t> seg_start;  // row offsets, size = n_sequences + 1
  std::vector<std::size_t> positions;  // position of each row within its sequence
  std::vector<Layer> layers;
  Mat x_final, xhat_f, h_f;
  Vec rstd_f;
  std::vector<Patch> patches;
};

/// Mean next-token NLL over every sequence of the cache's batch; optionally
/// writes d(loss)/d(logits).
double next_token_loss(const Mat& logits, const ForwardCache& cache, Mat* dlogits);

ToyModel init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Adam over (query + answer + EOS) sentences of the world until training
/// answers decode correctly at rate >= stop_accuracy and the worst answer
/// NLL is within opts.stop_answer_nll.
TrainingLog train_memorize(ToyModel& model, const FactWorld& world, double stop_accuracy,
                           std::size_t max_steps, std::uint64_t seed, const TrainOptions& opts = {});

/// Fraction of the world's training pairs whose answer greedy-decodes.
double fact_accuracy(const ToyModel& model, const FactWorld& world);

}  // namespace lga
