// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "lga/corpus.hpp"
#include "lga/error.hpp"
#include "lga/model.hpp"

namespace lga {

enum class EditorKind { Rome, RRome, Emmet };

std::string to_string(EditorKind k);
/// Accepts "rome", "r-rome", "emmet".
EditorKind editor_kind_from_string(const std::string& s);

/// Adam on an additive displacement of the MLP output.
struct ValueOptSpec {
  std::size_t steps = 50;
  double step_size = 0.5;
  double weight_decay = 1e-3;
  double kl_coef = 0.0625;
  /// Optimisation stops early once the target NLL drops below this.
  double target_nll = 0.05;
  /// Upper bound on |displacement| as a multiple of the residual norm at the
  /// edit site; 0 disables the clamp.
  double clamp_norm_factor = 0.0;
};

struct EditorSpec {
  EditorKind kind = EditorKind::RRome;
  std::size_t layer = 0;
  ValueOptSpec value_opt;
  double covariance_reg = 1e-2;
  /// Random prefixes averaged into each key (ignored by plain ROME).
  std::size_t context_prefixes = 8;
  std::size_t prefix_len = 1;
  /// Batch size used when EMMET edits a list of queries.
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;

  void validate() const;
  /// Prefix count actually used for keys.
  std::size_t effective_prefixes() const { return kind == EditorKind::Rome ? 0 : context_prefixes; }
};

struct KeyVector {
  std::size_t layer = 0;
  Vec vector;  // d_mlp
  std::size_t n_contexts_averaged = 0;
};

/// Ridge-regularised second moment of key activations, kept factorised.
struct CovarianceEstimate {
  std::size_t layer = 0;
  Mat matrix;  // d_mlp x d_mlp, includes the ridge
  std::size_t n_samples = 0;
  double lambda = 0.0;
  Eigen::LLT<Mat> factor;

  template <typename Derived>
  Mat solve(const Eigen::MatrixBase<Derived>& rhs) const {
    return factor.solve(rhs);
  }
};

/// C = (1/N) sum k k^T + lambda I over the rows of `keys` (N x d_mlp). The
/// ridge is escalated x10 up to three times if factorisation fails.
CovarianceEstimate covariance_from_keys(const Mat& keys, std::size_t d_mlp, double lambda,
                                        std::size_t layer = 0);

/// Keys at every position of every training sentence of the world.
CovarianceEstimate estimate_covariance(const ToyModel& model, const FactWorld& world, std::size_t layer,
                                       double lambda);
/// All layers from a single pass over the corpus.
std::vector<CovarianceEstimate> estimate_covariances(const ToyModel& model, const FactWorld& world,
                                                     double lambda);

/// Average of the post-GELU activation at the last subject token over the
/// bare query and `n_prefixes` contexts with random token prefixes.
KeyVector compute_key(const ToyModel& model, const TokenSeq& query,
                      std::pair<std::size_t, std::size_t> subject_span, std::size_t layer,
                      std::size_t n_prefixes, std::uint64_t seed, std::size_t prefix_len = 1);

/// The random prefixes compute_key draws for (seed, n_prefixes).
std::vector<TokenSeq> key_prefixes(std::size_t vocab_size, std::size_t n_prefixes, std::uint64_t seed,
                                   std::size_t prefix_len = 1);

/// Target v* for the down-projection at the last subject token: the pre-bias
/// MLP output (k W_out) plus an optimised displacement that makes the model
/// predict `new_knowledge` after `query`.
Vec compute_value(const ToyModel& model, const TokenSeq& query,
                  std::pair<std::size_t, std::size_t> subject_span, const TokenSeq& new_knowledge,
                  std::size_t layer, const EditorSpec& spec);

/// Patches replacing the MLP output at the last subject token with v* + b_out.
std::vector<Patch> value_patch(const ToyModel& model, std::size_t layer, std::size_t row, const Vec& value);

/// Minimum-norm (in the C metric) update of W_out such that W_out'^T k = v:
///   W_out' = W_out + C^-1 k (v - W_out^T k)^T / (k^T C^-1 k).
/// Returns the update (d_mlp x d_model).
template <typename DW, typename DK, typename DV>
Mat rank_one_update(const Eigen::MatrixBase<DW>& w_out, const CovarianceEstimate& cov,
                    const Eigen::MatrixBase<DK>& key, const Eigen::MatrixBase<DV>& value) {
  const Vec c_inv_k = cov.solve(key);
  const double denom = key.dot(c_inv_k);
  if (!(denom > 1e-12)) throw DegenerateKeyError("rank_one_update: k^T C^-1 k is not positive");
  const Vec residual = value - w_out.transpose() * key;
  return c_inv_k * residual.transpose() / denom;
}

/// Batched equality-constrained update: minimises ||Delta||_C subject to
/// W_out'^T K = V, giving Delta = C^-1 K (K^T C^-1 K)^-1 (V - W_out^T K)^T.
template <typename DW, typename DK, typename DV>
Mat batched_update(const Eigen::MatrixBase<DW>& w_out, const CovarianceEstimate& cov,
                   const Eigen::MatrixBase<DK>& keys, const Eigen::MatrixBase<DV>& values) {
  const Mat c_inv_k = cov.solve(keys);
  const Mat gram = keys.transpose() * c_inv_k;
  Eigen::SelfAdjointEigenSolver<Mat> eig(gram, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 1e-12 * std::max(hi, 1.0)))
    throw DegenerateBatchError("batched_update: keys are linearly dependent under C");
  const Mat residual = values - w_out.transpose() * keys;  // d_model x B
  const Eigen::LLT<Mat> gram_llt(gram);
  return c_inv_k * gram_llt.solve(residual.transpose());
}

/// A copy of the model with the edit applied, plus the keys and values used.
struct EditedModel {
  ToyModel model;
  Mat keys;    // d_mlp x B
  Mat values;  // d_model x B
};

/// ROME / R-ROME single edit at spec.layer.
EditedModel rome_edit(const ToyModel& model, const EditQuery& edit, const EditorSpec& spec,
                      const CovarianceEstimate& cov);

/// EMMET batched edit at spec.layer.
EditedModel emmet_edit(const ToyModel& model, const std::vector<EditQuery>& edits, const EditorSpec& spec,
                       const CovarianceEstimate& cov);

/// Dispatches on spec.kind; ROME kinds require a single edit.
EditedModel apply_edit(const ToyModel& model, const std::vector<EditQuery>& edits, const EditorSpec& spec,
                       const CovarianceEstimate& cov);

}  // namespace lga
