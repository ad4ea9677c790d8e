// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lga/corpus.hpp"
#include "lga/model.hpp"

namespace lga {

enum class ScoreMethod { Lga, Cma, BruteForce };

std::string to_string(ScoreMethod m);

/// Per-layer scores, the outlier mask, and the selected layer G*.
struct LayerScoreTable {
  ScoreMethod method = ScoreMethod::Lga;
  std::vector<double> scores;
  std::vector<bool> excluded;
  std::size_t selected_layer = 0;
  std::string note;

  /// "method,<name>" / "layer,score,excluded" rows / "selected,<L>".
  std::string to_text() const;
};

/// Argmax over non-excluded entries; ties go to the lowest index.
std::size_t select_layer(const std::vector<double>& scores, const std::vector<bool>& excluded);

/// Inner product of two flattened layer gradients.
template <typename A, typename B>
double phi(const Eigen::MatrixBase<A>& g_z, const Eigen::MatrixBase<B>& g_v) {
  return g_z.dot(g_v);
}

/// Layer-restricted gradient inner product phi_L(z, v).
double phi_layer(const ToyModel& model, const TokenSeq& z, const TokenSeq& v, std::size_t layer);

struct LgaOptions {
  double tukey_k = 1.5;
  bool exclude_outliers = true;
};

/// Sum over the proxy of phi_L(Q u K, Q u K') for every layer, two reverse
/// passes per query.
LayerScoreTable lga_scores(const ToyModel& model, const std::vector<EditQuery>& proxy,
                           const LgaOptions& opts = {});

/// Finishes a table from raw per-layer sums (outlier mask + selection).
LayerScoreTable lga_table(std::vector<double> scores, const LgaOptions& opts = {});

struct CmaOptions {
  std::size_t noise_seeds = 10;
  /// Noise standard deviation as a multiple of the subject-embedding std.
  double noise_scale = 3.0;
  enum class Site { MlpOut, Residual } site = Site::MlpOut;
  std::uint64_t seed = 0;
};

/// Average indirect effect of restoring each layer's clean activation at the
/// subject positions of a subject-corrupted run.
LayerScoreTable cma_scores(const ToyModel& model, const std::vector<EditQuery>& proxy,
                           const CmaOptions& opts = {});

/// Probability of the first old-knowledge token under a run whose subject
/// embeddings carry `noise` (rows = subject positions), restoring the clean
/// activations of the given layers. Exposed for the identity checks.
double cma_probability(const ToyModel& model, const EditQuery& query, const Mat& noise,
                       const std::vector<std::size_t>& restore_layers, CmaOptions::Site site);

/// Noise std used by cma_scores for this proxy: scale x std of the subject
/// token embedding entries.
double cma_noise_std(const ToyModel& model, const std::vector<EditQuery>& proxy, double scale);

}  // namespace lga
