// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lga/corpus.hpp"
#include "lga/editors.hpp"
#include "lga/model.hpp"
#include "lga/random.hpp"

namespace lga::testing {

/// Default 8-layer model trained on a 10-entity, 30-fact world. Built once per
/// process.
struct TrainedWorld {
  FactWorld world;
  Vocabulary vocab;
  ToyModel model;
  TrainingLog log;
  std::vector<EditQuery> edits;  // every fact edited once
};
const TrainedWorld& trained_small();

/// Covariance of `layer` for trained_small(), cached.
const CovarianceEstimate& small_covariance(std::size_t layer);

/// 2-layer, d_model 16 model with O(1) random weights (matrices at fan-in
/// scale, vectors N(0, 0.5), LayerNorm gains near one).
ToyModel random_tiny_model(std::uint64_t seed, std::size_t vocab = 20);

/// Random token sequence of length n starting with BOS, using word tokens only.
TokenSeq random_sequence(Rng& rng, std::size_t n, std::size_t vocab);

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace lga::testing
