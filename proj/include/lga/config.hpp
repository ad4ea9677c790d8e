// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "lga/attribution.hpp"
#include "lga/editors.hpp"
#include "lga/eval.hpp"
#include "lga/model.hpp"

namespace lga {

struct WorldSpec {
  std::size_t n_entities = 48;
  std::size_t n_relations = 4;
  std::size_t n_facts = 120;
  std::size_t n_edits = 100;
};

struct TrainSpec {
  double stop_accuracy = 1.0;
  std::size_t max_steps = 6000;
  TrainOptions options;
};

/// Everything one run needs. `seed` drives world generation, the edit set,
/// initialisation, training order, editor prefixes, the proxy split and CMA
/// noise (each stage derives its own stream from it).
struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;  // vocab_size is taken from the generated world
  WorldSpec world;
  TrainSpec train;
  EditorSpec editor;
  LgaOptions lga;
  CmaOptions cma;
  double proxy_fraction = 0.1;
  SelectionMetric metric = SelectionMetric::Rewrite;
  MetricWeights weights;
  std::size_t threads = 1;
  std::filesystem::path out_dir = "out";

  /// Throws ValidationError naming the offending field.
  void validate() const;
};

enum class Stage { Gen, Train, Attr, Edit };

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& bytes);

/// Hash of the configuration sections a stage's artifacts depend on. Threads
/// and the output directory never enter a hash.
std::uint64_t stage_hash(const RunConfig& cfg, Stage stage);
std::string hash_hex(std::uint64_t h);

/// Resolved configuration as pretty-printed JSON (keys sorted).
std::string config_to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys, ill-typed values and
/// values failing RunConfig::validate throw ValidationError.
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace lga
