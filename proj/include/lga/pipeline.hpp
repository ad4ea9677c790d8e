// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lga/attribution.hpp"
#include "lga/config.hpp"
#include "lga/corpus.hpp"
#include "lga/eval.hpp"
#include "lga/model.hpp"

namespace lga {

/// File names inside the output directory.
namespace artifact {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kVocab = "vocab.txt";
inline constexpr const char* kWorld = "world.json";
inline constexpr const char* kEdits = "edits.jsonl";
inline constexpr const char* kModel = "model.ckpt";
inline constexpr const char* kTrainLog = "train_log.csv";
inline constexpr const char* kEditMetrics = "edit_metrics.csv";
inline constexpr const char* kEditedDir = "edited";
inline constexpr const char* kOutcomes = "outcomes.csv";
inline constexpr const char* kSweepReport = "sweep_report.txt";
inline constexpr const char* kHeatmap = "heatmap.txt";
inline constexpr const char* kProxyReport = "proxy_report.txt";
inline constexpr const char* kComparison = "comparison.txt";
/// Wall-clock record; the only artifact that differs between reruns.
inline constexpr const char* kRuntime = "runtime.txt";
std::string scores(ScoreMethod m);  // "scores_lga.txt" / "scores_cma.txt"
}  // namespace artifact

/// Writes `bytes` to a temporary sibling and renames it over `path`.
void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

/// Upstream artifacts, checked against the hash the current config implies.
/// Absent files throw MissingInput, foreign ones ConfigMismatch.
FactWorld load_world_checked(const RunConfig& cfg);
std::vector<EditQuery> load_edits_checked(const RunConfig& cfg, const Vocabulary& vocab);
ToyModel load_model_checked(const RunConfig& cfg);

/// Vocabulary, world and edit set.
void cmd_gen(const RunConfig& cfg);
TrainingLog cmd_train(const RunConfig& cfg);
/// Scores the proxy split with the given method.
LayerScoreTable cmd_attr(const RunConfig& cfg, ScoreMethod method);
/// `layer` is a layer index, "lga" or "cma"; empty `ids` edits the first test
/// sample. Returns the outcome rows written to edit_metrics.csv.
std::vector<OutcomeRow> cmd_edit(const RunConfig& cfg, const std::string& layer,
                                 const std::vector<std::string>& ids);
/// Brute-force sweep over every edit, plus the proxy-generalization report.
SweepResult cmd_sweep(const RunConfig& cfg);
/// LGA vs CMA selection on the proxy split, each editor kind on the test split,
/// plus the runtime benchmark on the proxy split.
std::vector<ComparisonRow> cmd_compare(const RunConfig& cfg);

}  // namespace lga
