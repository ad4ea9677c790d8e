// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lga/attribution.hpp"
#include "lga/corpus.hpp"
#include "lga/editors.hpp"
#include "lga/model.hpp"
#include "lga/stats.hpp"

namespace lga {

/// Weights of the Overall aggregate; all ones is the plain mean.
struct MetricWeights {
  double rewrite = 1.0;
  double rephrase = 1.0;
  double locality = 1.0;
  double portability = 1.0;
  double fluency = 1.0;
};

/// Editing metrics of one edit (or a mean over edits). Fluency is lower-better.
struct MetricVector {
  double rewrite = 0.0;
  std::optional<double> rephrase;
  std::optional<double> locality;
  std::optional<double> portability;
  double fluency = 0.0;
  double overall = 0.0;

  /// Recomputes `overall` from the other fields.
  void finalize(const MetricWeights& w = {});
  bool operator==(const MetricVector&) const = default;
};

/// Weighted mean over present terms of {rewrite, rephrase, locality,
/// portability, 1 - fluency}.
double overall_of(const MetricVector& m, const MetricWeights& w = {});

/// Outcome recorded when an editor fails: every goodness term zero, fluency one.
MetricVector failed_metrics(const EditQuery& edit, const MetricWeights& w = {});

/// Pre-edit answers the locality metric compares against.
struct PreEditReference {
  std::vector<TokenSeq> locality_answers;
};

PreEditReference pre_edit_reference(const ToyModel& pre, const EditQuery& edit);

inline constexpr std::size_t kFluencyTokens = 16;

/// Mean NLL under `pre` of `post`'s greedy continuation of the query (at most
/// 16 tokens, stopping after EOS), over ln|V|, clamped to [0, 1].
double fluency(const ToyModel& pre, const ToyModel& post, const TokenSeq& query);

MetricVector evaluate_edit(const ToyModel& pre, const ToyModel& post, const EditQuery& edit,
                           const MetricWeights& w = {});
MetricVector evaluate_edit(const ToyModel& pre, const ToyModel& post, const EditQuery& edit,
                           const PreEditReference& ref, const MetricWeights& w = {});

/// Mean of each metric over the vectors where it is present; overall is the
/// mean of the per-edit overall values.
MetricVector aggregate(const std::vector<MetricVector>& ms);

enum class SelectionMetric { Rewrite, Overall };

std::string to_string(SelectionMetric m);
/// Accepts "rewrite", "overall".
SelectionMetric selection_metric_from_string(const std::string& s);

double selection_value(const MetricVector& m, SelectionMetric metric);

/// One (layer, sample) cell of a sweep.
struct OutcomeRow {
  std::size_t layer = 0;
  std::string sample_id;
  MetricVector metrics;
  std::string diagnostic;  // non-empty when the editor failed

  bool operator==(const OutcomeRow&) const = default;
};

/// CSV with header layer,sample_id,rewrite,rephrase,locality,portability,
/// fluency,overall. Absent metrics are empty fields. Optional leading comment.
std::string outcomes_to_csv(const std::vector<OutcomeRow>& rows, const std::string& header_comment = {});
/// Inverse of outcomes_to_csv; '#' lines are skipped. Throws ParseError.
std::vector<OutcomeRow> outcomes_from_csv(const std::string& text);

struct LabeledTTest {
  std::string metric;
  TTestRecord record;
};

struct SweepReport {
  SelectionMetric metric = SelectionMetric::Rewrite;
  std::vector<std::string> sample_ids;
  std::vector<MetricVector> per_layer;
  std::vector<std::size_t> sample_best_layer;
  MetricVector sample_wise_optimal;
  std::size_t golden_layer = 0;
  MetricVector golden;
  /// deviation[layer] = |per_layer[layer] - sample_wise_optimal| on the
  /// selection metric.
  std::vector<double> deviation;
  /// Sample-wise optimal vs golden layer, one record per metric with enough data.
  std::vector<LabeledTTest> t_tests;

  std::string to_text() const;
};

/// Rebuilds the report from the raw (layer, sample) outcome matrix. Every
/// sample must have a row for every layer in [0, n_layers).
SweepReport report_from_outcomes(const std::vector<OutcomeRow>& rows, std::size_t n_layers,
                                 SelectionMetric metric = SelectionMetric::Rewrite);

/// Rows = layers, columns = labelled reports, values = deviation.
std::string heatmap_text(const std::vector<std::pair<std::string, const SweepReport*>>& columns);

struct SweepOptions {
  SelectionMetric metric = SelectionMetric::Rewrite;
  MetricWeights weights;
  std::size_t threads = 1;
  /// Layers to sweep; empty means all.
  std::vector<std::size_t> layers;
};

struct SweepResult {
  std::vector<OutcomeRow> outcomes;
  SweepReport report;
};

/// Edits a fresh copy per (layer, edit) -- per (layer, batch) for EMMET --
/// evaluates it and discards it. `covs[layer]` must cover every swept layer.
/// Editor numeric failures become failed_metrics rows with a diagnostic.
std::vector<OutcomeRow> run_edits(const ToyModel& model, const std::vector<EditQuery>& edits,
                                  const EditorSpec& editor, const std::vector<CovarianceEstimate>& covs,
                                  const SweepOptions& opts = {});

SweepResult layer_sweep(const ToyModel& model, const std::vector<EditQuery>& edits, const EditorSpec& editor,
                        const std::vector<CovarianceEstimate>& covs, const SweepOptions& opts = {});
/// Estimates the covariances from the world's corpus first.
SweepResult layer_sweep(const ToyModel& model, const FactWorld& world, const std::vector<EditQuery>& edits,
                        const EditorSpec& editor, const SweepOptions& opts = {});

/// Rows whose sample id is in `ids`, in their original order.
std::vector<OutcomeRow> select_samples(const std::vector<OutcomeRow>& rows, const std::vector<EditQuery>& ids);

struct ProxyReport {
  SweepReport proxy;
  SweepReport test;
  std::size_t proxy_layer = 0;
  std::size_t test_layer = 0;
  /// Test-set selection metric at the proxy-selected and test-optimal layers.
  double proxy_selected_test_score = 0.0;
  double test_optimal_score = 0.0;
  double gap = 0.0;

  std::string to_text() const;
};

ProxyReport proxy_generalization(const std::vector<OutcomeRow>& proxy_rows, const std::vector<OutcomeRow>& test_rows,
                                 std::size_t n_layers, SelectionMetric metric = SelectionMetric::Rewrite);
/// Explicit proxy and test sets, swept independently.
ProxyReport proxy_generalization(const ToyModel& model, const std::vector<EditQuery>& proxy,
                                 const std::vector<EditQuery>& test, const EditorSpec& editor,
                                 const std::vector<CovarianceEstimate>& covs, const SweepOptions& opts = {});
/// Splits with split_proxy_test and sweeps both halves.
ProxyReport proxy_generalization(const ToyModel& model, const std::vector<EditQuery>& edits,
                                 const EditorSpec& editor, const std::vector<CovarianceEstimate>& covs,
                                 double proxy_fraction, std::uint64_t seed, const SweepOptions& opts = {});

struct TimingRecord {
  double lga_seconds = 0.0;
  double cma_seconds = 0.0;
  /// Covariance estimation plus the full layer sweep.
  double bf_seconds = 0.0;
  double bf_over_lga = 0.0;
  double bf_over_cma = 0.0;
  std::size_t n_queries = 0;
  std::size_t n_layers = 0;

  std::string to_text() const;
};

struct RuntimeBenchmark {
  TimingRecord timing;
  LayerScoreTable lga;
  LayerScoreTable cma;
  SweepResult sweep;
};

/// Wall-clock LGA scoring, CMA scoring and the brute-force sweep on the same
/// proxy set.
RuntimeBenchmark runtime_benchmark(const ToyModel& model, const FactWorld& world,
                                   const std::vector<EditQuery>& proxy, const EditorSpec& editor,
                                   const LgaOptions& lga = {}, const CmaOptions& cma = {},
                                   const SweepOptions& opts = {});

/// One row of the selection-method comparison table.
struct ComparisonRow {
  std::string editor;
  std::string selection;
  std::size_t layer = 0;
  MetricVector metrics;
};

/// "editor,selection,layer,RwA,RpA,LOC,PRT,FLC,OV" and one line per row.
std::string comparison_to_text(const std::vector<ComparisonRow>& rows);

}  // namespace lga
