// SPDX-License-Identifier: Apache-2.0
#include "lga/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "lga/error.hpp"
#include "lga/parallel.hpp"

namespace lga {

// ---------------------------------------------------------------- metrics

double overall_of(const MetricVector& m, const MetricWeights& w) {
  double num = w.rewrite * m.rewrite + w.fluency * (1.0 - m.fluency);
  double den = w.rewrite + w.fluency;
  if (m.rephrase) num += w.rephrase * *m.rephrase, den += w.rephrase;
  if (m.locality) num += w.locality * *m.locality, den += w.locality;
  if (m.portability) num += w.portability * *m.portability, den += w.portability;
  if (!(den > 0.0)) throw InvalidArgument("overall: weights sum to zero");
  return num / den;
}

void MetricVector::finalize(const MetricWeights& w) { overall = overall_of(*this, w); }

MetricVector failed_metrics(const EditQuery& edit, const MetricWeights& w) {
  MetricVector m;
  if (!edit.rephrases.empty()) m.rephrase = 0.0;
  if (!edit.locality.empty()) m.locality = 0.0;
  if (!edit.portability.empty()) m.portability = 0.0;
  m.fluency = 1.0;
  m.finalize(w);
  return m;
}

PreEditReference pre_edit_reference(const ToyModel& pre, const EditQuery& edit) {
  PreEditReference ref;
  for (const auto& p : edit.locality)
    ref.locality_answers.push_back(pre.greedy_decode(prompt_of(p.query), p.answer.size() + 1));
  return ref;
}

double fluency(const ToyModel& pre, const ToyModel& post, const TokenSeq& query) {
  const TokenSeq prompt = prompt_of(query);
  const TokenSeq cont = post.greedy_decode(prompt, kFluencyTokens);
  if (cont.empty()) return 0.0;
  const double nll = pre.answer_nll(prompt, cont) / static_cast<double>(cont.size());
  const double norm = std::log(static_cast<double>(pre.config().vocab_size));
  return std::clamp(nll / norm, 0.0, 1.0);
}

MetricVector evaluate_edit(const ToyModel& pre, const ToyModel& post, const EditQuery& edit,
                           const MetricWeights& w) {
  return evaluate_edit(pre, post, edit, pre_edit_reference(pre, edit), w);
}

MetricVector evaluate_edit(const ToyModel& pre, const ToyModel& post, const EditQuery& edit,
                           const PreEditReference& ref, const MetricWeights& w) {
  if (ref.locality_answers.size() != edit.locality.size())
    throw InvalidArgument("evaluate_edit: reference does not match the edit");
  MetricVector m;
  m.rewrite = post.predicts(prompt_of(edit.query), edit.new_knowledge) ? 1.0 : 0.0;
  if (!edit.rephrases.empty()) {
    double hits = 0.0;
    for (const auto& r : edit.rephrases) hits += post.predicts(prompt_of(r), edit.new_knowledge) ? 1.0 : 0.0;
    m.rephrase = hits / static_cast<double>(edit.rephrases.size());
  }
  if (!edit.locality.empty()) {
    double same = 0.0;
    for (std::size_t i = 0; i < edit.locality.size(); ++i) {
      const auto& p = edit.locality[i];
      same += post.greedy_decode(prompt_of(p.query), p.answer.size() + 1) == ref.locality_answers[i] ? 1.0 : 0.0;
    }
    m.locality = same / static_cast<double>(edit.locality.size());
  }
  if (!edit.portability.empty()) {
    double hits = 0.0;
    for (const auto& p : edit.portability) hits += post.predicts(prompt_of(p.query), p.answer) ? 1.0 : 0.0;
    m.portability = hits / static_cast<double>(edit.portability.size());
  }
  m.fluency = fluency(pre, post, edit.query);
  m.finalize(w);
  return m;
}

namespace {

void mean_optional(const std::vector<MetricVector>& ms, std::optional<double> MetricVector::*field,
                   MetricVector& out) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& m : ms)
    if (m.*field) sum += *(m.*field), ++n;
  if (n) out.*field = sum / static_cast<double>(n);
}

}  // namespace

MetricVector aggregate(const std::vector<MetricVector>& ms) {
  MetricVector out;
  if (ms.empty()) return out;
  const auto n = static_cast<double>(ms.size());
  for (const auto& m : ms) {
    out.rewrite += m.rewrite;
    out.fluency += m.fluency;
    out.overall += m.overall;
  }
  out.rewrite /= n;
  out.fluency /= n;
  out.overall /= n;
  mean_optional(ms, &MetricVector::rephrase, out);
  mean_optional(ms, &MetricVector::locality, out);
  mean_optional(ms, &MetricVector::portability, out);
  return out;
}

std::string to_string(SelectionMetric m) { return m == SelectionMetric::Rewrite ? "rewrite" : "overall"; }

SelectionMetric selection_metric_from_string(const std::string& s) {
  if (s == "rewrite") return SelectionMetric::Rewrite;
  if (s == "overall") return SelectionMetric::Overall;
  throw InvalidArgument("unknown selection metric '" + s + "'");
}

double selection_value(const MetricVector& m, SelectionMetric metric) {
  return metric == SelectionMetric::Rewrite ? m.rewrite : m.overall;
}

// ---------------------------------------------------------------- outcome CSV

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::string metric_fields(const MetricVector& m) {
  return fmt(m.rewrite) + ',' + fmt(m.rephrase) + ',' + fmt(m.locality) + ',' + fmt(m.portability) + ',' +
         fmt(m.fluency) + ',' + fmt(m.overall);
}

constexpr const char* kOutcomeHeader = "layer,sample_id,rewrite,rephrase,locality,portability,fluency,overall";

double parse_double(const std::string& s, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ParseError(line, "not a number: '" + s + "'");
  }
  if (used != s.size()) throw ParseError(line, "not a number: '" + s + "'");
  return v;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto at = s.find(',', start);
    out.push_back(s.substr(start, at - start));
    if (at == std::string::npos) break;
    start = at + 1;
  }
  return out;
}

}  // namespace

std::string outcomes_to_csv(const std::vector<OutcomeRow>& rows, const std::string& header_comment) {
  std::ostringstream out;
  if (!header_comment.empty()) out << "# " << header_comment << '\n';
  out << kOutcomeHeader << '\n';
  for (const auto& r : rows) {
    if (r.sample_id.find_first_of(",\n") != std::string::npos)
      throw InvalidArgument("outcomes_to_csv: sample id contains a separator");
    out << r.layer << ',' << r.sample_id << ',' << metric_fields(r.metrics) << '\n';
  }
  return out.str();
}

std::vector<OutcomeRow> outcomes_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t no = 0;
  bool header = false;
  std::vector<OutcomeRow> rows;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kOutcomeHeader) throw ParseError(no, "unexpected header");
      header = true;
      continue;
    }
    const auto f = split_commas(line);
    if (f.size() != 8) throw ParseError(no, "expected 8 fields");
    OutcomeRow r;
    const double layer = parse_double(f[0], no);
    if (layer < 0 || layer != std::floor(layer)) throw ParseError(no, "bad layer");
    r.layer = static_cast<std::size_t>(layer);
    r.sample_id = f[1];
    r.metrics.rewrite = parse_double(f[2], no);
    if (!f[3].empty()) r.metrics.rephrase = parse_double(f[3], no);
    if (!f[4].empty()) r.metrics.locality = parse_double(f[4], no);
    if (!f[5].empty()) r.metrics.portability = parse_double(f[5], no);
    r.metrics.fluency = parse_double(f[6], no);
    r.metrics.overall = parse_double(f[7], no);
    rows.push_back(std::move(r));
  }
  if (!header) throw ParseError(no, "missing header");
  return rows;
}

// ---------------------------------------------------------------- reports

namespace {

std::size_t argmax_lowest(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

using Getter = std::optional<double> (*)(const MetricVector&);

const std::vector<std::pair<std::string, Getter>>& metric_getters() {
  static const std::vector<std::pair<std::string, Getter>> g = {
      {"rewrite", [](const MetricVector& m) -> std::optional<double> { return m.rewrite; }},
      {"rephrase", [](const MetricVector& m) { return m.rephrase; }},
      {"locality", [](const MetricVector& m) { return m.locality; }},
      {"portability", [](const MetricVector& m) { return m.portability; }},
      {"fluency", [](const MetricVector& m) -> std::optional<double> { return m.fluency; }},
      {"overall", [](const MetricVector& m) -> std::optional<double> { return m.overall; }},
  };
  return g;
}

}  // namespace

SweepReport report_from_outcomes(const std::vector<OutcomeRow>& rows, std::size_t n_layers,
                                 SelectionMetric metric) {
  if (n_layers == 0) throw InvalidArgument("report: no layers");
  SweepReport rep;
  rep.metric = metric;
  std::map<std::string, std::size_t> index;
  for (const auto& r : rows) {
    if (r.layer >= n_layers) throw InvalidArgument("report: layer out of range");
    if (index.emplace(r.sample_id, rep.sample_ids.size()).second) rep.sample_ids.push_back(r.sample_id);
  }
  const std::size_t n = rep.sample_ids.size();
  if (n == 0) throw InvalidArgument("report: no outcomes");
  std::vector<std::vector<const MetricVector*>> cell(n_layers, std::vector<const MetricVector*>(n, nullptr));
  for (const auto& r : rows) {
    auto& slot = cell[r.layer][index.at(r.sample_id)];
    if (slot) throw InvalidArgument("report: duplicate outcome for " + r.sample_id);
    slot = &r.metrics;
  }
  for (std::size_t l = 0; l < n_layers; ++l)
    for (std::size_t s = 0; s < n; ++s)
      if (!cell[l][s]) throw InvalidArgument("report: missing outcome for " + rep.sample_ids[s]);

  std::vector<double> layer_score(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::vector<MetricVector> col;
    for (std::size_t s = 0; s < n; ++s) col.push_back(*cell[l][s]);
    rep.per_layer.push_back(aggregate(col));
    layer_score[l] = selection_value(rep.per_layer.back(), metric);
  }

  std::vector<MetricVector> best, at_golden;
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<double> v(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) v[l] = selection_value(*cell[l][s], metric);
    rep.sample_best_layer.push_back(argmax_lowest(v));
    best.push_back(*cell[rep.sample_best_layer.back()][s]);
  }
  rep.sample_wise_optimal = aggregate(best);
  rep.golden_layer = argmax_lowest(layer_score);
  rep.golden = rep.per_layer[rep.golden_layer];
  for (std::size_t s = 0; s < n; ++s) at_golden.push_back(*cell[rep.golden_layer][s]);

  const double opt = selection_value(rep.sample_wise_optimal, metric);
  for (double v : layer_score) rep.deviation.push_back(std::abs(v - opt));

  for (const auto& [name, get] : metric_getters()) {
    std::vector<double> a, b;
    for (const auto& m : best)
      if (auto v = get(m)) a.push_back(*v);
    for (const auto& m : at_golden)
      if (auto v = get(m)) b.push_back(*v);
    if (a.size() >= 2 && b.size() >= 2) rep.t_tests.push_back({name, t_test(a, b)});
  }
  return rep;
}

std::string SweepReport::to_text() const {
  std::ostringstream out;
  out << "selection_metric," << lga::to_string(metric) << '\n';
  out << "samples," << sample_ids.size() << '\n';
  out << "layer,rewrite,rephrase,locality,portability,fluency,overall,deviation\n";
  for (std::size_t l = 0; l < per_layer.size(); ++l)
    out << l << ',' << metric_fields(per_layer[l]) << ',' << fmt(deviation[l]) << '\n';
  out << "golden_layer," << golden_layer << '\n';
  out << "golden," << metric_fields(golden) << '\n';
  out << "sample_wise_optimal," << metric_fields(sample_wise_optimal) << '\n';
  out << "ttest,metric,t,df,p,different\n";
  for (const auto& t : t_tests)
    out << "ttest," << t.metric << ',' << fmt(t.record.t) << ',' << fmt(t.record.df) << ',' << fmt(t.record.p)
        << ',' << (t.record.different ? 1 : 0) << '\n';
  out << "sample_id,best_layer\n";
  for (std::size_t s = 0; s < sample_ids.size(); ++s) out << sample_ids[s] << ',' << sample_best_layer[s] << '\n';
  return out.str();
}

std::string heatmap_text(const std::vector<std::pair<std::string, const SweepReport*>>& columns) {
  std::ostringstream out;
  out << "layer";
  std::size_t rows = 0;
  for (const auto& [label, rep] : columns) {
    out << ',' << label;
    rows = std::max(rows, rep->deviation.size());
  }
  out << '\n';
  for (std::size_t l = 0; l < rows; ++l) {
    out << l;
    for (const auto& c : columns) out << ',' << (l < c.second->deviation.size() ? fmt(c.second->deviation[l]) : "");
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------- sweeps

std::vector<OutcomeRow> run_edits(const ToyModel& model, const std::vector<EditQuery>& edits,
                                  const EditorSpec& editor, const std::vector<CovarianceEstimate>& covs,
                                  const SweepOptions& opts) {
  editor.validate();
  std::vector<std::size_t> layers = opts.layers;
  if (layers.empty())
    for (std::size_t l = 0; l < model.config().n_layers; ++l) layers.push_back(l);
  for (auto l : layers) {
    if (l >= model.config().n_layers) throw InvalidArgument("sweep: layer out of range");
    if (l >= covs.size() || covs[l].layer != l) throw InvalidArgument("sweep: no covariance for a swept layer");
  }

  std::vector<PreEditReference> refs(edits.size());
  parallel_for(edits.size(), opts.threads, [&](std::size_t i) { refs[i] = pre_edit_reference(model, edits[i]); });

  const std::size_t group = editor.kind == EditorKind::Emmet ? editor.batch_size : 1;
  const std::size_t n_groups = (edits.size() + group - 1) / group;
  std::vector<OutcomeRow> rows(layers.size() * edits.size());
  parallel_for(layers.size() * n_groups, opts.threads, [&](std::size_t item) {
    const std::size_t li = item / n_groups, g = item % n_groups;
    const std::size_t begin = g * group, end = std::min(edits.size(), begin + group);
    EditorSpec spec = editor;
    spec.layer = layers[li];
    const std::vector<EditQuery> batch(edits.begin() + static_cast<long>(begin),
                                       edits.begin() + static_cast<long>(end));
    std::optional<EditedModel> edited;
    std::string diagnostic;
    try {
      edited = apply_edit(model, batch, spec, covs[spec.layer]);
    } catch (const NumericError& e) {
      diagnostic = e.what();
    }
    for (std::size_t i = begin; i < end; ++i) {
      auto& row = rows[li * edits.size() + i];
      row.layer = spec.layer;
      row.sample_id = edits[i].id;
      row.diagnostic = diagnostic;
      row.metrics = edited ? evaluate_edit(model, edited->model, edits[i], refs[i], opts.weights)
                           : failed_metrics(edits[i], opts.weights);
    }
  });
  return rows;
}

SweepResult layer_sweep(const ToyModel& model, const std::vector<EditQuery>& edits, const EditorSpec& editor,
                        const std::vector<CovarianceEstimate>& covs, const SweepOptions& opts) {
  if (edits.empty()) throw InvalidArgument("layer_sweep: no edits");
  SweepOptions all = opts;
  all.layers.clear();
  SweepResult r;
  r.outcomes = run_edits(model, edits, editor, covs, all);
  r.report = report_from_outcomes(r.outcomes, model.config().n_layers, opts.metric);
  return r;
}

SweepResult layer_sweep(const ToyModel& model, const FactWorld& world, const std::vector<EditQuery>& edits,
                        const EditorSpec& editor, const SweepOptions& opts) {
  return layer_sweep(model, edits, editor, estimate_covariances(model, world, editor.covariance_reg), opts);
}

std::vector<OutcomeRow> select_samples(const std::vector<OutcomeRow>& rows, const std::vector<EditQuery>& ids) {
  std::set<std::string> keep;
  for (const auto& e : ids) keep.insert(e.id);
  std::vector<OutcomeRow> out;
  for (const auto& r : rows)
    if (keep.contains(r.sample_id)) out.push_back(r);
  return out;
}

// ---------------------------------------------------------------- proxy

std::string ProxyReport::to_text() const {
  std::ostringstream out;
  out << "selection_metric," << lga::to_string(test.metric) << '\n';
  out << "proxy_samples," << proxy.sample_ids.size() << '\n';
  out << "test_samples," << test.sample_ids.size() << '\n';
  out << "proxy_layer," << proxy_layer << '\n';
  out << "test_layer," << test_layer << '\n';
  out << "proxy_selected_test_score," << fmt(proxy_selected_test_score) << '\n';
  out << "test_optimal_score," << fmt(test_optimal_score) << '\n';
  out << "gap," << fmt(gap) << '\n';
  return out.str();
}

ProxyReport proxy_generalization(const std::vector<OutcomeRow>& proxy_rows, const std::vector<OutcomeRow>& test_rows,
                                 std::size_t n_layers, SelectionMetric metric) {
  ProxyReport r;
  r.proxy = report_from_outcomes(proxy_rows, n_layers, metric);
  r.test = report_from_outcomes(test_rows, n_layers, metric);
  r.proxy_layer = r.proxy.golden_layer;
  r.test_layer = r.test.golden_layer;
  r.proxy_selected_test_score = selection_value(r.test.per_layer[r.proxy_layer], metric);
  r.test_optimal_score = selection_value(r.test.per_layer[r.test_layer], metric);
  r.gap = r.test_optimal_score - r.proxy_selected_test_score;
  return r;
}

ProxyReport proxy_generalization(const ToyModel& model, const std::vector<EditQuery>& proxy,
                                 const std::vector<EditQuery>& test, const EditorSpec& editor,
                                 const std::vector<CovarianceEstimate>& covs, const SweepOptions& opts) {
  const auto p = layer_sweep(model, proxy, editor, covs, opts);
  const auto t = layer_sweep(model, test, editor, covs, opts);
  return proxy_generalization(p.outcomes, t.outcomes, model.config().n_layers, opts.metric);
}

ProxyReport proxy_generalization(const ToyModel& model, const std::vector<EditQuery>& edits,
                                 const EditorSpec& editor, const std::vector<CovarianceEstimate>& covs,
                                 double proxy_fraction, std::uint64_t seed, const SweepOptions& opts) {
  const auto split = split_proxy_test(edits, proxy_fraction, seed);
  return proxy_generalization(model, split.proxy, split.test, editor, covs, opts);
}

// ---------------------------------------------------------------- timing

std::string TimingRecord::to_text() const {
  std::ostringstream out;
  out << "n_queries," << n_queries << '\n';
  out << "n_layers," << n_layers << '\n';
  out << "lga_seconds," << fmt(lga_seconds) << '\n';
  out << "cma_seconds," << fmt(cma_seconds) << '\n';
  out << "bf_seconds," << fmt(bf_seconds) << '\n';
  out << "bf_over_lga," << fmt(bf_over_lga) << '\n';
  out << "bf_over_cma," << fmt(bf_over_cma) << '\n';
  return out.str();
}

RuntimeBenchmark runtime_benchmark(const ToyModel& model, const FactWorld& world,
                                   const std::vector<EditQuery>& proxy, const EditorSpec& editor,
                                   const LgaOptions& lga, const CmaOptions& cma, const SweepOptions& opts) {
  using clock = std::chrono::steady_clock;
  const auto seconds = [](clock::time_point t0) {
    return std::chrono::duration<double>(clock::now() - t0).count();
  };
  RuntimeBenchmark b;
  auto t0 = clock::now();
  b.lga = lga_scores(model, proxy, lga);
  b.timing.lga_seconds = seconds(t0);

  t0 = clock::now();
  b.cma = cma_scores(model, proxy, cma);
  b.timing.cma_seconds = seconds(t0);

  t0 = clock::now();
  b.sweep = layer_sweep(model, world, proxy, editor, opts);
  b.timing.bf_seconds = seconds(t0);

  b.timing.n_queries = proxy.size();
  b.timing.n_layers = model.config().n_layers;
  const auto ratio = [](double num, double den) { return den > 0.0 ? num / den : 0.0; };
  b.timing.bf_over_lga = ratio(b.timing.bf_seconds, b.timing.lga_seconds);
  b.timing.bf_over_cma = ratio(b.timing.bf_seconds, b.timing.cma_seconds);
  return b;
}

std::string comparison_to_text(const std::vector<ComparisonRow>& rows) {
  std::ostringstream out;
  out << "editor,selection,layer,RwA,RpA,LOC,PRT,FLC,OV\n";
  for (const auto& r : rows) out << r.editor << ',' << r.selection << ',' << r.layer << ',' << metric_fields(r.metrics) << '\n';
  return out.str();
}

}  // namespace lga
