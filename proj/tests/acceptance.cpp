// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: lga_acceptance [WORK_DIR]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>

#include "fixtures.hpp"
#include "lga/attribution.hpp"
#include "lga/config.hpp"
#include "lga/editors.hpp"
#include "lga/eval.hpp"
#include "lga/pipeline.hpp"
#include "lga/stats.hpp"
#include "oracles.hpp"

using namespace lga;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

double since(clock_type::time_point t0) { return std::chrono::duration<double>(clock_type::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

/// Trained default model for one corpus seed.
struct Bench {
  RunConfig cfg;
  FactWorld world;
  ToyModel model;
  std::vector<EditQuery> edits;
  ProxyTestSplit split;
};

Bench bench_from_dir(const RunConfig& cfg) {
  Bench b;
  b.cfg = cfg;
  b.world = load_world_checked(cfg);
  b.model = load_model_checked(cfg);
  b.edits = load_edits_checked(cfg, b.world.vocabulary());
  b.split = split_proxy_test(b.edits, cfg.proxy_fraction, cfg.seed);
  return b;
}

Bench train_bench(std::uint64_t seed) {
  Bench b;
  b.cfg.seed = seed;
  const auto& w = b.cfg.world;
  b.world = generate_world(seed, w.n_entities, w.n_relations, w.n_facts);
  ModelConfig mc = b.cfg.model;
  mc.vocab_size = b.world.vocabulary().size();
  b.model = init_model(mc, seed);
  train_memorize(b.model, b.world, b.cfg.train.stop_accuracy, b.cfg.train.max_steps, seed, b.cfg.train.options);
  b.edits = build_edit_set(b.world, w.n_edits, seed);
  b.split = split_proxy_test(b.edits, b.cfg.proxy_fraction, seed);
  return b;
}

EditorSpec rrome(std::uint64_t seed) {
  EditorSpec s;
  s.kind = EditorKind::RRome;
  s.seed = seed;
  return s;
}

// ---------------------------------------------------------------- 1

Verdict gradient_oracle() {
  const auto t0 = clock_type::now();
  const double h = 1e-5;
  double worst = 0.0, worst_inert = 0.0, loss_gap = 0.0;
  std::size_t bad = 0, checked = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ToyModel m = testing::random_tiny_model(seed);
    const auto& c = m.config();
    Rng rng(mix_seed(seed, 5));
    const TokenSeq seq = testing::random_sequence(rng, 16, c.vocab_size);
    Parameters g = Parameters::zeros(c);
    const double loss = m.full_gradient(seq, g);
    loss_gap = std::max(loss_gap, std::abs(loss - static_cast<double>(oracle::reference_loss(m.params(), c, seq))));
    auto ps = m.params().spans();
    const auto gs = g.spans();

    // Inert coordinates: token rows absent from the sequence, positional rows
    // past its end, and attention key biases (softmax shift invariance).
    const auto inert = [&](std::size_t tensor, std::size_t k) {
      if (tensor == 0) return std::find(seq.begin(), seq.end(), static_cast<TokenId>(k % c.vocab_size)) == seq.end();
      if (tensor == 1) return k % c.context_len >= seq.size();
      const std::size_t block_tensor = tensor - 2;
      if (tensor >= 2 && block_tensor < 12 * c.n_layers && block_tensor % 12 == 3)
        return k >= c.d_model && k < 2 * c.d_model;
      return false;
    };
    std::vector<std::pair<std::size_t, std::size_t>> live;
    for (std::size_t ti = 0; ti < ps.size(); ++ti)
      for (std::size_t k = 0; k < ps[ti].size(); ++k) {
        if (inert(ti, k))
          worst_inert = std::max(worst_inert, std::abs(gs[ti][k]));
        else
          live.emplace_back(ti, k);
      }
    for (int i = 0; i < 20; ++i) {
      const auto [ti, k] = live[rng.below(live.size())];
      double& x = ps[ti][k];
      const double x0 = x;
      x = x0 + h;
      const long double lp = oracle::reference_loss(m.params(), c, seq);
      x = x0 - h;
      const long double lm = oracle::reference_loss(m.params(), c, seq);
      x = x0;
      const double r = oracle::rel_err(gs[ti][k], static_cast<double>((lp - lm) / (2 * static_cast<long double>(h))));
      worst = std::max(worst, r);
      bad += r > 1e-5;
      ++checked;
    }
  }
  const double secs = since(t0);
  return {bad == 0 && checked == 200 && worst_inert <= 1e-12 && loss_gap <= 1e-12 && secs < 60.0,
          fmt("%zu coordinates, worst rel err %.3g, %zu above 1e-5, inert |g| <= %.3g, |loss - reference| <= %.3g, "
              "%.2f s",
              checked, worst, bad, worst_inert, loss_gap, secs)};
}

// ---------------------------------------------------------------- 2

Verdict lga_definition(const Bench& b) {
  const auto& m = b.model;
  const std::size_t n_layers = m.config().n_layers;
  const std::vector<EditQuery> pairs(b.edits.begin(), b.edits.begin() + 20);
  const LgaOptions raw{.exclude_outliers = false};
  double worst_def = 0.0, worst_sym = 0.0, worst_add = 0.0;
  std::vector<double> total(n_layers, 0.0);
  for (const auto& q : pairs) {
    const TokenSeq z = join_sequence(q.query, q.old_knowledge), v = join_sequence(q.query, q.new_knowledge);
    Parameters gz = Parameters::zeros(m.config()), gv = Parameters::zeros(m.config());
    m.full_gradient(z, gz);
    m.full_gradient(v, gv);
    const auto single = lga_scores(m, {q}, raw);
    for (std::size_t l = 0; l < n_layers; ++l) {
      const double sliced = mlp_slice(gz, l).dot(mlp_slice(gv, l));
      total[l] += sliced;
      worst_def = std::max(worst_def, oracle::rel_err(single.scores[l], sliced));
      worst_sym = std::max(worst_sym, oracle::rel_err(phi_layer(m, z, v, l), phi_layer(m, v, z, l)));
    }
  }
  const auto all = lga_scores(m, pairs, raw);
  Rng rng(17);
  std::vector<EditQuery> p1, p2;
  for (const auto& q : pairs) (rng.uniform() < 0.5 ? p1 : p2).push_back(q);
  const auto s1 = lga_scores(m, p1, raw), s2 = lga_scores(m, p2, raw);
  for (std::size_t l = 0; l < n_layers; ++l) {
    worst_def = std::max(worst_def, oracle::rel_err(all.scores[l], total[l]));
    worst_add = std::max(worst_add, oracle::rel_err(all.scores[l], s1.scores[l] + s2.scores[l]));
  }
  return {worst_def <= 1e-10 && worst_sym <= 1e-12 && worst_add <= 1e-12,
          fmt("definition %.3g, symmetry %.3g, additivity %.3g (partition %zu+%zu)", worst_def, worst_sym, worst_add,
              p1.size(), p2.size())};
}

// ---------------------------------------------------------------- 3

double rank_one_defect(const Mat& delta, Rng& rng) {
  double worst = 0.0;
  for (int i = 0; i < 2; ++i) {
    Vec a(delta.cols()), c(delta.cols());
    for (Eigen::Index j = 0; j < a.size(); ++j) a(j) = rng.normal(), c(j) = rng.normal();
    const Vec da = delta * a, dc = delta * c;
    worst = std::max(worst, 1.0 - std::abs(da.dot(dc)) / (da.norm() * dc.norm()));
  }
  return worst;
}

Verdict editor_constraints(const Bench& b, const std::vector<CovarianceEstimate>& covs) {
  const auto& m = b.model;
  const std::size_t n_layers = m.config().n_layers;
  Rng rng(23);
  double worst_rome = 0.0, worst_emmet = 0.0, worst_rank = 0.0, worst_b1 = 0.0;
  for (std::size_t i = 0; i < 100; ++i) {
    EditorSpec spec = rrome(b.cfg.seed);
    spec.kind = i % 2 ? EditorKind::RRome : EditorKind::Rome;
    spec.layer = i % n_layers;
    const EditedModel e = rome_edit(m, b.edits[i], spec, covs[spec.layer]);
    const Mat& w1 = e.model.params().blocks[spec.layer].w_out;
    worst_rome = std::max(worst_rome, (w1.transpose() * e.keys - e.values).cwiseAbs().maxCoeff());
    worst_rank = std::max(worst_rank, rank_one_defect(w1 - m.params().blocks[spec.layer].w_out, rng));
    if (i % 10 == 1) {
      EditorSpec em = spec;
      em.kind = EditorKind::Emmet;
      const EditedModel one = emmet_edit(m, {b.edits[i]}, em, covs[spec.layer]);
      worst_b1 = std::max(worst_b1, (one.model.params().blocks[spec.layer].w_out - w1).cwiseAbs().maxCoeff());
    }
  }
  for (std::size_t batch = 0; batch < 20; ++batch) {
    EditorSpec spec = rrome(b.cfg.seed);
    spec.kind = EditorKind::Emmet;
    spec.layer = batch % n_layers;
    const std::size_t size = 1 + batch % 4;
    const std::vector<EditQuery> group(b.edits.begin() + static_cast<long>(4 * batch),
                                       b.edits.begin() + static_cast<long>(4 * batch + size));
    const EditedModel e = emmet_edit(m, group, spec, covs[spec.layer]);
    worst_emmet = std::max(
        worst_emmet, (e.model.params().blocks[spec.layer].w_out.transpose() * e.keys - e.values).cwiseAbs().maxCoeff());
  }
  return {worst_rome <= 1e-8 && worst_emmet <= 1e-8 && worst_b1 <= 1e-10 && worst_rank <= 1e-9,
          fmt("ROME/R-ROME max|W'k-v| %.3g, EMMET %.3g, EMMET(B=1) vs R-ROME %.3g, rank-one defect %.3g", worst_rome,
              worst_emmet, worst_b1, worst_rank)};
}

// ---------------------------------------------------------------- 4, 5, 7

Verdict golden_layer(const RuntimeBenchmark& rb) {
  const auto& rep = rb.sweep.report;
  const double gap = rep.sample_wise_optimal.rewrite - rep.golden.rewrite;
  const bool has_ttest = std::any_of(rep.t_tests.begin(), rep.t_tests.end(), [](const auto& t) { return t.metric == "rewrite"; }) &&
                         rep.to_text().find("ttest,rewrite,") != std::string::npos;
  std::string tt;
  for (const auto& t : rep.t_tests)
    if (t.metric == "rewrite") tt = fmt("t %.3f df %.1f p %.3g different %d", t.record.t, t.record.df, t.record.p, t.record.different);
  return {gap <= 0.05 && has_ttest && rb.timing.bf_seconds < 1800.0,
          fmt("golden layer %zu rewrite %.4f, sample-wise optimal %.4f, gap %.4f; %s; sweep %.1f s", rep.golden_layer,
              rep.golden.rewrite, rep.sample_wise_optimal.rewrite, gap, tt.c_str(), rb.timing.bf_seconds)};
}

Verdict proxy_generalization_check(const Bench& b, const SweepResult& sweep) {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto split = split_proxy_test(b.edits, 0.1, seed);
    const auto r = proxy_generalization(select_samples(sweep.outcomes, split.proxy),
                                        select_samples(sweep.outcomes, split.test), b.model.config().n_layers);
    ok = ok && r.gap <= 0.02;
    detail += fmt("seed %llu: proxy L%zu test L%zu gap %.4f; ", static_cast<unsigned long long>(seed), r.proxy_layer,
                  r.test_layer, r.gap);
  }
  return {ok, detail};
}

Verdict runtime(const RuntimeBenchmark& rb) {
  const auto& t = rb.timing;
  return {t.bf_over_lga >= 3.0 && t.n_queries == 100 && t.n_layers == 8,
          fmt("%zu queries x %zu layers: LGA %.2f s, CMA %.2f s, BF %.1f s, BF/LGA %.1fx, BF/CMA %.1fx", t.n_queries,
              t.n_layers, t.lga_seconds, t.cma_seconds, t.bf_seconds, t.bf_over_lga, t.bf_over_cma)};
}

// ---------------------------------------------------------------- 6

Verdict lga_vs_cma(const std::vector<const Bench*>& benches) {
  std::size_t wins = 0;
  std::string detail;
  bool schema = true;
  for (const Bench* b : benches) {
    const auto covs = estimate_covariances(b->model, b->world, b->cfg.editor.covariance_reg);
    const auto lga = lga_scores(b->model, b->split.proxy, b->cfg.lga);
    CmaOptions co = b->cfg.cma;
    co.seed = b->cfg.seed;
    const auto cma = cma_scores(b->model, b->split.proxy, co);
    std::vector<ComparisonRow> rows;
    for (const auto* t : {&lga, &cma}) {
      SweepOptions opts;
      opts.layers = {t->selected_layer};
      std::vector<MetricVector> ms;
      for (const auto& r : run_edits(b->model, b->split.test, rrome(b->cfg.seed), covs, opts)) ms.push_back(r.metrics);
      rows.push_back({"r-rome", to_string(t->method), t->selected_layer, aggregate(ms)});
    }
    const std::string table = comparison_to_text(rows);
    std::printf("  corpus seed %llu\n", static_cast<unsigned long long>(b->cfg.seed));
    for (std::size_t p = 0, q; (q = table.find('\n', p)) != std::string::npos; p = q + 1)
      std::printf("    %s\n", table.substr(p, q - p).c_str());
    schema = schema && table.rfind("editor,selection,layer,RwA,RpA,LOC,PRT,FLC,OV\n", 0) == 0;
    const bool win = rows[0].metrics.overall >= rows[1].metrics.overall;
    wins += win;
    detail += fmt("seed %llu: LGA L%zu OV %.4f vs CMA L%zu OV %.4f; ", static_cast<unsigned long long>(b->cfg.seed),
                  rows[0].layer, rows[0].metrics.overall, rows[1].layer, rows[1].metrics.overall);
  }
  return {wins >= 2 && schema, fmt("LGA >= CMA in %zu/%zu seeds; ", wins, benches.size()) + detail};
}

// ---------------------------------------------------------------- 8, 9

Verdict statistics_oracle() {
  Rng rng(8);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> a(2 + rng.below(40)), b(2 + rng.below(40));
    const double shift = 2 * rng.normal(), sa = 0.05 + 5 * rng.uniform(), sb = 0.05 + 5 * rng.uniform();
    for (auto& x : a) x = sa * rng.normal();
    for (auto& x : b) x = shift + sb * rng.normal();
    const auto got = t_test(a, b);
    const auto ref = oracle::welch(a, b);
    worst = std::max({worst, oracle::rel_err(got.t, ref.t), oracle::rel_err(got.df, ref.df),
                      oracle::rel_err(got.p, ref.p)});
  }
  const std::vector<double> z{0, 0, 0}, o{1, 1, 1};
  const auto eq = t_test(o, o), ne = t_test(z, o);
  const bool rules = eq.t == 0.0 && eq.p == 1.0 && !eq.different && ne.p == 0.0 && ne.different;
  return {worst <= 1e-9 && rules, fmt("50 pairs, worst rel err %.3g; zero-variance rules %s", worst, rules ? "hold" : "broken")};
}

Verdict tukey_oracle() {
  Rng rng(9);
  std::size_t mismatches = 0, flagged = 0;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> v(4 + rng.below(28));
    for (auto& x : v) x = i % 2 ? rng.normal() : static_cast<double>(rng.below(10));
    if (i % 4 < 2) v[rng.below(v.size())] = (i % 2 ? 30.0 : 80.0) * (rng.uniform() < 0.5 ? -1 : 1);
    const auto got = tukey_outliers(v).flagged;
    mismatches += got != oracle::tukey(v);
    flagged += static_cast<std::size_t>(std::count(got.begin(), got.end(), true));
  }
  return {mismatches == 0, fmt("100 arrays, %zu mismatches, %zu values flagged", mismatches, flagged)};
}

// ---------------------------------------------------------------- 10

void run_pipeline(const RunConfig& c) {
  cmd_gen(c);
  cmd_train(c);
  cmd_attr(c, ScoreMethod::Lga);
  cmd_attr(c, ScoreMethod::Cma);
  cmd_edit(c, "lga", {});
  cmd_sweep(c);
  cmd_compare(c);
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

Verdict determinism(const RunConfig& cfg) {
  const auto t0 = clock_type::now();
  fs::remove_all(cfg.out_dir);
  run_pipeline(cfg);
  auto first = snapshot(cfg.out_dir);
  run_pipeline(cfg);
  auto second = snapshot(cfg.out_dir);
  const bool runtime_present = first.contains(artifact::kRuntime);
  first.erase(artifact::kRuntime);
  second.erase(artifact::kRuntime);
  std::size_t differing = 0;
  for (const auto& [name, bytes] : first)
    if (!second.contains(name) || second.at(name) != bytes) {
      ++differing;
      std::printf("  differs: %s\n", name.c_str());
    }
  differing += first.size() != second.size();

  const fs::path ck = cfg.out_dir / artifact::kModel, ck2 = cfg.out_dir / "roundtrip.ckpt.tmp";
  std::uint64_t tag = 0;
  ToyModel::load(ck, nullptr, &tag).save(ck2, tag);
  const bool ckpt_ok = read_file(ck) == read_file(ck2);
  fs::remove(ck2);

  const Vocabulary vocab = Vocabulary::load(cfg.out_dir / artifact::kVocab);
  const fs::path ed = cfg.out_dir / artifact::kEdits, ed2 = cfg.out_dir / "roundtrip.jsonl.tmp";
  const std::string header = read_file(ed).substr(2, read_file(ed).find('\n') - 2);
  serialize_edits(ed2, deserialize_edits(ed, vocab), vocab, header);
  const bool edits_ok = read_file(ed) == read_file(ed2);
  fs::remove(ed2);

  return {differing == 0 && runtime_present && ckpt_ok && edits_ok,
          fmt("%zu artifacts compared (runtime.txt excluded), %zu differ; checkpoint round-trip %s; edit-set round-trip "
              "%s; %.0f s",
              first.size(), differing, ckpt_ok ? "bit-exact" : "DIFFERS", edits_ok ? "bit-exact" : "DIFFERS",
              since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "lga_acceptance";
  std::map<int, Verdict> verdicts;
  const auto report = [&](int n, const char* name, const std::function<Verdict()>& fn) {
    const auto t0 = clock_type::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    verdicts[n] = v;
    std::printf("criterion %2d %-28s %s  %s [%.1f s]\n", n, name, v.pass ? "PASS" : "FAIL", v.detail.c_str(),
                since(t0));
    std::fflush(stdout);
  };

  report(1, "gradient oracle", gradient_oracle);
  report(8, "statistics oracle", statistics_oracle);
  report(9, "tukey oracle", tukey_oracle);

  RunConfig cfg;
  cfg.out_dir = work / "seed1";
  report(10, "determinism & persistence", [&] { return determinism(cfg); });

  const Bench seed1 = bench_from_dir(cfg);
  const auto covs = estimate_covariances(seed1.model, seed1.world, cfg.editor.covariance_reg);
  report(2, "lga definition oracle", [&] { return lga_definition(seed1); });
  report(3, "editor equality constraints", [&] { return editor_constraints(seed1, covs); });

  std::optional<RuntimeBenchmark> rb;
  const auto bench = [&] {
    if (!rb) {
      CmaOptions co = cfg.cma;
      co.seed = cfg.seed;
      rb = runtime_benchmark(seed1.model, seed1.world, seed1.edits, rrome(cfg.seed), cfg.lga, co);
    }
    return *rb;
  };
  report(4, "golden-layer existence", [&] { return golden_layer(bench()); });
  report(5, "proxy generalization", [&] { return proxy_generalization_check(seed1, bench().sweep); });
  report(7, "runtime", [&] { return runtime(bench()); });

  report(6, "lga vs cma", [&] {
    const Bench s2 = train_bench(2), s3 = train_bench(3);
    return lga_vs_cma({&seed1, &s2, &s3});
  });

  std::size_t failed = 0;
  std::printf("\nsummary\n");
  for (const auto& [n, v] : verdicts) {
    std::printf("criterion %2d: %s\n", n, v.pass ? "PASS" : "FAIL");
    failed += !v.pass;
  }
  return failed ? 1 : 0;
}
