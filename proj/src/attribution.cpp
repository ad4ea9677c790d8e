// SPDX-License-Identifier: Apache-2.0
#include "lga/attribution.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "lga/error.hpp"
#include "lga/random.hpp"
#include "lga/stats.hpp"

namespace lga {

std::string to_string(ScoreMethod m) {
  switch (m) {
    case ScoreMethod::Lga: return "lga";
    case ScoreMethod::Cma: return "cma";
    case ScoreMethod::BruteForce: return "brute_force";
  }
  return "?";
}

std::string LayerScoreTable::to_text() const {
  std::ostringstream out;
  out << "method," << to_string(method) << '\n';
  out << "layer,score,excluded\n";
  char buf[64];
  for (std::size_t l = 0; l < scores.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%.17g", scores[l]);
    out << l << ',' << buf << ',' << (excluded[l] ? 1 : 0) << '\n';
  }
  out << "selected," << selected_layer << '\n';
  if (!note.empty()) out << "# " << note << '\n';
  return out.str();
}

std::size_t select_layer(const std::vector<double>& scores, const std::vector<bool>& excluded) {
  std::size_t best = scores.size();
  for (std::size_t l = 0; l < scores.size(); ++l) {
    if (!excluded.empty() && excluded[l]) continue;
    if (best == scores.size() || scores[l] > scores[best]) best = l;
  }
  if (best == scores.size()) throw InvalidArgument("select_layer: no eligible layer");
  return best;
}

double phi_layer(const ToyModel& model, const TokenSeq& z, const TokenSeq& v, std::size_t layer) {
  return phi(model.layer_gradient(z, layer).flat, model.layer_gradient(v, layer).flat);
}

LayerScoreTable lga_table(std::vector<double> scores, const LgaOptions& opts) {
  LayerScoreTable t;
  t.method = ScoreMethod::Lga;
  t.scores = std::move(scores);
  t.excluded.assign(t.scores.size(), false);
  if (opts.exclude_outliers) {
    auto mask = tukey_outliers(t.scores, opts.tukey_k);
    t.excluded = std::move(mask.flagged);
    t.note = mask.note;
  }
  t.selected_layer = select_layer(t.scores, t.excluded);
  return t;
}

LayerScoreTable lga_scores(const ToyModel& model, const std::vector<EditQuery>& proxy, const LgaOptions& opts) {
  if (proxy.empty()) throw InvalidArgument("lga_scores: empty proxy set");
  std::vector<double> scores(model.config().n_layers, 0.0);
  for (const auto& q : proxy) {
    const auto old_grads = model.all_layer_gradients(join_sequence(q.query, q.old_knowledge));
    const auto new_grads = model.all_layer_gradients(join_sequence(q.query, q.new_knowledge));
    for (std::size_t l = 0; l < scores.size(); ++l) scores[l] += phi(old_grads[l].flat, new_grads[l].flat);
  }
  return lga_table(std::move(scores), opts);
}

// ---------------------------------------------------------------- CMA

namespace {

bool span_ok(const EditQuery& q) {
  return q.subject_span.first < q.subject_span.second && q.subject_span.second <= q.query.size() &&
         !q.old_knowledge.empty();
}

double prob_of(const Mat& logits, TokenId target) {
  const auto row = logits.row(logits.rows() - 1);
  const double mx = row.maxCoeff();
  return std::exp(row(target) - mx) / (row.array() - mx).exp().sum();
}

struct CleanRun {
  TokenSeq prompt;
  ActivationTrace trace;
  double p_clean = 0.0;
};

CleanRun clean_run(const ToyModel& model, const EditQuery& q) {
  CleanRun c;
  c.prompt = prompt_of(q.query);
  c.p_clean = prob_of(model.logits(c.prompt, c.trace), q.old_knowledge.front());
  return c;
}

std::vector<Patch> noise_patches(const EditQuery& q, const Mat& noise) {
  std::vector<Patch> out;
  for (std::size_t i = q.subject_span.first; i < q.subject_span.second; ++i) {
    const auto r = static_cast<Eigen::Index>(i - q.subject_span.first);
    out.push_back({Patch::Site::Embedding, 0, i + 1, noise.row(r), true});
  }
  return out;
}

void add_restores(const EditQuery& q, const CleanRun& clean, std::size_t layer, CmaOptions::Site site,
                  std::vector<Patch>& patches) {
  for (std::size_t i = q.subject_span.first; i < q.subject_span.second; ++i) {
    const auto row = static_cast<Eigen::Index>(i + 1);
    if (site == CmaOptions::Site::MlpOut)
      patches.push_back({Patch::Site::MlpOut, layer, i + 1, clean.trace.mlp_out[layer].row(row), false});
    else
      patches.push_back({Patch::Site::ResidualIn, layer, i + 1, clean.trace.residual[layer].row(row), false});
  }
}

}  // namespace

double cma_noise_std(const ToyModel& model, const std::vector<EditQuery>& proxy, double scale) {
  double sum = 0.0, sum2 = 0.0;
  std::size_t n = 0;
  const auto& emb = model.params().tok_emb;
  for (const auto& q : proxy) {
    if (!span_ok(q)) continue;
    for (std::size_t i = q.subject_span.first; i < q.subject_span.second; ++i) {
      const auto row = emb.row(q.query[i]);
      sum += row.sum();
      sum2 += row.squaredNorm();
      n += static_cast<std::size_t>(row.size());
    }
  }
  if (n < 2) return 0.0;
  const double m = sum / static_cast<double>(n);
  return scale * std::sqrt(std::max(0.0, (sum2 - static_cast<double>(n) * m * m) / static_cast<double>(n - 1)));
}

double cma_probability(const ToyModel& model, const EditQuery& q, const Mat& noise,
                       const std::vector<std::size_t>& restore_layers, CmaOptions::Site site) {
  if (!span_ok(q)) throw InvalidArgument("cma_probability: subject span missing");
  const CleanRun clean = clean_run(model, q);
  auto patches = noise_patches(q, noise);
  for (auto l : restore_layers) add_restores(q, clean, l, site, patches);
  return prob_of(model.logits(clean.prompt, patches), q.old_knowledge.front());
}

LayerScoreTable cma_scores(const ToyModel& model, const std::vector<EditQuery>& proxy, const CmaOptions& opts) {
  if (proxy.empty()) throw InvalidArgument("cma_scores: empty proxy set");
  const std::size_t n_layers = model.config().n_layers;
  const auto d = static_cast<Eigen::Index>(model.config().d_model);
  const double sigma = cma_noise_std(model, proxy, opts.noise_scale);
  const std::size_t n_seeds = std::max<std::size_t>(opts.noise_seeds, 1);

  std::vector<double> scores(n_layers, 0.0);
  std::size_t used = 0, skipped = 0;
  for (std::size_t qi = 0; qi < proxy.size(); ++qi) {
    const auto& q = proxy[qi];
    if (!span_ok(q)) {
      ++skipped;
      continue;
    }
    const CleanRun clean = clean_run(model, q);
    const TokenId target = q.old_knowledge.front();
    const auto span_len = static_cast<Eigen::Index>(q.subject_span.second - q.subject_span.first);
    std::vector<double> effect(n_layers, 0.0);
    for (std::size_t s = 0; s < n_seeds; ++s) {
      Rng rng(mix_seed(opts.seed, qi * 1000003ULL + s));
      Mat noise(span_len, d);
      for (Eigen::Index r = 0; r < span_len; ++r)
        for (Eigen::Index c = 0; c < d; ++c) noise(r, c) = sigma * rng.normal();
      const auto corrupt = noise_patches(q, noise);
      const double p_corrupt = prob_of(model.logits(clean.prompt, corrupt), target);
      for (std::size_t l = 0; l < n_layers; ++l) {
        auto patches = corrupt;
        add_restores(q, clean, l, opts.site, patches);
        effect[l] += prob_of(model.logits(clean.prompt, patches), target) - p_corrupt;
      }
    }
    for (std::size_t l = 0; l < n_layers; ++l) scores[l] += effect[l] / static_cast<double>(n_seeds);
    ++used;
  }
  if (used == 0) throw InvalidArgument("cma_scores: every proxy query lacks a subject span");
  for (auto& s : scores) s /= static_cast<double>(used);

  LayerScoreTable t;
  t.method = ScoreMethod::Cma;
  t.scores = std::move(scores);
  t.excluded.assign(n_layers, false);
  t.selected_layer = select_layer(t.scores, t.excluded);
  if (skipped) t.note = std::to_string(skipped) + " queries skipped: subject span missing";
  return t;
}

}  // namespace lga
