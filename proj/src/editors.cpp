// SPDX-License-Identifier: Apache-2.0
#include "lga/editors.hpp"

#include <cmath>

#include "lga/random.hpp"

namespace lga {

std::string to_string(EditorKind k) {
  switch (k) {
    case EditorKind::Rome: return "rome";
    case EditorKind::RRome: return "r-rome";
    case EditorKind::Emmet: return "emmet";
  }
  return "?";
}

EditorKind editor_kind_from_string(const std::string& s) {
  if (s == "rome") return EditorKind::Rome;
  if (s == "r-rome" || s == "rrome" || s == "r_rome") return EditorKind::RRome;
  if (s == "emmet") return EditorKind::Emmet;
  throw InvalidArgument("unknown editor '" + s + "'");
}

void EditorSpec::validate() const {
  if (value_opt.steps < 1) throw InvalidArgument("editor: value optimisation needs at least one step");
  if (!(covariance_reg > 0.0)) throw InvalidArgument("editor: covariance ridge must be positive");
  if (kind == EditorKind::RRome && context_prefixes < 1)
    throw InvalidArgument("editor: R-ROME needs at least one context prefix");
  if (batch_size < 1) throw InvalidArgument("editor: batch size must be positive");
}

// ---------------------------------------------------------------- covariance

CovarianceEstimate covariance_from_keys(const Mat& keys, std::size_t d_mlp, double lambda, std::size_t layer) {
  if (!(lambda > 0.0)) throw InvalidArgument("covariance: lambda must be positive");
  const auto d = static_cast<Eigen::Index>(d_mlp);
  if (keys.rows() > 0 && keys.cols() != d) throw InvalidArgument("covariance: key width mismatch");
  CovarianceEstimate est;
  est.layer = layer;
  est.n_samples = static_cast<std::size_t>(keys.rows());
  Mat second = Mat::Zero(d, d);
  if (keys.rows() > 0) {
    second.selfadjointView<Eigen::Lower>().rankUpdate(keys.transpose(), 1.0 / static_cast<double>(keys.rows()));
    second.triangularView<Eigen::StrictlyUpper>() = second.transpose();
  }
  double ridge = lambda;
  for (int attempt = 0; attempt <= 3; ++attempt, ridge *= 10.0) {
    est.matrix = second;
    est.matrix.diagonal().array() += ridge;
    est.lambda = ridge;
    est.factor.compute(est.matrix);
    if (est.factor.info() == Eigen::Success) return est;
  }
  throw NumericError("covariance: factorisation failed after ridge escalation; raise lambda");
}

namespace {

std::vector<TokenSeq> corpus_sentences(const FactWorld& world) {
  const Vocabulary vocab = world.vocabulary();
  std::vector<TokenSeq> out;
  for (const auto& [q, a] : world.training_pairs()) {
    TokenSeq s = join_sequence(vocab.encode(q), vocab.encode(a));
    s.push_back(kEos);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Mat> corpus_keys(const ToyModel& model, const FactWorld& world) {
  const auto sentences = corpus_sentences(world);
  std::size_t rows = 0;
  for (const auto& s : sentences) rows += s.size();
  const auto& cfg = model.config();
  std::vector<Mat> keys(cfg.n_layers, Mat(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cfg.d_mlp)));
  constexpr std::size_t kChunk = 64;
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < sentences.size(); i += kChunk) {
    const std::vector<TokenSeq> batch(sentences.begin() + static_cast<long>(i),
                                      sentences.begin() + static_cast<long>(std::min(sentences.size(), i + kChunk)));
    ForwardCache cache;
    model.forward_batch(batch, {}, &cache);
    const auto n = static_cast<Eigen::Index>(cache.tokens.size());
    for (std::size_t l = 0; l < cfg.n_layers; ++l) keys[l].middleRows(at, n) = cache.layers[l].k;
    at += n;
  }
  return keys;
}

}  // namespace

CovarianceEstimate estimate_covariance(const ToyModel& model, const FactWorld& world, std::size_t layer,
                                       double lambda) {
  if (layer >= model.config().n_layers) throw InvalidArgument("estimate_covariance: layer out of range");
  const auto keys = corpus_keys(model, world);
  return covariance_from_keys(keys[layer], model.config().d_mlp, lambda, layer);
}

std::vector<CovarianceEstimate> estimate_covariances(const ToyModel& model, const FactWorld& world,
                                                     double lambda) {
  const auto keys = corpus_keys(model, world);
  std::vector<CovarianceEstimate> out;
  for (std::size_t l = 0; l < keys.size(); ++l)
    out.push_back(covariance_from_keys(keys[l], model.config().d_mlp, lambda, l));
  return out;
}

// ---------------------------------------------------------------- keys

std::vector<TokenSeq> key_prefixes(std::size_t vocab_size, std::size_t n_prefixes, std::uint64_t seed,
                                   std::size_t prefix_len) {
  if (vocab_size <= 3) throw InvalidArgument("key_prefixes: vocabulary has no word tokens");
  Rng rng(mix_seed(seed, 300));
  std::vector<TokenSeq> out(n_prefixes);
  for (auto& p : out)
    for (std::size_t i = 0; i < prefix_len; ++i) p.push_back(static_cast<TokenId>(3 + rng.below(vocab_size - 3)));
  return out;
}

KeyVector compute_key(const ToyModel& model, const TokenSeq& query, std::pair<std::size_t, std::size_t> span,
                      std::size_t layer, std::size_t n_prefixes, std::uint64_t seed, std::size_t prefix_len) {
  if (span.first >= span.second || span.second > query.size())
    throw InvalidArgument("compute_key: subject span out of range");
  if (layer >= model.config().n_layers) throw InvalidArgument("compute_key: layer out of range");
  const auto contexts = key_prefixes(model.config().vocab_size, n_prefixes, seed, prefix_len);

  const auto key_at = [&](const TokenSeq& prefix) {
    TokenSeq seq{kBos};
    seq.insert(seq.end(), prefix.begin(), prefix.end());
    seq.insert(seq.end(), query.begin(), query.end());
    ForwardCache cache;
    model.forward(seq, {}, &cache);
    const auto row = static_cast<Eigen::Index>(1 + prefix.size() + span.second - 1);
    return Vec(cache.layers[layer].k.row(row).transpose());
  };

  KeyVector out;
  out.layer = layer;
  out.vector = key_at({});
  for (const auto& p : contexts) out.vector += key_at(p);
  out.n_contexts_averaged = contexts.size() + 1;
  out.vector /= static_cast<double>(out.n_contexts_averaged);
  return out;
}

// ---------------------------------------------------------------- values

std::vector<Patch> value_patch(const ToyModel& model, std::size_t layer, std::size_t row, const Vec& value) {
  Patch p;
  p.site = Patch::Site::MlpOut;
  p.layer = layer;
  p.pos = row;
  p.value = value.transpose() + model.params().blocks.at(layer).b_out;
  p.additive = false;
  return {p};
}

Vec compute_value(const ToyModel& model, const TokenSeq& query, std::pair<std::size_t, std::size_t> span,
                  const TokenSeq& new_knowledge, std::size_t layer, const EditorSpec& spec) {
  spec.validate();
  if (layer >= model.config().n_layers) throw InvalidArgument("compute_value: layer out of range");
  if (span.first >= span.second || span.second > query.size())
    throw InvalidArgument("compute_value: subject span out of range");
  if (new_knowledge.empty()) throw InvalidArgument("compute_value: empty target");

  const TokenSeq prompt = prompt_of(query);
  TokenSeq seq = prompt;
  seq.insert(seq.end(), new_knowledge.begin(), new_knowledge.end() - 1);
  const std::size_t row = span.second;  // last subject token, shifted by BOS

  TokenSeq subject_prompt{kBos};
  subject_prompt.insert(subject_prompt.end(), query.begin() + static_cast<long>(span.first),
                        query.begin() + static_cast<long>(span.second));
  const std::size_t subject_row = subject_prompt.size() - 1;

  ForwardCache base_cache;
  model.forward(seq, {}, &base_cache);
  const Vec base = (base_cache.layers[layer].k.row(static_cast<Eigen::Index>(row)) *
                    model.params().blocks[layer].w_out)
                       .transpose();

  const Mat anchor_logits = model.logits(subject_prompt);
  const RowVec anchor_row = anchor_logits.row(anchor_logits.rows() - 1);
  const RowVec anchor_log_p = anchor_row.array() - anchor_row.maxCoeff() -
                              std::log((anchor_row.array() - anchor_row.maxCoeff()).exp().sum());
  const RowVec anchor_p = anchor_log_p.array().exp();

  const auto& vo = spec.value_opt;
  // Adam on the displacement, norm-clamped relative to the residual stream
  // at the edit site.
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999;
  Vec delta = Vec::Zero(base.size());
  Vec m1 = Vec::Zero(base.size()), m2 = Vec::Zero(base.size());
  const double max_norm =
      vo.clamp_norm_factor * base_cache.layers[layer].x_mid.row(static_cast<Eigen::Index>(row)).norm();
  for (std::size_t step = 0; step < vo.steps; ++step) {
    Patch patch{Patch::Site::MlpOut, layer, row, delta.transpose(), true};

    ForwardCache cache;
    const Mat lg = model.forward(seq, {patch}, &cache);
    Mat dl = Mat::Zero(lg.rows(), lg.cols());
    double nll = 0.0;
    for (std::size_t i = 0; i < new_knowledge.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(prompt.size() - 1 + i);
      const double mx = lg.row(r).maxCoeff();
      const RowVec e = (lg.row(r).array() - mx).exp();
      const double z = e.sum();
      nll -= lg(r, new_knowledge[i]) - mx - std::log(z);
      dl.row(r) = e / z;
      dl(r, new_knowledge[i]) -= 1.0;
    }
    if (!std::isfinite(nll)) throw NumericError("compute_value: loss diverged");
    if (nll < vo.target_nll) break;
    Vec grad = model.backward(cache, dl, nullptr, {.stop_layer = layer})[0].transpose();

    if (vo.kl_coef > 0.0) {
      patch.pos = subject_row;
      ForwardCache kl_cache;
      const Mat kl_lg = model.forward(subject_prompt, {patch}, &kl_cache);
      const RowVec last = kl_lg.row(kl_lg.rows() - 1);
      const RowVec e = (last.array() - last.maxCoeff()).exp();
      Mat kl_dl = Mat::Zero(kl_lg.rows(), kl_lg.cols());
      kl_dl.row(kl_lg.rows() - 1) = vo.kl_coef * (e / e.sum() - anchor_p);
      grad += model.backward(kl_cache, kl_dl, nullptr, {.stop_layer = layer})[0].transpose();
    }
    grad += 2.0 * vo.weight_decay * delta;
    m1 = kBeta1 * m1 + (1.0 - kBeta1) * grad;
    m2 = kBeta2 * m2 + (1.0 - kBeta2) * grad.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step + 1));
    delta.array() -= vo.step_size * (m1.array() / bc1) / ((m2.array() / bc2).sqrt() + 1e-8);
    if (max_norm > 0.0 && delta.norm() > max_norm) delta *= max_norm / delta.norm();
    if (!delta.allFinite()) throw NumericError("compute_value: displacement diverged");
  }
  return base + delta;
}

// ---------------------------------------------------------------- editors

EditedModel rome_edit(const ToyModel& model, const EditQuery& edit, const EditorSpec& spec,
                      const CovarianceEstimate& cov) {
  spec.validate();
  if (spec.kind == EditorKind::Emmet) throw InvalidArgument("rome_edit: spec is not a ROME variant");
  if (cov.layer != spec.layer) throw InvalidArgument("rome_edit: covariance belongs to another layer");
  const KeyVector key = compute_key(model, edit.query, edit.subject_span, spec.layer, spec.effective_prefixes(),
                                    spec.seed, spec.prefix_len);
  const Vec value = compute_value(model, edit.query, edit.subject_span, edit.new_knowledge, spec.layer, spec);

  EditedModel out{model, key.vector, value};
  auto& w_out = out.model.params().blocks[spec.layer].w_out;
  w_out += rank_one_update(w_out, cov, key.vector, value);
  if (!out.model.params().all_finite()) throw NumericError("rome_edit: non-finite weights");
  return out;
}

EditedModel emmet_edit(const ToyModel& model, const std::vector<EditQuery>& edits, const EditorSpec& spec,
                       const CovarianceEstimate& cov) {
  spec.validate();
  if (edits.empty()) throw InvalidArgument("emmet_edit: empty batch");
  if (cov.layer != spec.layer) throw InvalidArgument("emmet_edit: covariance belongs to another layer");
  const auto& cfg = model.config();
  const auto b = static_cast<Eigen::Index>(edits.size());
  Mat keys(static_cast<Eigen::Index>(cfg.d_mlp), b);
  Mat values(static_cast<Eigen::Index>(cfg.d_model), b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto& e = edits[static_cast<std::size_t>(i)];
    keys.col(i) = compute_key(model, e.query, e.subject_span, spec.layer, spec.effective_prefixes(), spec.seed,
                              spec.prefix_len)
                      .vector;
    values.col(i) = compute_value(model, e.query, e.subject_span, e.new_knowledge, spec.layer, spec);
  }
  EditedModel out{model, keys, values};
  auto& w_out = out.model.params().blocks[spec.layer].w_out;
  w_out += batched_update(w_out, cov, keys, values);
  if (!out.model.params().all_finite()) throw NumericError("emmet_edit: non-finite weights");
  return out;
}

EditedModel apply_edit(const ToyModel& model, const std::vector<EditQuery>& edits, const EditorSpec& spec,
                       const CovarianceEstimate& cov) {
  if (spec.kind == EditorKind::Emmet) return emmet_edit(model, edits, spec, cov);
  if (edits.size() != 1) throw InvalidArgument("apply_edit: ROME variants edit one query at a time");
  return rome_edit(model, edits.front(), spec, cov);
}

}  // namespace lga
