// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <sstream>

#include "lga/corpus.hpp"
#include "lga/error.hpp"
#include "lga/model.hpp"
#include "lga/random.hpp"

namespace lga {

namespace {

struct Sentence {
  TokenSeq prompt;
  TokenSeq answer;
  TokenSeq full;  // prompt + answer + EOS
};

std::vector<Sentence> training_sentences(const FactWorld& world) {
  const Vocabulary vocab = world.vocabulary();
  std::vector<Sentence> out;
  for (const auto& [q, a] : world.training_pairs()) {
    Sentence s;
    s.prompt = prompt_of(vocab.encode(q));
    s.answer = vocab.encode(a);
    s.full = s.prompt;
    s.full.insert(s.full.end(), s.answer.begin(), s.answer.end());
    s.full.push_back(kEos);
    out.push_back(std::move(s));
  }
  return out;
}

struct FitCheck {
  double accuracy = 0.0;
  double worst_nll = 0.0;  // largest mean per-token NLL over answer + EOS
};

/// Batched teacher-forced check that each answer is the greedy continuation.
FitCheck batch_fit(const ToyModel& model, const std::vector<Sentence>& data) {
  constexpr std::size_t kChunk = 64;
  FitCheck out;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); i += kChunk) {
    std::vector<TokenSeq> batch;
    const std::size_t end = std::min(data.size(), i + kChunk);
    for (std::size_t j = i; j < end; ++j) batch.push_back(data[j].full);
    ForwardCache cache;
    const Mat lg = model.forward_batch(batch, {}, &cache);
    for (std::size_t j = i; j < end; ++j) {
      const std::size_t base = cache.seg_start[j - i] + data[j].prompt.size() - 1;
      const std::size_t n = data[j].answer.size() + 1;
      bool ok = true;
      double nll = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const auto row = lg.row(static_cast<Eigen::Index>(base + t));
        const TokenId target = data[j].full[data[j].prompt.size() + t];
        const double mx = row.maxCoeff();
        nll -= row(target) - mx - std::log((row.array() - mx).exp().sum());
        if (t + 1 == n) break;
        Eigen::Index best = 0;
        for (Eigen::Index v = 1; v < row.size(); ++v)
          if (row(v) > row(best)) best = v;
        ok = ok && best == target;
      }
      correct += ok;
      out.worst_nll = std::max(out.worst_nll, nll / static_cast<double>(n));
    }
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return out;
}

}  // namespace

bool TrainingLog::operator==(const TrainingLog& o) const {
  if (steps != o.steps || final_accuracy != o.final_accuracy || final_answer_nll != o.final_answer_nll ||
      status != o.status)
    return false;
  if (entries.size() != o.entries.size()) return false;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].step != o.entries[i].step || entries[i].loss != o.entries[i].loss ||
        entries[i].accuracy != o.entries[i].accuracy)
      return false;
  return true;
}

std::string TrainingLog::to_text() const {
  std::ostringstream out;
  out << "step,loss,accuracy\n";
  char buf[160];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e.step, e.loss, e.accuracy);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "# steps=%zu final_accuracy=%.17g final_answer_nll=%.17g status=%s\n", steps,
                final_accuracy, final_answer_nll, status == Status::Converged ? "converged" : "underfit");
  out << buf;
  return out.str();
}

double fact_accuracy(const ToyModel& model, const FactWorld& world) {
  return batch_fit(model, training_sentences(world)).accuracy;
}

TrainingLog train_memorize(ToyModel& model, const FactWorld& world, double stop_accuracy,
                           std::size_t max_steps, std::uint64_t seed, const TrainOptions& opts) {
  if (!(stop_accuracy > 0.0 && stop_accuracy <= 1.0))
    throw InvalidArgument("train_memorize: stop accuracy must be in (0, 1]");
  if (world.vocabulary().size() != model.config().vocab_size)
    throw InvalidArgument("train_memorize: model vocabulary does not match the world");
  const auto data = training_sentences(world);
  TrainingLog log;

  Parameters m = Parameters::zeros(model.config());
  Parameters v = Parameters::zeros(model.config());
  Parameters g = Parameters::zeros(model.config());
  auto p_spans = model.params().spans();
  auto m_spans = m.spans();
  auto v_spans = v.spans();
  auto g_spans = g.spans();

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  Rng rng(mix_seed(seed, 200));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  double loss_acc = 0.0;
  std::size_t loss_n = 0;

  FitCheck fit = batch_fit(model, data);
  const auto fitted = [&] { return fit.accuracy >= stop_accuracy && fit.worst_nll <= opts.stop_answer_nll; };
  log.entries.push_back({0, model.loss_full(data.front().full), fit.accuracy});
  std::size_t step = 0;
  while (!fitted() && step < max_steps) {
    std::vector<TokenSeq> batch;
    while (batch.size() < opts.batch_size) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]].full);
    }
    ForwardCache cache;
    const Mat lg = model.forward_batch(batch, {}, &cache);
    Mat dl;
    const double loss = next_token_loss(lg, cache, &dl);
    for (auto s : g_spans) std::fill(s.begin(), s.end(), 0.0);
    model.backward(cache, dl, &g);

    double norm2 = 0.0;
    for (auto s : g_spans)
      for (double x : s) norm2 += x * x;
    const double clip = std::sqrt(norm2) > opts.grad_clip ? opts.grad_clip / std::sqrt(norm2) : 1.0;

    ++step;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
    for (std::size_t t = 0; t < p_spans.size(); ++t) {
      auto p = p_spans[t], mt = m_spans[t], vt = v_spans[t], gt = g_spans[t];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = gt[i] * clip;
        mt[i] = kBeta1 * mt[i] + (1 - kBeta1) * gi;
        vt[i] = kBeta2 * vt[i] + (1 - kBeta2) * gi * gi;
        p[i] -= opts.learning_rate * (mt[i] / bc1) / (std::sqrt(vt[i] / bc2) + kEps);
      }
    }
    if (!model.params().all_finite()) throw NumericError("train_memorize: non-finite parameters");

    loss_acc += loss;
    ++loss_n;
    if (step % opts.eval_every == 0 || step == max_steps) {
      fit = batch_fit(model, data);
      log.entries.push_back({step, loss_acc / static_cast<double>(loss_n), fit.accuracy});
      loss_acc = 0.0;
      loss_n = 0;
    }
  }
  log.steps = step;
  log.final_accuracy = fit.accuracy;
  log.final_answer_nll = fit.worst_nll;
  log.status = fitted() ? TrainingLog::Status::Converged : TrainingLog::Status::Underfit;
  return log;
}

}  // namespace lga
