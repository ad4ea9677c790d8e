// SPDX-License-Identifier: Apache-2.0
#include "lga/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "lga/editors.hpp"
#include "lga/error.hpp"

namespace lga {

std::string artifact::scores(ScoreMethod m) { return "scores_" + to_string(m) + ".txt"; }

namespace {

namespace fs = std::filesystem;

template <typename Writer>
void atomically(const fs::path& path, Writer&& write) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  write(tmp);
  fs::rename(tmp, path);
}

std::string hash_line(const RunConfig& cfg, Stage stage) { return "config_hash=" + hash_hex(stage_hash(cfg, stage)); }

fs::path at(const RunConfig& cfg, const std::string& name) { return cfg.out_dir / name; }

void require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput(p.string());
}

void check_hash(const fs::path& p, const std::string& found, const RunConfig& cfg, Stage stage) {
  if (found != hash_hex(stage_hash(cfg, stage)))
    throw ConfigMismatch("config-mismatch:" + p.string());
}

/// First line of a text artifact, expected to be "# config_hash=<hex>".
std::string leading_hash(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  const std::string prefix = "# config_hash=";
  return line.rfind(prefix, 0) == 0 ? line.substr(prefix.size()) : std::string();
}

void write_resolved_config(const RunConfig& cfg) { write_file(at(cfg, artifact::kConfig), config_to_json(cfg)); }

ModelConfig model_config(const RunConfig& cfg, const FactWorld& world) {
  ModelConfig m = cfg.model;
  m.vocab_size = world.vocabulary().size();
  return m;
}

struct Loaded {
  FactWorld world;
  Vocabulary vocab;
  std::vector<EditQuery> edits;
  ProxyTestSplit split;
  ToyModel model;
};

Loaded load_all(const RunConfig& cfg) {
  Loaded l;
  l.world = load_world_checked(cfg);
  l.vocab = l.world.vocabulary();
  l.edits = load_edits_checked(cfg, l.vocab);
  l.split = split_proxy_test(l.edits, cfg.proxy_fraction, cfg.seed);
  l.model = load_model_checked(cfg);
  return l;
}

EditorSpec editor_of(const RunConfig& cfg) {
  EditorSpec s = cfg.editor;
  s.seed = cfg.seed;
  return s;
}

CmaOptions cma_of(const RunConfig& cfg) {
  CmaOptions o = cfg.cma;
  o.seed = cfg.seed;
  return o;
}

SweepOptions sweep_of(const RunConfig& cfg) {
  SweepOptions o;
  o.metric = cfg.metric;
  o.weights = cfg.weights;
  o.threads = cfg.threads;
  return o;
}

LayerScoreTable score(const RunConfig& cfg, const ToyModel& model, const std::vector<EditQuery>& proxy,
                      ScoreMethod method) {
  if (method == ScoreMethod::Lga) return lga_scores(model, proxy, cfg.lga);
  if (method == ScoreMethod::Cma) return cma_scores(model, proxy, cma_of(cfg));
  throw InvalidArgument("attr: method must be lga or cma");
}

void write_scores(const RunConfig& cfg, const LayerScoreTable& t) {
  write_file(at(cfg, artifact::scores(t.method)), "# " + hash_line(cfg, Stage::Attr) + "\n" + t.to_text());
}

}  // namespace

void write_file(const fs::path& path, const std::string& bytes) {
  atomically(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << bytes;
  });
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput(path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

FactWorld load_world_checked(const RunConfig& cfg) {
  const auto p = at(cfg, artifact::kWorld);
  require(p);
  std::string hash;
  FactWorld w = load_world(p, &hash);
  check_hash(p, hash, cfg, Stage::Gen);
  return w;
}

std::vector<EditQuery> load_edits_checked(const RunConfig& cfg, const Vocabulary& vocab) {
  const auto p = at(cfg, artifact::kEdits);
  require(p);
  check_hash(p, leading_hash(p), cfg, Stage::Gen);
  return deserialize_edits(p, vocab);
}

ToyModel load_model_checked(const RunConfig& cfg) {
  const auto p = at(cfg, artifact::kModel);
  require(p);
  std::uint64_t tag = 0;
  ToyModel m = ToyModel::load(p, nullptr, &tag);
  if (tag != stage_hash(cfg, Stage::Train)) throw ConfigMismatch("config-mismatch:" + p.string());
  return m;
}

// ---------------------------------------------------------------- commands

void cmd_gen(const RunConfig& cfg) {
  cfg.validate();
  write_resolved_config(cfg);
  const FactWorld world = generate_world(cfg.seed, cfg.world.n_entities, cfg.world.n_relations, cfg.world.n_facts);
  const Vocabulary vocab = world.vocabulary();
  const auto edits = build_edit_set(world, cfg.world.n_edits, cfg.seed);
  const std::string hash = hash_hex(stage_hash(cfg, Stage::Gen));
  atomically(at(cfg, artifact::kVocab), [&](const fs::path& tmp) { vocab.save(tmp); });
  atomically(at(cfg, artifact::kWorld), [&](const fs::path& tmp) { save_world(tmp, world, hash); });
  atomically(at(cfg, artifact::kEdits),
             [&](const fs::path& tmp) { serialize_edits(tmp, edits, vocab, "config_hash=" + hash); });
}

TrainingLog cmd_train(const RunConfig& cfg) {
  cfg.validate();
  write_resolved_config(cfg);
  const FactWorld world = load_world_checked(cfg);
  ToyModel model = init_model(model_config(cfg, world), cfg.seed);
  const TrainingLog log =
      train_memorize(model, world, cfg.train.stop_accuracy, cfg.train.max_steps, cfg.seed, cfg.train.options);
  atomically(at(cfg, artifact::kModel),
             [&](const fs::path& tmp) { model.save(tmp, stage_hash(cfg, Stage::Train)); });
  write_file(at(cfg, artifact::kTrainLog), "# " + hash_line(cfg, Stage::Train) + "\n" + log.to_text());
  return log;
}

LayerScoreTable cmd_attr(const RunConfig& cfg, ScoreMethod method) {
  cfg.validate();
  write_resolved_config(cfg);
  const Loaded l = load_all(cfg);
  const LayerScoreTable t = score(cfg, l.model, l.split.proxy, method);
  write_scores(cfg, t);
  return t;
}

std::vector<OutcomeRow> cmd_edit(const RunConfig& cfg, const std::string& layer_choice,
                                 const std::vector<std::string>& ids) {
  cfg.validate();
  write_resolved_config(cfg);
  const Loaded l = load_all(cfg);

  std::size_t layer = 0;
  if (layer_choice == "lga" || layer_choice == "cma") {
    const auto method = layer_choice == "lga" ? ScoreMethod::Lga : ScoreMethod::Cma;
    const LayerScoreTable t = score(cfg, l.model, l.split.proxy, method);
    write_scores(cfg, t);
    layer = t.selected_layer;
  } else {
    std::size_t used = 0;
    long long v = -1;
    try {
      v = std::stoll(layer_choice, &used);
    } catch (const std::exception&) {
    }
    if (used != layer_choice.size() || v < 0 || static_cast<std::size_t>(v) >= l.model.config().n_layers)
      throw ValidationError("layer: expected an index below " + std::to_string(l.model.config().n_layers) +
                            ", lga or cma; got '" + layer_choice + "'");
    layer = static_cast<std::size_t>(v);
  }

  std::map<std::string, const EditQuery*> by_id;
  for (const auto& e : l.edits) by_id[e.id] = &e;
  std::vector<EditQuery> chosen;
  if (ids.empty()) {
    chosen.push_back(l.split.test.front());
  } else {
    for (const auto& id : ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw ValidationError("samples: unknown sample id '" + id + "'");
      chosen.push_back(*it->second);
    }
  }

  EditorSpec spec = editor_of(cfg);
  spec.layer = layer;
  const CovarianceEstimate cov = estimate_covariance(l.model, l.world, layer, spec.covariance_reg);
  const std::uint64_t tag = stage_hash(cfg, Stage::Edit);
  const std::size_t group = spec.kind == EditorKind::Emmet ? spec.batch_size : 1;

  std::vector<OutcomeRow> rows;
  for (std::size_t begin = 0; begin < chosen.size(); begin += group) {
    const std::vector<EditQuery> batch(chosen.begin() + static_cast<long>(begin),
                                       chosen.begin() + static_cast<long>(std::min(chosen.size(), begin + group)));
    const EditedModel edited = apply_edit(l.model, batch, spec, cov);
    const std::string name = to_string(spec.kind) + "_L" + std::to_string(layer) + "_" + batch.front().id + ".ckpt";
    atomically(cfg.out_dir / artifact::kEditedDir / name, [&](const fs::path& tmp) { edited.model.save(tmp, tag); });
    for (const auto& e : batch) rows.push_back({layer, e.id, evaluate_edit(l.model, edited.model, e, cfg.weights), {}});
  }
  write_file(at(cfg, artifact::kEditMetrics), outcomes_to_csv(rows, hash_line(cfg, Stage::Edit)));
  return rows;
}

SweepResult cmd_sweep(const RunConfig& cfg) {
  cfg.validate();
  write_resolved_config(cfg);
  const Loaded l = load_all(cfg);
  const std::string hash = hash_line(cfg, Stage::Edit);
  const auto covs = estimate_covariances(l.model, l.world, cfg.editor.covariance_reg);
  SweepResult r = layer_sweep(l.model, l.edits, editor_of(cfg), covs, sweep_of(cfg));
  const std::size_t n_layers = l.model.config().n_layers;
  const ProxyReport proxy = proxy_generalization(select_samples(r.outcomes, l.split.proxy),
                                                 select_samples(r.outcomes, l.split.test), n_layers, cfg.metric);

  write_file(at(cfg, artifact::kOutcomes), outcomes_to_csv(r.outcomes, hash));
  write_file(at(cfg, artifact::kSweepReport), "# " + hash + "\n" + r.report.to_text());
  write_file(at(cfg, artifact::kHeatmap), "# " + hash + "\n" + heatmap_text({{"toy", &r.report}}));
  write_file(at(cfg, artifact::kProxyReport), "# " + hash + "\n" + proxy.to_text());
  return r;
}

std::vector<ComparisonRow> cmd_compare(const RunConfig& cfg) {
  cfg.validate();
  write_resolved_config(cfg);
  const Loaded l = load_all(cfg);
  const std::string hash = hash_line(cfg, Stage::Edit);

  const RuntimeBenchmark bench =
      runtime_benchmark(l.model, l.world, l.split.proxy, editor_of(cfg), cfg.lga, cma_of(cfg), sweep_of(cfg));
  write_scores(cfg, bench.lga);
  write_scores(cfg, bench.cma);

  const auto covs = estimate_covariances(l.model, l.world, cfg.editor.covariance_reg);
  std::vector<ComparisonRow> rows;
  for (const auto kind : {EditorKind::Rome, EditorKind::RRome, EditorKind::Emmet}) {
    EditorSpec spec = editor_of(cfg);
    spec.kind = kind;
    for (const auto* table : {&bench.lga, &bench.cma}) {
      SweepOptions opts = sweep_of(cfg);
      opts.layers = {table->selected_layer};
      std::vector<MetricVector> ms;
      for (const auto& row : run_edits(l.model, l.split.test, spec, covs, opts)) ms.push_back(row.metrics);
      rows.push_back({to_string(kind), to_string(table->method), table->selected_layer, aggregate(ms)});
    }
  }
  write_file(at(cfg, artifact::kComparison), "# " + hash + "\n" + comparison_to_text(rows));
  write_file(at(cfg, artifact::kRuntime), "# " + hash + "\n" + bench.timing.to_text());
  return rows;
}

}  // namespace lga
