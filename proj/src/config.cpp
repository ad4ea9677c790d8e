// SPDX-License-Identifier: Apache-2.0
#include "lga/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lga/error.hpp"

namespace lga {

using nlohmann::json;

namespace {

std::string site_name(CmaOptions::Site s) { return s == CmaOptions::Site::MlpOut ? "mlp_out" : "residual"; }

CmaOptions::Site site_from(const std::string& s) {
  if (s == "mlp_out") return CmaOptions::Site::MlpOut;
  if (s == "residual") return CmaOptions::Site::Residual;
  throw ValidationError("cma.site: expected mlp_out or residual, got '" + s + "'");
}

json model_json(const ModelConfig& m) {
  return {{"n_layers", m.n_layers}, {"d_model", m.d_model}, {"n_heads", m.n_heads},
          {"d_mlp", m.d_mlp},       {"context_len", m.context_len}};
}

json world_json(const RunConfig& c) {
  return {{"n_entities", c.world.n_entities}, {"n_relations", c.world.n_relations},
          {"n_facts", c.world.n_facts}, {"n_edits", c.world.n_edits}};
}

json train_json(const TrainSpec& t) {
  return {{"stop_accuracy", t.stop_accuracy},          {"max_steps", t.max_steps},
          {"learning_rate", t.options.learning_rate}, {"batch_size", t.options.batch_size},
          {"eval_every", t.options.eval_every},       {"grad_clip", t.options.grad_clip},
          {"stop_answer_nll", t.options.stop_answer_nll}};
}

json editor_json(const EditorSpec& e) {
  const auto& v = e.value_opt;
  return {{"kind", to_string(e.kind)},
          {"covariance_reg", e.covariance_reg},
          {"context_prefixes", e.context_prefixes},
          {"prefix_len", e.prefix_len},
          {"batch_size", e.batch_size},
          {"value_opt",
           {{"steps", v.steps},
            {"step_size", v.step_size},
            {"weight_decay", v.weight_decay},
            {"kl_coef", v.kl_coef},
            {"target_nll", v.target_nll},
            {"clamp_norm_factor", v.clamp_norm_factor}}}};
}

json attribution_json(const RunConfig& c) {
  return {{"tukey_k", c.lga.tukey_k},
          {"exclude_outliers", c.lga.exclude_outliers},
          {"cma_noise_seeds", c.cma.noise_seeds},
          {"cma_noise_scale", c.cma.noise_scale},
          {"cma_site", site_name(c.cma.site)}};
}

json eval_json(const RunConfig& c) {
  const auto& w = c.weights;
  return {{"proxy_fraction", c.proxy_fraction},
          {"metric", to_string(c.metric)},
          {"weights",
           {{"rewrite", w.rewrite},
            {"rephrase", w.rephrase},
            {"locality", w.locality},
            {"portability", w.portability},
            {"fluency", w.fluency}}}};
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"model", model_json(c.model)},
          {"world", world_json(c)},
          {"train", train_json(c.train)},
          {"editor", editor_json(c.editor)},
          {"attribution", attribution_json(c)},
          {"eval", eval_json(c)},
          {"threads", c.threads},
          {"out", c.out_dir.string()}};
}

bool same_kind(const json& def, const json& v) {
  if (def.is_number_unsigned()) return v.is_number_unsigned();
  if (def.is_number()) return v.is_number();
  return def.type() == v.type();
}

void check_against(const json& def, const json& in, const std::string& where) {
  if (!in.is_object()) throw ValidationError((where.empty() ? "config" : where) + ": expected an object");
  for (const auto& [key, value] : in.items()) {
    const std::string name = where.empty() ? key : where + "." + key;
    if (!def.contains(key)) throw ValidationError(name + ": unknown key");
    const json& d = def.at(key);
    if (d.is_object())
      check_against(d, value, name);
    else if (!same_kind(d, value))
      throw ValidationError(name + ": expected " + std::string(d.is_number_unsigned() ? "non-negative integer"
                                                                                       : d.type_name()));
  }
}

}  // namespace

void RunConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ValidationError(what); };
  try {
    ModelConfig m = model;
    if (m.vocab_size == 0) m.vocab_size = 4;  // filled in from the world later
    m.validate();
  } catch (const InvalidArgument& e) {
    fail(std::string("model: ") + e.what());
  }
  if (world.n_entities < 2) fail("world.n_entities: need at least 2");
  if (world.n_relations < 1) fail("world.n_relations: need at least 1");
  if (world.n_facts < 1) fail("world.n_facts: need at least 1");
  if (world.n_facts > world.n_entities * world.n_relations) fail("world.n_facts: exceeds entities x relations");
  if (world.n_edits < 10) fail("world.n_edits: need at least 10 for a proxy/test split");
  if (world.n_edits > world.n_facts) fail("world.n_edits: exceeds n_facts");
  if (!(train.stop_accuracy > 0.0 && train.stop_accuracy <= 1.0)) fail("train.stop_accuracy: must be in (0, 1]");
  if (!(train.options.learning_rate > 0.0)) fail("train.learning_rate: must be positive");
  if (train.options.batch_size < 1) fail("train.batch_size: must be positive");
  if (train.options.eval_every < 1) fail("train.eval_every: must be positive");
  if (!(train.options.stop_answer_nll > 0.0)) fail("train.stop_answer_nll: must be positive");
  try {
    editor.validate();
  } catch (const InvalidArgument& e) {
    fail(e.what());
  }
  if (!(lga.tukey_k >= 0.0)) fail("attribution.tukey_k: must be non-negative");
  if (cma.noise_seeds < 1) fail("attribution.cma_noise_seeds: must be positive");
  if (!(proxy_fraction > 0.0 && proxy_fraction < 1.0)) fail("eval.proxy_fraction: must be in (0, 1)");
  try {
    (void)overall_of(MetricVector{}, weights);
  } catch (const InvalidArgument&) {
    fail("eval.weights: must not sum to zero");
  }
  if (threads < 1) fail("threads: must be positive");
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t stage_hash(const RunConfig& c, Stage stage) {
  json j = {{"seed", c.seed}, {"world", world_json(c)}};
  if (stage != Stage::Gen) {
    j["model"] = model_json(c.model);
    j["train"] = train_json(c.train);
  }
  if (stage == Stage::Attr) {
    j["attribution"] = attribution_json(c);
    j["proxy_fraction"] = c.proxy_fraction;
  }
  if (stage == Stage::Edit) {
    j["editor"] = editor_json(c.editor);
    j["attribution"] = attribution_json(c);
    j["eval"] = eval_json(c);
  }
  j["stage"] = static_cast<int>(stage);
  return fnv1a(j.dump());
}

std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig config_from_json(const std::string& text) {
  json in;
  try {
    in = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  json merged = to_json(RunConfig{});
  check_against(merged, in, "");
  merged.merge_patch(in);

  RunConfig c;
  c.seed = merged["seed"];
  const auto& m = merged["model"];
  c.model.n_layers = m["n_layers"];
  c.model.d_model = m["d_model"];
  c.model.n_heads = m["n_heads"];
  c.model.d_mlp = m["d_mlp"];
  c.model.context_len = m["context_len"];
  const auto& w = merged["world"];
  c.world.n_entities = w["n_entities"];
  c.world.n_relations = w["n_relations"];
  c.world.n_facts = w["n_facts"];
  c.world.n_edits = w["n_edits"];
  const auto& t = merged["train"];
  c.train.stop_accuracy = t["stop_accuracy"];
  c.train.max_steps = t["max_steps"];
  c.train.options.learning_rate = t["learning_rate"];
  c.train.options.batch_size = t["batch_size"];
  c.train.options.eval_every = t["eval_every"];
  c.train.options.grad_clip = t["grad_clip"];
  c.train.options.stop_answer_nll = t["stop_answer_nll"];
  const auto& e = merged["editor"];
  try {
    c.editor.kind = editor_kind_from_string(e["kind"]);
  } catch (const InvalidArgument& err) {
    throw ValidationError(std::string("editor.kind: ") + err.what());
  }
  c.editor.covariance_reg = e["covariance_reg"];
  c.editor.context_prefixes = e["context_prefixes"];
  c.editor.prefix_len = e["prefix_len"];
  c.editor.batch_size = e["batch_size"];
  const auto& v = e["value_opt"];
  c.editor.value_opt.steps = v["steps"];
  c.editor.value_opt.step_size = v["step_size"];
  c.editor.value_opt.weight_decay = v["weight_decay"];
  c.editor.value_opt.kl_coef = v["kl_coef"];
  c.editor.value_opt.target_nll = v["target_nll"];
  c.editor.value_opt.clamp_norm_factor = v["clamp_norm_factor"];
  const auto& a = merged["attribution"];
  c.lga.tukey_k = a["tukey_k"];
  c.lga.exclude_outliers = a["exclude_outliers"];
  c.cma.noise_seeds = a["cma_noise_seeds"];
  c.cma.noise_scale = a["cma_noise_scale"];
  c.cma.site = site_from(a["cma_site"]);
  const auto& ev = merged["eval"];
  c.proxy_fraction = ev["proxy_fraction"];
  try {
    c.metric = selection_metric_from_string(ev["metric"]);
  } catch (const InvalidArgument& err) {
    throw ValidationError(std::string("eval.metric: ") + err.what());
  }
  const auto& wt = ev["weights"];
  c.weights.rewrite = wt["rewrite"];
  c.weights.rephrase = wt["rephrase"];
  c.weights.locality = wt["locality"];
  c.weights.portability = wt["portability"];
  c.weights.fluency = wt["fluency"];
  c.threads = merged["threads"];
  c.out_dir = merged["out"].get<std::string>();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInput(path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

}  // namespace lga
