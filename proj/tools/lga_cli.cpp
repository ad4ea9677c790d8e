// SPDX-License-Identifier: Apache-2.0
//
// lga_cli gen|train|attr|edit|sweep|compare [--config PATH] [--seed N]
//         [--out DIR] [--threads N] [--editor KIND] [--metric NAME]
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "lga/error.hpp"
#include "lga/pipeline.hpp"

namespace {

std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string id;
  while (std::getline(in, id, ','))
    if (!id.empty()) out.push_back(id);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer selection and knowledge-editing lab"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir, editor, metric;
  std::optional<std::size_t> threads;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--threads", threads, "worker cap")->check(CLI::PositiveNumber);
  app.add_option("--editor", editor, "rome | r-rome | emmet");
  app.add_option("--metric", metric, "golden-layer selection metric: rewrite | overall");

  auto* gen = app.add_subcommand("gen", "generate vocabulary, world and edit set");
  auto* train = app.add_subcommand("train", "train the model to memorize the world");
  auto* attr = app.add_subcommand("attr", "score layers on the proxy split");
  std::string method = "lga";
  attr->add_option("--method", method, "lga | cma")->check(CLI::IsMember({"lga", "cma"}));
  auto* edit = app.add_subcommand("edit", "edit samples at one layer");
  std::string layer = "lga", samples;
  edit->add_option("--layer", layer, "layer index | lga | cma");
  edit->add_option("--samples", samples, "comma-separated sample ids (default: first test sample)");
  auto* sweep = app.add_subcommand("sweep", "brute-force layer sweep over every edit");
  auto* compare = app.add_subcommand("compare", "LGA vs CMA selection and runtime benchmark");

  CLI11_PARSE(app, argc, argv);

  try {
    lga::RunConfig cfg = config_path.empty() ? lga::RunConfig{} : lga::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out_dir) cfg.out_dir = *out_dir;
    if (threads) cfg.threads = *threads;
    if (editor) {
      try {
        cfg.editor.kind = lga::editor_kind_from_string(*editor);
      } catch (const lga::InvalidArgument& e) {
        throw lga::ValidationError(std::string("editor: ") + e.what());
      }
    }
    if (metric) {
      try {
        cfg.metric = lga::selection_metric_from_string(*metric);
      } catch (const lga::InvalidArgument& e) {
        throw lga::ValidationError(std::string("metric: ") + e.what());
      }
    }

    if (*gen) {
      lga::cmd_gen(cfg);
      std::printf("gen: wrote %s\n", (cfg.out_dir / lga::artifact::kEdits).c_str());
    } else if (*train) {
      const auto log = lga::cmd_train(cfg);
      std::printf("train: %zu steps, accuracy %.4f, worst answer nll %.4f, %s\n", log.steps, log.final_accuracy,
                  log.final_answer_nll, log.status == lga::TrainingLog::Status::Converged ? "converged" : "underfit");
    } else if (*attr) {
      const auto t = lga::cmd_attr(cfg, method == "lga" ? lga::ScoreMethod::Lga : lga::ScoreMethod::Cma);
      std::printf("attr: %s selects layer %zu\n", method.c_str(), t.selected_layer);
    } else if (*edit) {
      const auto rows = lga::cmd_edit(cfg, layer, split_ids(samples));
      for (const auto& r : rows)
        std::printf("edit: %s layer %zu rewrite %.0f overall %.4f\n", r.sample_id.c_str(), r.layer, r.metrics.rewrite,
                    r.metrics.overall);
    } else if (*sweep) {
      const auto r = lga::cmd_sweep(cfg);
      std::printf("sweep: golden layer %zu, %s %.4f (sample-wise optimal %.4f)\n", r.report.golden_layer,
                  lga::to_string(r.report.metric).c_str(), lga::selection_value(r.report.golden, r.report.metric),
                  lga::selection_value(r.report.sample_wise_optimal, r.report.metric));
    } else if (*compare) {
      const auto rows = lga::cmd_compare(cfg);
      std::cout << lga::comparison_to_text(rows);
    }
  } catch (const lga::MissingInput& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const lga::ConfigMismatch& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  } catch (const lga::ValidationError& e) {
    std::fprintf(stderr, "invalid-config:%s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error:%s\n", e.what());
    return 1;
  }
  return 0;
}
