// vladbuff: fit, aggregate, train, evaluate, benchmark and generate data.
//
// Exit codes: 0 success, 1 runtime or numerical error, 2 usage or config error.

#include <vladbuff/vladbuff.hpp>

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string manifest, eval_manifest, bundle, output_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set train.lr=0.01");
  cmd->add_option("--manifest", c.manifest, "Dataset manifest (JSON Lines)");
  cmd->add_option("--eval-manifest", c.eval_manifest, "Evaluation manifest");
  cmd->add_option("--bundle", c.bundle, "Model bundle directory");
  cmd->add_option("--output-dir", c.output_dir, "Output directory");
}

// File, then environment, then --set, then the explicit path flags.
vladbuff::PipelineConfig resolve(const Common& c) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config_path.empty()) {
    std::ifstream is(c.config_path);
    j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw vladbuff::ConfigError("malformed config " + c.config_path);
  }
  vladbuff::apply_env_overrides(j, [](const char* name) { return std::getenv(name); });
  for (const auto& o : c.overrides) vladbuff::apply_override(j, o);
  if (!c.manifest.empty()) j["manifest"] = c.manifest;
  if (!c.eval_manifest.empty()) j["eval_manifest"] = c.eval_manifest;
  if (!c.bundle.empty()) j["bundle"] = c.bundle;
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  auto cfg = vladbuff::config_from_json(j);
  vladbuff::log_config(cfg, std::cerr);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Burst-aware VLAD aggregation and retrieval evaluation"};
  app.require_subcommand(1);
  Common common;

  auto* fit = app.add_subcommand("fit", "Fit projection and vocabulary; write a model bundle");
  add_common(fit, common);

  bool force = false;
  auto* agg = app.add_subcommand("aggregate", "Write a global descriptor for every manifest entry");
  add_common(agg, common);
  agg->add_flag("--force", force, "Recompute descriptors that are up to date");

  bool check_grads = false;
  auto* trn = app.add_subcommand("train", "Train the aggregation layer with triplet loss");
  add_common(trn, common);
  trn->add_flag("--check-grads", check_grads, "Run the finite-difference gradient suite instead of training");

  bool compare = false;
  std::string baseline;
  auto* ev = app.add_subcommand("eval", "Compute Recall@K on the evaluation manifest");
  add_common(ev, common);
  ev->add_flag("--compare", compare, "Also score a vanilla baseline and report per-K deltas");
  ev->add_option("--baseline", baseline, "Baseline bundle (default: this bundle with burst discounting off)");

  auto* bench = app.add_subcommand("bench", "Time aggregation across pre-pool dimensions");
  add_common(bench, common);

  std::string report_path, svg_path;
  auto* plot = app.add_subcommand("plot", "Render a bench report as SVG");
  plot->add_option("report", report_path, "bench.json")->required();
  plot->add_option("-o,--output", svg_path, "SVG path")->required();

  auto* gen = app.add_subcommand("gen", "Generate the synthetic burst benchmark");
  add_common(gen, common);

  auto* show = app.add_subcommand("config", "Print the resolved config and its hash");
  add_common(show, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (plot->parsed()) {
      vladbuff::cmd_plot(report_path, svg_path);
      return 0;
    }
    const auto cfg = resolve(common);
    if (fit->parsed()) {
      vladbuff::cmd_fit(cfg, std::cerr);
    } else if (agg->parsed()) {
      vladbuff::cmd_aggregate(cfg, force, std::cerr);
    } else if (trn->parsed()) {
      if (check_grads) return vladbuff::cmd_check_grads(cfg, std::cerr).passed ? 0 : 1;
      vladbuff::cmd_train(cfg, std::cerr);
    } else if (ev->parsed()) {
      std::cout << vladbuff::cmd_eval(cfg, compare, baseline, std::cerr).dump(2) << '\n';
    } else if (bench->parsed()) {
      std::cout << vladbuff::to_json(vladbuff::cmd_bench(cfg, std::cerr)).dump(2) << '\n';
    } else if (gen->parsed()) {
      vladbuff::cmd_gen(cfg, std::cerr);
    } else if (show->parsed()) {
      std::cout << vladbuff::to_json(cfg).dump(2) << "\nconfig_hash " << vladbuff::config_hash(cfg) << '\n';
    }
    return 0;
  } catch (const vladbuff::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
