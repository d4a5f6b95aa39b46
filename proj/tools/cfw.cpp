// cfw: train, precompute, serve, demo.
//
// Exit codes: 0 ok, 1 internal failure, 2 bad input (config, data, stale artifacts),
// 3 environment (bind failure).

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "cfw/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string artifacts;
  std::string train_file, test_file;
  std::optional<std::size_t> workers;
  std::string bind;
  bool force = false;
};

cfw::PipelineConfig resolve(const Overrides& o) {
  auto cfg = o.config.empty() ? cfw::PipelineConfig{} : cfw::load_pipeline_config(o.config);
  if (const char* env = std::getenv("CF_WORKBENCH_ARTIFACTS"); env && *env) cfg.artifacts = env;
  if (!o.artifacts.empty()) cfg.artifacts = o.artifacts;
  if (o.seed) cfg.seed = *o.seed;
  if (!o.train_file.empty()) cfg.dataset.train = o.train_file;
  if (!o.test_file.empty()) cfg.dataset.test = o.test_file;
  if (o.workers) cfg.workers = *o.workers;
  if (!o.bind.empty()) cfg.server.bind = o.bind;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual workbench for time-series classifiers"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("-c,--config", o.config, "Pipeline config JSON")->check(CLI::ExistingFile);
  app.add_option("-s,--seed", o.seed, "Master seed");
  app.add_option("-a,--artifacts", o.artifacts, "Artifact directory (else $CF_WORKBENCH_ARTIFACTS, else config)");
  app.add_option("--train-file", o.train_file, "UCR-format train split");
  app.add_option("--test-file", o.test_file, "UCR-format test split");
  app.add_option("-j,--workers", o.workers, "Worker threads (0 = hardware concurrency)");

  auto* train = app.add_subcommand("train", "Train the classifier and write model.json + train_report.json");
  auto* pre = app.add_subcommand("precompute", "Build feature caches, projections and decision maps");
  pre->add_flag("-f,--force", o.force, "Rebuild artifacts made from another model or dataset");
  auto* serve = app.add_subcommand("serve", "Serve the HTTP API until SIGTERM/SIGINT");
  serve->add_option("-b,--bind", o.bind, "host:port (port 0 picks a free port)");
  auto* demo = app.add_subcommand("demo", "Run the scripted drag suites and write demo/summary.json");
  auto* show = app.add_subcommand("config", "Print the effective configuration as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cfw::kExitOk : cfw::kExitInput;
  }

  try {
    const auto cfg = resolve(o);
    if (show->parsed()) {
      std::cout << cfw::to_json(cfg).dump(2) << '\n';
    } else if (train->parsed()) {
      cfw::cmd_train(cfg);
    } else if (pre->parsed()) {
      auto rep = cfw::cmd_precompute(cfg, o.force);
      std::clog << "[cfw] " << rep.computed() << " of " << rep.stages.size() << " stages computed" << std::endl;
    } else if (serve->parsed()) {
      return cfw::cmd_serve(cfg);
    } else if (demo->parsed()) {
      const auto summary = cfw::cmd_demo(cfg);
      if (auto errs = cfw::validate_demo_summary(summary); !errs.empty()) {
        for (const auto& e : errs) std::cerr << "summary: " << e << '\n';
        return cfw::kExitInternal;
      }
      std::cout << (cfg.artifacts / "demo" / "summary.json").string() << '\n';
    }
    return cfw::kExitOk;
  } catch (const cfw::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cfw::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return cfw::kExitInternal;
  }
}
