#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "rapscan/cli.hpp"
#include "rapscan/conformance.hpp"

namespace {

using namespace rapscan;
using namespace rapscan::cli;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string filter;
};

RunConfig resolve(const GlobalOptions& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.out_dir = g.out;
  cfg.derive_seeds();
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rapscan: perturbation-response Trojan detection for text classifiers"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--seed", g.seed, "global seed (overrides the config)");
  app.add_option("--out", g.out, "output directory (overrides the config)");
  app.add_option("--filter", g.filter, "glob over model ids");

  auto* build = app.add_subcommand("build-zoo", "train the reference model zoo");

  auto* extract = app.add_subcommand("extract", "extract RAP signatures for zoo models");
  std::string mode;
  extract->add_option("--mode", mode, "relaxed or optimized")->check(CLI::IsMember({"relaxed", "optimized"}));

  auto* train_meta = app.add_subcommand("train-meta", "tune and train the meta-classifier");
  std::string arch_mode;
  train_meta->add_option("--arch-mode", arch_mode, "specific or agnostic")
      ->check(CLI::IsMember({"specific", "agnostic"}));

  auto* evaluate = app.add_subcommand("evaluate", "metrics per split and the sample-count ablation");
  evaluate->add_option("--arch-mode", arch_mode, "specific or agnostic")
      ->check(CLI::IsMember({"specific", "agnostic"}));

  auto* scan = app.add_subcommand("scan", "score one model file or oracle endpoint");
  std::string forest, target, samples;
  scan->add_option("--forest", forest, "meta-classifier file")->required()->check(CLI::ExistingFile);
  scan->add_option("--target", target, "model.bin, tcp:<host>:<port> or exec:<command>")->required();
  scan->add_option("--samples", samples, "JSONL clean samples (default: synthesized)");

  auto* serve = app.add_subcommand("serve", "serve a model over the oracle protocol");
  std::string model, model_id, task = "SC";
  std::optional<int> port;
  serve->add_option("--model", model, "model file");
  serve->add_option("--model-id", model_id, "zoo model id (resolved through the manifest)");
  serve->add_option("--task", task, "task served")->check(CLI::IsMember({"SC", "NER", "QA"}));
  serve->add_option("--tcp", port, "listen on 127.0.0.1:<port> instead of stdio");

  auto* conformance = app.add_subcommand("conformance", "run the protocol conformance suite against an oracle");
  std::string suite = "conformance";
  conformance->add_option("--suite", suite, "suite directory");
  conformance->add_option("--target", target, "tcp:<host>:<port> or exec:<command>")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg = resolve(g);
    if (!mode.empty()) cfg.rap.mode = rap_mode_from_string(mode);
    if (!arch_mode.empty()) cfg.arch_mode = arch_mode_from_string(arch_mode);

    if (build->parsed()) {
      cmd_build_zoo(cfg, std::cout);
    } else if (extract->parsed()) {
      cmd_extract(cfg, g.filter, std::cout);
    } else if (train_meta->parsed()) {
      cmd_train_meta(cfg, std::cout);
    } else if (evaluate->parsed()) {
      cmd_evaluate(cfg, std::cout);
    } else if (scan->parsed()) {
      std::optional<std::filesystem::path> sf;
      if (!samples.empty()) sf = samples;
      cmd_scan(cfg, forest, target, sf, std::cout);
    } else if (serve->parsed()) {
      std::filesystem::path file = model;
      if (file.empty()) {
        if (model_id.empty()) throw ConfigError("serve needs --model or --model-id");
        const ZooManifest m = load_zoo_manifest(cfg);
        for (const auto& e : m.entries)
          if (e.model_id == model_id) {
            file = cfg.zoo_path() / e.path;
            task = std::string(to_string(e.task));
          }
        if (file.empty()) throw ConfigError("no model '" + model_id + "' in the manifest");
      }
      cmd_serve(file, task_from_string(task), port, std::cerr);
    } else if (conformance->parsed()) {
      const auto results =
          oracle::run_conformance(oracle::load_conformance_suite(suite), oracle::Endpoint::parse(target));
      int failed = 0;
      for (const auto& r : results) {
        const char* tag = r.status == oracle::ConformanceResult::Status::Pass   ? "PASS"
                          : r.status == oracle::ConformanceResult::Status::Skip ? "SKIP"
                                                                                : "FAIL";
        failed += r.status == oracle::ConformanceResult::Status::Fail;
        std::cout << tag << " " << r.name << (r.detail.empty() ? "" : ": " + r.detail) << "\n";
      }
      return failed == 0 ? kExitOk : kExitFailure;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}
