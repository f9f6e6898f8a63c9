// Command-line driver for the experiment pipelines.
//
//   gauntlet gen-corpus|coin|palace|stat|sweep --config <path> [--seed N] [--out DIR] [--workers K]
//
// Exit status: 0 success, 1 configuration error, 2 pipeline error.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gauntlet/harness.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t workers = 1;
  bool quiet = false;
};

int execute(gauntlet::Pipeline pipeline, const Options& opts) {
  gauntlet::ExperimentConfig cfg;
  try {
    cfg = gauntlet::ExperimentConfig::load(opts.config, opts.seed);
    if (!opts.out.empty()) cfg.output_dir = opts.out;
    gauntlet::check_pipeline(pipeline, cfg);
  } catch (const gauntlet::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }
  try {
    const auto manifest = gauntlet::run(cfg, pipeline, opts.workers);
    const auto report = gauntlet::emit_report(manifest);
    gauntlet::write_text(cfg.output_dir / "report.txt", report);
    if (!opts.quiet) std::cout << report;
    std::cout << "manifest: " << (cfg.output_dir / "manifest.json").string() << " sha256 " << manifest.digest() << "\n";
    return 0;
  } catch (const gauntlet::PipelineError& e) {
    std::cerr << "pipeline error in stage '" << e.stage() << "': " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "pipeline error: " << e.what() << "\n";
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-count auditing attack testbed"};
  app.require_subcommand(1);
  app.set_version_flag("--version", gauntlet::kVersion);

  Options opts;
  std::optional<gauntlet::Pipeline> chosen;
  const std::pair<const char*, gauntlet::Pipeline> commands[] = {
      {"gen-corpus", gauntlet::Pipeline::gen_corpus}, {"coin", gauntlet::Pipeline::coin},
      {"palace", gauntlet::Pipeline::palace},         {"stat", gauntlet::Pipeline::stat},
      {"sweep", gauntlet::Pipeline::sweep}};
  const char* help[] = {"write a synthetic or validated corpus with length statistics",
                        "run commitment-auditor inflation attacks",
                        "train the predictive auditor and run its attacks",
                        "run the statistical audit for each reporting strategy",
                        "run the inflation and offset sweeps of a stat config"};
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    auto* sub = app.add_subcommand(commands[i].first, help[i]);
    sub->add_option("--config", opts.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opts.seed, "override the config seed");
    sub->add_option("--out", opts.out, "override the output directory");
    sub->add_option("--workers", opts.workers, "worker threads")->check(CLI::Range(1, 256));
    sub->add_flag("--quiet", opts.quiet, "print only the manifest line");
    const auto pipeline = commands[i].second;
    sub->callback([&chosen, pipeline] { chosen = pipeline; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  return execute(*chosen, opts);
}
