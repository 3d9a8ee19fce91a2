#include "diffnas/cli.hpp"

#include <CLI11.hpp>
#include <optional>
#include <ostream>

#include "diffnas/error.hpp"
#include "diffnas/io.hpp"
#include "diffnas/pipeline.hpp"

namespace diffnas::cli {

namespace {

const char* const kCommands[][2] = {
    {"train-teacher", "Generate the dataset and train the teacher"},
    {"train-supernet", "Train every supernet block against the teacher"},
    {"search", "Evaluate candidates and search each r"},
    {"retrain", "Retrain the searched arch for each schedule"},
    {"sample", "Sample the teacher and retrained models"},
    {"evaluate", "Compute MMD^2, Frechet proxy and probe loss"},
    {"ablate", "Run the ablation variants"},
    {"report", "Write per-seed and aggregate reports"},
    {"pipeline", "Run every stage in order"},
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Block-wise architecture search for diffusion U-Nets", "diffnas"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs";
  bool resume = false, quiet = false;
  app.add_option("--config", config_path, "JSON config or run manifest");
  app.add_option("--seed", seed, "Run only this seed");
  app.add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
  app.add_flag("--stage-resume", resume, "Skip stages whose persisted outputs match the current inputs");
  app.add_flag("-q,--quiet", quiet, "No progress lines");
  app.set_version_flag("--version", pipeline::kToolVersion);

  std::string checkpoint, output;
  int count = 0;
  for (const auto& [name, help] : kCommands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    if (std::string(name) == "sample") {
      sub->add_option("--checkpoint", checkpoint, "Sample this checkpoint instead of the pipeline models");
      sub->add_option("--output", output, "DTNS file for --checkpoint samples");
      sub->add_option("--count", count, "Samples to draw with --checkpoint (default: evaluate.samples)");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << pipeline::kToolVersion << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    config::PipelineConfig cfg = config_path.empty() ? config::PipelineConfig{} : config::load(config_path);
    if (seed) cfg.seeds = {*seed};
    if (config_path.empty()) cfg.validate();
    pipeline::Options opt;
    opt.out_dir = out_dir;
    opt.resume = resume;
    opt.log = quiet ? nullptr : &err;
    const std::string command = app.get_subcommands().front()->get_name();
    if (command == "sample" && !checkpoint.empty()) {
      if (output.empty()) throw ConfigError("sample --checkpoint needs --output");
      pipeline::SeedRun run(cfg, cfg.seeds.front(), opt);
      const Tensor x = run.sample_checkpoint(checkpoint, count > 0 ? count : cfg.evaluate.samples);
      data::save_raw_tensor_file(x, output);
      return kExitOk;
    }
    pipeline::run_command(command, cfg, opt);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const StageDependencyError& e) {
    err << "stage dependency error: " << e.what() << '\n';
    return kExitStageDependency;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace diffnas::cli
