#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffnas/dataset.hpp"
#include "diffnas/retrain.hpp"
#include "diffnas/search.hpp"
#include "diffnas/training.hpp"
#include "diffnas/unet.hpp"

namespace diffnas::config {

struct DiffusionSection {
  int timesteps = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;
};

struct TeacherSection {
  int steps = 3000;
  int batch_size = 32;
  double lr = 2e-3;
  int log_interval = 100;
};

struct SupernetSection {
  int steps = 800;
  int batch_size = 32;
  double lr = 2e-3;
  int log_interval = 100;
  int threads = 1;
  int probe_batches = 1;
};

struct SearchSection {
  std::vector<double> r_values{1.0, 1.02, 1.05, 1.1};
  int eval_batches = 4;
  int batch_size = 32;
  bool search_middle = true;
  std::size_t enumeration_cap = search::kEnumerationCap;
};

struct RetrainSection {
  /// Relaxation coefficient whose searched arch is retrained.
  double r = 1.02;
  int steps = 3000;
  int batch_size = 32;
  double lr = 2e-3;
  double gamma = 1.0;
  /// "step" and/or "linear".
  std::vector<std::string> schedules{"step"};
  double beta_steps_fraction = 0.25;
  int log_interval = 50;
  int checkpoint_interval = 0;
  int probe_batches = 8;
};

struct EvaluateSection {
  int samples = 2000;
  std::string sampler = "ddim";
  int ddim_steps = 50;
  int reference_count = 2000;
};

struct AblationSection {
  bool enabled = true;
  std::vector<std::string> variants{"random", "no-dis", "fixed-loss", "evolutionary"};
  double fixed_beta = 0.5;
  double random_tolerance_percent = 2.0;
  int generations = 30;
  int population = 32;
};

/// Whole-run configuration. Every section and key is optional; missing
/// values keep the desk defaults above.
struct PipelineConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  data::DatasetSpec dataset;
  /// When false the dataset seed is derived from the run seed.
  bool dataset_seed_fixed = false;
  unet::UNetConfig model;
  DiffusionSection diffusion;
  TeacherSection teacher;
  SupernetSection supernet;
  SearchSection search;
  RetrainSection retrain;
  EvaluateSection evaluate;
  AblationSection ablations;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
  diffusion::NoiseSchedule schedule() const;
};

/// Parses a config document. Unknown keys, wrong types and invalid values
/// throw ConfigError. A run manifest is accepted too: its "config" member is
/// used.
PipelineConfig parse(const std::string& json_text);
PipelineConfig load(const std::filesystem::path& path);

/// Canonical JSON with every field spelled out.
std::string to_json(const PipelineConfig& config);

/// Dataset spec for one run seed. Its seed derives from the run seed unless dataset.seed was given.
data::DatasetSpec dataset_for_seed(const PipelineConfig& config, std::uint64_t seed);

}  // namespace diffnas::config
