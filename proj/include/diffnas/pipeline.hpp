#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "diffnas/config.hpp"

namespace diffnas::pipeline {

inline constexpr const char* kToolVersion = "diffnas 0.1.0";

/// Stable per-stage seed tags.
enum class Tag : std::uint64_t {
  Dataset = 1,
  TeacherInit,
  TeacherTrain,
  SupernetInit,
  SupernetTrain,
  SearchEval,
  RetrainInit,
  RetrainTrain,
  Sample,
  Reference,
  Probe,
  Ablation,
};
std::uint64_t stage_seed(std::uint64_t run_seed, Tag tag);

struct Options {
  std::filesystem::path out_dir = "runs";
  /// Skip stages whose stage.json matches the current inputs.
  bool resume = false;
  /// Progress lines; null for silence.
  std::ostream* log = nullptr;
};

/// What every stage writes into its stage.json.
struct StageRecord {
  std::string stage;
  std::uint64_t seed = 0;
  std::string input_key;
  /// Relative path -> sha256 of deterministic outputs.
  std::map<std::string, std::string> outputs;
  /// Relative paths of outputs holding wall-clock values (not hashed).
  std::vector<std::string> logs;
  double wall_ms = 0.0;
  bool resumed = false;
};

struct ModelMetrics {
  std::string model;
  std::string arch;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  double mmd2 = 0.0;
  double frechet = 0.0;
  double probe_l_ori = 0.0;
};

/// One run seed under out_dir/seed_<s>. Each stage reads its inputs from
/// disk, so any stage can be invoked on its own once its prerequisites
/// exist; otherwise StageDependencyError names the missing file.
class SeedRun {
 public:
  SeedRun(const config::PipelineConfig& config, std::uint64_t seed, const Options& options);

  std::filesystem::path dir() const { return dir_; }

  StageRecord prepare_data();
  StageRecord train_teacher();
  StageRecord train_supernet();
  StageRecord search();
  StageRecord retrain();
  StageRecord sample();
  StageRecord evaluate();
  StageRecord ablate();
  StageRecord report();

  /// Samples from a fixed-arch checkpoint. A supernet checkpoint is
  /// rejected with ConfigError: searched archs are retrained first.
  Tensor sample_checkpoint(const std::filesystem::path& checkpoint, int count) const;

  /// Rows of report/report.csv, in order.
  std::vector<ModelMetrics> metrics() const;

 private:
  template <class Fn>
  StageRecord run_stage(const std::string& name, const std::vector<std::string>& sections,
                        const std::vector<std::filesystem::path>& inputs, Fn&& body);
  std::filesystem::path require(const std::filesystem::path& rel) const;
  void say(const std::string& line) const;
  ModelMetrics evaluate_model(const std::string& name, const std::filesystem::path& checkpoint,
                              const std::filesystem::path& samples_out) const;
  std::vector<std::string> model_names() const;

  const config::PipelineConfig& cfg_;
  std::uint64_t seed_;
  Options opt_;
  std::filesystem::path dir_;
  diffusion::NoiseSchedule sched_;
};

/// Runs the named command ("train-teacher", ..., "pipeline") for every seed
/// of the config, then rewrites out_dir/manifest.json and, after "report"
/// or "pipeline", the cross-seed report.
void run_command(const std::string& command, const config::PipelineConfig& config, const Options& options);

/// out_dir/manifest.json: config snapshot, every stage.json found, tool
/// version. Parsing it back with config::parse yields the same config.
std::string build_manifest(const config::PipelineConfig& config, const std::filesystem::path& out_dir);

/// Relative path -> sha256 over every stage of the manifest.
std::map<std::string, std::string> manifest_hashes(const std::string& manifest_json);

/// Stable header of report CSVs.
std::string report_header();
std::string report_csv(const std::vector<std::pair<std::uint64_t, ModelMetrics>>& rows);
std::string report_json(const std::vector<std::pair<std::uint64_t, ModelMetrics>>& rows);

}  // namespace diffnas::pipeline
