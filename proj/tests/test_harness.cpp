#include <gtest/gtest.h>

#include <json.hpp>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "diffnas/checkpoint.hpp"
#include "diffnas/cli.hpp"
#include "diffnas/config.hpp"
#include "diffnas/cost.hpp"
#include "diffnas/dataset.hpp"
#include "diffnas/diffusion.hpp"
#include "diffnas/error.hpp"
#include "diffnas/io.hpp"
#include "diffnas/metrics.hpp"
#include "diffnas/pipeline.hpp"

using namespace diffnas;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("diffnas_test_" + name);
  fs::remove_all(p);
  return p;
}

const char* kTiny = R"({
  "seeds": [7],
  "dataset": {"image_size": 8, "count": 128},
  "model": {"levels": 2, "base_channels": 4, "channel_mult": [1, 2], "layers_per_block": 2, "time_embed_dim": 8},
  "diffusion": {"timesteps": 40},
  "teacher": {"steps": 30, "batch_size": 8, "log_interval": 10},
  "supernet": {"steps": 10, "batch_size": 8, "log_interval": 5},
  "search": {"eval_batches": 2, "batch_size": 8},
  "retrain": {"steps": 20, "batch_size": 8, "log_interval": 5, "checkpoint_interval": 10, "probe_batches": 2},
  "evaluate": {"samples": 32, "ddim_steps": 8, "reference_count": 32},
  "ablations": {"generations": 2, "population": 4}
})";

config::PipelineConfig tiny() { return config::parse(kTiny); }

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (char c : line) {
      if (c == '"') {
        quoted = !quoted;
      } else if (c == ',' && !quoted) {
        cells.push_back(cell);
        cell.clear();
      } else {
        cell += c;
      }
    }
    cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

int run_cli(std::vector<std::string> args, std::string* err_text = nullptr) {
  args.insert(args.begin(), "diffnas");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (err_text) *err_text = err.str();
  return code;
}

// Shared tiny run, produced once.
struct TinyRun {
  fs::path dir = scratch("tiny_pipeline");
  config::PipelineConfig cfg = tiny();
  TinyRun() {
    pipeline::Options o;
    o.out_dir = dir;
    pipeline::run_command("pipeline", cfg, o);
  }
  fs::path seed_dir() const { return dir / "seed_7"; }
};

const TinyRun& tiny_run() {
  static const TinyRun run;
  return run;
}

}  // namespace

// --------------------------------------------------------------------------
// Datasets

TEST(Dataset, DeterministicAndNormalized) {
  for (auto src : {data::Source::Blobs, data::Source::Checker}) {
    data::DatasetSpec s;
    s.source = src;
    s.image_size = 8;
    s.count = 50;
    s.seed = 9;
    const Tensor a = data::make_dataset(s), b = data::make_dataset(s);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.shape(), (Shape{50, 1, 8, 8}));
    for (float v : a.data()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
    s.seed = 10;
    EXPECT_NE(data::make_dataset(s), a);
  }
}

TEST(Dataset, CheckerIsPlusMinusOne) {
  data::DatasetSpec s;
  s.source = data::Source::Checker;
  s.image_size = 8;
  s.count = 20;
  const Tensor x = data::make_dataset(s);
  for (float v : x.data()) EXPECT_TRUE(v == 1.0f || v == -1.0f);
}

TEST(Dataset, BlobPixelMeanMatchesMonteCarlo) {
  const int size = 8, n = 10000;
  data::DatasetSpec s;
  s.image_size = size;
  s.count = n;
  s.seed = 4;
  const Tensor x = data::make_dataset(s);
  // Quadrature oracle: -1 + (2/3) E[K] E[bump], bump averaged over the centre.
  const double w = size / 8.0;
  auto axis = [&](double u) {
    const int q = 20000;
    double acc = 0.0;
    for (int i = 0; i < q; ++i) {
      const double c = (i + 0.5) * size / q;
      acc += std::exp(-(u - c) * (u - c) / (2 * w * w));
    }
    return acc / q;
  };
  for (auto [r, c] : {std::pair{0, 0}, {3, 4}, {7, 2}, {4, 4}}) {
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double v = x.data()[static_cast<std::size_t>(i) * size * size + r * size + c];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n, se = std::sqrt((sq / n - mean * mean) / n);
    const double oracle = -1.0 + (2.0 / 3.0) * 2.0 * axis(r + 0.5) * axis(c + 0.5);
    EXPECT_NEAR(data::blob_pixel_mean(size, r, c), oracle, 1e-6);
    EXPECT_NEAR(mean, oracle, 3 * se) << r << "," << c;
  }
}

TEST(Dataset, DtnsEmptyBatch) {
  const Tensor empty(Shape{0, 1, 4, 4});
  const io::Bytes b = data::encode_dtns(empty);
  EXPECT_EQ(b.size(), 20u);
  EXPECT_EQ(data::decode_dtns(b).shape(), (Shape{0, 1, 4, 4}));
}

// --------------------------------------------------------------------------
// Metrics

TEST(Mmd, IdenticalSetsAreNotPositive) {
  Rng rng(1);
  const Tensor x = rng.normal_tensor({40, 6});
  EXPECT_LE(metrics::mmd2_rbf(x, x), 1e-12);
}

TEST(Mmd, SeparatedPointMasses) {
  // Median heuristic gives h = distance between the masses, so k(a, b) = e^-1/2
  // and MMD^2 = 2 - 2 e^-1/2 exactly.
  for (double d : {1.0, 10.0, 1000.0}) {
    Tensor x(Shape{10, 3}), y(Shape{10, 3});
    for (int i = 0; i < 10; ++i) y.data()[static_cast<std::size_t>(i) * 3] = static_cast<float>(d);
    const auto r = metrics::mmd2_rbf_detail(x, y);
    EXPECT_NEAR(r.bandwidth, d, 1e-9 * d);
    EXPECT_NEAR(r.mmd2, 2.0 - 2.0 * std::exp(-0.5), 1e-12);
  }
}

TEST(Mmd, PermutationInvariantAndValidated) {
  Rng rng(2);
  const Tensor x = rng.normal_tensor({30, 5});
  const Tensor y = rng.normal_tensor({25, 5});
  std::vector<int> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  Tensor xp(Shape{30, 5});
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 5; ++j) xp.data()[i * 5 + j] = x.data()[perm[i] * 5 + j];
  const double a = metrics::mmd2_rbf(x, y), b = metrics::mmd2_rbf(xp, y);
  EXPECT_NEAR(a, b, 1e-12);
  EXPECT_NEAR(metrics::mmd2_rbf(y, x), a, 1e-12);
  EXPECT_THROW(metrics::mmd2_rbf(x.slice_batch(0, 1), y), ContractError);
}

TEST(Mmd, DetectsShift) {
  Rng rng(3);
  const Tensor x = rng.normal_tensor({100, 4});
  Tensor y = rng.normal_tensor({100, 4});
  const double same = metrics::mmd2_rbf(x, y);
  for (float& v : y.data()) v += 2.0f;
  EXPECT_GT(metrics::mmd2_rbf(x, y), same + 0.3);
}

TEST(Frechet, ClosedForm) {
  Rng rng(4);
  const Tensor x = rng.normal_tensor({50, 4});
  EXPECT_NEAR(metrics::frechet_diag(x, x), 0.0, 1e-12);
  Tensor y = x;
  for (float& v : y.data()) v = 2.0f * v + 1.0f;
  // mean shifts by mu + 1, std doubles.
  double expected = 0.0;
  for (int j = 0; j < 4; ++j) {
    double m = 0.0, s = 0.0;
    for (int i = 0; i < 50; ++i) m += x.data()[i * 4 + j];
    m /= 50;
    for (int i = 0; i < 50; ++i) s += (x.data()[i * 4 + j] - m) * (x.data()[i * 4 + j] - m);
    s = std::sqrt(s / 50);
    expected += (m + 1.0) * (m + 1.0) + s * s;
  }
  EXPECT_NEAR(metrics::frechet_diag(x, y), expected, 1e-5);
  EXPECT_GE(metrics::frechet_diag(y, x), 0.0);
}

// --------------------------------------------------------------------------
// Config

TEST(Config, DefaultsAreDeskScale) {
  const config::PipelineConfig c = config::parse("{}");
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(c.model.image_size, 16);
  EXPECT_EQ(c.model.levels, 3);
  EXPECT_EQ(c.model.base_channels, 16);
  EXPECT_EQ(c.model.channel_mult, (std::vector<int>{1, 2, 2}));
  EXPECT_EQ(c.teacher.steps, 3000);
  EXPECT_EQ(c.supernet.steps, 800);
  EXPECT_EQ(c.retrain.steps, 3000);
  EXPECT_EQ(c.evaluate.samples, 2000);
}

TEST(Config, DefaultScheduleEndsNearPureNoise) {
  const config::PipelineConfig c = config::parse("{}");
  const diffusion::NoiseSchedule s = diffusion::make_linear_schedule(
      c.diffusion.timesteps, c.diffusion.beta_start,
      c.diffusion.beta_end);
  EXPECT_LT(s.alpha_bar(c.diffusion.timesteps), 1e-3);
}

TEST(Config, RejectsUnknownKeysAndBadTypes) {
  EXPECT_THROW(config::parse(R"({"sede": 1})"), ConfigError);
  EXPECT_THROW(config::parse(R"({"teacher": {"step": 10}})"), ConfigError);
  EXPECT_THROW(config::parse(R"({"teacher": {"steps": "10"}})"), ConfigError);
  EXPECT_THROW(config::parse(R"({"teacher": {"steps": 1.5}})"), ConfigError);
  EXPECT_THROW(config::parse(R"({"seeds": [-1]})"), ConfigError);
  EXPECT_THROW(config::parse(R"({"search": {"r_values": [0.9]}})"), ConfigError);
  EXPECT_THROW(config::parse(R"({"retrain": {"r": 1.3}})"), ConfigError);
  EXPECT_THROW(config::parse(R"({"retrain": {"schedules": ["fixed"]}})"), ConfigError);
  EXPECT_THROW(config::parse(R"({"ablations": {"variants": ["bogus"]}})"), ConfigError);
  EXPECT_THROW(config::parse(R"({"dataset": {"image_size": 10}})"), ConfigError);
  EXPECT_THROW(config::parse("{not json"), ConfigError);
  EXPECT_THROW(config::load("/nonexistent/cfg.json"), ConfigError);
}

TEST(Config, RoundTripAndManifest) {
  const config::PipelineConfig c = tiny();
  const std::string j = config::to_json(c);
  EXPECT_EQ(config::to_json(config::parse(j)), j);
  const std::string manifest = json{{"config", json::parse(j)}, {"stages", json::array()}}.dump();
  EXPECT_EQ(config::to_json(config::parse(manifest)), j);
  EXPECT_EQ(c.model.layers_per_block, (std::vector<int>{2, 2, 2, 2, 2}));
}

TEST(Config, DatasetSeedFollowsRunSeed) {
  config::PipelineConfig c = tiny();
  EXPECT_NE(config::dataset_for_seed(c, 1).seed, config::dataset_for_seed(c, 2).seed);
  c = config::parse(R"({"dataset": {"seed": 5}})");
  EXPECT_EQ(config::dataset_for_seed(c, 1).seed, 5u);
  EXPECT_EQ(config::dataset_for_seed(c, 2).seed, 5u);
}

// --------------------------------------------------------------------------
// Pipeline

TEST(Pipeline, MissingPrerequisiteNamesTheFile) {
  const fs::path dir = scratch("deps");
  pipeline::Options o;
  o.out_dir = dir;
  const auto cfg = tiny();
  try {
    pipeline::run_command("search", cfg, o);
    FAIL() << "expected StageDependencyError";
  } catch (const StageDependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("seed_7/data/dataset.dtns"), std::string::npos) << e.what();
  }
  EXPECT_THROW(pipeline::run_command("fly", cfg, o), ConfigError);
}

TEST(Pipeline, RerunFromManifestReproducesHashes) {
  const TinyRun& run = tiny_run();
  const std::string manifest = io::read_text(run.dir / "manifest.json");
  const auto hashes = pipeline::manifest_hashes(manifest);
  EXPECT_GT(hashes.size(), 30u);
  for (const auto& [rel, hash] : hashes) EXPECT_EQ(io::sha256_file(run.dir / rel), hash) << rel;

  const fs::path again = scratch("tiny_rerun");
  pipeline::Options o;
  o.out_dir = again;
  pipeline::run_command("pipeline", config::parse(manifest), o);
  EXPECT_EQ(pipeline::manifest_hashes(io::read_text(again / "manifest.json")), hashes);
  EXPECT_EQ(io::read_text(again / "report.csv"), io::read_text(run.dir / "report.csv"));
}

TEST(Pipeline, ResumeSkipsUpToDateStagesAndRedoesStaleOnes) {
  const TinyRun& run = tiny_run();
  const fs::path dir = scratch("tiny_resume");
  fs::copy(run.dir, dir, fs::copy_options::recursive);
  config::PipelineConfig cfg = run.cfg;
  pipeline::Options o;
  o.out_dir = dir;
  o.resume = true;
  pipeline::SeedRun sr(cfg, 7, o);
  EXPECT_TRUE(sr.train_teacher().resumed);
  EXPECT_TRUE(sr.search().resumed);
  // A different search setting invalidates the search stage only.
  cfg.search.eval_batches = 1;
  pipeline::SeedRun changed(cfg, 7, o);
  EXPECT_TRUE(changed.train_supernet().resumed);
  EXPECT_FALSE(changed.search().resumed);
  // Tampered outputs are recomputed.
  io::atomic_write(dir / "seed_7/teacher/teacher.dnas", std::string_view("junk"));
  EXPECT_FALSE(changed.train_teacher().resumed);
  EXPECT_EQ(io::sha256_file(dir / "seed_7/teacher/teacher.dnas"),
            io::sha256_file(run.seed_dir() / "teacher/teacher.dnas"));
}

TEST(Pipeline, SearchSummaryMonotoneAndVerified) {
  const TinyRun& run = tiny_run();
  const auto rows = read_csv(io::read_text(run.seed_dir() / "search/summary.csv"));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0][0], "r");
  std::uint64_t prev = UINT64_MAX;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const std::uint64_t macs = std::stoull(rows[i][2]);
    EXPECT_LE(macs, prev);
    prev = macs;
    EXPECT_EQ(rows[i][6], "true");
    EXPECT_EQ(rows[i][7], "0");
  }
  const auto stats = read_csv(io::read_text(run.seed_dir() / "search/block_stats.csv"));
  EXPECT_EQ(stats.size(), 1u + run.cfg.model.block_count());
}

TEST(Pipeline, SupernetWeightsAreNotSampled) {
  const TinyRun& run = tiny_run();
  pipeline::SeedRun sr(run.cfg, 7, {});
  EXPECT_THROW(sr.sample_checkpoint(run.seed_dir() / "supernet/supernet.dnas", 4), ConfigError);
  EXPECT_EQ(sr.sample_checkpoint(run.seed_dir() / "retrain/step/student.dnas", 4).shape(), (Shape{4, 1, 8, 8}));
}

TEST(Pipeline, AblationContracts) {
  const TinyRun& run = tiny_run();
  const fs::path s = run.seed_dir();
  const auto searched = json::parse(io::read_text(s / "eval/searched-step.json"));
  const auto random = json::parse(io::read_text(s / "ablate/random/metrics.json"));
  const double target = searched["macs"].get<double>();
  EXPECT_LE(std::abs(random["macs"].get<double>() - target), 0.02 * target);

  // No-Dis never runs the teacher: beta is 1 and l_dis is absent on every row.
  const auto nodis = read_csv(io::read_text(s / "ablate/no-dis/log.csv"));
  ASSERT_GT(nodis.size(), 2u);
  for (std::size_t i = 1; i < nodis.size(); ++i) {
    EXPECT_EQ(std::stod(nodis[i][1]), 1.0);
    EXPECT_EQ(nodis[i][2], "");
  }
  const auto fixed = read_csv(io::read_text(s / "ablate/fixed-loss/log.csv"));
  for (std::size_t i = 1; i < fixed.size(); ++i) EXPECT_EQ(std::stod(fixed[i][1]), 0.5);
  // The main run used the step schedule: beta 0 then 1.
  const auto step = read_csv(io::read_text(s / "retrain/step/log.csv"));
  EXPECT_EQ(std::stod(step[1][1]), 0.0);
  EXPECT_EQ(std::stod(step.back()[1]), 1.0);
  EXPECT_TRUE(fs::exists(s / "retrain/step/ckpt_10.dnas"));
}

TEST(Pipeline, ReportFormats) {
  const TinyRun& run = tiny_run();
  const auto csv = read_csv(io::read_text(run.dir / "report.csv"));
  const auto js = json::parse(io::read_text(run.dir / "report.json"));
  EXPECT_EQ(io::read_text(run.dir / "report.csv").substr(0, pipeline::report_header().size()), pipeline::report_header());
  ASSERT_EQ(csv.size(), 1 + js["rows"].size());
  EXPECT_EQ(csv.size(), 1u + 1 + 1 + 4);  // teacher, searched-step, four ablations
  const auto& header = csv[0];
  for (std::size_t r = 1; r < csv.size(); ++r) {
    const json& row = js["rows"][r - 1];
    for (std::size_t c = 0; c < header.size(); ++c) {
      const json& v = row.at(header[c]);
      if (v.is_string()) {
        EXPECT_EQ(v.get<std::string>(), csv[r][c]);
      } else {
        EXPECT_EQ(v, json::parse(csv[r][c])) << header[c];
      }
    }
  }
  EXPECT_EQ(csv[1][1], "teacher");
  EXPECT_NE(csv[1][4].find("(0%)"), std::string::npos);
  EXPECT_NE(csv[1][6].find("(0%)"), std::string::npos);
  const auto teacher_cost = cost::cost_of_arch(run.cfg.model, unet::teacher_arch(run.cfg.model));
  EXPECT_EQ(std::stoull(csv[1][3]), teacher_cost.total_macs);
  EXPECT_EQ(std::stoull(csv[1][5]), teacher_cost.total_params);
  // Per-seed report holds the same rows.
  EXPECT_EQ(io::read_text(run.seed_dir() / "report/report.csv"), io::read_text(run.dir / "report.csv"));
}

TEST(Pipeline, ReportNeedsTeacherRow) {
  pipeline::ModelMetrics m;
  m.model = "searched-step";
  EXPECT_THROW(pipeline::report_csv({{1, m}}), ContractError);
}

// --------------------------------------------------------------------------
// CLI

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  const fs::path good = dir / "tiny.json";
  io::atomic_write(good, std::string_view(kTiny));
  const fs::path bad = dir / "bad.json";
  io::atomic_write(bad, std::string_view(R"({"teacher": {"stepz": 3}})"));
  std::string err;

  EXPECT_EQ(run_cli({"--help"}), cli::kExitOk);
  EXPECT_EQ(run_cli({"--version"}), cli::kExitOk);
  EXPECT_EQ(run_cli({}), cli::kExitConfig);
  EXPECT_EQ(run_cli({"frobnicate"}), cli::kExitConfig);
  EXPECT_EQ(run_cli({"pipeline", "--nope"}), cli::kExitConfig);
  EXPECT_EQ(run_cli({"pipeline", "--config", bad.string(), "-q"}, &err), cli::kExitConfig);
  EXPECT_NE(err.find("stepz"), std::string::npos);
  EXPECT_EQ(run_cli({"search", "--config", good.string(), "--out-dir", (dir / "out").string(), "-q"}, &err),
            cli::kExitStageDependency);
  EXPECT_NE(err.find("dataset.dtns"), std::string::npos);
  EXPECT_EQ(run_cli({"train-teacher", "--config", good.string(), "--out-dir", (dir / "out").string(), "--seed", "3", "-q"}),
            cli::kExitOk);
  EXPECT_TRUE(fs::exists(dir / "out/seed_3/teacher/teacher.dnas"));
  EXPECT_TRUE(fs::exists(dir / "out/manifest.json"));
  // Global flags may follow the subcommand too, and resume is accepted.
  EXPECT_EQ(run_cli({"train-teacher", "-q", "--stage-resume", "--out-dir", (dir / "out").string(), "--seed", "3",
                 "--config", good.string()}),
            cli::kExitOk);
  EXPECT_EQ(run_cli({"sample", "--config", good.string(), "--seed", "3", "-q", "--checkpoint",
                 (dir / "out/seed_3/teacher/teacher.dnas").string(), "--output", (dir / "s.dtns").string(), "--count",
                 "3"}),
            cli::kExitOk);
  EXPECT_EQ(data::load_raw_tensor_file(dir / "s.dtns").dim(0), 3);
}

TEST(Cli, DivergenceIsNumericFailure) {
  const fs::path dir = scratch("cli_nan");
  fs::create_directories(dir);
  json j = json::parse(kTiny);
  j["teacher"]["lr"] = 1e30;
  const fs::path cfg = dir / "nan.json";
  io::atomic_write(cfg, std::string_view(j.dump()));
  std::string err;
  EXPECT_EQ(run_cli({"train-teacher", "--config", cfg.string(), "--out-dir", (dir / "out").string(), "-q"}, &err),
            cli::kExitNumeric)
      << err;
}
