#include "diffnas/pipeline.hpp"

#include <json.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "diffnas/checkpoint.hpp"
#include "diffnas/cost.hpp"
#include "diffnas/error.hpp"
#include "diffnas/io.hpp"
#include "diffnas/metrics.hpp"

namespace diffnas::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::uint64_t stage_seed(std::uint64_t run_seed, Tag tag) {
  return Rng::derive(run_seed, {0x5747, static_cast<std::uint64_t>(tag)}).next_u64();
}

namespace {

const std::vector<std::pair<const char*, Tag>> kTags{
    {"dataset", Tag::Dataset},          {"teacher_init", Tag::TeacherInit},   {"teacher_train", Tag::TeacherTrain},
    {"supernet_init", Tag::SupernetInit}, {"supernet_train", Tag::SupernetTrain}, {"search_eval", Tag::SearchEval},
    {"retrain_init", Tag::RetrainInit}, {"retrain_train", Tag::RetrainTrain}, {"sample", Tag::Sample},
    {"reference", Tag::Reference},      {"probe", Tag::Probe},                {"ablation", Tag::Ablation},
};

const std::vector<std::string> kStageOrder{"data",    "teacher", "supernet", "search", "retrain",
                                           "samples", "eval",    "ablate",   "report"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string r_dir(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r_%.4g", r);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json arch_to_json(const unet::SubnetArch& arch) {
  json a = json::array();
  for (const auto& b : arch.blocks) a.push_back(b.kernels);
  return a;
}

unet::SubnetArch arch_from_json(const json& j) {
  unet::SubnetArch arch;
  for (const auto& b : j) arch.blocks.push_back({b.get<std::vector<int>>()});
  return arch;
}

json parse_file(const fs::path& path) {
  try {
    return json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what(), 0);
  }
}

std::string tables_to_json(const std::vector<search::BlockTable>& tables) {
  json j = json::array();
  for (const auto& t : tables) {
    json c = json::array();
    for (const auto& cand : t.candidates)
      c.push_back({{"kernels", cand.arch.kernels}, {"loss", cand.loss}, {"rel_loss", cand.rel_loss}, {"cost", cand.cost}});
    j.push_back({{"block", t.block}, {"base_index", t.base_index}, {"candidates", c}});
  }
  return j.dump(1) + "\n";
}

std::vector<search::BlockTable> tables_from_json(const json& j) {
  std::vector<search::BlockTable> out;
  for (const auto& t : j) {
    search::BlockTable bt;
    bt.block = t.at("block").get<int>();
    bt.base_index = t.at("base_index").get<std::size_t>();
    for (const auto& c : t.at("candidates"))
      bt.candidates.push_back({{c.at("kernels").get<std::vector<int>>()}, c.at("loss").get<double>(),
                               c.at("rel_loss").get<double>(), c.at("cost").get<std::uint64_t>()});
    out.push_back(std::move(bt));
  }
  return out;
}

json metrics_to_json(const ModelMetrics& m) {
  return {{"model", m.model}, {"arch", m.arch},       {"macs", m.macs},
          {"params", m.params}, {"mmd2", m.mmd2},     {"frechet", m.frechet},
          {"probe_l_ori", m.probe_l_ori}};
}

ModelMetrics metrics_from_json(const json& j) {
  ModelMetrics m;
  m.model = j.at("model").get<std::string>();
  m.arch = j.at("arch").get<std::string>();
  m.macs = j.at("macs").get<std::uint64_t>();
  m.params = j.at("params").get<std::uint64_t>();
  m.mmd2 = j.at("mmd2").get<double>();
  m.frechet = j.at("frechet").get<double>();
  m.probe_l_ori = j.at("probe_l_ori").get<double>();
  return m;
}

json record_to_json(const StageRecord& r) {
  return {{"stage", r.stage},   {"seed", r.seed},     {"input_key", r.input_key},
          {"outputs", r.outputs}, {"logs", r.logs}, {"wall_ms", r.wall_ms}};
}

StageRecord record_from_json(const json& j) {
  StageRecord r;
  r.stage = j.at("stage").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.input_key = j.at("input_key").get<std::string>();
  r.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  r.logs = j.at("logs").get<std::vector<std::string>>();
  r.wall_ms = j.at("wall_ms").get<double>();
  return r;
}

// Writes stage outputs under the seed directory and records their hashes.
struct StageWriter {
  fs::path root;
  StageRecord& rec;

  void output(const std::string& rel, std::span<const std::uint8_t> bytes) {
    io::atomic_write(root / rel, bytes);
    rec.outputs[rel] = io::sha256_hex(bytes);
  }
  void output(const std::string& rel, std::string_view text) {
    output(rel, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  void log(const std::string& rel, std::string_view text) {
    io::atomic_write(root / rel, text);
    rec.logs.push_back(rel);
  }
};

std::string loss_log_csv(const std::vector<unet::LossLogRow>& rows, int block = -1) {
  std::ostringstream os;
  if (block < 0) os << "step,loss,wall_ms\n";
  for (const auto& r : rows) {
    if (block >= 0) os << block << ',';
    os << r.step << ',' << num(r.loss) << ',' << num(r.wall_ms) << '\n';
  }
  return os.str();
}

bool finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

std::shared_ptr<const Tensor> load_tensor(const fs::path& path) {
  return std::make_shared<const Tensor>(data::load_raw_tensor_file(path));
}

}  // namespace

SeedRun::SeedRun(const config::PipelineConfig& config, std::uint64_t seed, const Options& options)
    : cfg_(config),
      seed_(seed),
      opt_(options),
      dir_(options.out_dir / ("seed_" + std::to_string(seed))),
      sched_(config.schedule()) {}

void SeedRun::say(const std::string& line) const {
  if (opt_.log) *opt_.log << "[seed " << seed_ << "] " << line << std::endl;
}

fs::path SeedRun::require(const fs::path& rel) const {
  const fs::path p = dir_ / rel;
  if (!fs::exists(p)) throw StageDependencyError("missing prerequisite artifact: " + p.string());
  return p;
}

template <class Fn>
StageRecord SeedRun::run_stage(const std::string& name, const std::vector<std::string>& sections,
                               const std::vector<fs::path>& inputs, Fn&& body) {
  json key;
  key["stage"] = name;
  key["seed"] = seed_;
  const json cj = json::parse(config::to_json(cfg_));
  for (const auto& s : sections) key["config"][s] = cj.at(s);
  key["inputs"] = json::object();
  for (const auto& in : inputs) key["inputs"][in.string()] = io::sha256_file(require(in));
  const std::string key_text = key.dump();
  const std::string input_key =
      io::sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(key_text.data()), key_text.size()));

  const fs::path stage_file = dir_ / name / "stage.json";
  if (opt_.resume && fs::exists(stage_file)) {
    StageRecord old = record_from_json(parse_file(stage_file));
    bool fresh = old.input_key == input_key;
    for (const auto& [rel, hash] : old.outputs) fresh = fresh && fs::exists(dir_ / rel) && io::sha256_file(dir_ / rel) == hash;
    if (fresh) {
      say(name + ": up to date");
      old.resumed = true;
      return old;
    }
  }

  say(name + ": running");
  const auto t0 = std::chrono::steady_clock::now();
  StageRecord rec;
  rec.stage = name;
  rec.seed = seed_;
  rec.input_key = input_key;
  StageWriter w{dir_, rec};
  body(w);
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  io::atomic_write(stage_file, record_to_json(rec).dump(2) + "\n");
  say(name + ": done in " + num(rec.wall_ms / 1000.0) + " s");
  return rec;
}

StageRecord SeedRun::prepare_data() {
  std::vector<fs::path> inputs;
  if (cfg_.dataset.source == data::Source::RawFile) inputs.push_back(fs::absolute(cfg_.dataset.path));
  return run_stage("data", {"dataset", "evaluate"}, inputs, [&](StageWriter& w) {
    const data::DatasetSpec spec = config::dataset_for_seed(cfg_, seed_);
    const Tensor train = data::make_dataset(spec);
    w.output("data/dataset.dtns", data::encode_dtns(train));
    // Held-out reference set for the quality metrics.
    Tensor ref;
    if (spec.source == data::Source::RawFile) {
      ref = train.slice_batch(0, std::min<int>(cfg_.evaluate.reference_count, train.shape()[0]));
    } else {
      data::DatasetSpec rs = spec;
      rs.count = cfg_.evaluate.reference_count;
      Rng rng(stage_seed(seed_, Tag::Reference));
      ref = data::generate_synthetic(rs, rng);
    }
    w.output("data/reference.dtns", data::encode_dtns(ref));
  });
}

StageRecord SeedRun::train_teacher() {
  return run_stage("teacher", {"model", "diffusion", "teacher"}, {"data/dataset.dtns"}, [&](StageWriter& w) {
    const auto data = load_tensor(dir_ / "data/dataset.dtns");
    unet::UNet net = unet::UNet::fixed(cfg_.model, unet::teacher_arch(cfg_.model), stage_seed(seed_, Tag::TeacherInit));
    unet::TeacherTrainOptions o;
    o.steps = cfg_.teacher.steps;
    o.batch_size = cfg_.teacher.batch_size;
    o.adam.lr = static_cast<float>(cfg_.teacher.lr);
    o.log_interval = cfg_.teacher.log_interval;
    o.seed = stage_seed(seed_, Tag::TeacherTrain);
    const auto log = unet::train_teacher(net, data, sched_, o);
    w.output("teacher/teacher.dnas", checkpoint::encode(checkpoint::snapshot(net)));
    w.log("teacher/loss_log.csv", loss_log_csv(log));
  });
}

StageRecord SeedRun::train_supernet() {
  return run_stage("supernet", {"model", "diffusion", "supernet"}, {"data/dataset.dtns", "teacher/teacher.dnas"},
                   [&](StageWriter& w) {
                     const auto data = load_tensor(dir_ / "data/dataset.dtns");
                     unet::UNet teacher = checkpoint::restore(cfg_.model, checkpoint::load(dir_ / "teacher/teacher.dnas"));
                     teacher.freeze();
                     unet::UNet super = unet::UNet::supernet(cfg_.model, stage_seed(seed_, Tag::SupernetInit));
                     unet::BlockTrainOptions o;
                     o.steps = cfg_.supernet.steps;
                     o.batch_size = cfg_.supernet.batch_size;
                     o.adam.lr = static_cast<float>(cfg_.supernet.lr);
                     o.log_interval = cfg_.supernet.log_interval;
                     o.seed = stage_seed(seed_, Tag::SupernetTrain);
                     o.probe_batches = cfg_.supernet.probe_batches;
                     std::vector<int> blocks(static_cast<std::size_t>(cfg_.model.block_count()));
                     for (int b = 0; b < cfg_.model.block_count(); ++b) blocks[static_cast<std::size_t>(b)] = b;
                     const auto reports =
                         unet::train_supernet(super, teacher, blocks, data, sched_, o, cfg_.supernet.threads);
                     w.output("supernet/supernet.dnas", checkpoint::encode(checkpoint::snapshot(super)));
                     std::ostringstream probe, log;
                     probe << "block,probe_before,probe_after\n";
                     log << "block,step,loss,wall_ms\n";
                     for (const auto& r : reports) {
                       probe << r.block << ',' << num(r.probe_before) << ',' << num(r.probe_after) << '\n';
                       log << loss_log_csv(r.log, r.block);
                     }
                     w.output("supernet/probe.csv", probe.str());
                     w.log("supernet/block_log.csv", log.str());
                   });
}

StageRecord SeedRun::search() {
  return run_stage(
      "search", {"model", "diffusion", "search"},
      {"data/dataset.dtns", "teacher/teacher.dnas", "supernet/supernet.dnas"}, [&](StageWriter& w) {
        const auto data = load_tensor(dir_ / "data/dataset.dtns");
        unet::UNet teacher = checkpoint::restore(cfg_.model, checkpoint::load(dir_ / "teacher/teacher.dnas"));
        teacher.freeze();
        unet::UNet super = checkpoint::restore(cfg_.model, checkpoint::load(dir_ / "supernet/supernet.dnas"));
        super.freeze();
        search::SearchConfig sc;
        sc.eval_batches = cfg_.search.eval_batches;
        sc.batch_size = cfg_.search.batch_size;
        sc.eval_seed = stage_seed(seed_, Tag::SearchEval);
        sc.enumeration_cap = cfg_.search.enumeration_cap;
        sc.search_middle = cfg_.search.search_middle;
        const auto tables = search::evaluate_all(super, teacher, data, sched_, sc);
        w.output("search/tables.json", tables_to_json(tables));

        const auto teacher_cost = cost::cost_of_arch(cfg_.model, unet::teacher_arch(cfg_.model));
        std::ostringstream summary;
        summary << "r,arch,macs,params,macs_m,reduction_percent,constraint_ok,audit_violations\n";
        for (double r : cfg_.search.r_values) {
          const search::SearchResult res = search::search_all(tables, r);
          const std::string audit = search::audit_csv(tables, res);
          w.output("search/" + r_dir(r) + "/audit.csv", audit);
          w.output("search/" + r_dir(r) + "/result.json", search::to_json(res));
          const auto check = search::verify_audit(audit, r);
          const auto c = cost::cost_of_arch(cfg_.model, res.arch);
          summary << num(r) << ',' << csv_field(res.arch.str()) << ',' << c.total_macs << ',' << c.total_params << ','
                  << cost::format_with_reduction(c.total_macs / 1e6, teacher_cost.total_macs / 1e6) << ','
                  << num(cost::reduction_percent(static_cast<double>(c.total_macs),
                                                 static_cast<double>(teacher_cost.total_macs)))
                  << ',' << (check.violations == 0 && res.constraint_holds() ? "true" : "false") << ','
                  << check.violations << '\n';
        }
        w.output("search/summary.csv", summary.str());

        // Loss magnitudes differ a lot between blocks; keep them inspectable.
        std::ostringstream stats;
        stats << "block,candidates,base_loss,min_loss,max_loss,mean_loss,mean_rel_loss,base_cost\n";
        for (const auto& t : tables) {
          double lo = t.candidates.front().loss, hi = lo, sum = 0.0, rel = 0.0;
          for (const auto& c : t.candidates) {
            lo = std::min(lo, c.loss);
            hi = std::max(hi, c.loss);
            sum += c.loss;
            rel += c.rel_loss;
          }
          const double n = static_cast<double>(t.candidates.size());
          stats << t.block << ',' << t.candidates.size() << ',' << num(t.base().loss) << ',' << num(lo) << ','
                << num(hi) << ',' << num(sum / n) << ',' << num(rel / n) << ',' << t.base().cost << '\n';
        }
        w.output("search/block_stats.csv", stats.str());
      });
}

namespace {

retrain::RetrainConfig retrain_config(const config::PipelineConfig& c, std::uint64_t seed, retrain::BetaKind kind,
                                      double fixed_value) {
  retrain::RetrainConfig r;
  r.gamma = c.retrain.gamma;
  r.schedule.kind = kind;
  r.schedule.beta_steps = static_cast<int>(std::lround(c.retrain.beta_steps_fraction * c.retrain.steps));
  r.schedule.fixed_value = fixed_value;
  r.total_steps = c.retrain.steps;
  r.batch_size = c.retrain.batch_size;
  r.adam.lr = static_cast<float>(c.retrain.lr);
  r.seed = stage_seed(seed, Tag::RetrainTrain);
  r.log_interval = c.retrain.log_interval;
  r.checkpoint_interval = c.retrain.checkpoint_interval;
  return r;
}

// Retrains `arch`, writing student.dnas, periodic checkpoints and the log under `prefix`.
void retrain_into(StageWriter& w, const std::string& prefix, const config::PipelineConfig& c,
                  const unet::SubnetArch& arch, const unet::UNet& teacher, std::shared_ptr<const Tensor> data,
                  const diffusion::NoiseSchedule& sched, const retrain::RetrainConfig& rc) {
  retrain::RetrainResult res = retrain::retrain(c.model, arch, teacher, std::move(data), sched, rc,
                                                [&](int step, const unet::UNet& net) {
                                                  w.output(prefix + "/ckpt_" + std::to_string(step) + ".dnas",
                                                           checkpoint::encode(checkpoint::snapshot(net)));
                                                });
  w.output(prefix + "/student.dnas", checkpoint::encode(checkpoint::snapshot(res.student)));
  w.output(prefix + "/arch.json", json{{"arch", arch_to_json(arch)}, {"str", arch.str()}}.dump() + "\n");
  w.log(prefix + "/log.csv", retrain::log_csv(res.log));
}

}  // namespace

StageRecord SeedRun::retrain() {
  const std::string result = "search/" + r_dir(cfg_.retrain.r) + "/result.json";
  return run_stage("retrain", {"model", "diffusion", "retrain"}, {"data/dataset.dtns", "teacher/teacher.dnas", result},
                   [&](StageWriter& w) {
                     const auto data = load_tensor(dir_ / "data/dataset.dtns");
                     unet::UNet teacher = checkpoint::restore(cfg_.model, checkpoint::load(dir_ / "teacher/teacher.dnas"));
                     teacher.freeze();
                     const auto arch = search::search_result_from_json(io::read_text(dir_ / result)).arch;
                     for (const auto& s : cfg_.retrain.schedules) {
                       const auto rc = retrain_config(cfg_, seed_, retrain::parse_beta_kind(s), 0.5);
                       retrain_into(w, "retrain/" + s, cfg_, arch, teacher, data, sched_, rc);
                     }
                   });
}

Tensor SeedRun::sample_checkpoint(const fs::path& path, int count) const {
  const checkpoint::Checkpoint ck = checkpoint::load(path);
  if (ck.is_supernet())
    throw ConfigError(path.string() +
                      " is a supernet checkpoint; weights inherited from the supernet are not sampled, retrain the "
                      "searched arch first");
  const unet::UNet net = checkpoint::restore(cfg_.model, ck);
  const diffusion::SampleShape shape{count, cfg_.model.image_channels, cfg_.model.image_size, cfg_.model.image_size};
  const std::uint64_t seed = stage_seed(seed_, Tag::Sample);
  Tensor x = cfg_.evaluate.sampler == "ddim"
                 ? diffusion::ddim_sample(net.predictor(net.arch()), sched_, cfg_.evaluate.ddim_steps, seed, shape)
                 : diffusion::ancestral_sample(net.predictor(net.arch()), sched_, seed, shape);
  if (!finite(x)) throw NumericError("non-finite samples from " + path.string());
  return x;
}

std::vector<std::string> SeedRun::model_names() const {
  std::vector<std::string> names{"teacher"};
  for (const auto& s : cfg_.retrain.schedules) names.push_back("searched-" + s);
  return names;
}

namespace {

fs::path checkpoint_of(const std::string& model) {
  if (model == "teacher") return "teacher/teacher.dnas";
  return "retrain/" + model.substr(std::string("searched-").size()) + "/student.dnas";
}

}  // namespace

StageRecord SeedRun::sample() {
  std::vector<fs::path> inputs;
  for (const auto& m : model_names()) inputs.push_back(checkpoint_of(m));
  return run_stage("samples", {"model", "diffusion", "evaluate"}, inputs, [&](StageWriter& w) {
    for (const auto& m : model_names()) {
      const Tensor x = sample_checkpoint(dir_ / checkpoint_of(m), cfg_.evaluate.samples);
      w.output("samples/" + m + ".dtns", data::encode_dtns(x));
    }
  });
}

ModelMetrics SeedRun::evaluate_model(const std::string& name, const fs::path& ckpt, const fs::path& samples) const {
  const auto data = load_tensor(dir_ / "data/dataset.dtns");
  const Tensor ref = data::load_raw_tensor_file(dir_ / "data/reference.dtns");
  const Tensor gen = data::load_raw_tensor_file(samples);
  const unet::UNet net = checkpoint::restore(cfg_.model, checkpoint::load(ckpt));
  const auto c = cost::cost_of_arch(cfg_.model, net.arch());
  ModelMetrics m;
  m.model = name;
  m.arch = net.arch().str();
  m.macs = c.total_macs;
  m.params = c.total_params;
  m.mmd2 = metrics::mmd2_rbf(gen, ref);
  m.frechet = metrics::frechet_diag(gen, ref);
  m.probe_l_ori = retrain::probe_loss_ori(net, data, sched_, stage_seed(seed_, Tag::Probe), cfg_.retrain.probe_batches,
                                          cfg_.retrain.batch_size);
  return m;
}

StageRecord SeedRun::evaluate() {
  std::vector<fs::path> inputs{"data/dataset.dtns", "data/reference.dtns"};
  for (const auto& m : model_names()) {
    inputs.push_back(checkpoint_of(m));
    inputs.push_back("samples/" + m + ".dtns");
  }
  return run_stage("eval", {"model", "diffusion", "retrain", "evaluate"}, inputs, [&](StageWriter& w) {
    for (const auto& m : model_names()) {
      const ModelMetrics mm = evaluate_model(m, dir_ / checkpoint_of(m), dir_ / ("samples/" + m + ".dtns"));
      w.output("eval/" + m + ".json", metrics_to_json(mm).dump(2) + "\n");
      say("  " + m + ": macs " + std::to_string(mm.macs) + " mmd2 " + num(mm.mmd2) + " probe " + num(mm.probe_l_ori));
    }
  });
}

StageRecord SeedRun::ablate() {
  const std::string result = "search/" + r_dir(cfg_.retrain.r) + "/result.json";
  return run_stage(
      "ablate", {"model", "diffusion", "retrain", "evaluate", "ablations"},
      {"data/dataset.dtns", "data/reference.dtns", "teacher/teacher.dnas", "search/tables.json", result},
      [&](StageWriter& w) {
        const auto data = load_tensor(dir_ / "data/dataset.dtns");
        unet::UNet teacher = checkpoint::restore(cfg_.model, checkpoint::load(dir_ / "teacher/teacher.dnas"));
        teacher.freeze();
        const auto searched = search::search_result_from_json(io::read_text(dir_ / result)).arch;
        const auto tables = tables_from_json(parse_file(dir_ / "search/tables.json"));
        const std::uint64_t base = stage_seed(seed_, Tag::Ablation);
        const double tol = cfg_.ablations.random_tolerance_percent;
        std::ostringstream table;
        table << "variant,arch,macs,mmd2,frechet,probe_l_ori\n";
        for (std::size_t i = 0; i < cfg_.ablations.variants.size(); ++i) {
          const std::string& v = cfg_.ablations.variants[i];
          unet::SubnetArch arch = searched;
          auto rc = retrain_config(cfg_, seed_, retrain::BetaKind::Step, 0.5);
          if (v == "random") {
            Rng rng = Rng::derive(base, {1});
            arch = search::random_arch_matching_cost(cfg_.model, cost::cost_of_arch(cfg_.model, searched).total_macs,
                                                     tol, rng);
          } else if (v == "no-dis") {
            rc.schedule = {retrain::BetaKind::Fixed, 0, 1.0};
          } else if (v == "fixed-loss") {
            rc.schedule = {retrain::BetaKind::Fixed, 0, cfg_.ablations.fixed_beta};
          } else if (v == "evolutionary") {
            search::EvolutionConfig ec;
            ec.generations = cfg_.ablations.generations;
            ec.population = cfg_.ablations.population;
            ec.seed = Rng::derive(base, {4}).next_u64();
            arch = search::evolutionary_global_search(tables, ec);
          }
          say("  ablation " + v + ": " + arch.str());
          const std::string prefix = "ablate/" + v;
          retrain_into(w, prefix, cfg_, arch, teacher, data, sched_, rc);
          const Tensor x = sample_checkpoint(dir_ / (prefix + "/student.dnas"), cfg_.evaluate.samples);
          w.output(prefix + "/samples.dtns", data::encode_dtns(x));
          const ModelMetrics mm =
              evaluate_model(v, dir_ / (prefix + "/student.dnas"), dir_ / (prefix + "/samples.dtns"));
          w.output(prefix + "/metrics.json", metrics_to_json(mm).dump(2) + "\n");
          table << v << ',' << csv_field(mm.arch) << ',' << mm.macs << ',' << num(mm.mmd2) << ',' << num(mm.frechet)
                << ',' << num(mm.probe_l_ori) << '\n';
          say("  " + v + ": macs " + std::to_string(mm.macs) + " mmd2 " + num(mm.mmd2) + " probe " + num(mm.probe_l_ori));
        }
        w.output("ablate/table.csv", table.str());
      });
}

std::vector<ModelMetrics> SeedRun::metrics() const {
  std::vector<ModelMetrics> out;
  for (const auto& m : model_names()) out.push_back(metrics_from_json(parse_file(require("eval/" + m + ".json"))));
  for (const auto& v : cfg_.ablations.variants) {
    const fs::path p = dir_ / "ablate" / v / "metrics.json";
    if (cfg_.ablations.enabled && fs::exists(p)) out.push_back(metrics_from_json(parse_file(p)));
  }
  return out;
}

StageRecord SeedRun::report() {
  std::vector<fs::path> inputs;
  for (const auto& m : model_names()) inputs.push_back("eval/" + m + ".json");
  if (cfg_.ablations.enabled)
    for (const auto& v : cfg_.ablations.variants) inputs.push_back("ablate/" + v + "/metrics.json");
  return run_stage("report", {"ablations"}, inputs, [&](StageWriter& w) {
    std::vector<std::pair<std::uint64_t, ModelMetrics>> rows;
    for (auto& m : metrics()) rows.emplace_back(seed_, std::move(m));
    w.output("report/report.csv", report_csv(rows));
    w.output("report/report.json", report_json(rows));
  });
}

// --------------------------------------------------------------------------

namespace {

struct ReportCells {
  std::vector<std::pair<std::string, std::string>> cells;  // column -> text
  std::vector<bool> numeric;
};

std::vector<ReportCells> report_cells(const std::vector<std::pair<std::uint64_t, ModelMetrics>>& rows) {
  std::vector<ReportCells> out;
  for (const auto& [seed, m] : rows) {
    const ModelMetrics* teacher = nullptr;
    for (const auto& [s2, m2] : rows)
      if (s2 == seed && m2.model == "teacher") teacher = &m2;
    if (!teacher) throw ContractError("report for seed " + std::to_string(seed) + " has no teacher row");
    ReportCells r;
    auto add = [&](const char* col, std::string text, bool numeric) {
      r.cells.emplace_back(col, std::move(text));
      r.numeric.push_back(numeric);
    };
    add("seed", std::to_string(seed), true);
    add("model", m.model, false);
    add("arch", m.arch, false);
    add("macs", std::to_string(m.macs), true);
    add("macs_m", cost::format_with_reduction(m.macs / 1e6, teacher->macs / 1e6), false);
    add("params", std::to_string(m.params), true);
    add("params_k", cost::format_with_reduction(m.params / 1e3, teacher->params / 1e3, 1), false);
    add("mmd2", num(m.mmd2), true);
    add("frechet", num(m.frechet), true);
    add("probe_l_ori", num(m.probe_l_ori), true);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

std::string report_header() { return "seed,model,arch,macs,macs_m,params,params_k,mmd2,frechet,probe_l_ori"; }

std::string report_csv(const std::vector<std::pair<std::uint64_t, ModelMetrics>>& rows) {
  std::string out = report_header() + "\n";
  for (const auto& r : report_cells(rows)) {
    for (std::size_t i = 0; i < r.cells.size(); ++i) out += (i ? "," : "") + csv_field(r.cells[i].second);
    out += "\n";
  }
  return out;
}

std::string report_json(const std::vector<std::pair<std::uint64_t, ModelMetrics>>& rows) {
  json arr = json::array();
  for (const auto& r : report_cells(rows)) {
    json o = json::object();
    for (std::size_t i = 0; i < r.cells.size(); ++i)
      o[r.cells[i].first] = r.numeric[i] ? json::parse(r.cells[i].second) : json(r.cells[i].second);
    arr.push_back(o);
  }
  return json{{"columns", report_header()}, {"rows", arr}}.dump(2) + "\n";
}

std::string build_manifest(const config::PipelineConfig& config, const fs::path& out_dir) {
  json m;
  m["tool_version"] = kToolVersion;
  m["config"] = json::parse(config::to_json(config));
  m["stage_seeds"] = json::object();
  m["stages"] = json::array();
  for (std::uint64_t s : config.seeds) {
    json seeds = json::object();
    for (const auto& [name, tag] : kTags) seeds[name] = stage_seed(s, tag);
    m["stage_seeds"][std::to_string(s)] = seeds;
    for (const auto& st : kStageOrder) {
      const fs::path p = out_dir / ("seed_" + std::to_string(s)) / st / "stage.json";
      if (!fs::exists(p)) continue;
      json rec = parse_file(p);
      rec["dir"] = "seed_" + std::to_string(s);
      m["stages"].push_back(rec);
    }
  }
  return m.dump(2) + "\n";
}

std::map<std::string, std::string> manifest_hashes(const std::string& manifest_json) {
  std::map<std::string, std::string> out;
  const json m = json::parse(manifest_json);
  for (const auto& st : m.at("stages"))
    for (const auto& [rel, hash] : st.at("outputs").items())
      out[st.at("dir").get<std::string>() + "/" + rel] = hash.get<std::string>();
  return out;
}

void run_command(const std::string& command, const config::PipelineConfig& config, const Options& options) {
  static const std::vector<std::string> known{"train-teacher", "train-supernet", "search", "retrain", "sample",
                                              "evaluate",      "ablate",         "report", "pipeline"};
  if (std::find(known.begin(), known.end(), command) == known.end())
    throw ConfigError("unknown command '" + command + "'");
  std::vector<std::pair<std::uint64_t, ModelMetrics>> rows;
  std::exception_ptr failure;
  try {
    for (std::uint64_t seed : config.seeds) {
      SeedRun run(config, seed, options);
      const bool all = command == "pipeline";
      if (all || command == "train-teacher") {
        run.prepare_data();
        run.train_teacher();
      }
      if (all || command == "train-supernet") run.train_supernet();
      if (all || command == "search") run.search();
      if (all || command == "retrain") run.retrain();
      if (all || command == "sample") run.sample();
      if (all || command == "evaluate") run.evaluate();
      if ((all && config.ablations.enabled) || command == "ablate") {
        if (!config.ablations.enabled) throw ConfigError("ablations are disabled in the config");
        run.ablate();
      }
      if (all || command == "report") {
        run.report();
        for (auto& m : run.metrics()) rows.emplace_back(seed, std::move(m));
      }
    }
  } catch (...) {
    failure = std::current_exception();
  }
  // The manifest reflects whatever finished, even on failure.
  fs::create_directories(options.out_dir);
  io::atomic_write(options.out_dir / "manifest.json", build_manifest(config, options.out_dir));
  if (failure) std::rethrow_exception(failure);
  if (!rows.empty()) {
    io::atomic_write(options.out_dir / "report.csv", report_csv(rows));
    io::atomic_write(options.out_dir / "report.json", report_json(rows));
  }
}

}  // namespace diffnas::pipeline
