#include "diffnas/config.hpp"

#include <json.hpp>
#include <algorithm>
#include <limits>
#include <set>

#include "diffnas/error.hpp"
#include "diffnas/io.hpp"

namespace diffnas::config {

using json = nlohmann::json;

namespace {

// Reads the members of one JSON object and rejects any key left unread.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + where_ + "." + k + "'");
    }
  }
  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, int& out) {
    if (const json* v = get(key)) {
      if (!v->is_number_integer()) throw type_error(key, "an integer");
      const auto x = v->get<long long>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) throw type_error(key, "an int");
      out = static_cast<int>(x);
    }
  }
  void read(const std::string& key, std::size_t& out) {
    if (const json* v = get(key)) {
      if (!v->is_number_unsigned()) throw type_error(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const std::string& key, double& out) {
    if (const json* v = get(key)) {
      if (!v->is_number()) throw type_error(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = get(key)) {
      if (!v->is_boolean()) throw type_error(key, "true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const json* v = get(key)) {
      if (!v->is_string()) throw type_error(key, "a string");
      out = v->get<std::string>();
    }
  }
  template <class T>
  void read(const std::string& key, std::vector<T>& out) {
    if (const json* v = get(key)) {
      if (!v->is_array()) throw type_error(key, "an array");
      std::vector<T> r;
      for (const json& e : *v) {
        if constexpr (std::is_same_v<T, std::string>) {
          if (!e.is_string()) throw type_error(key, "an array of strings");
        } else if constexpr (std::is_floating_point_v<T>) {
          if (!e.is_number()) throw type_error(key, "an array of numbers");
        } else if constexpr (std::is_unsigned_v<T>) {
          if (!e.is_number_unsigned()) throw type_error(key, "an array of non-negative integers");
        } else {
          if (!e.is_number_integer()) throw type_error(key, "an array of integers");
        }
        r.push_back(e.get<T>());
      }
      out = std::move(r);
    }
  }
  const std::string& where() const { return where_; }

 private:
  ConfigError type_error(const std::string& key, const char* what) const {
    return ConfigError(where_ + "." + key + " must be " + what);
  }
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void parse_into(const json& root, PipelineConfig& c) {
  Section top(root, "config");
  if (const json* s = top.get("seed")) {
    if (!s->is_number_unsigned()) throw ConfigError("config.seed must be a non-negative integer");
    c.seeds = {s->get<std::uint64_t>()};
    if (top.get("seeds")) throw ConfigError("config: give either seed or seeds, not both");
  }
  top.read("seeds", c.seeds);

  if (const json* j = top.get("dataset")) {
    Section s(*j, "dataset");
    std::string source = data::to_string(c.dataset.source), path = c.dataset.path.string();
    s.read("source", source);
    c.dataset.source = data::parse_source(source);
    s.read("image_size", c.dataset.image_size);
    s.read("channels", c.dataset.channels);
    s.read("count", c.dataset.count);
    if (s.get("seed")) {
      s.read("seed", c.dataset.seed);
      c.dataset_seed_fixed = true;
    }
    s.read("path", path);
    c.dataset.path = path;
  }
  if (const json* j = top.get("model")) {
    Section s(*j, "model");
    s.read("levels", c.model.levels);
    s.read("base_channels", c.model.base_channels);
    s.read("channel_mult", c.model.channel_mult);
    if (const json* l = s.get("layers_per_block")) {
      if (l->is_number_integer()) {
        c.model.layers_per_block.assign(static_cast<std::size_t>(2 * c.model.levels + 1), l->get<int>());
      } else {
        s.read("layers_per_block", c.model.layers_per_block);
      }
    } else {
      const int d = c.model.layers_per_block.empty() ? 2 : c.model.layers_per_block.front();
      c.model.layers_per_block.assign(static_cast<std::size_t>(2 * c.model.levels + 1), d);
    }
    s.read("time_embed_dim", c.model.time_embed_dim);
  }
  if (const json* j = top.get("diffusion")) {
    Section s(*j, "diffusion");
    s.read("timesteps", c.diffusion.timesteps);
    s.read("beta_start", c.diffusion.beta_start);
    s.read("beta_end", c.diffusion.beta_end);
  }
  if (const json* j = top.get("teacher")) {
    Section s(*j, "teacher");
    s.read("steps", c.teacher.steps);
    s.read("batch_size", c.teacher.batch_size);
    s.read("lr", c.teacher.lr);
    s.read("log_interval", c.teacher.log_interval);
  }
  if (const json* j = top.get("supernet")) {
    Section s(*j, "supernet");
    s.read("steps", c.supernet.steps);
    s.read("batch_size", c.supernet.batch_size);
    s.read("lr", c.supernet.lr);
    s.read("log_interval", c.supernet.log_interval);
    s.read("threads", c.supernet.threads);
    s.read("probe_batches", c.supernet.probe_batches);
  }
  if (const json* j = top.get("search")) {
    Section s(*j, "search");
    s.read("r_values", c.search.r_values);
    s.read("eval_batches", c.search.eval_batches);
    s.read("batch_size", c.search.batch_size);
    s.read("search_middle", c.search.search_middle);
    s.read("enumeration_cap", c.search.enumeration_cap);
  }
  if (const json* j = top.get("retrain")) {
    Section s(*j, "retrain");
    s.read("r", c.retrain.r);
    s.read("steps", c.retrain.steps);
    s.read("batch_size", c.retrain.batch_size);
    s.read("lr", c.retrain.lr);
    s.read("gamma", c.retrain.gamma);
    s.read("schedules", c.retrain.schedules);
    s.read("beta_steps_fraction", c.retrain.beta_steps_fraction);
    s.read("log_interval", c.retrain.log_interval);
    s.read("checkpoint_interval", c.retrain.checkpoint_interval);
    s.read("probe_batches", c.retrain.probe_batches);
  }
  if (const json* j = top.get("evaluate")) {
    Section s(*j, "evaluate");
    s.read("samples", c.evaluate.samples);
    s.read("sampler", c.evaluate.sampler);
    s.read("ddim_steps", c.evaluate.ddim_steps);
    s.read("reference_count", c.evaluate.reference_count);
  }
  if (const json* j = top.get("ablations")) {
    Section s(*j, "ablations");
    s.read("enabled", c.ablations.enabled);
    s.read("variants", c.ablations.variants);
    s.read("fixed_beta", c.ablations.fixed_beta);
    s.read("random_tolerance_percent", c.ablations.random_tolerance_percent);
    s.read("generations", c.ablations.generations);
    s.read("population", c.ablations.population);
  }
  c.model.image_size = c.dataset.image_size;
  c.model.image_channels = c.dataset.channels;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

void PipelineConfig::validate() const {
  require(!seeds.empty(), "at least one seed is required");
  require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), "seeds must be distinct");
  dataset.validate();
  require(dataset.count >= 1, "dataset.count must be positive");
  model.validate();
  require(model.image_size == dataset.image_size && model.image_channels == dataset.channels,
          "model image shape must match the dataset");
  require(diffusion.timesteps >= 1, "diffusion.timesteps must be positive");
  require(diffusion.beta_start > 0.0 && diffusion.beta_end < 1.0 && diffusion.beta_start <= diffusion.beta_end,
          "diffusion betas must satisfy 0 < beta_start <= beta_end < 1");
  require(teacher.steps >= 0 && teacher.batch_size >= 1 && teacher.lr > 0.0, "invalid teacher section");
  require(supernet.steps >= 0 && supernet.batch_size >= 1 && supernet.lr > 0.0, "invalid supernet section");
  require(supernet.threads >= 1 && supernet.probe_batches >= 1, "supernet threads and probe_batches must be >= 1");
  require(!search.r_values.empty(), "search.r_values must not be empty");
  for (double r : search.r_values) require(r >= 1.0, "every search r must be >= 1");
  search::SearchConfig sc;
  sc.eval_batches = search.eval_batches;
  sc.batch_size = search.batch_size;
  sc.enumeration_cap = search.enumeration_cap;
  sc.validate();
  require(std::find(search.r_values.begin(), search.r_values.end(), retrain.r) != search.r_values.end(),
          "retrain.r must be one of search.r_values");
  require(retrain.steps >= 1 && retrain.batch_size >= 1 && retrain.lr > 0.0, "invalid retrain section");
  require(retrain.beta_steps_fraction > 0.0 && retrain.beta_steps_fraction <= 1.0,
          "retrain.beta_steps_fraction must lie in (0, 1]");
  require(retrain.probe_batches >= 1, "retrain.probe_batches must be >= 1");
  require(!retrain.schedules.empty(), "retrain.schedules must not be empty");
  for (const auto& s : retrain.schedules) {
    const auto kind = retrain::parse_beta_kind(s);
    require(kind != retrain::BetaKind::Fixed, "retrain.schedules takes step or linear; fixed is an ablation");
  }
  require(evaluate.samples >= 2 && evaluate.reference_count >= 2, "evaluation needs at least 2 samples per side");
  require(evaluate.sampler == "ddim" || evaluate.sampler == "ancestral", "evaluate.sampler must be ddim or ancestral");
  require(evaluate.ddim_steps >= 1 && evaluate.ddim_steps <= diffusion.timesteps,
          "evaluate.ddim_steps must lie in [1, timesteps]");
  static const std::set<std::string> known{"random", "no-dis", "fixed-loss", "evolutionary"};
  for (const auto& v : ablations.variants) require(known.count(v) == 1, "unknown ablation variant '" + v + "'");
  require(ablations.fixed_beta > 0.0 && ablations.fixed_beta < 1.0, "ablations.fixed_beta must lie in (0, 1)");
  require(ablations.random_tolerance_percent > 0.0, "ablations.random_tolerance_percent must be positive");
  require(ablations.generations >= 0 && ablations.population >= 2, "invalid evolutionary settings");
}

diffusion::NoiseSchedule PipelineConfig::schedule() const {
  return diffusion::make_linear_schedule(diffusion.timesteps, diffusion.beta_start, diffusion.beta_end);
}

PipelineConfig parse(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (root.is_object() && root.contains("config") && root.contains("stages")) root = root["config"];
  PipelineConfig c;
  parse_into(root, c);
  c.validate();
  return c;
}

PipelineConfig load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse(io::read_text(path));
}

std::string to_json(const PipelineConfig& c) {
  json j;
  j["seeds"] = c.seeds;
  json d{{"source", data::to_string(c.dataset.source)},
         {"image_size", c.dataset.image_size},
         {"channels", c.dataset.channels},
         {"count", c.dataset.count}};
  if (c.dataset_seed_fixed) d["seed"] = c.dataset.seed;
  if (c.dataset.source == data::Source::RawFile) d["path"] = c.dataset.path.string();
  j["dataset"] = d;
  j["model"] = {{"levels", c.model.levels},
                {"base_channels", c.model.base_channels},
                {"channel_mult", c.model.channel_mult},
                {"layers_per_block", c.model.layers_per_block},
                {"time_embed_dim", c.model.time_embed_dim}};
  j["diffusion"] = {
      {"timesteps", c.diffusion.timesteps}, {"beta_start", c.diffusion.beta_start}, {"beta_end", c.diffusion.beta_end}};
  j["teacher"] = {{"steps", c.teacher.steps},
                  {"batch_size", c.teacher.batch_size},
                  {"lr", c.teacher.lr},
                  {"log_interval", c.teacher.log_interval}};
  j["supernet"] = {{"steps", c.supernet.steps},
                   {"batch_size", c.supernet.batch_size},
                   {"lr", c.supernet.lr},
                   {"log_interval", c.supernet.log_interval},
                   {"threads", c.supernet.threads},
                   {"probe_batches", c.supernet.probe_batches}};
  j["search"] = {{"r_values", c.search.r_values},
                 {"eval_batches", c.search.eval_batches},
                 {"batch_size", c.search.batch_size},
                 {"search_middle", c.search.search_middle},
                 {"enumeration_cap", c.search.enumeration_cap}};
  j["retrain"] = {{"r", c.retrain.r},
                  {"steps", c.retrain.steps},
                  {"batch_size", c.retrain.batch_size},
                  {"lr", c.retrain.lr},
                  {"gamma", c.retrain.gamma},
                  {"schedules", c.retrain.schedules},
                  {"beta_steps_fraction", c.retrain.beta_steps_fraction},
                  {"log_interval", c.retrain.log_interval},
                  {"checkpoint_interval", c.retrain.checkpoint_interval},
                  {"probe_batches", c.retrain.probe_batches}};
  j["evaluate"] = {{"samples", c.evaluate.samples},
                   {"sampler", c.evaluate.sampler},
                   {"ddim_steps", c.evaluate.ddim_steps},
                   {"reference_count", c.evaluate.reference_count}};
  j["ablations"] = {{"enabled", c.ablations.enabled},
                    {"variants", c.ablations.variants},
                    {"fixed_beta", c.ablations.fixed_beta},
                    {"random_tolerance_percent", c.ablations.random_tolerance_percent},
                    {"generations", c.ablations.generations},
                    {"population", c.ablations.population}};
  return j.dump(2) + "\n";
}

data::DatasetSpec dataset_for_seed(const PipelineConfig& config, std::uint64_t seed) {
  data::DatasetSpec d = config.dataset;
  if (!config.dataset_seed_fixed) d.seed = Rng::derive(seed, {0xDA7A5E7}).next_u64();
  return d;
}

}  // namespace diffnas::config
