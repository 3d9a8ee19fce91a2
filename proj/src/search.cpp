#include "diffnas/search.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "diffnas/data_stream.hpp"
#include "diffnas/error.hpp"
#include "diffnas/ops.hpp"

namespace diffnas::search {

using nlohmann::json;

void SearchConfig::validate() const {
  if (!(r >= 1.0)) throw ConfigError("relaxation coefficient r must be >= 1");
  if (eval_batches < 1) throw ConfigError("eval_batches must be >= 1");
  if (batch_size < 1) throw ConfigError("search batch size must be >= 1");
}

double relative_l2(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) throw DimensionError("relative_l2: shape mismatch");
  const auto t = target.data();
  const auto p = pred.data();
  const std::size_t n = t.size();
  if (n == 0) throw DegenerateTargetError("relative_l2: empty target");
  double mean = 0.0;
  for (float v : t) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0, mse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = t[i] - mean;
    const double d = static_cast<double>(p[i]) - t[i];
    var += c * c;
    mse += d * d;
  }
  var /= static_cast<double>(n);
  mse /= static_cast<double>(n);
  if (var <= 1e-12) throw DegenerateTargetError("relative_l2: target variance " + std::to_string(var) + " is degenerate");
  return mse / var;
}

EvalFixture make_eval_fixture(const unet::UNet& teacher, std::shared_ptr<const Tensor> data,
                              const diffusion::NoiseSchedule& sched, int block, const SearchConfig& config) {
  config.validate();
  const auto b = static_cast<std::uint64_t>(block);
  DataStream stream(std::move(data), Rng::derive(config.eval_seed, {b, 1}));
  Rng noise = Rng::derive(config.eval_seed, {b, 2});
  EvalFixture fx;
  fx.block = block;
  const auto slot = static_cast<std::size_t>(block);
  for (int i = 0; i < config.eval_batches; ++i) {
    unet::TeacherFeatures f = unet::teacher_capture(teacher, stream.next(config.batch_size), noise, sched);
    // Keep only what block i needs.
    for (std::size_t j = 0; j < f.inputs.size(); ++j) {
      if (j == slot) continue;
      f.inputs[j] = Tensor{};
      f.targets[j] = Tensor{};
      f.skips[j] = Tensor{};
    }
    f.batch.x_t = Tensor{};
    fx.batches.push_back(std::move(f));
  }
  return fx;
}

CandidateLoss eval_candidate(const unet::UNet& supernet, const unet::BlockArch& arch, const EvalFixture& fixture) {
  ad::NoGradGuard no_grad;
  CandidateLoss out;
  const auto slot = static_cast<std::size_t>(fixture.block);
  for (const auto& f : fixture.batches) {
    const ad::Var y = supernet.forward_block(fixture.block, arch, ad::Var::constant(f.inputs[slot]),
                                             ad::Var::constant(f.time_embed));
    const Tensor& target = f.targets[slot];
    out.loss += ad::mse_mean(y, ad::Var::constant(target)).value().item();
    out.rel_loss += relative_l2(y.value(), target);
  }
  const auto n = static_cast<double>(fixture.batches.size());
  out.loss /= n;
  out.rel_loss /= n;
  return out;
}

double eval_block_loss(const unet::UNet& supernet, const unet::BlockArch& arch, const EvalFixture& fixture) {
  ad::NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& f : fixture.batches) {
    total += unet::block_distillation_loss(supernet, fixture.block, arch, f).value().item();
  }
  return total / static_cast<double>(fixture.batches.size());
}

std::size_t BlockTable::find(const unet::BlockArch& arch) const {
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (candidates[i].arch == arch) return i;
  return npos;
}

BlockTable evaluate_block(const unet::UNet& supernet, const EvalFixture& fixture, const SearchConfig& config) {
  const unet::UNetConfig& cfg = supernet.config();
  const int block = fixture.block;
  const int d = cfg.layers(block);
  const double count = std::pow(3.0, d);
  if (count > static_cast<double>(config.enumeration_cap)) {
    throw ConfigError("block " + std::to_string(block) + " has " + std::to_string(static_cast<long long>(count)) +
                      " candidates, above the enumeration cap of " + std::to_string(config.enumeration_cap) +
                      "; use fewer layers per block");
  }
  const unet::BlockArch base = unet::teacher_arch(cfg).blocks[static_cast<std::size_t>(block)];
  std::vector<unet::BlockArch> archs;
  if (!config.search_middle && cfg.kind(block) == unet::BlockKind::Middle) {
    archs.push_back(base);
  } else {
    archs = unet::enumerate_block_archs(d);
  }
  BlockTable table;
  table.block = block;
  for (const auto& a : archs) {
    const CandidateLoss l = eval_candidate(supernet, a, fixture);
    table.candidates.push_back({a, l.loss, l.rel_loss, cost::block_macs(cfg, block, a)});
  }
  table.base_index = table.find(base);
  return table;
}

std::vector<BlockTable> evaluate_all(const unet::UNet& supernet, const unet::UNet& teacher,
                                     std::shared_ptr<const Tensor> data, const diffusion::NoiseSchedule& sched,
                                     const SearchConfig& config) {
  std::vector<BlockTable> tables;
  for (int b = 0; b < supernet.config().block_count(); ++b) {
    const EvalFixture fx = make_eval_fixture(teacher, data, sched, b, config);
    tables.push_back(evaluate_block(supernet, fx, config));
  }
  return tables;
}

std::size_t select_candidate(const BlockTable& table, double r) {
  if (table.base_index >= table.candidates.size()) throw ContractError("block table has no base candidate");
  const double loss_base = table.base().loss;
  double loss_min = std::numeric_limits<double>::infinity();
  std::uint64_t cost_min = std::numeric_limits<std::uint64_t>::max();
  std::size_t optimal = BlockTable::npos;
  for (std::size_t i = 0; i < table.candidates.size(); ++i) {
    const Candidate& c = table.candidates[i];
    if (c.loss <= r * loss_base) {
      if (c.cost < cost_min) {
        cost_min = c.cost;
        loss_min = c.loss;
        optimal = i;
      } else if (c.cost == cost_min) {
        if (c.loss < loss_min) {
          loss_min = c.loss;
          optimal = i;
        }
      }
    }
  }
  if (optimal == BlockTable::npos) throw ContractError("no candidate satisfies the constraint; is r < 1?");
  return optimal;
}

BlockResult search_block(const BlockTable& table, double r) {
  const std::size_t i = select_candidate(table, r);
  BlockResult res;
  res.block = table.block;
  res.arch = table.candidates[i].arch;
  res.selected_loss = table.candidates[i].loss;
  res.selected_cost = table.candidates[i].cost;
  res.base_loss = table.base().loss;
  res.base_cost = table.base().cost;
  res.candidates_evaluated = table.candidates.size();
  return res;
}

SearchResult search_all(const std::vector<BlockTable>& tables, double r) {
  if (!(r >= 1.0)) throw ConfigError("relaxation coefficient r must be >= 1");
  SearchResult out;
  out.r = r;
  for (const BlockTable& t : tables) {
    out.blocks.push_back(search_block(t, r));
    out.arch.blocks.push_back(out.blocks.back().arch);
  }
  return out;
}

bool SearchResult::constraint_holds() const {
  return std::all_of(blocks.begin(), blocks.end(),
                     [&](const BlockResult& b) { return b.selected_loss <= r * b.base_loss; });
}

namespace {

std::string choices_str(const unet::BlockArch& a) {
  std::string s;
  for (std::size_t i = 0; i < a.kernels.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(a.kernels[i]);
  }
  return s;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string audit_csv(const std::vector<BlockTable>& tables, const SearchResult& result) {
  std::ostringstream os;
  os << "block,choices,loss,rel_loss,cost,base,satisfies,selected\n";
  for (const BlockTable& t : tables) {
    const BlockResult* sel = nullptr;
    for (const auto& b : result.blocks)
      if (b.block == t.block) sel = &b;
    const double threshold = result.r * t.base().loss;
    for (std::size_t i = 0; i < t.candidates.size(); ++i) {
      const Candidate& c = t.candidates[i];
      os << t.block << ',' << choices_str(c.arch) << ',' << fmt_double(c.loss) << ',' << fmt_double(c.rel_loss) << ','
         << c.cost << ',' << (i == t.base_index ? 1 : 0) << ',' << (c.loss <= threshold ? 1 : 0) << ','
         << (sel && sel->arch == c.arch ? 1 : 0) << '\n';
    }
  }
  return os.str();
}

AuditCheck verify_audit(const std::string& csv, double r) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line.rfind("block,choices,loss", 0) != 0) throw FormatError("audit: bad header", 0);
  struct Acc {
    double base_loss = -1.0, selected_loss = -1.0;
    int selected = 0;
  };
  std::vector<Acc> acc;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw FormatError("audit: expected 8 columns in '" + line + "'", 0);
    const auto block = static_cast<std::size_t>(std::stoi(f[0]));
    if (acc.size() <= block) acc.resize(block + 1);
    const double loss = std::stod(f[2]);
    if (f[5] == "1") acc[block].base_loss = loss;
    if (f[7] == "1") {
      acc[block].selected_loss = loss;
      ++acc[block].selected;
    }
  }
  AuditCheck out;
  out.blocks = static_cast<int>(acc.size());
  for (const Acc& a : acc) {
    const bool ok = a.selected == 1 && a.base_loss >= 0.0 && a.selected_loss <= r * a.base_loss;
    if (!ok) ++out.violations;
  }
  return out;
}

std::string to_json(const SearchResult& result) {
  json j;
  j["r"] = result.r;
  j["arch"] = result.arch.str();
  json blocks = json::array();
  for (const auto& b : result.blocks) {
    blocks.push_back({{"block", b.block},
                      {"choices", b.arch.kernels},
                      {"base_loss", b.base_loss},
                      {"selected_loss", b.selected_loss},
                      {"base_cost", b.base_cost},
                      {"selected_cost", b.selected_cost},
                      {"candidates_evaluated", b.candidates_evaluated}});
  }
  j["blocks"] = std::move(blocks);
  return j.dump(2) + "\n";
}

SearchResult search_result_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    SearchResult out;
    out.r = j.at("r").get<double>();
    for (const auto& b : j.at("blocks")) {
      BlockResult br;
      br.block = b.at("block").get<int>();
      br.arch.kernels = b.at("choices").get<std::vector<int>>();
      br.base_loss = b.at("base_loss").get<double>();
      br.selected_loss = b.at("selected_loss").get<double>();
      br.base_cost = b.at("base_cost").get<std::uint64_t>();
      br.selected_cost = b.at("selected_cost").get<std::uint64_t>();
      br.candidates_evaluated = b.at("candidates_evaluated").get<std::size_t>();
      out.arch.blocks.push_back(br.arch);
      out.blocks.push_back(std::move(br));
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(std::string("search result: ") + e.what(), 0);
  }
}

// --------------------------------------------------------------------------

double summed_rel_loss(const std::vector<BlockTable>& tables, const unet::SubnetArch& arch) {
  if (arch.blocks.size() != tables.size()) throw ContractError("arch and tables disagree on block count");
  double s = 0.0;
  for (std::size_t b = 0; b < tables.size(); ++b) {
    const std::size_t i = tables[b].find(arch.blocks[b]);
    if (i == BlockTable::npos) throw ContractError("arch not present in evaluation table of block " + std::to_string(b));
    s += tables[b].candidates[i].rel_loss;
  }
  return s;
}

unet::SubnetArch evolutionary_global_search(const std::vector<BlockTable>& tables, const EvolutionConfig& config) {
  if (tables.empty()) throw ContractError("evolutionary search needs evaluation tables");
  if (config.population < 1 || config.tournament < 1 || config.elitism < 0 || config.elitism > config.population) {
    throw ConfigError("invalid evolution settings");
  }
  using Genome = std::vector<std::size_t>;  // candidate index per block
  const std::size_t nb = tables.size();

  double base_loss = 0.0;
  double base_cost = 0.0;
  for (const auto& t : tables) {
    base_loss += t.base().rel_loss;
    base_cost += static_cast<double>(t.base().cost);
  }
  struct Scored {
    Genome g;
    double fitness;
    bool feasible;
    double cost;
  };
  auto score = [&](Genome g) {
    double loss = 0.0, c = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      loss += tables[b].candidates[g[b]].rel_loss;
      c += static_cast<double>(tables[b].candidates[g[b]].cost);
    }
    const double excess = loss - base_loss;
    const bool feasible = excess <= 0.0;
    const double fit = feasible ? c : c + config.penalty * base_cost * excess;
    return Scored{std::move(g), fit, feasible, c};
  };

  Rng rng = Rng::derive(config.seed, {0xE7});
  Genome base(nb);
  for (std::size_t b = 0; b < nb; ++b) base[b] = tables[b].base_index;

  std::vector<Scored> pop;
  pop.push_back(score(base));
  while (static_cast<int>(pop.size()) < config.population) {
    Genome g(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      g[b] = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(tables[b].candidates.size()) - 1));
    }
    pop.push_back(score(std::move(g)));
  }
  Scored best = pop.front();
  auto better = [](const Scored& a, const Scored& b) { return a.fitness < b.fitness; };
  auto consider = [&](const Scored& s) {
    if (s.feasible && s.cost < best.cost) best = s;
  };

  auto tournament = [&]() -> const Scored& {
    const Scored* win = nullptr;
    for (int i = 0; i < config.tournament; ++i) {
      const Scored& c = pop[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pop.size()) - 1))];
      if (!win || better(c, *win)) win = &c;
    }
    return *win;
  };
  auto mutate_block = [&](std::size_t b, std::size_t idx) {
    unet::BlockArch a = tables[b].candidates[idx].arch;
    bool changed = false;
    for (int& k : a.kernels) {
      if (rng.uniform01() < config.mutation_prob) {
        int pick = rng.uniform_int(0, 1);
        std::vector<int> others;
        for (int o : unet::kKernelOptions)
          if (o != k) others.push_back(o);
        k = others[static_cast<std::size_t>(pick)];
        changed = true;
      }
    }
    if (!changed) return idx;
    const std::size_t j = tables[b].find(a);
    return j == BlockTable::npos ? idx : j;
  };

  // The random initial population only counts once evolution runs, so zero
  // generations return the base arch.
  for (int gen = 0; gen < config.generations; ++gen) {
    if (gen == 0)
      for (const auto& s : pop) consider(s);
    std::stable_sort(pop.begin(), pop.end(), better);
    std::vector<Scored> next(pop.begin(), pop.begin() + config.elitism);
    while (static_cast<int>(next.size()) < config.population) {
      const Scored& pa = tournament();
      const Scored& pb = tournament();
      Genome child(nb);
      for (std::size_t b = 0; b < nb; ++b) {
        // Uniform crossover per layer, then remap to this block's table.
        const auto& aa = tables[b].candidates[pa.g[b]].arch;
        const auto& ab = tables[b].candidates[pb.g[b]].arch;
        unet::BlockArch mix = aa;
        for (std::size_t l = 0; l < mix.kernels.size(); ++l)
          if (rng.uniform01() < 0.5) mix.kernels[l] = ab.kernels[l];
        std::size_t idx = tables[b].find(mix);
        if (idx == BlockTable::npos) idx = pa.g[b];
        child[b] = mutate_block(b, idx);
      }
      next.push_back(score(std::move(child)));
    }
    pop = std::move(next);
    for (const auto& s : pop) consider(s);
  }

  unet::SubnetArch out;
  for (std::size_t b = 0; b < nb; ++b) out.blocks.push_back(tables[b].candidates[best.g[b]].arch);
  return out;
}

unet::SubnetArch random_arch_matching_cost(const unet::UNetConfig& config, std::uint64_t target_macs,
                                            double tolerance_percent, Rng& rng) {
  const auto lo = cost::cost_of_arch(config, unet::uniform_arch(config, 1)).total_macs;
  const auto hi = cost::cost_of_arch(config, unet::uniform_arch(config, 5)).total_macs;
  if (target_macs < lo || target_macs > hi) {
    throw InfeasibleError("target of " + std::to_string(target_macs) + " MACs is outside [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "]");
  }
  const double band = static_cast<double>(target_macs) * tolerance_percent / 100.0;
  constexpr int kMaxRejections = 10000;
  for (int i = 0; i <= kMaxRejections; ++i) {
    unet::SubnetArch a = unet::sample_random_path(config, rng);
    const double diff =
        std::abs(static_cast<double>(cost::cost_of_arch(config, a).total_macs) - static_cast<double>(target_macs));
    if (diff <= band) return a;
  }
  throw InfeasibleError("no arch within " + std::to_string(tolerance_percent) + "% of " + std::to_string(target_macs) +
                        " MACs after " + std::to_string(kMaxRejections) + " rejections");
}

}  // namespace diffnas::search
