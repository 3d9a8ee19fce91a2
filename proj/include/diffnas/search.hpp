#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "diffnas/cost.hpp"
#include "diffnas/unet.hpp"

namespace diffnas::search {

inline constexpr std::size_t kEnumerationCap = 6561;

struct SearchConfig {
  double r = 1.0;
  int eval_batches = 4;
  int batch_size = 32;
  std::uint64_t eval_seed = 0;
  std::size_t enumeration_cap = kEnumerationCap;
  /// When false the middle block keeps the teacher arch.
  bool search_middle = true;

  void validate() const;
};

/// mse(pred, target) / var(target). Throws DegenerateTargetError when
/// var(target) <= 1e-12.
double relative_l2(const Tensor& pred, const Tensor& target);

/// Fixed teacher batches for one block. Every candidate of the block sees the
/// same (X_i, Y_i) pairs; the batches depend only on (eval_seed, block).
struct EvalFixture {
  int block = 0;
  std::vector<unet::TeacherFeatures> batches;
};

EvalFixture make_eval_fixture(const unet::UNet& teacher, std::shared_ptr<const Tensor> data,
                              const diffusion::NoiseSchedule& sched, int block, const SearchConfig& config);

struct CandidateLoss {
  double loss = 0.0;      ///< mean over batches of mse_mean
  double rel_loss = 0.0;  ///< mean over batches of relative_l2
};

CandidateLoss eval_candidate(const unet::UNet& supernet, const unet::BlockArch& arch, const EvalFixture& fixture);
double eval_block_loss(const unet::UNet& supernet, const unet::BlockArch& arch, const EvalFixture& fixture);

struct Candidate {
  unet::BlockArch arch;
  double loss = 0.0;
  double rel_loss = 0.0;
  std::uint64_t cost = 0;
};

/// Evaluation table of one block, candidates in enumeration order.
struct BlockTable {
  int block = 0;
  std::vector<Candidate> candidates;
  std::size_t base_index = 0;

  const Candidate& base() const { return candidates.at(base_index); }
  /// Index of `arch`, or npos.
  std::size_t find(const unet::BlockArch& arch) const;
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

/// Enumerates and evaluates every candidate of a block. A block excluded
/// from search gets a one-row table holding the teacher arch.
BlockTable evaluate_block(const unet::UNet& supernet, const EvalFixture& fixture, const SearchConfig& config);
std::vector<BlockTable> evaluate_all(const unet::UNet& supernet, const unet::UNet& teacher,
                                     std::shared_ptr<const Tensor> data, const diffusion::NoiseSchedule& sched,
                                     const SearchConfig& config);

/// Cheapest candidate with loss <= r * base loss; equal cost goes to lower
/// loss, then to the earlier candidate.
std::size_t select_candidate(const BlockTable& table, double r);

struct BlockResult {
  int block = 0;
  unet::BlockArch arch;
  double base_loss = 0.0;
  double selected_loss = 0.0;
  std::uint64_t base_cost = 0;
  std::uint64_t selected_cost = 0;
  std::size_t candidates_evaluated = 0;
};

struct SearchResult {
  double r = 1.0;
  unet::SubnetArch arch;
  std::vector<BlockResult> blocks;

  /// Every block's selected loss is within r of its base loss.
  bool constraint_holds() const;
};

BlockResult search_block(const BlockTable& table, double r);
SearchResult search_all(const std::vector<BlockTable>& tables, double r);

/// Search audit: one row per candidate.
std::string audit_csv(const std::vector<BlockTable>& tables, const SearchResult& result);

struct AuditCheck {
  int blocks = 0;
  int violations = 0;
};
/// Re-checks the per-block constraint from a persisted audit table.
AuditCheck verify_audit(const std::string& csv, double r);

std::string to_json(const SearchResult& result);
SearchResult search_result_from_json(const std::string& text);

// --------------------------------------------------------------------------
// Global baselines

struct EvolutionConfig {
  int generations = 30;
  int population = 32;
  int tournament = 4;
  double mutation_prob = 0.1;
  int elitism = 1;
  /// Penalty per unit of excess summed loss, in multiples of the base cost.
  double penalty = 1e3;
  std::uint64_t seed = 0;
};

/// Whole-network evolution over the evaluation tables. Fitness is total
/// searchable cost, plus penalty * base cost * excess when the summed
/// relative loss exceeds the base arch's. The base arch seeds the population
/// and the best feasible individual is returned.
unet::SubnetArch evolutionary_global_search(const std::vector<BlockTable>& tables, const EvolutionConfig& config);

/// Summed relative loss of an arch according to the tables.
double summed_rel_loss(const std::vector<BlockTable>& tables, const unet::SubnetArch& arch);

/// Rejection-samples uniform archs until total MACs fall within
/// tolerance_percent of the target. InfeasibleError after 10,000 misses.
unet::SubnetArch random_arch_matching_cost(const unet::UNetConfig& config, std::uint64_t target_macs,
                                            double tolerance_percent, Rng& rng);

}  // namespace diffnas::search
