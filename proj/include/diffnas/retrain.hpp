#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffnas/unet.hpp"

namespace diffnas::retrain {

enum class BetaKind { Linear, Step, Fixed };

std::string to_string(BetaKind kind);
/// "linear", "step" or "fixed"; ConfigError otherwise.
BetaKind parse_beta_kind(const std::string& s);

struct BetaSchedule {
  BetaKind kind = BetaKind::Step;
  int beta_steps = 750;
  double fixed_value = 0.5;

  void validate() const;
};

/// Weight of the noise-prediction term at a training step.
double beta_at(const BetaSchedule& schedule, int step);

struct RetrainConfig {
  double gamma = 1.0;
  BetaSchedule schedule;
  int total_steps = 3000;
  int batch_size = 32;
  ad::AdamOptions adam{2e-3f};
  std::uint64_t seed = 0;
  int log_interval = 50;
  /// 0 disables periodic checkpoints.
  int checkpoint_interval = 0;

  void validate() const;
};

struct LossComponents {
  double beta = 0.0;
  /// Absent when beta = 1 (the teacher is not run).
  std::optional<double> l_dis;
  double l_ori = 0.0;
  double l_total = 0.0;
  bool teacher_invoked = false;
};

struct JointLoss {
  ad::Var loss;
  LossComponents parts;
};

/// gamma * (1 - beta) * L_dis + beta * L_ori on one noised draw of x0.
/// L_dis sums the per-block distillation losses with teacher inputs; L_ori
/// runs the whole student. At beta = 0 L_ori is evaluated for logging only
/// and is not part of the graph; at beta = 1 the teacher is never touched.
JointLoss joint_loss(const unet::UNet& student, const unet::UNet& teacher, const Tensor& x0, double beta,
                     double gamma, Rng& rng, const diffusion::NoiseSchedule& sched);

struct LogRow {
  int step = 0;
  LossComponents parts;
  double wall_ms = 0.0;
};

std::string log_csv(const std::vector<LogRow>& rows);

using CheckpointCallback = std::function<void(int step, const unet::UNet& student)>;

struct RetrainResult {
  unet::UNet student;
  std::vector<LogRow> log;
};

/// Trains a freshly initialized fixed network with the given arch.
RetrainResult retrain(const unet::UNetConfig& net_config, const unet::SubnetArch& arch, const unet::UNet& teacher,
                      std::shared_ptr<const Tensor> data, const diffusion::NoiseSchedule& sched,
                      const RetrainConfig& config, const CheckpointCallback& on_checkpoint = {});

/// L_ori on `batches` fixed draws derived from `seed`.
double probe_loss_ori(const unet::UNet& net, std::shared_ptr<const Tensor> data, const diffusion::NoiseSchedule& sched,
                      std::uint64_t seed, int batches, int batch_size);

}  // namespace diffnas::retrain
