#include "diffnas/retrain.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "diffnas/data_stream.hpp"
#include "diffnas/error.hpp"
#include "diffnas/ops.hpp"
#include "diffnas/optim.hpp"

namespace diffnas::retrain {

std::string to_string(BetaKind kind) {
  switch (kind) {
    case BetaKind::Linear: return "linear";
    case BetaKind::Step: return "step";
    case BetaKind::Fixed: return "fixed";
  }
  return "?";
}

BetaKind parse_beta_kind(const std::string& s) {
  if (s == "linear") return BetaKind::Linear;
  if (s == "step") return BetaKind::Step;
  if (s == "fixed") return BetaKind::Fixed;
  throw ConfigError("unknown beta schedule '" + s + "' (expected linear, step or fixed)");
}

void BetaSchedule::validate() const {
  if (kind == BetaKind::Fixed) {
    if (!(fixed_value >= 0.0 && fixed_value <= 1.0)) throw ConfigError("fixed beta must lie in [0, 1]");
    return;
  }
  if (beta_steps < 0) throw ConfigError("beta_steps must be non-negative");
  if (kind == BetaKind::Linear && beta_steps == 0) throw ConfigError("linear beta schedule needs beta_steps > 0");
}

double beta_at(const BetaSchedule& schedule, int step) {
  if (step < 0) throw ContractError("beta_at: negative step");
  schedule.validate();
  switch (schedule.kind) {
    case BetaKind::Linear:
      return step >= schedule.beta_steps ? 1.0 : static_cast<double>(step) / schedule.beta_steps;
    case BetaKind::Step: return step < schedule.beta_steps ? 0.0 : 1.0;
    case BetaKind::Fixed: return schedule.fixed_value;
  }
  return 1.0;
}

void RetrainConfig::validate() const {
  if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
  if (total_steps < 0) throw ConfigError("total_steps must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  schedule.validate();
  if (schedule.kind != BetaKind::Fixed && schedule.beta_steps > total_steps) {
    throw ConfigError("beta_steps exceeds total_steps");
  }
}

JointLoss joint_loss(const unet::UNet& student, const unet::UNet& teacher, const Tensor& x0, double beta,
                     double gamma, Rng& rng, const diffusion::NoiseSchedule& sched) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("joint_loss: beta outside [0, 1]");
  const unet::SubnetArch& arch = student.arch();
  diffusion::NoisedBatch batch = diffusion::make_noised_batch(x0, rng, sched);
  JointLoss out;
  out.parts.beta = beta;

  ad::Var l_ori;
  if (beta == 0.0) {
    ad::NoGradGuard no_grad;
    l_ori = diffusion::loss_ori(student.predictor(arch), batch);
  } else {
    l_ori = diffusion::loss_ori(student.predictor(arch), batch);
  }
  out.parts.l_ori = l_ori.value().item();
  if (beta == 1.0) {
    out.loss = l_ori;
    out.parts.l_total = out.parts.l_ori;
    return out;
  }

  const unet::TeacherFeatures features = unet::teacher_capture(teacher, batch);
  out.parts.teacher_invoked = true;
  ad::Var l_dis;
  for (int b = 0; b < student.config().block_count(); ++b) {
    ad::Var term = unet::block_distillation_loss(student, b, arch.blocks[static_cast<std::size_t>(b)], features);
    l_dis = b == 0 ? term : ad::add(l_dis, term);
  }
  out.parts.l_dis = l_dis.value().item();
  if (beta == 0.0) {
    out.loss = ad::scale(l_dis, static_cast<float>(gamma));
  } else {
    out.loss = ad::add(ad::scale(l_dis, static_cast<float>(gamma * (1.0 - beta))), ad::scale(l_ori, static_cast<float>(beta)));
  }
  out.parts.l_total = out.loss.value().item();
  return out;
}

std::string log_csv(const std::vector<LogRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "step,beta,l_dis,l_ori,l_total,wall_ms\n";
  for (const LogRow& r : rows) {
    os << r.step << ',' << r.parts.beta << ',';
    if (r.parts.l_dis) os << *r.parts.l_dis;
    os << ',' << r.parts.l_ori << ',' << r.parts.l_total << ',' << r.wall_ms << '\n';
  }
  return os.str();
}

RetrainResult retrain(const unet::UNetConfig& net_config, const unet::SubnetArch& arch, const unet::UNet& teacher,
                      std::shared_ptr<const Tensor> data, const diffusion::NoiseSchedule& sched,
                      const RetrainConfig& config, const CheckpointCallback& on_checkpoint) {
  config.validate();
  RetrainResult res{unet::UNet::fixed(net_config, arch, Rng::derive(config.seed, {1}).next_u64()), {}};
  unet::UNet& student = res.student;
  DataStream stream(std::move(data), Rng::derive(config.seed, {2}));
  Rng noise = Rng::derive(config.seed, {3});
  ad::Adam adam(config.adam);
  auto all = student.all_parameters();
  std::vector<ad::Parameter*> blocks_only;
  for (int b = 0; b < net_config.block_count(); ++b) {
    auto p = student.block_parameters(b);
    blocks_only.insert(blocks_only.end(), p.begin(), p.end());
  }

  const auto start = std::chrono::steady_clock::now();
  for (int step = 0; step < config.total_steps; ++step) {
    const double beta = beta_at(config.schedule, step);
    ad::zero_grads(all);
    JointLoss jl = joint_loss(student, teacher, stream.next(config.batch_size), beta, config.gamma, noise, sched);
    if (!std::isfinite(jl.parts.l_total)) {
      throw NumericError("retrain loss non-finite at step " + std::to_string(step));
    }
    ad::backward(jl.loss);
    // Stem, head and time MLP get no gradient from the block-wise term alone.
    adam.step(beta == 0.0 ? blocks_only : all);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (config.log_interval > 0 && (step % config.log_interval == 0 || step == config.total_steps - 1)) {
      res.log.push_back({step, jl.parts, ms});
    }
    if (on_checkpoint && config.checkpoint_interval > 0 && (step + 1) % config.checkpoint_interval == 0) {
      on_checkpoint(step + 1, student);
    }
  }
  ad::zero_grads(all);
  return res;
}

double probe_loss_ori(const unet::UNet& net, std::shared_ptr<const Tensor> data, const diffusion::NoiseSchedule& sched,
                      std::uint64_t seed, int batches, int batch_size) {
  ad::NoGradGuard no_grad;
  DataStream stream(std::move(data), Rng::derive(seed, {0x9B, 1}));
  Rng noise = Rng::derive(seed, {0x9B, 2});
  const auto model = net.predictor(net.arch());
  double total = 0.0;
  for (int i = 0; i < batches; ++i) total += diffusion::loss_ori(model, stream.next(batch_size), noise, sched).value().item();
  return total / batches;
}

}  // namespace diffnas::retrain
