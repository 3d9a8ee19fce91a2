#include <gtest/gtest.h>

#include "diffnas/checkpoint.hpp"
#include "diffnas/error.hpp"
#include "diffnas/retrain.hpp"

using namespace diffnas;
using namespace diffnas::retrain;
using namespace diffnas::unet;

namespace {

struct Rig {
  UNetConfig config = make_config(2, 4, {1, 2}, 2, 8, 1, 8);
  diffusion::NoiseSchedule sched = diffusion::make_linear_schedule(50, 1e-4, 0.02);
  std::shared_ptr<const Tensor> data;
  UNet teacher = UNet::fixed(config, teacher_arch(config), 1);
  SubnetArch arch = teacher_arch(config);
  UNet student = UNet::fixed(config, arch, 2);
  Tensor x0;
  Rig() {
    arch.blocks[1].kernels = {1, 5};
    student = UNet::fixed(config, arch, 2);
    Rng rng(3);
    data = std::make_shared<const Tensor>(rng.normal_tensor({32, 1, 8, 8}));
    x0 = data->slice_batch(0, 4);
    teacher.freeze();
  }
};

bool any_nonzero_grad(const ad::Parameter& p) {
  if (!p.var.has_grad()) return false;
  for (float g : p.var.grad().data())
    if (g != 0.0f) return true;
  return false;
}

}  // namespace

TEST(BetaSchedule, Examples) {
  EXPECT_EQ(beta_at({BetaKind::Linear, 1000, 0.0}, 250), 0.25);
  EXPECT_EQ(beta_at({BetaKind::Step, 1000, 0.0}, 999), 0.0);
  EXPECT_EQ(beta_at({BetaKind::Step, 1000, 0.0}, 1000), 1.0);
  for (int s : {0, 10, 5000}) EXPECT_EQ(beta_at({BetaKind::Fixed, 1000, 0.5}, s), 0.5);
  EXPECT_THROW(beta_at({BetaKind::Linear, 0, 0.0}, 3), ConfigError);
  EXPECT_EQ(parse_beta_kind("step"), BetaKind::Step);
  EXPECT_THROW(parse_beta_kind("cosine"), ConfigError);
}

TEST(BetaSchedule, MonotoneWithEndpoints) {
  for (BetaKind k : {BetaKind::Linear, BetaKind::Step}) {
    const BetaSchedule s{k, 37, 0.0};
    EXPECT_EQ(beta_at(s, 0), 0.0);
    double prev = 0.0;
    for (int step = 0; step < 100; ++step) {
      const double b = beta_at(s, step);
      EXPECT_GE(b, prev);
      EXPECT_GE(b, 0.0);
      EXPECT_LE(b, 1.0);
      if (step >= 37) EXPECT_EQ(b, 1.0);
      prev = b;
    }
  }
}

TEST(RetrainConfig, Validation) {
  RetrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.gamma = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RetrainConfig{};
  c.schedule.beta_steps = c.total_steps + 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(JointLoss, BetaZeroIsScaledDistillation) {
  Rig rig;
  Rng rng(5);
  const JointLoss jl = joint_loss(rig.student, rig.teacher, rig.x0, 0.0, 2.0, rng, rig.sched);
  ASSERT_TRUE(jl.parts.l_dis.has_value());
  EXPECT_TRUE(jl.parts.teacher_invoked);
  EXPECT_EQ(jl.loss.value().item(), static_cast<float>(2.0 * *jl.parts.l_dis));
}

TEST(JointLoss, BetaOneNeverTouchesTeacher) {
  Rig rig;
  // A teacher of a different shape would throw if it were run.
  const UNetConfig other = make_config(1, 4, {1}, 1, 8, 1, 8);
  UNet wrong = UNet::fixed(other, teacher_arch(other), 1);
  Rng a(5), b(5);
  const JointLoss jl = joint_loss(rig.student, wrong, rig.x0, 1.0, 1.0, a, rig.sched);
  EXPECT_FALSE(jl.parts.teacher_invoked);
  EXPECT_FALSE(jl.parts.l_dis.has_value());
  const ad::Var plain = diffusion::loss_ori(rig.student.predictor(rig.arch), rig.x0, b, rig.sched);
  EXPECT_EQ(jl.loss.value().item(), plain.value().item());
  EXPECT_THROW(joint_loss(rig.student, wrong, rig.x0, 0.5, 1.0, a, rig.sched), ContractError);
}

TEST(JointLoss, MidpointMatchesSeparateComponents) {
  Rig rig;
  Rng a(8), b(8);
  const JointLoss jl = joint_loss(rig.student, rig.teacher, rig.x0, 0.5, 1.0, a, rig.sched);
  // Components recomputed on the same draw.
  const diffusion::NoisedBatch batch = diffusion::make_noised_batch(rig.x0, b, rig.sched);
  const double l_ori = diffusion::loss_ori(rig.student.predictor(rig.arch), batch).value().item();
  const TeacherFeatures f = teacher_capture(rig.teacher, batch);
  double l_dis = 0.0;
  for (int blk = 0; blk < rig.config.block_count(); ++blk)
    l_dis += block_distillation_loss(rig.student, blk, rig.arch.blocks[blk], f).value().item();
  EXPECT_EQ(jl.parts.l_ori, l_ori);
  EXPECT_NEAR(*jl.parts.l_dis, l_dis, 1e-6 * l_dis);
  EXPECT_NEAR(jl.loss.value().item(), 0.5 * (l_dis + l_ori), 1e-6 * (l_dis + l_ori));
  EXPECT_EQ(jl.parts.l_total, jl.loss.value().item());
}

TEST(JointLoss, GradientFlowAtEndpoints) {
  Rig rig;
  {
    Rng rng(2);
    ad::backward(joint_loss(rig.student, rig.teacher, rig.x0, 0.0, 1.0, rng, rig.sched).loss);
    const auto& ps = rig.student.parameters();
    int touched = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (rig.student.slots()[i].block < 0) {
        EXPECT_FALSE(any_nonzero_grad(ps[i])) << ps[i].name;
      } else {
        touched += any_nonzero_grad(ps[i]);
      }
    }
    EXPECT_GT(touched, 0);
    for (const auto& p : rig.teacher.parameters()) EXPECT_FALSE(p.var.has_grad());
    ad::zero_grads(rig.student.all_parameters());
  }
  {
    // At beta = 1 the gradient is exactly that of plain noise prediction.
    Rng a(4), b(4);
    ad::backward(joint_loss(rig.student, rig.teacher, rig.x0, 1.0, 1.0, a, rig.sched).loss);
    std::vector<Tensor> joint;
    for (const auto& p : rig.student.parameters()) joint.push_back(p.var.grad());
    ad::zero_grads(rig.student.all_parameters());
    ad::backward(diffusion::loss_ori(rig.student.predictor(rig.arch), rig.x0, b, rig.sched));
    for (std::size_t i = 0; i < joint.size(); ++i)
      EXPECT_EQ(joint[i], rig.student.parameters()[i].var.grad()) << rig.student.parameters()[i].name;
  }
}

TEST(Retrain, DeterministicCheckpointsAndLog) {
  Rig rig;
  RetrainConfig cfg;
  cfg.total_steps = 8;
  cfg.batch_size = 4;
  cfg.schedule = {BetaKind::Step, 3, 0.5};
  cfg.seed = 21;
  cfg.log_interval = 2;
  cfg.checkpoint_interval = 4;
  std::vector<int> ckpt_steps;
  auto run = [&] {
    ckpt_steps.clear();
    RetrainResult r = retrain::retrain(rig.config, rig.arch, rig.teacher, rig.data, rig.sched, cfg,
                              [&](int step, const UNet&) { ckpt_steps.push_back(step); });
    return std::make_pair(checkpoint::encode(checkpoint::snapshot(r.student)), r.log);
  };
  const auto [bytes1, log1] = run();
  const auto [bytes2, log2] = run();
  EXPECT_EQ(bytes1, bytes2);
  EXPECT_EQ(ckpt_steps, (std::vector<int>{4, 8}));
  ASSERT_EQ(log1.size(), 5u);  // steps 0, 2, 4, 6 and the last one
  EXPECT_EQ(log1[1].parts.beta, 0.0);
  EXPECT_EQ(log1[2].parts.beta, 1.0);
  EXPECT_FALSE(log1[2].parts.l_dis.has_value());
  for (std::size_t i = 0; i < log1.size(); ++i) EXPECT_EQ(log1[i].parts.l_total, log2[i].parts.l_total);
  const std::string csv = log_csv(log1);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,beta,l_dis,l_ori,l_total,wall_ms");

  cfg.seed = 22;
  EXPECT_NE(run().first, bytes1);
}

TEST(Retrain, FreshInitNotFromTeacher) {
  Rig rig;
  RetrainConfig cfg;
  cfg.total_steps = 0;
  cfg.schedule = {BetaKind::Step, 0, 0.5};
  const RetrainResult r = retrain::retrain(rig.config, teacher_arch(rig.config), rig.teacher, rig.data, rig.sched, cfg);
  EXPECT_NE(r.student.find("stem.weight")->var.value(), rig.teacher.find("stem.weight")->var.value());
}

TEST(Retrain, NoDistillationRunsWithoutTeacher) {
  Rig rig;
  const UNetConfig other = make_config(1, 4, {1}, 1, 8, 1, 8);
  UNet wrong = UNet::fixed(other, teacher_arch(other), 1);
  RetrainConfig cfg;
  cfg.total_steps = 3;
  cfg.batch_size = 4;
  cfg.schedule = {BetaKind::Fixed, 0, 1.0};
  const RetrainResult r = retrain::retrain(rig.config, rig.arch, wrong, rig.data, rig.sched, cfg);
  for (const auto& row : r.log) EXPECT_FALSE(row.parts.teacher_invoked);
}

TEST(Retrain, ProbeLossIsDeterministic) {
  Rig rig;
  const double a = probe_loss_ori(rig.student, rig.data, rig.sched, 3, 2, 4);
  EXPECT_EQ(a, probe_loss_ori(rig.student, rig.data, rig.sched, 3, 2, 4));
  EXPECT_GT(a, 0.0);
}
