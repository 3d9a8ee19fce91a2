#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "diffnas/error.hpp"
#include "diffnas/ops.hpp"
#include "diffnas/training.hpp"
#include "diffnas/unet.hpp"
#include "reference.hpp"

using namespace diffnas;
using namespace diffnas::unet;

namespace {

UNetConfig tiny_config() { return make_config(2, 4, {1, 2}, 2, 8, 1, 8); }

Tensor random_images(int n, const UNetConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({n, c.image_channels, c.image_size, c.image_size});
  for (float& v : x.data()) v = static_cast<float>(rng.uniform01() * 2.0 - 1.0);
  return x;
}

bool same(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && a.storage() == b.storage(); }

double max_abs_diff(const Tensor& a, const ref::T& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < b.v.size(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.v[i]));
  return m;
}

// Teacher forward written out from the parameter names alone.
struct RefTeacher {
  const UNet& net;
  ref::T p(const std::string& name) const {
    const ad::Parameter* q = net.find(name);
    if (!q) throw std::runtime_error("missing " + name);
    return ref::from(q->var.value());
  }
  static int groups(int c) { return c < 4 ? c : 4; }

  ref::T res(const ref::T& x, const std::string& pre, int k, const ref::T& temb_act) const {
    const int in = x.shape[1];
    ref::T h = ref::group_norm(x, groups(in), p(pre + "norm.gamma"), p(pre + "norm.beta"));
    const std::string kp = pre + "conv.k" + std::to_string(k) + ".";
    h = ref::conv2d(ref::silu(h), p(kp + "weight"), p(kp + "bias"));
    h = ref::add_channel_bias(h, ref::linear(temb_act, p(pre + "temb.weight"), p(pre + "temb.bias")));
    if (net.find(pre + "proj.weight")) return ref::add(ref::conv2d(x, p(pre + "proj.weight"), p(pre + "proj.bias")), h);
    return ref::add(x, h);
  }

  ref::T block(int b, const SubnetArch& arch, ref::T x, const ref::T& temb_act) const {
    const auto& ks = arch.blocks[b].kernels;
    for (std::size_t l = 0; l < ks.size(); ++l)
      x = res(x, net.config().block_name(b) + ".res" + std::to_string(l) + ".", ks[l], temb_act);
    return x;
  }

  ref::T forward(const Tensor& x_t, const std::vector<int>& t, const SubnetArch& arch) const {
    const UNetConfig& c = net.config();
    ref::T temb = ref::time_embed(t, c.time_embed_dim);
    temb = ref::linear(ref::silu(ref::linear(temb, p("temb.fc0.weight"), p("temb.fc0.bias"))), p("temb.fc1.weight"),
                       p("temb.fc1.bias"));
    const ref::T act = ref::silu(temb);
    ref::T h = ref::conv2d(ref::from(x_t), p("stem.weight"), p("stem.bias"));
    const int n = c.levels;
    std::vector<ref::T> skips;
    for (int lv = 0; lv < n; ++lv) {
      h = block(lv, arch, h, act);
      skips.push_back(h);
      if (lv < n - 1) h = ref::down2(h);
    }
    h = block(n, arch, h, act);
    for (int b = n + 1; b < c.block_count(); ++b) {
      const int lv = 2 * n - b;
      if (lv != n - 1) h = ref::up2(h);
      h = block(b, arch, ref::concat(h, skips[lv]), act);
    }
    h = ref::group_norm(h, groups(h.shape[1]), p("head.norm.gamma"), p("head.norm.beta"));
    return ref::conv2d(ref::silu(h), p("head.conv.weight"), p("head.conv.bias"));
  }
};

}  // namespace

TEST(UNetConfig, DefaultsValidate) { EXPECT_NO_THROW(UNetConfig{}.validate()); }

TEST(UNetConfig, RejectsBadShapes) {
  UNetConfig c = tiny_config();
  c.image_size = 7;  // two levels halve once
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.layers_per_block = {2, 2, 9, 2, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.layers_per_block = {2, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.base_channels = 6;  // 6 channels into 4 groups
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.time_embed_dim = 7;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(UNetConfig, BlockLayout) {
  const UNetConfig c = make_config(3, 16, {1, 2, 2}, 2, 16, 1, 32);
  ASSERT_EQ(c.block_count(), 7);
  EXPECT_EQ(c.kind(0), BlockKind::Encoder);
  EXPECT_EQ(c.kind(3), BlockKind::Middle);
  EXPECT_EQ(c.kind(6), BlockKind::Decoder);
  EXPECT_EQ(c.block_name(0), "enc0");
  EXPECT_EQ(c.block_name(3), "mid");
  EXPECT_EQ(c.block_name(4), "dec2");
  EXPECT_EQ(c.block_name(6), "dec0");
  EXPECT_EQ(c.resolution(0), 16);
  EXPECT_EQ(c.resolution(3), 4);
  EXPECT_EQ(c.resolution(6), 16);
  // Encoder i output channels equal its level width.
  EXPECT_EQ(c.block_in_channels(0), 16);
  EXPECT_EQ(c.block_out_channels(1), 32);
  EXPECT_EQ(c.block_in_channels(1), 16);
  // Decoder input = upsampled previous output + skip.
  EXPECT_EQ(c.block_in_channels(4), 32 + 32);
  EXPECT_EQ(c.block_in_channels(5), 32 + 32);
  EXPECT_EQ(c.block_in_channels(6), 32 + 16);
  EXPECT_EQ(c.block_skip_channels(6), 16);
  EXPECT_EQ(c.block_skip_channels(2), 0);
}

TEST(SubnetArchs, EnumerationOrderAndCount) {
  const auto all = enumerate_block_archs(2);
  ASSERT_EQ(all.size(), 9u);
  EXPECT_EQ(all.front().kernels, (std::vector<int>{1, 1}));
  EXPECT_EQ(all[1].kernels, (std::vector<int>{1, 3}));
  EXPECT_EQ(all.back().kernels, (std::vector<int>{5, 5}));
  EXPECT_TRUE(std::is_sorted(all.begin(), all.end()));
  EXPECT_EQ(enumerate_block_archs(4).size(), 81u);
}

TEST(SubnetArchs, ValidateRejectsIllegalKernels) {
  const UNetConfig c = tiny_config();
  SubnetArch a = teacher_arch(c);
  EXPECT_NO_THROW(validate_arch(c, a));
  a.blocks[1].kernels[0] = 7;
  EXPECT_THROW(validate_arch(c, a), ContractError);
  a = teacher_arch(c);
  a.blocks.pop_back();
  EXPECT_THROW(validate_arch(c, a), ContractError);
  a = teacher_arch(c);
  a.blocks[0].kernels.push_back(3);
  EXPECT_THROW(validate_arch(c, a), ContractError);
}

TEST(SubnetArchs, RandomPathFrequencies) {
  const UNetConfig c = tiny_config();
  Rng rng(11);
  const int draws = 30000;
  std::map<std::pair<int, int>, std::array<int, 3>> counts;
  for (int i = 0; i < draws; ++i) {
    const SubnetArch a = sample_random_path(c, rng);
    ASSERT_NO_THROW(validate_arch(c, a));
    for (int b = 0; b < c.block_count(); ++b)
      for (int l = 0; l < c.layers(b); ++l) {
        const int k = a.blocks[b].kernels[l];
        counts[{b, l}][k == 1 ? 0 : k == 3 ? 1 : 2]++;
      }
  }
  const double mean = draws / 3.0, sd = std::sqrt(draws * (1.0 / 3.0) * (2.0 / 3.0));
  for (const auto& [slot, cs] : counts)
    for (int n : cs) EXPECT_LT(std::abs(n - mean), 3.0 * sd) << "block " << slot.first << " layer " << slot.second;
}

TEST(SubnetArchs, RandomPathSeeded) {
  const UNetConfig c = tiny_config();
  Rng a(5), b(5);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_random_path(c, a), sample_random_path(c, b));
}

TEST(UNet, OutputShapeForAnyArch) {
  const UNetConfig c = tiny_config();
  UNet net = UNet::supernet(c, 1);
  Rng rng(2);
  const Tensor x = random_images(3, c, 3);
  const std::vector<int> t{1, 10, 50};
  for (int i = 0; i < 5; ++i) {
    ad::NoGradGuard ng;
    const ad::Var y = net.forward_full(sample_random_path(c, rng), ad::Var::constant(x), t);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_TRUE(y.value().all_finite());
  }
}

TEST(UNet, FixedNetworkHoldsOnlyItsKernels) {
  const UNetConfig c = tiny_config();
  SubnetArch a = uniform_arch(c, 5);
  a.blocks[0].kernels = {1, 3};
  UNet net = UNet::fixed(c, a, 4);
  EXPECT_TRUE(net.find("enc0.res0.conv.k1.weight"));
  EXPECT_FALSE(net.find("enc0.res0.conv.k3.weight"));
  EXPECT_TRUE(net.find("enc0.res1.conv.k3.weight"));
  EXPECT_TRUE(net.find("mid.res0.conv.k5.weight"));
  EXPECT_FALSE(net.supports(teacher_arch(c)));
  EXPECT_TRUE(net.supports(a));
  const Tensor x = random_images(1, c, 1);
  const std::vector<int> t{3};
  EXPECT_THROW(net.forward_full(teacher_arch(c), ad::Var::constant(x), t), ContractError);
  UNet sn = UNet::supernet(c, 4);
  EXPECT_THROW(sn.arch(), ContractError);
  EXPECT_TRUE(sn.supports(a));
}

TEST(UNet, MatchesStandaloneDoubleOracle) {
  const UNetConfig c = tiny_config();
  for (std::uint64_t seed : {1u, 2u}) {
    SubnetArch arch = teacher_arch(c);
    if (seed == 2) {
      arch.blocks[1].kernels = {5, 1};
      arch.blocks[3].kernels = {1, 5};
    }
    UNet net = UNet::fixed(c, arch, seed);
    const Tensor x = random_images(2, c, seed + 10);
    const std::vector<int> t{7, 93};
    ad::NoGradGuard ng;
    const Tensor y = net.forward_full(arch, ad::Var::constant(x), t).value();
    const ref::T r = RefTeacher{net}.forward(x, t, arch);
    double scale = 1.0;
    for (double v : r.v) scale = std::max(scale, std::abs(v));
    EXPECT_LT(max_abs_diff(y, r), 1e-5 * scale) << "seed " << seed;
  }
}

TEST(UNet, CaptureIsConsistentWithBlockForwards) {
  const UNetConfig c = make_config(3, 4, {1, 2, 2}, 2, 8, 1, 8);
  UNet teacher = UNet::fixed(c, teacher_arch(c), 9);
  teacher.freeze();
  Rng rng(1);
  const auto sched = diffusion::make_linear_schedule(100, 1e-4, 0.02);
  const TeacherFeatures f = teacher_capture(teacher, random_images(4, c, 2), rng, sched);
  const int n = c.levels, blocks = c.block_count();
  ASSERT_EQ(static_cast<int>(f.inputs.size()), blocks);
  const ad::Var temb = ad::Var::constant(f.time_embed);
  for (int b = 0; b < blocks; ++b) {
    const Tensor y =
        teacher.forward_block(b, teacher.arch().blocks[b], ad::Var::constant(f.inputs[b]), temb).value();
    EXPECT_TRUE(same(y, f.targets[b])) << "block " << b;
    EXPECT_EQ(f.inputs[b].dim(1), c.block_in_channels(b));
    EXPECT_EQ(f.targets[b].dim(1), c.block_out_channels(b));
  }
  // Encoder identity: X_{i+1} = downsample(Y_i); the middle block sees Y_{n-1} directly.
  for (int i = 0; i + 1 < n; ++i)
    EXPECT_TRUE(same(f.inputs[i + 1], ad::avg_downsample2x(ad::Var::constant(f.targets[i])).value()));
  EXPECT_TRUE(same(f.inputs[n], f.targets[n - 1]));
  // Decoder input = concat(upsample(previous output), skip of matching level).
  for (int b = n + 1; b < blocks; ++b) {
    const int lv = c.level(b);
    EXPECT_TRUE(same(f.skips[b], f.targets[lv]));
    ad::Var prev = ad::Var::constant(f.targets[b - 1]);
    if (lv != n - 1) prev = ad::nearest_upsample2x(prev);
    EXPECT_TRUE(same(f.inputs[b], ad::channel_concat(prev, ad::Var::constant(f.skips[b])).value())) << b;
  }
  EXPECT_TRUE(f.skips[0].empty());
}

TEST(UNet, SupernetWithTeacherWeightsReproducesTeacher) {
  const UNetConfig c = tiny_config();
  UNet teacher = UNet::fixed(c, teacher_arch(c), 3);
  UNet sn = UNet::supernet(c, 4);
  EXPECT_EQ(sn.copy_weights_from(teacher), teacher.parameters().size());
  const Tensor x = random_images(2, c, 8);
  const std::vector<int> t{4, 60};
  ad::NoGradGuard ng;
  EXPECT_TRUE(same(sn.forward_full(teacher_arch(c), ad::Var::constant(x), t).value(),
                   teacher.forward_full(teacher_arch(c), ad::Var::constant(x), t).value()));
  TeacherFeatures f;
  teacher.forward_full(teacher_arch(c), ad::Var::constant(x), t, &f);
  for (int b = 0; b < c.block_count(); ++b)
    EXPECT_EQ(block_distillation_loss(sn, b, teacher_arch(c).blocks[b], f).value().item(), 0.0f);
}

TEST(UNet, ForwardBlockShapeContract) {
  const UNetConfig c = tiny_config();
  UNet sn = UNet::supernet(c, 1);
  const ad::Var temb = ad::Var::constant(Tensor({2, c.time_embed_dim}));
  const ad::Var wrong = ad::Var::constant(Tensor({2, 3, 8, 8}));
  EXPECT_THROW(sn.forward_block(0, {{3, 3}}, wrong, temb), ContractError);
  const ad::Var ok = ad::Var::constant(Tensor({2, 4, 8, 8}));
  EXPECT_THROW(sn.forward_block(0, {{3}}, ok, temb), ContractError);
  EXPECT_THROW(sn.forward_block(9, {{3, 3}}, ok, temb), ContractError);
  EXPECT_EQ(sn.forward_block(0, {{5, 1}}, ok, temb).shape(), ok.shape());
}

TEST(UNet, BlockLossTouchesOnlyTheSampledPath) {
  const UNetConfig c = tiny_config();
  UNet teacher = UNet::fixed(c, teacher_arch(c), 3);
  teacher.freeze();
  UNet sn = UNet::supernet(c, 5);
  Rng rng(4);
  const auto sched = diffusion::make_linear_schedule(100, 1e-4, 0.02);
  const TeacherFeatures f = teacher_capture(teacher, random_images(2, c, 1), rng, sched);
  const int block = 1;
  const BlockArch path{{1, 5}};
  ad::backward(block_distillation_loss(sn, block, path, f));
  int touched = 0;
  for (std::size_t i = 0; i < sn.parameters().size(); ++i) {
    const ad::Parameter& p = sn.parameters()[i];
    const ParamSlot& s = sn.slots()[i];
    const bool on_path = s.block == block && (s.kernel == 0 || s.kernel == path.kernels[s.layer]);
    bool nonzero = false;
    if (p.var.has_grad())
      for (float g : p.var.grad().data()) nonzero |= g != 0.0f;
    if (on_path) {
      EXPECT_TRUE(p.var.has_grad()) << p.name;
      touched += nonzero;
    } else {
      EXPECT_FALSE(nonzero) << p.name;
    }
  }
  EXPECT_GT(touched, 0);
  for (const ad::Parameter& p : teacher.parameters()) EXPECT_FALSE(p.var.has_grad()) << p.name;
  const auto on_path = sn.path_parameters(block, path);
  for (const ad::Parameter* p : on_path) EXPECT_EQ(p->name.rfind("enc1.", 0), 0u);
  EXPECT_TRUE(std::none_of(on_path.begin(), on_path.end(),
                           [](const ad::Parameter* p) { return p->name.find("conv.k3") != std::string::npos; }));
}

TEST(UNet, FrozenNetworkRecordsNoGraph) {
  const UNetConfig c = tiny_config();
  UNet net = UNet::fixed(c, teacher_arch(c), 1);
  net.freeze();
  EXPECT_TRUE(net.frozen());
  const std::vector<int> t{1};
  const ad::Var y = net.forward_full(teacher_arch(c), ad::Var::constant(random_images(1, c, 1)), t);
  EXPECT_FALSE(y.requires_grad());
}

TEST(SupernetTraining, IndependentOfOrderAndConcurrency) {
  const UNetConfig c = tiny_config();
  const auto sched = diffusion::make_linear_schedule(100, 1e-4, 0.02);
  auto data = std::make_shared<const Tensor>(random_images(64, c, 6));
  UNet teacher = UNet::fixed(c, teacher_arch(c), 2);
  teacher.freeze();
  BlockTrainOptions opts;
  opts.steps = 6;
  opts.batch_size = 4;
  opts.seed = 77;
  auto run = [&](std::vector<int> blocks, int threads) {
    UNet sn = UNet::supernet(c, 3);
    train_supernet(sn, teacher, blocks, data, sched, opts, threads);
    std::vector<Tensor> out;
    for (const auto& p : sn.parameters()) out.push_back(p.var.value());
    return out;
  };
  const auto forward = run({0, 2, 4}, 1);
  const auto reversed = run({4, 2, 0}, 1);
  const auto threaded = run({0, 2, 4}, 3);
  ASSERT_EQ(forward.size(), reversed.size());
  for (std::size_t i = 0; i < forward.size(); ++i) {
    EXPECT_TRUE(same(forward[i], reversed[i])) << i;
    EXPECT_TRUE(same(forward[i], threaded[i])) << i;
  }
  // Untrained blocks keep their initial values.
  UNet fresh = UNet::supernet(c, 3);
  const auto& names = fresh.parameters();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (fresh.slots()[i].block == 1 || fresh.slots()[i].block == -1)
      EXPECT_TRUE(same(forward[i], names[i].var.value())) << names[i].name;
}

TEST(SupernetTraining, ProbeLossFallsForEveryBlock) {
  const UNetConfig c = make_config(3, 16, {1, 2, 2}, 2, 16, 1, 32);
  const auto sched = diffusion::make_linear_schedule(100, 1e-4, 0.02);
  Rng rng(3);
  Tensor imgs({512, 1, 16, 16});
  for (int n = 0; n < 512; ++n) {
    const double cy = rng.uniform01() * 16, cx = rng.uniform01() * 16;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        imgs.ptr()[n * 256 + y * 16 + x] =
            static_cast<float>(-1.0 + 1.5 * std::exp(-((y + 0.5 - cy) * (y + 0.5 - cy) + (x + 0.5 - cx) * (x + 0.5 - cx)) / 8.0));
  }
  auto data = std::make_shared<const Tensor>(std::move(imgs));
  UNet teacher = UNet::fixed(c, teacher_arch(c), 1);
  TeacherTrainOptions topts;
  topts.steps = 200;
  topts.batch_size = 16;
  topts.seed = 2;
  train_teacher(teacher, data, sched, topts);
  teacher.freeze();
  UNet sn = UNet::supernet(c, 4);
  BlockTrainOptions opts;
  opts.steps = 500;
  opts.batch_size = 16;
  opts.seed = 5;
  std::vector<int> blocks(c.block_count());
  std::iota(blocks.begin(), blocks.end(), 0);
  for (const BlockTrainReport& r : train_supernet(sn, teacher, blocks, data, sched, opts)) {
    EXPECT_LT(r.probe_after, r.probe_before) << "block " << r.block;
  }
}
