#include "diffnas/unet.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "diffnas/error.hpp"
#include "diffnas/ops.hpp"

namespace diffnas::unet {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void check_norm_channels(int channels, const std::string& where) {
  if (channels <= 0 || channels % ad::norm_groups(channels) != 0) {
    throw ConfigError(where + ": " + std::to_string(channels) + " channels cannot be split into " +
                      std::to_string(ad::norm_groups(channels)) + " norm groups");
  }
}

}  // namespace

bool is_kernel_option(int k) { return std::find(kKernelOptions.begin(), kKernelOptions.end(), k) != kKernelOptions.end(); }

void UNetConfig::validate() const {
  if (levels < 1) throw ConfigError("unet: levels must be >= 1");
  if (static_cast<int>(channel_mult.size()) != levels) throw ConfigError("unet: need one channel multiplier per level");
  if (base_channels < 1) throw ConfigError("unet: base_channels must be positive");
  for (int m : channel_mult)
    if (m < 1) throw ConfigError("unet: channel multipliers must be positive");
  if (static_cast<int>(layers_per_block.size()) != block_count()) {
    throw ConfigError("unet: layers_per_block needs " + std::to_string(block_count()) + " entries");
  }
  for (int d : layers_per_block) {
    if (d < 1) throw ConfigError("unet: every block needs at least one layer");
    if (d > 8) throw ConfigError("unet: 3^d exceeds the 6561-candidate enumeration bound for d=" + std::to_string(d));
  }
  if (image_channels < 1) throw ConfigError("unet: image_channels must be positive");
  const int div = 1 << (levels - 1);
  if (image_size < div || image_size % div != 0) {
    throw ConfigError("unet: image size " + std::to_string(image_size) + " not divisible by " + std::to_string(div));
  }
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("unet: time_embed_dim must be even");
  for (int b = 0; b < block_count(); ++b) {
    check_norm_channels(block_in_channels(b), "unet " + block_name(b));
    check_norm_channels(block_out_channels(b), "unet " + block_name(b));
  }
}

BlockKind UNetConfig::kind(int block) const {
  if (block < 0 || block >= block_count()) throw ContractError("block index " + std::to_string(block) + " out of range");
  if (block < levels) return BlockKind::Encoder;
  if (block == levels) return BlockKind::Middle;
  return BlockKind::Decoder;
}

int UNetConfig::level(int block) const {
  switch (kind(block)) {
    case BlockKind::Encoder: return block;
    case BlockKind::Middle: return levels - 1;
    case BlockKind::Decoder: return 2 * levels - block;
  }
  return 0;
}

int UNetConfig::block_in_channels(int block) const {
  const int lv = level(block);
  switch (kind(block)) {
    case BlockKind::Encoder: return lv == 0 ? level_channels(0) : level_channels(lv - 1);
    case BlockKind::Middle: return level_channels(levels - 1);
    case BlockKind::Decoder: return block_out_channels(block - 1) + level_channels(lv);
  }
  return 0;
}

int UNetConfig::block_skip_channels(int block) const {
  return kind(block) == BlockKind::Decoder ? level_channels(level(block)) : 0;
}

std::string UNetConfig::block_name(int block) const {
  switch (kind(block)) {
    case BlockKind::Encoder: return "enc" + std::to_string(level(block));
    case BlockKind::Middle: return "mid";
    case BlockKind::Decoder: return "dec" + std::to_string(level(block));
  }
  return {};
}

UNetConfig make_config(int levels, int base_channels, std::vector<int> channel_mult, int layers_per_block,
                       int image_size, int image_channels, int time_embed_dim) {
  UNetConfig c;
  c.levels = levels;
  c.base_channels = base_channels;
  c.channel_mult = std::move(channel_mult);
  c.layers_per_block.assign(static_cast<std::size_t>(2 * levels + 1), layers_per_block);
  c.image_size = image_size;
  c.image_channels = image_channels;
  c.time_embed_dim = time_embed_dim;
  c.validate();
  return c;
}

std::string SubnetArch::str() const {
  std::ostringstream os;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (b) os << '|';
    for (std::size_t l = 0; l < blocks[b].kernels.size(); ++l) {
      if (l) os << ',';
      os << blocks[b].kernels[l];
    }
  }
  return os.str();
}

void validate_arch(const UNetConfig& config, const SubnetArch& arch) {
  if (static_cast<int>(arch.blocks.size()) != config.block_count()) {
    throw ContractError("arch has " + std::to_string(arch.blocks.size()) + " blocks, network has " +
                        std::to_string(config.block_count()));
  }
  for (int b = 0; b < config.block_count(); ++b) {
    const auto& ks = arch.blocks[static_cast<std::size_t>(b)].kernels;
    if (static_cast<int>(ks.size()) != config.layers(b)) {
      throw ContractError("arch block " + std::to_string(b) + " has " + std::to_string(ks.size()) + " layers, expected " +
                          std::to_string(config.layers(b)));
    }
    for (int k : ks)
      if (!is_kernel_option(k)) throw ContractError("kernel size " + std::to_string(k) + " not in {1,3,5}");
  }
}

SubnetArch uniform_arch(const UNetConfig& config, int kernel) {
  SubnetArch a;
  for (int b = 0; b < config.block_count(); ++b) a.blocks.push_back(BlockArch{std::vector<int>(static_cast<std::size_t>(config.layers(b)), kernel)});
  return a;
}

SubnetArch teacher_arch(const UNetConfig& config) { return uniform_arch(config, kTeacherKernel); }

SubnetArch sample_random_path(const UNetConfig& config, Rng& rng) {
  SubnetArch a = teacher_arch(config);
  for (auto& blk : a.blocks)
    for (int& k : blk.kernels) k = kKernelOptions[static_cast<std::size_t>(rng.uniform_int(0, 2))];
  return a;
}

std::vector<BlockArch> enumerate_block_archs(int layers) {
  if (layers < 1) throw ContractError("enumerate_block_archs: need at least one layer");
  std::vector<BlockArch> out;
  std::vector<int> idx(static_cast<std::size_t>(layers), 0);
  while (true) {
    BlockArch a;
    for (int i : idx) a.kernels.push_back(kKernelOptions[static_cast<std::size_t>(i)]);
    out.push_back(std::move(a));
    int pos = layers - 1;
    while (pos >= 0 && idx[static_cast<std::size_t>(pos)] == 2) idx[static_cast<std::size_t>(pos--)] = 0;
    if (pos < 0) break;
    ++idx[static_cast<std::size_t>(pos)];
  }
  return out;
}

// --------------------------------------------------------------------------
// UNet construction

UNet UNet::supernet(const UNetConfig& config, std::uint64_t seed) {
  return UNet(config, true, teacher_arch(config), seed);
}

UNet UNet::fixed(const UNetConfig& config, const SubnetArch& arch, std::uint64_t seed) {
  return UNet(config, false, arch, seed);
}

ad::Var UNet::add_param(const std::string& name, Shape shape, ParamSlot slot, float init_bound, float fill) {
  Tensor t(std::move(shape), fill);
  if (init_bound > 0.0f) {
    // Seeded by name so a tensor's initial value does not depend on which
    // other kernel choices the network holds.
    Rng rng = Rng::derive(seed_, {fnv1a(name)});
    std::uniform_real_distribution<float> dist(-init_bound, init_bound);
    for (float& v : t.data()) v = dist(rng.engine());
  }
  ad::Var v = ad::Var::leaf(std::move(t), true);
  params_.push_back(ad::Parameter{name, v, true});
  slots_.push_back(slot);
  return v;
}

UNet::UNet(const UNetConfig& config, bool supernet, SubnetArch arch, std::uint64_t seed)
    : config_(config), supernet_(supernet), arch_(std::move(arch)), seed_(seed) {
  config_.validate();
  validate_arch(config_, arch_);
  const int c0 = config_.level_channels(0);
  const int ic = config_.image_channels;
  const int td = config_.time_embed_dim;
  auto bound = [](int fan_in) { return 1.0f / std::sqrt(static_cast<float>(fan_in)); };

  stem_weight_ = add_param("stem.weight", {c0, ic, 3, 3}, {}, bound(ic * 9));
  stem_bias_ = add_param("stem.bias", {c0}, {}, bound(ic * 9));
  temb_w0_ = add_param("temb.fc0.weight", {td, td}, {}, bound(td));
  temb_b0_ = add_param("temb.fc0.bias", {td}, {}, bound(td));
  temb_w1_ = add_param("temb.fc1.weight", {td, td}, {}, bound(td));
  temb_b1_ = add_param("temb.fc1.bias", {td}, {}, bound(td));

  blocks_.resize(static_cast<std::size_t>(config_.block_count()));
  for (int b = 0; b < config_.block_count(); ++b) {
    const std::string bname = config_.block_name(b);
    for (int l = 0; l < config_.layers(b); ++l) {
      ResLayer layer;
      layer.in_channels = l == 0 ? config_.block_in_channels(b) : config_.block_out_channels(b);
      layer.out_channels = config_.block_out_channels(b);
      const std::string p = bname + ".res" + std::to_string(l) + ".";
      const ParamSlot shared{b, l, 0};
      layer.norm_gamma = add_param(p + "norm.gamma", {layer.in_channels}, shared, 0.0f, 1.0f);
      layer.norm_beta = add_param(p + "norm.beta", {layer.in_channels}, shared, 0.0f, 0.0f);
      std::vector<int> kernels;
      if (supernet_) {
        kernels.assign(kKernelOptions.begin(), kKernelOptions.end());
      } else {
        kernels.push_back(arch_.blocks[static_cast<std::size_t>(b)].kernels[static_cast<std::size_t>(l)]);
      }
      for (int k : kernels) {
        const std::string kp = p + "conv.k" + std::to_string(k) + ".";
        const int fan_in = layer.in_channels * k * k;
        ConvSet cs;
        cs.kernel = k;
        cs.weight = add_param(kp + "weight", {layer.out_channels, layer.in_channels, k, k}, {b, l, k}, bound(fan_in));
        cs.bias = add_param(kp + "bias", {layer.out_channels}, {b, l, k}, bound(fan_in));
        layer.convs.push_back(std::move(cs));
      }
      layer.temb_weight = add_param(p + "temb.weight", {layer.out_channels, td}, shared, bound(td));
      layer.temb_bias = add_param(p + "temb.bias", {layer.out_channels}, shared, bound(td));
      layer.has_projection = layer.in_channels != layer.out_channels;
      if (layer.has_projection) {
        layer.proj_weight = add_param(p + "proj.weight", {layer.out_channels, layer.in_channels, 1, 1}, shared,
                                      bound(layer.in_channels));
        layer.proj_bias = add_param(p + "proj.bias", {layer.out_channels}, shared, bound(layer.in_channels));
      }
      blocks_[static_cast<std::size_t>(b)].push_back(std::move(layer));
    }
  }

  head_gamma_ = add_param("head.norm.gamma", {c0}, {}, 0.0f, 1.0f);
  head_beta_ = add_param("head.norm.beta", {c0}, {}, 0.0f, 0.0f);
  head_weight_ = add_param("head.conv.weight", {ic, c0, 3, 3}, {}, bound(c0 * 9));
  head_bias_ = add_param("head.conv.bias", {ic}, {}, bound(c0 * 9));
}

const SubnetArch& UNet::arch() const {
  if (supernet_) throw ContractError("a supernet has no single instantiated arch");
  return arch_;
}

bool UNet::supports(const SubnetArch& arch) const {
  if (static_cast<int>(arch.blocks.size()) != config_.block_count()) return false;
  if (supernet_) {
    try {
      validate_arch(config_, arch);
    } catch (const ContractError&) {
      return false;
    }
    return true;
  }
  return arch == arch_;
}

const UNet::ConvSet& UNet::ResLayer::conv(int kernel) const {
  for (const ConvSet& c : convs)
    if (c.kernel == kernel) return c;
  throw ContractError("layer has no parameters for kernel size " + std::to_string(kernel));
}

// --------------------------------------------------------------------------
// Forward passes

ad::Var UNet::time_embedding(std::span<const int> t) const {
  ad::Var sin = ad::Var::constant(ad::sinusoidal_time_embed_batch(t, config_.time_embed_dim));
  ad::Var h = ad::silu(ad::linear(sin, temb_w0_, temb_b0_));
  return ad::linear(h, temb_w1_, temb_b1_);
}

ad::Var UNet::res_layer(const ResLayer& layer, int kernel, const ad::Var& x, const ad::Var& temb_act) const {
  const ConvSet& cs = layer.conv(kernel);
  ad::Var h = ad::group_norm(x, ad::norm_groups(layer.in_channels), layer.norm_gamma, layer.norm_beta);
  h = ad::conv2d(ad::silu(h), cs.weight, cs.bias);
  h = ad::add_channel_bias(h, ad::linear(temb_act, layer.temb_weight, layer.temb_bias));
  ad::Var res = layer.has_projection ? ad::conv2d(x, layer.proj_weight, layer.proj_bias) : x;
  return ad::add(res, h);
}

ad::Var UNet::forward_block(int block, const BlockArch& arch, const ad::Var& x, const ad::Var& time_embed) const {
  if (block < 0 || block >= config_.block_count()) throw ContractError("block index out of range");
  const auto& layers = blocks_[static_cast<std::size_t>(block)];
  if (arch.kernels.size() != layers.size()) {
    throw ContractError("block " + std::to_string(block) + " arch has " + std::to_string(arch.kernels.size()) +
                        " layers, expected " + std::to_string(layers.size()));
  }
  const int res = config_.resolution(block);
  const Shape expect{x.shape().empty() ? 0 : x.shape()[0], config_.block_in_channels(block), res, res};
  if (x.shape() != expect) {
    throw ContractError("block " + std::to_string(block) + " expects input " + shape_str(expect) + ", got " +
                        shape_str(x.shape()));
  }
  if (time_embed.value().rank() != 2 || time_embed.shape()[0] != x.shape()[0] ||
      time_embed.shape()[1] != config_.time_embed_dim) {
    throw ContractError("block " + std::to_string(block) + ": time embedding shape " + shape_str(time_embed.shape()));
  }
  ad::Var temb_act = ad::silu(time_embed);
  ad::Var h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) h = res_layer(layers[l], arch.kernels[l], h, temb_act);
  return h;
}

ad::Var UNet::forward_full(const SubnetArch& arch, const ad::Var& x_t, std::span<const int> t,
                           TeacherFeatures* capture) const {
  validate_arch(config_, arch);
  if (!supports(arch)) throw ContractError("network has no parameters for arch " + arch.str());
  const int n = config_.levels;
  const Shape expect{x_t.shape().empty() ? 0 : x_t.shape()[0], config_.image_channels, config_.image_size,
                     config_.image_size};
  if (x_t.shape() != expect) throw ContractError("forward_full: input " + shape_str(x_t.shape()) + ", expected " + shape_str(expect));
  if (static_cast<int>(t.size()) != expect[0]) throw ContractError("forward_full: need one timestep per sample");

  ad::Var temb = time_embedding(t);
  if (capture) {
    capture->time_embed = temb.value();
    capture->inputs.assign(static_cast<std::size_t>(config_.block_count()), Tensor{});
    capture->targets.assign(static_cast<std::size_t>(config_.block_count()), Tensor{});
    capture->skips.assign(static_cast<std::size_t>(config_.block_count()), Tensor{});
  }
  auto run = [&](int block, const ad::Var& x) {
    ad::Var y = forward_block(block, arch.blocks[static_cast<std::size_t>(block)], x, temb);
    if (capture) {
      capture->inputs[static_cast<std::size_t>(block)] = x.value();
      capture->targets[static_cast<std::size_t>(block)] = y.value();
    }
    return y;
  };

  ad::Var h = ad::conv2d(x_t, stem_weight_, stem_bias_);
  std::vector<ad::Var> skips(static_cast<std::size_t>(n));
  for (int lv = 0; lv < n; ++lv) {
    ad::Var y = run(lv, h);
    skips[static_cast<std::size_t>(lv)] = y;
    h = lv < n - 1 ? ad::avg_downsample2x(y) : y;
  }
  h = run(n, h);
  for (int block = n + 1; block < config_.block_count(); ++block) {
    const int lv = config_.level(block);
    ad::Var up = lv == n - 1 ? h : ad::nearest_upsample2x(h);
    const ad::Var& skip = skips[static_cast<std::size_t>(lv)];
    if (capture) capture->skips[static_cast<std::size_t>(block)] = skip.value();
    h = run(block, ad::channel_concat(up, skip));
  }
  h = ad::group_norm(h, ad::norm_groups(config_.level_channels(0)), head_gamma_, head_beta_);
  return ad::conv2d(ad::silu(h), head_weight_, head_bias_);
}

diffusion::NoisePredictor UNet::predictor(const SubnetArch& arch) const {
  return [this, arch](const ad::Var& x, std::span<const int> t) { return forward_full(arch, x, t); };
}

// --------------------------------------------------------------------------
// Parameter groups

const ad::Parameter* UNet::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

ad::Parameter* UNet::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::vector<ad::Parameter*> UNet::all_parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<ad::Parameter*> UNet::block_parameters(int block) {
  std::vector<ad::Parameter*> out;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (slots_[i].block == block) out.push_back(&params_[i]);
  return out;
}

std::vector<ad::Parameter*> UNet::path_parameters(int block, const BlockArch& arch) {
  if (static_cast<int>(arch.kernels.size()) != config_.layers(block)) throw ContractError("path_parameters: layer count mismatch");
  std::vector<ad::Parameter*> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const ParamSlot& s = slots_[i];
    if (s.block != block) continue;
    if (s.kernel == 0 || s.kernel == arch.kernels[static_cast<std::size_t>(s.layer)]) out.push_back(&params_[i]);
  }
  return out;
}

std::vector<ad::Parameter*> UNet::global_parameters() { return block_parameters(-1); }

void UNet::freeze() {
  for (auto& p : params_) {
    p.trainable = false;
    p.var.set_requires_grad(false);
    p.var.zero_grad();
  }
  frozen_ = true;
}

std::size_t UNet::copy_weights_from(const UNet& other) {
  std::size_t copied = 0;
  for (auto& p : params_) {
    const ad::Parameter* src = other.find(p.name);
    if (!src) continue;
    if (src->var.shape() != p.var.shape()) throw DimensionError("copy_weights_from: shape mismatch for " + p.name);
    p.var.mutable_value() = src->var.value();
    ++copied;
  }
  return copied;
}

std::size_t UNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.value().numel();
  return n;
}

// --------------------------------------------------------------------------
// Teacher features

TeacherFeatures teacher_capture(const UNet& teacher, diffusion::NoisedBatch batch) {
  ad::NoGradGuard no_grad;
  TeacherFeatures f;
  teacher.forward_full(teacher.arch(), ad::Var::constant(batch.x_t), batch.t, &f);
  f.batch = std::move(batch);
  return f;
}

TeacherFeatures teacher_capture(const UNet& teacher, const Tensor& x0, Rng& rng, const diffusion::NoiseSchedule& sched) {
  return teacher_capture(teacher, diffusion::make_noised_batch(x0, rng, sched));
}

ad::Var block_distillation_loss(const UNet& net, int block, const BlockArch& arch, const TeacherFeatures& features) {
  const auto i = static_cast<std::size_t>(block);
  if (i >= features.inputs.size()) throw ContractError("teacher features missing block " + std::to_string(block));
  ad::Var pred = net.forward_block(block, arch, ad::Var::constant(features.inputs[i]),
                                   ad::Var::constant(features.time_embed));
  return ad::mse_mean(pred, ad::Var::constant(features.targets[i]));
}

}  // namespace diffnas::unet
