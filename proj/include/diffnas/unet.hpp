#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "diffnas/diffusion.hpp"
#include "diffnas/optim.hpp"
#include "diffnas/rng.hpp"

namespace diffnas::unet {

/// Kernel sizes a searchable layer can take, in enumeration order.
inline constexpr std::array<int, 3> kKernelOptions{1, 3, 5};
/// Kernel size of every searchable layer in the teacher.
inline constexpr int kTeacherKernel = 3;

bool is_kernel_option(int k);

enum class BlockKind { Encoder, Middle, Decoder };

/// Shape of the U-Net. Blocks are indexed E_0..E_{n-1}, M, D_{n-1}..D_0,
/// i.e. 2n+1 blocks for n resolution levels.
struct UNetConfig {
  int levels = 3;
  int base_channels = 16;
  std::vector<int> channel_mult{1, 2, 2};
  /// Searchable layers per block, one entry per block.
  std::vector<int> layers_per_block{2, 2, 2, 2, 2, 2, 2};
  int image_size = 16;
  int image_channels = 1;
  int time_embed_dim = 32;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;

  int block_count() const { return 2 * levels + 1; }
  BlockKind kind(int block) const;
  /// Resolution level of a block (0 = full resolution).
  int level(int block) const;
  int resolution(int block) const { return image_size >> level(block); }
  int level_channels(int level) const { return base_channels * channel_mult.at(static_cast<std::size_t>(level)); }
  int block_in_channels(int block) const;
  int block_out_channels(int block) const { return level_channels(level(block)); }
  /// Channels of the skip feature concatenated into a decoder block (0 otherwise).
  int block_skip_channels(int block) const;
  int layers(int block) const { return layers_per_block.at(static_cast<std::size_t>(block)); }
  /// Block name prefix used in parameter paths, e.g. "enc1", "mid", "dec0".
  std::string block_name(int block) const;
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Same d for every block.
UNetConfig make_config(int levels, int base_channels, std::vector<int> channel_mult, int layers_per_block,
                       int image_size, int image_channels, int time_embed_dim);

/// Kernel choice per layer of one block.
struct BlockArch {
  std::vector<int> kernels;
  friend auto operator<=>(const BlockArch&, const BlockArch&) = default;
  friend bool operator==(const BlockArch&, const BlockArch&) = default;
};

/// One BlockArch per block of the network.
struct SubnetArch {
  std::vector<BlockArch> blocks;
  friend bool operator==(const SubnetArch&, const SubnetArch&) = default;
  std::string str() const;
};

/// Throws ContractError unless the arch has the right block count, layer
/// counts, and only kernels from {1, 3, 5}.
void validate_arch(const UNetConfig& config, const SubnetArch& arch);

SubnetArch teacher_arch(const UNetConfig& config);
SubnetArch uniform_arch(const UNetConfig& config, int kernel);

/// Independent uniform choice over {1,3,5} for every layer.
SubnetArch sample_random_path(const UNetConfig& config, Rng& rng);

/// All 3^d choices for a d-layer block, lexicographic with smaller kernels first.
std::vector<BlockArch> enumerate_block_archs(int layers);

/// Teacher-side activations of one forward pass.
struct TeacherFeatures {
  diffusion::NoisedBatch batch;
  /// Time-embedding MLP output for the batch, fed to every block.
  Tensor time_embed;
  /// X_i and Y_i per block.
  std::vector<Tensor> inputs;
  std::vector<Tensor> targets;
  /// Skip feature concatenated into each decoder block; empty for other blocks.
  std::vector<Tensor> skips;
};

/// Which parameter group a tensor belongs to.
struct ParamSlot {
  int block = -1;  ///< -1 for stem, head and time MLP.
  int layer = -1;
  int kernel = 0;  ///< 0 when shared by all kernel choices of the layer.
};

/// Block-structured U-Net. A supernet holds k=1,3,5 convolutions for every
/// searchable layer; a fixed network (teacher or retrained student) holds only
/// the kernels of one SubnetArch. Layers share norms and time projections
/// across kernel choices.
class UNet {
 public:
  static UNet supernet(const UNetConfig& config, std::uint64_t seed);
  static UNet fixed(const UNetConfig& config, const SubnetArch& arch, std::uint64_t seed);

  UNet(UNet&&) noexcept = default;
  UNet& operator=(UNet&&) noexcept = default;
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  const UNetConfig& config() const noexcept { return config_; }
  bool is_supernet() const noexcept { return supernet_; }
  /// The instantiated arch of a fixed network. Throws for a supernet.
  const SubnetArch& arch() const;
  /// Whether every kernel in `arch` has parameters in this network.
  bool supports(const SubnetArch& arch) const;

  /// Time-embedding MLP: sinusoid -> linear -> silu -> linear, [B, D].
  ad::Var time_embedding(std::span<const int> t) const;

  /// Runs block i alone. `time_embed` is the MLP output for the batch.
  ad::Var forward_block(int block, const BlockArch& arch, const ad::Var& x, const ad::Var& time_embed) const;

  /// Whole-network noise prediction. When `capture` is non-null every block's
  /// input, output and skip is recorded into it.
  ad::Var forward_full(const SubnetArch& arch, const ad::Var& x_t, std::span<const int> t,
                       TeacherFeatures* capture = nullptr) const;

  /// forward_full bound to an arch, for the samplers and loss_ori.
  diffusion::NoisePredictor predictor(const SubnetArch& arch) const;

  std::vector<ad::Parameter>& parameters() noexcept { return params_; }
  const std::vector<ad::Parameter>& parameters() const noexcept { return params_; }
  const std::vector<ParamSlot>& slots() const noexcept { return slots_; }
  const ad::Parameter* find(const std::string& name) const;
  ad::Parameter* find(const std::string& name);

  std::vector<ad::Parameter*> all_parameters();
  /// Every parameter of block i, over all kernel choices.
  std::vector<ad::Parameter*> block_parameters(int block);
  /// Parameters of block i touched by one path through it.
  std::vector<ad::Parameter*> path_parameters(int block, const BlockArch& arch);
  /// Stem, head and time MLP.
  std::vector<ad::Parameter*> global_parameters();

  /// Marks every parameter non-trainable; forward passes record no graph.
  void freeze();
  bool frozen() const noexcept { return frozen_; }

  /// Copies every tensor whose name exists in both networks.
  /// Returns the number of tensors copied.
  std::size_t copy_weights_from(const UNet& other);

  std::size_t parameter_count() const;

 private:
  struct ConvSet {
    int kernel = 0;
    ad::Var weight;
    ad::Var bias;
  };
  struct ResLayer {
    int in_channels = 0;
    int out_channels = 0;
    ad::Var norm_gamma, norm_beta;
    std::vector<ConvSet> convs;
    ad::Var temb_weight, temb_bias;
    bool has_projection = false;
    ad::Var proj_weight, proj_bias;
    const ConvSet& conv(int kernel) const;
  };

  UNet(const UNetConfig& config, bool supernet, SubnetArch arch, std::uint64_t seed);

  ad::Var add_param(const std::string& name, Shape shape, ParamSlot slot, float init_bound, float fill = 0.0f);
  ad::Var res_layer(const ResLayer& layer, int kernel, const ad::Var& x, const ad::Var& temb_act) const;

  UNetConfig config_;
  bool supernet_ = false;
  bool frozen_ = false;
  SubnetArch arch_;
  std::uint64_t seed_ = 0;
  std::vector<ad::Parameter> params_;
  std::vector<ParamSlot> slots_;

  ad::Var stem_weight_, stem_bias_;
  ad::Var temb_w0_, temb_b0_, temb_w1_, temb_b1_;
  std::vector<std::vector<ResLayer>> blocks_;
  ad::Var head_gamma_, head_beta_, head_weight_, head_bias_;
};

/// Draws (t, eps) for x0, runs the frozen teacher once with no gradient
/// recording and returns every block boundary activation.
TeacherFeatures teacher_capture(const UNet& teacher, const Tensor& x0, Rng& rng, const diffusion::NoiseSchedule& sched);

/// Capture for an already noised batch.
TeacherFeatures teacher_capture(const UNet& teacher, diffusion::NoisedBatch batch);

/// Mean L2 between block i of `net` under `arch` and the teacher target,
/// with the teacher's block input. Used by supernet training, search
/// evaluation and the distillation term of retraining.
ad::Var block_distillation_loss(const UNet& net, int block, const BlockArch& arch, const TeacherFeatures& features);

}  // namespace diffnas::unet
