#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffnas/unet.hpp"

namespace diffnas::cost {

/// Multiply-accumulates of a same-padded convolution: H*W*Cin*Cout*k^2.
/// Bias, norms and activations are not counted.
std::uint64_t macs_of_conv(int height, int width, int in_channels, int out_channels, int kernel);
/// Cout*Cin*k^2 + Cout.
std::uint64_t params_of_conv(int in_channels, int out_channels, int kernel);

/// Per-sample convolution cost of a network. Searchable convolutions are
/// attributed to their block; stem, head and residual projections are fixed.
struct CostReport {
  std::vector<std::uint64_t> block_macs;
  std::vector<std::uint64_t> block_params;
  std::uint64_t fixed_macs = 0;
  std::uint64_t fixed_params = 0;
  std::uint64_t total_macs = 0;
  std::uint64_t total_params = 0;
};

std::uint64_t block_macs(const unet::UNetConfig& config, int block, const unet::BlockArch& arch);
std::uint64_t block_params(const unet::UNetConfig& config, int block, const unet::BlockArch& arch);
CostReport cost_of_arch(const unet::UNetConfig& config, const unet::SubnetArch& arch);

/// 100 * (1 - value / reference).
double reduction_percent(double value, double reference);

/// "4.18(-31%)": the value with `decimals` places and the signed change
/// relative to the reference, rounded to the nearest percent.
std::string format_with_reduction(double value, double reference, int decimals = 2);

}  // namespace diffnas::cost
