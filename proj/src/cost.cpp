#include "diffnas/cost.hpp"

#include <cmath>
#include <cstdio>

#include "diffnas/error.hpp"

namespace diffnas::cost {

std::uint64_t macs_of_conv(int height, int width, int in_channels, int out_channels, int kernel) {
  if (height < 1 || width < 1 || in_channels < 1 || out_channels < 1 || kernel < 1) {
    throw ContractError("macs_of_conv: dimensions must be positive");
  }
  const auto k = static_cast<std::uint64_t>(kernel);
  return static_cast<std::uint64_t>(height) * static_cast<std::uint64_t>(width) *
         static_cast<std::uint64_t>(in_channels) * static_cast<std::uint64_t>(out_channels) * k * k;
}

std::uint64_t params_of_conv(int in_channels, int out_channels, int kernel) {
  const auto k = static_cast<std::uint64_t>(kernel);
  const auto cout = static_cast<std::uint64_t>(out_channels);
  return cout * static_cast<std::uint64_t>(in_channels) * k * k + cout;
}

namespace {

int layer_in(const unet::UNetConfig& c, int block, int layer) {
  return layer == 0 ? c.block_in_channels(block) : c.block_out_channels(block);
}

void check_block(const unet::UNetConfig& c, int block, const unet::BlockArch& arch) {
  if (block < 0 || block >= c.block_count()) throw ContractError("block index out of range");
  if (static_cast<int>(arch.kernels.size()) != c.layers(block)) throw ContractError("block arch has wrong layer count");
}

}  // namespace

std::uint64_t block_macs(const unet::UNetConfig& config, int block, const unet::BlockArch& arch) {
  check_block(config, block, arch);
  const int r = config.resolution(block);
  std::uint64_t total = 0;
  for (int l = 0; l < config.layers(block); ++l) {
    total += macs_of_conv(r, r, layer_in(config, block, l), config.block_out_channels(block),
                          arch.kernels[static_cast<std::size_t>(l)]);
  }
  return total;
}

std::uint64_t block_params(const unet::UNetConfig& config, int block, const unet::BlockArch& arch) {
  check_block(config, block, arch);
  std::uint64_t total = 0;
  for (int l = 0; l < config.layers(block); ++l) {
    total += params_of_conv(layer_in(config, block, l), config.block_out_channels(block),
                            arch.kernels[static_cast<std::size_t>(l)]);
  }
  return total;
}

CostReport cost_of_arch(const unet::UNetConfig& config, const unet::SubnetArch& arch) {
  unet::validate_arch(config, arch);
  CostReport rep;
  const int s = config.image_size;
  const int c0 = config.level_channels(0);
  const int ic = config.image_channels;
  rep.fixed_macs = macs_of_conv(s, s, ic, c0, 3) + macs_of_conv(s, s, c0, ic, 3);
  rep.fixed_params = params_of_conv(ic, c0, 3) + params_of_conv(c0, ic, 3);
  for (int b = 0; b < config.block_count(); ++b) {
    const auto& ba = arch.blocks[static_cast<std::size_t>(b)];
    rep.block_macs.push_back(block_macs(config, b, ba));
    rep.block_params.push_back(block_params(config, b, ba));
    for (int l = 0; l < config.layers(b); ++l) {
      const int cin = layer_in(config, b, l), cout = config.block_out_channels(b);
      if (cin != cout) {
        const int r = config.resolution(b);
        rep.fixed_macs += macs_of_conv(r, r, cin, cout, 1);
        rep.fixed_params += params_of_conv(cin, cout, 1);
      }
    }
  }
  rep.total_macs = rep.fixed_macs;
  rep.total_params = rep.fixed_params;
  for (auto m : rep.block_macs) rep.total_macs += m;
  for (auto p : rep.block_params) rep.total_params += p;
  return rep;
}

double reduction_percent(double value, double reference) {
  if (!(reference > 0.0)) throw ContractError("reduction_percent: reference must be positive");
  return 100.0 * (1.0 - value / reference);
}

std::string format_with_reduction(double value, double reference, int decimals) {
  const double change = -reduction_percent(value, reference);
  long pct = std::lround(change);
  char buf[64];
  if (pct == 0) {
    std::snprintf(buf, sizeof buf, "%.*f(0%%)", decimals, value);
  } else {
    std::snprintf(buf, sizeof buf, "%.*f(%+ld%%)", decimals, value, pct);
  }
  return buf;
}

}  // namespace diffnas::cost
