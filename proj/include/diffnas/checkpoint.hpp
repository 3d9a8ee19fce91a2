#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "diffnas/io.hpp"
#include "diffnas/unet.hpp"

namespace diffnas::checkpoint {

inline constexpr std::uint16_t kFormatVersion = 1;

struct Record {
  std::string name;
  Tensor tensor;
  friend bool operator==(const Record&, const Record&) = default;
};

/// Decoded "DNAS" file. A supernet is stored with every choice set to 0.
struct Checkpoint {
  std::vector<int> layers_per_block;
  std::optional<unet::SubnetArch> arch;
  std::vector<Record> records;

  bool is_supernet() const noexcept { return !arch.has_value(); }
};

Checkpoint snapshot(const unet::UNet& net);
io::Bytes encode(const Checkpoint& ckpt);
/// Throws FormatError with the byte offset of the first problem.
Checkpoint decode(std::span<const std::uint8_t> bytes);

void save(const unet::UNet& net, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

/// Rebuilds a network from a checkpoint. The config must match the stored
/// layer counts and every parameter must be present with the right shape.
unet::UNet restore(const unet::UNetConfig& config, const Checkpoint& ckpt);

}  // namespace diffnas::checkpoint
