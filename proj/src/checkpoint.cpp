#include "diffnas/checkpoint.hpp"

#include <limits>
#include <unordered_map>

#include "diffnas/error.hpp"

namespace diffnas::checkpoint {

namespace {
constexpr std::string_view kMagic = "DNAS";
}

Checkpoint snapshot(const unet::UNet& net) {
  Checkpoint c;
  c.layers_per_block = net.config().layers_per_block;
  if (!net.is_supernet()) c.arch = net.arch();
  for (const ad::Parameter& p : net.parameters()) c.records.push_back({p.name, p.var.value()});
  return c;
}

io::Bytes encode(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.raw(kMagic);
  w.u16(kFormatVersion);
  if (ckpt.layers_per_block.size() > std::numeric_limits<std::uint16_t>::max()) throw ContractError("too many blocks");
  w.u16(static_cast<std::uint16_t>(ckpt.layers_per_block.size()));
  for (std::size_t b = 0; b < ckpt.layers_per_block.size(); ++b) {
    const int d = ckpt.layers_per_block[b];
    if (d < 0 || d > 255) throw ContractError("layer count does not fit the descriptor");
    w.u8(static_cast<std::uint8_t>(d));
    for (int l = 0; l < d; ++l) {
      const int k = ckpt.arch ? ckpt.arch->blocks.at(b).kernels.at(static_cast<std::size_t>(l)) : 0;
      w.u8(static_cast<std::uint8_t>(k));
    }
  }
  for (const Record& r : ckpt.records) {
    if (r.name.size() > std::numeric_limits<std::uint16_t>::max()) throw ContractError("parameter name too long");
    w.u16(static_cast<std::uint16_t>(r.name.size()));
    w.raw(r.name);
    w.u8(static_cast<std::uint8_t>(r.tensor.rank()));
    for (int d : r.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(r.tensor.data());
  }
  return w.take();
}

Checkpoint decode(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < kMagic.size() || r.raw(kMagic.size()) != kMagic) throw FormatError("bad magic, expected DNAS", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u16(); v != kFormatVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  }
  Checkpoint c;
  const int blocks = r.u16();
  unet::SubnetArch arch;
  bool any_zero = false, any_set = false;
  for (int b = 0; b < blocks; ++b) {
    const int d = r.u8();
    c.layers_per_block.push_back(d);
    unet::BlockArch ba;
    for (int l = 0; l < d; ++l) {
      const std::size_t at = r.offset();
      const int k = r.u8();
      if (k == 0) {
        any_zero = true;
      } else if (unet::is_kernel_option(k)) {
        any_set = true;
      } else {
        throw FormatError("invalid kernel choice " + std::to_string(k), at);
      }
      ba.kernels.push_back(k);
    }
    arch.blocks.push_back(std::move(ba));
  }
  if (any_zero && any_set) throw FormatError("arch descriptor mixes supernet and fixed choices", r.offset());
  if (!any_zero) c.arch = std::move(arch);

  while (!r.done()) {
    const std::size_t record_at = r.offset();
    Record rec;
    const std::size_t len = r.u16();
    rec.name = r.raw(len);
    const int rank = r.u8();
    Shape shape;
    std::uint64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      const std::size_t at = r.offset();
      const std::uint32_t d = r.u32();
      if (d > static_cast<std::uint32_t>(std::numeric_limits<int>::max()) ||
          (d != 0 && numel > std::numeric_limits<std::uint64_t>::max() / 4 / d)) {
        throw FormatError("dimension overflow in record '" + rec.name + "'", at);
      }
      numel *= d;
      shape.push_back(static_cast<int>(d));
    }
    if (numel > r.remaining() / 4) {
      throw FormatError("truncated payload of '" + rec.name + "': " + std::to_string(numel) + " values declared, " +
                            std::to_string(r.remaining() / 4) + " present",
                        r.offset());
    }
    std::vector<float> data(numel);
    r.f32s(data);
    rec.tensor = Tensor(std::move(shape), std::move(data));
    for (const Record& prev : c.records) {
      if (prev.name == rec.name) throw FormatError("duplicate record '" + rec.name + "'", record_at);
    }
    c.records.push_back(std::move(rec));
  }
  return c;
}

void save(const unet::UNet& net, const std::filesystem::path& path) { io::atomic_write(path, encode(snapshot(net))); }

Checkpoint load(const std::filesystem::path& path) {
  const io::Bytes bytes = io::read_file(path);
  try {
    return decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

unet::UNet restore(const unet::UNetConfig& config, const Checkpoint& ckpt) {
  if (ckpt.layers_per_block != config.layers_per_block) {
    throw ConfigError("checkpoint block layout does not match the configured network");
  }
  unet::UNet net = ckpt.arch ? unet::UNet::fixed(config, *ckpt.arch, 0) : unet::UNet::supernet(config, 0);
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const Record& r : ckpt.records) by_name.emplace(r.name, &r.tensor);
  if (by_name.size() != net.parameters().size()) {
    throw FormatError("checkpoint holds " + std::to_string(by_name.size()) + " tensors, network expects " +
                          std::to_string(net.parameters().size()),
                      0);
  }
  for (ad::Parameter& p : net.parameters()) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter '" + p.name + "'", 0);
    if (it->second->shape() != p.var.shape()) {
      throw FormatError("shape mismatch for '" + p.name + "': " + shape_str(it->second->shape()) + " vs " +
                            shape_str(p.var.shape()),
                        0);
    }
    p.var.mutable_value() = *it->second;
  }
  return net;
}

}  // namespace diffnas::checkpoint
