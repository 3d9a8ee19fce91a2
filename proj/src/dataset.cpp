#include "diffnas/dataset.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "diffnas/error.hpp"

namespace diffnas::data {

std::string to_string(Source s) {
  switch (s) {
    case Source::Blobs: return "synthetic-blobs";
    case Source::Checker: return "synthetic-checker";
    case Source::RawFile: return "raw-file";
  }
  return "?";
}

Source parse_source(const std::string& s) {
  if (s == "synthetic-blobs") return Source::Blobs;
  if (s == "synthetic-checker") return Source::Checker;
  if (s == "raw-file") return Source::RawFile;
  throw ConfigError("unknown dataset source '" + s + "'");
}

void DatasetSpec::validate() const {
  if (image_size < 1 || channels < 1) throw ConfigError("dataset image size and channels must be positive");
  if (count < 0) throw ConfigError("dataset count must be non-negative");
  if (source == Source::RawFile && path.empty()) throw ConfigError("raw-file dataset needs a path");
}

namespace {

double blob_width(int s) { return s / 8.0; }

}  // namespace

Tensor generate_synthetic(const DatasetSpec& spec, Rng& rng) {
  spec.validate();
  const int s = spec.image_size;
  Tensor out(Shape{spec.count, spec.channels, s, s});
  float* p = out.ptr();
  if (spec.source == Source::Blobs) {
    const double w = blob_width(s);
    const double inv = 1.0 / (2.0 * w * w);
    std::vector<double> img(static_cast<std::size_t>(s) * s);
    for (int n = 0; n < spec.count; ++n) {
      for (int c = 0; c < spec.channels; ++c) {
        std::fill(img.begin(), img.end(), 0.0);
        const int k = rng.uniform_int(1, 3);
        for (int b = 0; b < k; ++b) {
          const double cy = rng.uniform01() * s;
          const double cx = rng.uniform01() * s;
          for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
              const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
              img[static_cast<std::size_t>(y) * s + x] += std::exp(-(dx * dx + dy * dy) * inv);
            }
        }
        for (double v : img) *p++ = static_cast<float>(std::clamp(-1.0 + (2.0 / 3.0) * v, -1.0, 1.0));
      }
    }
  } else if (spec.source == Source::Checker) {
    for (int n = 0; n < spec.count; ++n) {
      for (int c = 0; c < spec.channels; ++c) {
        const int cell = rng.uniform_int(0, 1) == 0 ? 2 : 4;
        const int py = rng.uniform_int(0, cell - 1);
        const int px = rng.uniform_int(0, cell - 1);
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x) *p++ = (((y + py) / cell + (x + px) / cell) % 2) ? 1.0f : -1.0f;
      }
    }
  } else {
    throw ConfigError("generate_synthetic called with a raw-file spec");
  }
  return out;
}

Tensor make_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (spec.source == Source::RawFile) {
    Tensor t = load_raw_tensor_file(spec.path);
    if (t.dim(1) != spec.channels || t.dim(2) != spec.image_size || t.dim(3) != spec.image_size) {
      throw ConfigError("dataset file " + spec.path.string() + " has shape " + shape_str(t.shape()));
    }
    for (float v : t.data()) {
      if (!(v >= -1.0f && v <= 1.0f)) throw ConfigError("dataset file values must lie in [-1, 1]");
    }
    return t;
  }
  Rng rng = Rng::derive(spec.seed, {0xDA7A});
  return generate_synthetic(spec, rng);
}

double blob_pixel_mean(int image_size, int row, int col) {
  // E[exp(-(u-c)^2/(2w^2))] for c ~ U[0, S), per axis.
  const double s = image_size;
  const double w = blob_width(image_size);
  auto axis = [&](double u) {
    const double a = w * std::sqrt(2.0);
    return w * std::sqrt(std::numbers::pi / 2.0) / s * (std::erf((s - u) / a) - std::erf((0.0 - u) / a));
  };
  const double e_bump = axis(row + 0.5) * axis(col + 0.5);
  return -1.0 + (2.0 / 3.0) * 2.0 * e_bump;
}

io::Bytes encode_dtns(const Tensor& batch) {
  if (batch.rank() != 4) throw DimensionError("DTNS stores rank-4 batches, got " + shape_str(batch.shape()));
  io::ByteWriter w;
  w.raw("DTNS");
  for (int d : batch.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.f32s(batch.data());
  return w.take();
}

Tensor decode_dtns(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != "DTNS") throw FormatError("bad magic, expected DTNS", 0);
  Shape shape;
  std::uint64_t numel = 1;
  for (int i = 0; i < 4; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t d = r.u32();
    if (d > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) throw FormatError("dimension overflow", at);
    shape.push_back(static_cast<int>(d));
    if (d != 0 && numel > std::numeric_limits<std::uint64_t>::max() / 4 / d) throw FormatError("dimension overflow", at);
    numel *= d;
  }
  if (numel > r.remaining() / 4) {
    throw FormatError("truncated payload: header declares " + std::to_string(numel) + " values, " +
                          std::to_string(r.remaining() / 4) + " present",
                      r.offset());
  }
  std::vector<float> data(numel);
  r.f32s(data);
  if (!r.done()) throw FormatError("trailing bytes after payload", r.offset());
  return Tensor(std::move(shape), std::move(data));
}

void save_raw_tensor_file(const Tensor& batch, const std::filesystem::path& path) {
  io::atomic_write(path, encode_dtns(batch));
}

Tensor load_raw_tensor_file(const std::filesystem::path& path) {
  const io::Bytes b = io::read_file(path);
  try {
    return decode_dtns(b);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace diffnas::data
