#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "diffnas/io.hpp"
#include "diffnas/rng.hpp"
#include "diffnas/tensor.hpp"

namespace diffnas::data {

enum class Source { Blobs, Checker, RawFile };

std::string to_string(Source s);
/// "synthetic-blobs", "synthetic-checker" or "raw-file".
Source parse_source(const std::string& s);

struct DatasetSpec {
  Source source = Source::Blobs;
  int image_size = 16;
  int channels = 1;
  int count = 2000;
  std::uint64_t seed = 0;
  std::filesystem::path path;

  void validate() const;
};

/// Blobs: each image channel is -1 + (2/3) * sum of K ~ U{1,2,3} Gaussian
/// bumps with centres uniform on [0, S)^2 and width S/8, so values stay in
/// [-1, 1]. Checker: +-1 checkerboards with cell size 2 or 4 and a random
/// phase per axis.
Tensor generate_synthetic(const DatasetSpec& spec, Rng& rng);

/// Synthetic sources draw from spec.seed; raw files are loaded from spec.path.
Tensor make_dataset(const DatasetSpec& spec);

/// Expected blob pixel value at (row, col), pixel centres at integer + 0.5.
double blob_pixel_mean(int image_size, int row, int col);

io::Bytes encode_dtns(const Tensor& batch);
/// Throws FormatError with the byte offset of the problem.
Tensor decode_dtns(std::span<const std::uint8_t> bytes);
void save_raw_tensor_file(const Tensor& batch, const std::filesystem::path& path);
Tensor load_raw_tensor_file(const std::filesystem::path& path);

}  // namespace diffnas::data
