#include "diffnas/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "diffnas/error.hpp"

namespace diffnas {

namespace {
// Activations are freed and reallocated every step. Above glibc's default
// mmap threshold each buffer is a fresh mapping and every page faults again,
// which costs more than the arithmetic.
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

int Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) throw DimensionError("axis " + std::to_string(i) + " out of range for " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

float Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

Tensor Tensor::slice_batch(int begin, int end) const {
  if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end) {
    throw DimensionError("bad batch slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(shape_));
  }
  const std::size_t row = shape_[0] == 0 ? 0 : data_.size() / static_cast<std::size_t>(shape_[0]);
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(row * begin),
                                                 data_.begin() + static_cast<std::ptrdiff_t>(row * end)));
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor stack_batch(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("stack_batch on empty list");
  Shape s = parts[0].shape();
  if (s.empty()) throw DimensionError("stack_batch needs rank >= 1");
  int total = 0;
  std::vector<float> data;
  for (const Tensor& p : parts) {
    if (p.rank() != static_cast<int>(s.size()) || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
      throw DimensionError("stack_batch trailing dims differ: " + shape_str(s) + " vs " + shape_str(p.shape()));
    }
    total += p.shape()[0];
    data.insert(data.end(), p.storage().begin(), p.storage().end());
  }
  s[0] = total;
  return Tensor(std::move(s), std::move(data));
}

}  // namespace diffnas
