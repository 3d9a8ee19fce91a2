#include "diffnas/data_stream.hpp"

#include <algorithm>

#include "diffnas/error.hpp"

namespace diffnas {

DataStream::DataStream(std::shared_ptr<const Tensor> samples, Rng rng) : samples_(std::move(samples)), rng_(rng) {
  if (!samples_ || samples_->rank() < 1 || samples_->shape()[0] == 0) {
    throw ContractError("data stream needs a non-empty sample set");
  }
}

Tensor DataStream::next(int batch_size) {
  if (batch_size < 1) throw ContractError("batch size must be positive");
  const int n = samples_->shape()[0];
  const std::size_t row = samples_->numel() / static_cast<std::size_t>(n);
  Shape s = samples_->shape();
  s[0] = batch_size;
  Tensor out(s);
  for (int b = 0; b < batch_size; ++b) {
    const auto idx = static_cast<std::size_t>(rng_.uniform_int(0, n - 1));
    std::copy_n(samples_->ptr() + idx * row, row, out.ptr() + static_cast<std::size_t>(b) * row);
  }
  return out;
}

}  // namespace diffnas
