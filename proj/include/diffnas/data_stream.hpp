#pragma once

#include <memory>

#include "diffnas/rng.hpp"
#include "diffnas/tensor.hpp"

namespace diffnas {

/// Endless minibatches drawn with replacement from a shared, read-only sample set.
class DataStream {
 public:
  DataStream(std::shared_ptr<const Tensor> samples, Rng rng);

  Tensor next(int batch_size);
  int size() const { return samples_->shape()[0]; }
  const Tensor& samples() const { return *samples_; }
  std::shared_ptr<const Tensor> shared_samples() const { return samples_; }

 private:
  std::shared_ptr<const Tensor> samples_;
  Rng rng_;
};

}  // namespace diffnas
