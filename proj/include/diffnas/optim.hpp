#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffnas/autodiff.hpp"

namespace diffnas::ad {

/// Named trainable tensor. The Var is a leaf shared with the layer that uses it.
struct Parameter {
  std::string name;
  Var var;
  bool trainable = true;
};

struct AdamOptions {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

/// Adam with bias correction. Moments are keyed by parameter name and created
/// lazily, so a parameter that is never updated never gets optimizer state.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  /// Updates every listed trainable parameter from its gradient. A listed
  /// trainable parameter without a gradient is a contract error.
  void step(std::span<Parameter* const> params);

  std::int64_t steps() const noexcept { return steps_; }
  const AdamOptions& options() const noexcept { return options_; }

 private:
  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
    std::int64_t t = 0;
  };
  AdamOptions options_;
  std::unordered_map<std::string, Moments> state_;
  std::int64_t steps_ = 0;
};

void zero_grads(std::span<Parameter* const> params);

}  // namespace diffnas::ad
