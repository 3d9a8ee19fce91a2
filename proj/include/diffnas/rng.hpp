#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "diffnas/tensor.hpp"

namespace diffnas {

/// Seeded random stream. Every stochastic step takes one of these explicitly;
/// there is no global generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream derived from a base seed and a list of tags
  /// (stage id, block index, ...).
  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

  float normal() { return normal_(engine_); }
  double uniform01() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  std::uint64_t next_u64() { return engine_(); }

  Tensor normal_tensor(Shape shape);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<float> normal_{0.0f, 1.0f};
};

}  // namespace diffnas
