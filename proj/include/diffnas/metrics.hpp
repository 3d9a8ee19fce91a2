#pragma once

#include "diffnas/tensor.hpp"

namespace diffnas::metrics {

struct MmdResult {
  double mmd2 = 0.0;
  double bandwidth = 0.0;
};

/// Unbiased squared MMD with k(x, y) = exp(-|x - y|^2 / (2 h^2)), h the
/// median pairwise distance of the pooled samples. Each sample is flattened
/// along all but the first axis. Needs at least 2 samples per side.
MmdResult mmd2_rbf_detail(const Tensor& generated, const Tensor& reference);
double mmd2_rbf(const Tensor& generated, const Tensor& reference);

/// |mu1 - mu2|^2 + sum_d (s1_d - s2_d)^2 for per-dimension Gaussian fits.
double frechet_diag(const Tensor& generated, const Tensor& reference);

}  // namespace diffnas::metrics
