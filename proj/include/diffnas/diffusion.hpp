#pragma once

#include <functional>
#include <span>
#include <vector>

#include "diffnas/autodiff.hpp"
#include "diffnas/rng.hpp"

namespace diffnas::diffusion {

/// Discrete variance-preserving schedule. Timesteps run 1..T; index 0 is the
/// clean-data convention with alpha_bar = 1.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> betas);

  int timesteps() const noexcept { return static_cast<int>(betas_.size()); }
  /// beta_t for t in [1, T].
  double beta(int t) const;
  double alpha_bar(int t) const;
  double alpha(int t) const;
  double sigma(int t) const;
  double snr(int t) const { return alpha(t) / sigma(t); }

  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

 private:
  void check_t(int t) const;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

/// Betas linearly spaced from beta_start to beta_end inclusive.
NoiseSchedule make_linear_schedule(int timesteps, double beta_start, double beta_end);

/// Maps a noised batch and per-sample timesteps to a noise prediction of the same shape.
using NoisePredictor = std::function<ad::Var(const ad::Var& x_t, std::span<const int> t)>;

/// alpha_t * x0 + sigma_t * eps for a single timestep 1 <= t <= T.
Tensor diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

/// Per-sample timesteps along the batch axis.
Tensor diffuse_batch(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched);

/// One draw of (t, eps, x_t) for a clean batch.
struct NoisedBatch {
  Tensor x_t;
  Tensor eps;
  std::vector<int> t;
};

/// t ~ U{1..T} and eps ~ N(0, I) per sample.
NoisedBatch make_noised_batch(const Tensor& x0, Rng& rng, const NoiseSchedule& sched);

/// Noise-prediction loss on a pre-drawn batch: mean over elements of (pred - eps)^2.
ad::Var loss_ori(const NoisePredictor& model, const NoisedBatch& batch);

/// Draws (t, eps) from rng and evaluates the loss above.
ad::Var loss_ori(const NoisePredictor& model, const Tensor& x0, Rng& rng, const NoiseSchedule& sched);

/// Uniform-stride timestep subsequence tau_1 < ... < tau_steps = T used by DDIM.
std::vector<int> ddim_timesteps(int timesteps, int steps);

struct SampleShape {
  int count = 1;
  int channels = 1;
  int height = 1;
  int width = 1;
};

/// Deterministic (eta = 0) DDIM sampler starting from N(0, I) drawn from `seed`.
/// `chunk` bounds how many samples go through the model at once; it does not
/// affect the result.
Tensor ddim_sample(const NoisePredictor& model, const NoiseSchedule& sched, int steps, std::uint64_t seed,
                   SampleShape shape, int chunk = 256);

/// Ancestral DDPM sampling over all T steps with seeded per-step noise.
Tensor ancestral_sample(const NoisePredictor& model, const NoiseSchedule& sched, std::uint64_t seed,
                        SampleShape shape, int chunk = 256);

}  // namespace diffnas::diffusion
