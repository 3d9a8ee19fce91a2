#include "diffnas/diffusion.hpp"

#include <cmath>

#include "diffnas/error.hpp"
#include "diffnas/ops.hpp"

namespace diffnas::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw ConfigError("noise schedule needs at least one timestep");
  alpha_bars_.assign(betas_.size() + 1, 1.0);
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) throw ConfigError("beta values must lie in (0, 1)");
    alpha_bars_[i + 1] = alpha_bars_[i] * (1.0 - betas_[i]);
  }
}

void NoiseSchedule::check_t(int t) const {
  if (t < 0 || t > timesteps()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(timesteps()) + "]");
  }
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > timesteps()) throw ContractError("beta index " + std::to_string(t) + " outside [1, T]");
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  check_t(t);
  return alpha_bars_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha(int t) const { return std::sqrt(alpha_bar(t)); }
double NoiseSchedule::sigma(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }

NoiseSchedule make_linear_schedule(int timesteps, double beta_start, double beta_end) {
  if (timesteps < 2) throw ConfigError("linear schedule needs T >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("linear schedule needs 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(timesteps));
  for (int i = 0; i < timesteps; ++i) {
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / (timesteps - 1);
  }
  return NoiseSchedule(std::move(betas));
}

Tensor diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  std::vector<int> ts(x0.rank() == 0 ? 1 : static_cast<std::size_t>(x0.shape()[0]), t);
  if (x0.rank() == 0) {
    if (t < 1 || t > sched.timesteps()) throw ContractError("diffuse: timestep out of range");
    return Tensor::scalar(static_cast<float>(sched.alpha(t) * x0.item() + sched.sigma(t) * eps.item()));
  }
  return diffuse_batch(x0, ts, eps, sched);
}

Tensor diffuse_batch(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape()) {
    throw DimensionError("diffuse: eps shape " + shape_str(eps.shape()) + " vs x0 " + shape_str(x0.shape()));
  }
  if (x0.rank() == 0 || static_cast<std::size_t>(x0.shape()[0]) != t.size()) {
    throw DimensionError("diffuse: need one timestep per sample");
  }
  Tensor out(x0.shape());
  const std::size_t row = t.empty() ? 0 : x0.numel() / t.size();
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (t[b] < 1 || t[b] > sched.timesteps()) {
      throw ContractError("diffuse: timestep " + std::to_string(t[b]) + " outside [1, T]");
    }
    const double a = sched.alpha(t[b]);
    const double s = sched.sigma(t[b]);
    for (std::size_t i = b * row; i < (b + 1) * row; ++i) {
      out[i] = static_cast<float>(a * x0[i] + s * eps[i]);
    }
  }
  return out;
}

NoisedBatch make_noised_batch(const Tensor& x0, Rng& rng, const NoiseSchedule& sched) {
  if (x0.rank() == 0) throw DimensionError("make_noised_batch: batch axis required");
  NoisedBatch nb;
  nb.t.resize(static_cast<std::size_t>(x0.shape()[0]));
  for (int& t : nb.t) t = rng.uniform_int(1, sched.timesteps());
  nb.eps = rng.normal_tensor(x0.shape());
  nb.x_t = diffuse_batch(x0, nb.t, nb.eps, sched);
  return nb;
}

ad::Var loss_ori(const NoisePredictor& model, const NoisedBatch& batch) {
  ad::Var pred = model(ad::Var::constant(batch.x_t), batch.t);
  return ad::mse_mean(pred, ad::Var::constant(batch.eps));
}

ad::Var loss_ori(const NoisePredictor& model, const Tensor& x0, Rng& rng, const NoiseSchedule& sched) {
  return loss_ori(model, make_noised_batch(x0, rng, sched));
}

std::vector<int> ddim_timesteps(int timesteps, int steps) {
  if (steps < 1 || steps > timesteps) {
    throw ConfigError("DDIM steps must lie in [1, T=" + std::to_string(timesteps) + "], got " + std::to_string(steps));
  }
  std::vector<int> taus(static_cast<std::size_t>(steps));
  for (int k = 1; k <= steps; ++k) {
    taus[static_cast<std::size_t>(k - 1)] =
        static_cast<int>(static_cast<long long>(k) * timesteps / steps);
  }
  return taus;
}

namespace {

// Runs the model over x in chunks of at most `chunk` samples with every
// sample at timestep t.
Tensor predict_chunked(const NoisePredictor& model, const Tensor& x, int t, int chunk) {
  const int n = x.shape()[0];
  std::vector<Tensor> parts;
  for (int begin = 0; begin < n; begin += chunk) {
    const int end = std::min(n, begin + chunk);
    std::vector<int> ts(static_cast<std::size_t>(end - begin), t);
    ad::Var pred = model(ad::Var::constant(x.slice_batch(begin, end)), ts);
    parts.push_back(pred.value());
  }
  return stack_batch(parts);
}

Shape to_shape(SampleShape s) { return Shape{s.count, s.channels, s.height, s.width}; }

}  // namespace

Tensor ddim_sample(const NoisePredictor& model, const NoiseSchedule& sched, int steps, std::uint64_t seed,
                   SampleShape shape, int chunk) {
  const std::vector<int> taus = ddim_timesteps(sched.timesteps(), steps);
  ad::NoGradGuard no_grad;
  Rng rng(seed);
  Tensor x = rng.normal_tensor(to_shape(shape));
  for (int k = steps; k >= 1; --k) {
    const int t = taus[static_cast<std::size_t>(k - 1)];
    const int t_prev = k >= 2 ? taus[static_cast<std::size_t>(k - 2)] : 0;
    const Tensor eps = predict_chunked(model, x, t, chunk);
    const double a = sched.alpha(t), s = sched.sigma(t);
    const double ap = sched.alpha(t_prev), sp = sched.sigma(t_prev);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double x0 = (x[i] - s * eps[i]) / a;
      x[i] = static_cast<float>(ap * x0 + sp * eps[i]);
    }
  }
  return x;
}

Tensor ancestral_sample(const NoisePredictor& model, const NoiseSchedule& sched, std::uint64_t seed,
                        SampleShape shape, int chunk) {
  ad::NoGradGuard no_grad;
  Rng rng(seed);
  Tensor x = rng.normal_tensor(to_shape(shape));
  for (int t = sched.timesteps(); t >= 1; --t) {
    const Tensor eps = predict_chunked(model, x, t, chunk);
    const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1);
    const double beta = sched.beta(t);
    const double a = sched.alpha(t), s = sched.sigma(t);
    const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double c_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double post_std = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta);
    Tensor z;
    if (t > 1) z = rng.normal_tensor(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double x0 = (x[i] - s * eps[i]) / a;
      double mean = c_x0 * x0 + c_xt * x[i];
      if (t > 1) mean += post_std * z[i];
      x[i] = static_cast<float>(mean);
    }
  }
  return x;
}

}  // namespace diffnas::diffusion
