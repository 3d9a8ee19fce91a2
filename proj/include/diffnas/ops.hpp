#pragma once

#include <span>
#include <vector>

#include "diffnas/autodiff.hpp"

namespace diffnas::ad {

/// Variance floor used by group_norm.
inline constexpr float kNormEpsilon = 1e-5f;

/// Same-padded 2-D convolution. x [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout].
/// k must be 1, 3 or 5; padding is (k-1)/2 zeros on every side.
Var conv2d(const Var& x, const Var& weight, const Var& bias);

struct ConvCall {
  int batch, in_channels, out_channels, height, width, kernel;
};

/// Records the geometry of every conv2d forward on this thread while alive.
/// Nested traces see only their own calls.
class ConvTrace {
 public:
  ConvTrace();
  ~ConvTrace();
  ConvTrace(const ConvTrace&) = delete;
  ConvTrace& operator=(const ConvTrace&) = delete;
  const std::vector<ConvCall>& calls() const noexcept { return calls_; }

 private:
  friend Var conv2d(const Var&, const Var&, const Var&);
  std::vector<ConvCall> calls_;
  ConvTrace* previous_;
};

/// Group normalization with per-channel affine. C must divide into `groups`.
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, float eps = kNormEpsilon);

/// Group count used for a C-channel norm layer.
inline int norm_groups(int channels) { return channels < 4 ? channels : 4; }

Var silu(const Var& x);

/// x [B,In], weight [Out,In], bias [Out] -> [B,Out].
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Stacks a and b along the channel axis (axis 1).
Var channel_concat(const Var& a, const Var& b);

/// 2x2 mean pooling; H and W must be even.
Var avg_downsample2x(const Var& x);
Var nearest_upsample2x(const Var& x);

/// Mean over all elements of (a - b)^2, as a scalar.
Var mse_mean(const Var& a, const Var& b);

Var add(const Var& a, const Var& b);
Var scale(const Var& a, float s);

/// x [B,C,H,W] plus v [B,C] broadcast over H and W.
Var add_channel_bias(const Var& x, const Var& v);

/// Standard transformer-style embedding of an integer timestep: dim/2 sines
/// followed by dim/2 cosines over frequencies 10000^(-i/(dim/2-1)).
Tensor sinusoidal_time_embed(int t, int dim);

/// Row-stacked embeddings for a batch of timesteps -> [B, dim].
Tensor sinusoidal_time_embed_batch(std::span<const int> ts, int dim);

}  // namespace diffnas::ad
