#include "diffnas/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>

#include "diffnas/error.hpp"

namespace diffnas::ad {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapArr = Eigen::Map<Eigen::ArrayXf>;
using ConstMapArr = Eigen::Map<const Eigen::ArrayXf>;

void require_rank(const Var& v, int rank, const char* op) {
  if (v.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(v.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Unrolls one image [Cin,H,W] into columns [Cin*k*k, H*W] for a same-padded conv.
void im2col(const float* img, int cin, int h, int w, int k, float* cols) {
  const int pad = (k - 1) / 2;
  const int hw = h * w;
  for (int c = 0; c < cin; ++c) {
    const float* plane = img + static_cast<std::size_t>(c) * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        const int dx = kx - pad;
        const int x0 = std::max(0, -dx);
        const int x1 = std::min(w, w - dx);
        for (int oy = 0; oy < h; ++oy) {
          float* out = row + oy * w;
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < w; ++ox) out[ox] = 0.0f;
            continue;
          }
          const float* src = plane + iy * w + dx;
          for (int ox = 0; ox < x0; ++ox) out[ox] = 0.0f;
          for (int ox = x0; ox < x1; ++ox) out[ox] = src[ox];
          for (int ox = x1; ox < w; ++ox) out[ox] = 0.0f;
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the image.
void col2im_add(const float* cols, int cin, int h, int w, int k, float* img) {
  const int pad = (k - 1) / 2;
  const int hw = h * w;
  for (int c = 0; c < cin; ++c) {
    float* plane = img + static_cast<std::size_t>(c) * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        const int dx = kx - pad;
        const int x0 = std::max(0, -dx);
        const int x1 = std::min(w, w - dx);
        for (int oy = 0; oy < h; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const float* src = row + oy * w;
          float* dst = plane + iy * w + dx;
          for (int ox = x0; ox < x1; ++ox) dst[ox] += src[ox];
        }
      }
    }
  }
}

}  // namespace

namespace {
thread_local ConvTrace* active_trace = nullptr;
}

ConvTrace::ConvTrace() : previous_(active_trace) { active_trace = this; }
ConvTrace::~ConvTrace() { active_trace = previous_; }

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const int batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const int cout = ws[0], k = ws[2];
  if (ws[1] != cin) {
    throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                         std::to_string(ws[1]));
  }
  if (ws[3] != k || (k != 1 && k != 3 && k != 5)) {
    throw ConfigError("conv2d: kernel must be square with size 1, 3 or 5, got " + shape_str(ws));
  }
  if (bias.shape() != Shape{cout}) throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));

  if (active_trace) active_trace->calls_.push_back({batch, cin, cout, h, w, k});

  const int hw = h * w;
  const int ckk = cin * k * k;
  Tensor out(Shape{batch, cout, h, w});
  ConstMapMat wm(weight.value().ptr(), cout, ckk);
  const float* bptr = bias.value().ptr();
  FloatBuffer cols(k == 1 ? 0 : static_cast<std::size_t>(ckk) * hw);
  for (int b = 0; b < batch; ++b) {
    const float* img = x.value().ptr() + static_cast<std::size_t>(b) * cin * hw;
    const float* colp = img;
    if (k != 1) {
      im2col(img, cin, h, w, k, cols.data());
      colp = cols.data();
    }
    MapMat om(out.ptr() + static_cast<std::size_t>(b) * cout * hw, cout, hw);
    om.noalias() = wm * ConstMapMat(colp, ckk, hw);
    for (int o = 0; o < cout; ++o) om.row(o).array() += bptr[o];
  }

  return make_result(std::move(out), {x, weight, bias}, [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Node& bn = *self.parents[2];
    const float* gy = self.grad->ptr();
    FloatBuffer cols_buf(k == 1 ? 0 : static_cast<std::size_t>(ckk) * hw);
    FloatBuffer dcols(xn.requires_grad && k != 1 ? static_cast<std::size_t>(ckk) * hw : 0);
    RowMat dw = RowMat::Zero(cout, ckk);
    ConstMapMat wmat(wn.value.ptr(), cout, ckk);
    for (int b = 0; b < batch; ++b) {
      ConstMapMat gym(gy + static_cast<std::size_t>(b) * cout * hw, cout, hw);
      const float* img = xn.value.ptr() + static_cast<std::size_t>(b) * cin * hw;
      if (wn.requires_grad) {
        const float* colp = img;
        if (k != 1) {
          im2col(img, cin, h, w, k, cols_buf.data());
          colp = cols_buf.data();
        }
        dw.noalias() += gym * ConstMapMat(colp, ckk, hw).transpose();
      }
      if (xn.requires_grad) {
        float* gx = xn.grad_buffer().ptr() + static_cast<std::size_t>(b) * cin * hw;
        if (k == 1) {
          MapMat(gx, cin, hw).noalias() += wmat.transpose() * gym;
        } else {
          MapMat(dcols.data(), ckk, hw).noalias() = wmat.transpose() * gym;
          col2im_add(dcols.data(), cin, h, w, k, gx);
        }
      }
    }
    if (wn.requires_grad) wn.accumulate_grad(std::span<const float>(dw.data(), static_cast<std::size_t>(dw.size())));
    if (bn.requires_grad) {
      std::vector<float> db(static_cast<std::size_t>(cout), 0.0f);
      for (int b = 0; b < batch; ++b)
        for (int o = 0; o < cout; ++o) {
          const float* g = gy + (static_cast<std::size_t>(b) * cout + o) * hw;
          float s = 0.0f;
          for (int i = 0; i < hw; ++i) s += g[i];
          db[static_cast<std::size_t>(o)] += s;
        }
      bn.accumulate_grad(db);
    }
  });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, float eps) {
  require_rank(x, 4, "group_norm");
  const Shape& xs = x.shape();
  const int batch = xs[0], c = xs[1], hw = xs[2] * xs[3];
  if (groups <= 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) +
                      " groups");
  }
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw DimensionError("group_norm: affine shape mismatch");
  const int cpg = c / groups;
  const Eigen::Index gsize = static_cast<Eigen::Index>(cpg) * hw;

  Tensor out(xs);
  // Normalized values and inverse std per (sample, group), kept for backward.
  auto xhat = std::make_shared<FloatBuffer>(x.value().numel());
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(batch) * groups);
  const float* gp = gamma.value().ptr();
  const float* bp = beta.value().ptr();
  for (int b = 0; b < batch; ++b) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + static_cast<std::size_t>(g) * cpg) * hw;
      ConstMapArr xa(x.value().ptr() + off, gsize);
      const float mean = xa.sum() / static_cast<float>(gsize);
      const float var = (xa - mean).square().sum() / static_cast<float>(gsize);
      const float istd = 1.0f / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(b) * groups + g] = istd;
      MapArr xh(xhat->data() + off, gsize);
      xh = (xa - mean) * istd;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const std::size_t coff = off + static_cast<std::size_t>(cc) * hw;
        MapArr(out.ptr() + coff, hw) = ConstMapArr(xhat->data() + coff, hw) * gp[ch] + bp[ch];
      }
    }
  }

  return make_result(std::move(out), {x, gamma, beta}, [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& gn = *self.parents[1];
    Node& bn = *self.parents[2];
    const float* gy = self.grad->ptr();
    const float* gam = gn.value.ptr();
    std::vector<float> dgamma(static_cast<std::size_t>(c), 0.0f), dbeta(static_cast<std::size_t>(c), 0.0f);
    float* gx = xn.requires_grad ? xn.grad_buffer().ptr() : nullptr;
    Eigen::ArrayXf dxhat(gsize);
    for (int b = 0; b < batch; ++b) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + static_cast<std::size_t>(g) * cpg) * hw;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          const std::size_t coff = off + static_cast<std::size_t>(cc) * hw;
          ConstMapArr gya(gy + coff, hw);
          ConstMapArr xh(xhat->data() + coff, hw);
          dgamma[static_cast<std::size_t>(ch)] += (gya * xh).sum();
          dbeta[static_cast<std::size_t>(ch)] += gya.sum();
          dxhat.segment(static_cast<Eigen::Index>(cc) * hw, hw) = gya * gam[ch];
        }
        if (!gx) continue;
        ConstMapArr xh(xhat->data() + off, gsize);
        const float mean_d = dxhat.sum() / static_cast<float>(gsize);
        const float mean_dx = (dxhat * xh).sum() / static_cast<float>(gsize);
        const float istd = (*inv_std)[static_cast<std::size_t>(b) * groups + g];
        MapArr(gx + off, gsize) += istd * (dxhat - mean_d - xh * mean_dx);
      }
    }
    if (gn.requires_grad) gn.accumulate_grad(dgamma);
    if (bn.requires_grad) bn.accumulate_grad(dbeta);
  });
}

Var silu(const Var& x) {
  Tensor out(x.shape());
  const auto n = static_cast<Eigen::Index>(out.numel());
  ConstMapArr xa(x.value().ptr(), n);
  MapArr(out.ptr(), n) = xa / (1.0f + (-xa).exp());
  return make_result(std::move(out), {x}, [n](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    ConstMapArr xv(xn.value.ptr(), n);
    ConstMapArr gy(self.grad->ptr(), n);
    const Eigen::ArrayXf s = 1.0f / (1.0f + (-xv).exp());
    MapArr(xn.grad_buffer().ptr(), n) += gy * s * (1.0f + xv * (1.0f - s));
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const int batch = x.shape()[0], in = x.shape()[1];
  const int out_f = weight.shape()[0];
  if (weight.shape()[1] != in) {
    throw DimensionError("linear: input width " + std::to_string(in) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.shape() != Shape{out_f}) throw DimensionError("linear: bias shape " + shape_str(bias.shape()));
  Tensor out(Shape{batch, out_f});
  MapMat om(out.ptr(), batch, out_f);
  om.noalias() = ConstMapMat(x.value().ptr(), batch, in) * ConstMapMat(weight.value().ptr(), out_f, in).transpose();
  for (int b = 0; b < batch; ++b)
    for (int o = 0; o < out_f; ++o) om(b, o) += bias.value()[static_cast<std::size_t>(o)];

  return make_result(std::move(out), {x, weight, bias}, [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Node& bn = *self.parents[2];
    ConstMapMat gy(self.grad->ptr(), batch, out_f);
    if (xn.requires_grad) {
      MapMat(xn.grad_buffer().ptr(), batch, in).noalias() += gy * ConstMapMat(wn.value.ptr(), out_f, in);
    }
    if (wn.requires_grad) {
      MapMat(wn.grad_buffer().ptr(), out_f, in).noalias() += gy.transpose() * ConstMapMat(xn.value.ptr(), batch, in);
    }
    if (bn.requires_grad) {
      float* gb = bn.grad_buffer().ptr();
      for (int b = 0; b < batch; ++b)
        for (int o = 0; o < out_f; ++o) gb[o] += gy(b, o);
    }
  });
}

Var channel_concat(const Var& a, const Var& b) {
  require_rank(a, 4, "channel_concat");
  require_rank(b, 4, "channel_concat");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
    throw DimensionError("channel_concat: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  const int batch = as[0], ca = as[1], cb = bs[1];
  const std::size_t hw = static_cast<std::size_t>(as[2]) * as[3];
  Tensor out(Shape{batch, ca + cb, as[2], as[3]});
  for (int n = 0; n < batch; ++n) {
    float* dst = out.ptr() + static_cast<std::size_t>(n) * (ca + cb) * hw;
    std::memcpy(dst, a.value().ptr() + static_cast<std::size_t>(n) * ca * hw, sizeof(float) * ca * hw);
    std::memcpy(dst + ca * hw, b.value().ptr() + static_cast<std::size_t>(n) * cb * hw, sizeof(float) * cb * hw);
  }
  return make_result(std::move(out), {a, b}, [=](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    const float* g = self.grad->ptr();
    for (int n = 0; n < batch; ++n) {
      const float* src = g + static_cast<std::size_t>(n) * (ca + cb) * hw;
      if (an.requires_grad) {
        float* ga = an.grad_buffer().ptr() + static_cast<std::size_t>(n) * ca * hw;
        for (std::size_t i = 0; i < ca * hw; ++i) ga[i] += src[i];
      }
      if (bn.requires_grad) {
        float* gb = bn.grad_buffer().ptr() + static_cast<std::size_t>(n) * cb * hw;
        for (std::size_t i = 0; i < cb * hw; ++i) gb[i] += src[ca * hw + i];
      }
    }
  });
}

Var avg_downsample2x(const Var& x) {
  require_rank(x, 4, "avg_downsample2x");
  const Shape& s = x.shape();
  if (s[2] % 2 || s[3] % 2) throw DimensionError("avg_downsample2x: odd spatial dims " + shape_str(s));
  const int planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  Tensor out(Shape{s[0], s[1], oh, ow});
  const float* xp = x.value().ptr();
  for (int p = 0; p < planes; ++p)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const float* src = xp + static_cast<std::size_t>(p) * h * w + (2 * y) * w + 2 * xx;
        out[static_cast<std::size_t>(p) * oh * ow + y * ow + xx] = 0.25f * (src[0] + src[1] + src[w] + src[w + 1]);
      }
  return make_result(std::move(out), {x}, [=](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    float* gx = xn.grad_buffer().ptr();
    const float* gy = self.grad->ptr();
    for (int p = 0; p < planes; ++p)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const float g = 0.25f * gy[static_cast<std::size_t>(p) * oh * ow + y * ow + xx];
          float* dst = gx + static_cast<std::size_t>(p) * h * w + (2 * y) * w + 2 * xx;
          dst[0] += g;
          dst[1] += g;
          dst[w] += g;
          dst[w + 1] += g;
        }
  });
}

Var nearest_upsample2x(const Var& x) {
  require_rank(x, 4, "nearest_upsample2x");
  const Shape& s = x.shape();
  const int planes = s[0] * s[1], h = s[2], w = s[3], oh = 2 * h, ow = 2 * w;
  Tensor out(Shape{s[0], s[1], oh, ow});
  const float* xp = x.value().ptr();
  for (int p = 0; p < planes; ++p)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        out[static_cast<std::size_t>(p) * oh * ow + y * ow + xx] = xp[static_cast<std::size_t>(p) * h * w + (y / 2) * w + xx / 2];
  return make_result(std::move(out), {x}, [=](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    float* gx = xn.grad_buffer().ptr();
    const float* gy = self.grad->ptr();
    for (int p = 0; p < planes; ++p)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          gx[static_cast<std::size_t>(p) * h * w + (y / 2) * w + xx / 2] += gy[static_cast<std::size_t>(p) * oh * ow + y * ow + xx];
  });
}

Var mse_mean(const Var& a, const Var& b) {
  require_same_shape(a, b, "mse_mean");
  const std::size_t n = a.value().numel();
  if (n == 0) throw DimensionError("mse_mean: empty tensors");
  const auto en = static_cast<Eigen::Index>(n);
  const double sq = (ConstMapArr(a.value().ptr(), en) - ConstMapArr(b.value().ptr(), en)).cast<double>().square().sum();
  Tensor out = Tensor::scalar(static_cast<float>(sq / static_cast<double>(n)));
  return make_result(std::move(out), {a, b}, [n, en](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    const float coef = 2.0f * self.grad->item() / static_cast<float>(n);
    ConstMapArr av(an.value.ptr(), en);
    ConstMapArr bv(bn.value.ptr(), en);
    if (an.requires_grad) MapArr(an.grad_buffer().ptr(), en) += coef * (av - bv);
    if (bn.requires_grad) MapArr(bn.grad_buffer().ptr(), en) -= coef * (av - bv);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->accumulate_grad(self.grad->data());
  });
}

Var scale(const Var& a, float s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    Node& an = *self.parents[0];
    if (!an.requires_grad) return;
    float* g = an.grad_buffer().ptr();
    const float* gy = self.grad->ptr();
    for (std::size_t i = 0; i < an.value.numel(); ++i) g[i] += s * gy[i];
  });
}

Var add_channel_bias(const Var& x, const Var& v) {
  require_rank(x, 4, "add_channel_bias");
  require_rank(v, 2, "add_channel_bias");
  const Shape& s = x.shape();
  if (v.shape()[0] != s[0] || v.shape()[1] != s[1]) {
    throw DimensionError("add_channel_bias: " + shape_str(v.shape()) + " does not match " + shape_str(s));
  }
  const int planes = s[0] * s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor out(s);
  for (int p = 0; p < planes; ++p) {
    const float bv = v.value()[static_cast<std::size_t>(p)];
    const float* src = x.value().ptr() + p * hw;
    float* dst = out.ptr() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
  }
  return make_result(std::move(out), {x, v}, [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& vn = *self.parents[1];
    if (xn.requires_grad) xn.accumulate_grad(self.grad->data());
    if (vn.requires_grad) {
      float* gv = vn.grad_buffer().ptr();
      const float* gy = self.grad->ptr();
      for (int p = 0; p < planes; ++p) {
        float acc = 0.0f;
        for (std::size_t i = 0; i < hw; ++i) acc += gy[p * hw + i];
        gv[p] += acc;
      }
    }
  });
}

Tensor sinusoidal_time_embed(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("time embedding dim must be positive and even, got " + std::to_string(dim));
  const int half = dim / 2;
  Tensor out(Shape{dim});
  for (int i = 0; i < half; ++i) {
    const double exponent = half == 1 ? 0.0 : static_cast<double>(i) / (half - 1);
    const double freq = std::pow(10000.0, -exponent);
    out[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(t * freq));
    out[static_cast<std::size_t>(half + i)] = static_cast<float>(std::cos(t * freq));
  }
  return out;
}

Tensor sinusoidal_time_embed_batch(std::span<const int> ts, int dim) {
  Tensor out(Shape{static_cast<int>(ts.size()), dim});
  for (std::size_t b = 0; b < ts.size(); ++b) {
    Tensor row = sinusoidal_time_embed(ts[b], dim);
    std::copy(row.storage().begin(), row.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(b * dim));
  }
  return out;
}

}  // namespace diffnas::ad
