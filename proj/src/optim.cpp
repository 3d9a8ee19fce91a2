#include "diffnas/optim.hpp"

#include <cmath>

#include "diffnas/error.hpp"

namespace diffnas::ad {

void Adam::step(std::span<Parameter* const> params) {
  for (Parameter* p : params) {
    if (p->trainable && !p->var.has_grad()) throw ContractError("adam_step: parameter '" + p->name + "' has no gradient");
  }
  ++steps_;
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    Tensor& value = p->var.mutable_value();
    const Tensor& grad = p->var.grad();
    Moments& st = state_[p->name];
    if (st.m.empty()) {
      st.m.assign(value.numel(), 0.0f);
      st.v.assign(value.numel(), 0.0f);
    } else if (st.m.size() != value.numel()) {
      throw ContractError("adam_step: moment buffers of '" + p->name + "' do not match its shape");
    }
    ++st.t;
    const float b1 = options_.beta1, b2 = options_.beta2;
    const float c1 = 1.0f - static_cast<float>(std::pow(static_cast<double>(b1), static_cast<double>(st.t)));
    const float c2 = 1.0f - static_cast<float>(std::pow(static_cast<double>(b2), static_cast<double>(st.t)));
    float* w = value.ptr();
    const float* g = grad.ptr();
    for (std::size_t i = 0; i < value.numel(); ++i) {
      st.m[i] = b1 * st.m[i] + (1.0f - b1) * g[i];
      st.v[i] = b2 * st.v[i] + (1.0f - b2) * g[i] * g[i];
      const float mhat = st.m[i] / c1;
      const float vhat = st.v[i] / c2;
      w[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.epsilon);
    }
  }
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->var.zero_grad();
}

}  // namespace diffnas::ad
