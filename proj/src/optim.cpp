#include "dscm/optim.hpp"

#include <cmath>

namespace dscm {

void adam_step(std::span<Tensor> params, AdamState& state) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) {
      const auto& name = params[k].name();
      throw std::logic_error("adam_step: parameter " +
                             (name.empty() ? "#" + std::to_string(k) : "'" + name + "'") +
                             " has no gradient");
    }
  }
  if (state.first_.empty()) {
    for (const auto& p : params) {
      state.first_.emplace_back(p.size(), 0.0);
      state.second_.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_.size() != params.size()) {
    throw std::logic_error("adam_step: parameter list changed size between steps");
  }

  const auto& o = state.options_;
  ++state.step_;
  const double t = static_cast<double>(state.step_);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_[k];
    auto& v = state.second_[k];
    if (m.size() != params[k].size()) {
      throw std::logic_error("adam_step: parameter '" + params[k].name() + "' changed size");
    }
    auto w = params[k].mutable_data();
    const auto g = params[k].grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      w[i] -= o.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.eps);
    }
    params[k].zero_grad();
  }
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor probe = x.clone();
  Tensor out(x.shape());
  auto pv = probe.mutable_data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double orig = pv[i];
    pv[i] = orig + h;
    const double up = f(probe);
    pv[i] = orig - h;
    const double down = f(probe);
    pv[i] = orig;
    ov[i] = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace dscm
