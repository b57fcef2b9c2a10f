#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dscm/tensor.hpp"

namespace dscm {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for one parameter group. Buffers are sized and zeroed on
/// the first update; the parameter list must keep its order afterwards.
class AdamState {
 public:
  explicit AdamState(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }
  std::int64_t step() const { return step_; }

 private:
  AdamOptions options_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;

  friend void adam_step(std::span<Tensor> params, AdamState& state);
};

/// One bias-corrected Adam update. Every parameter must carry a gradient;
/// gradients are cleared afterwards.
void adam_step(std::span<Tensor> params, AdamState& state);

/// Central-difference gradient of a scalar function at `x`.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h);

}  // namespace dscm
