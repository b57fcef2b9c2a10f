#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dscm/random.hpp"
#include "dscm/tensor.hpp"

namespace dscm {

using Context = std::optional<Tensor>;

enum class Activation { Linear, LeakyRelu };
enum class FinalInit { Glorot, Zero };

/// Dense network mapping a context row to transform parameters.
class ContextNetwork {
 public:
  /// `hidden` empty gives a single linear layer.
  ContextNetwork(std::size_t in, std::vector<std::size_t> hidden, std::size_t out, Activation act,
                 Rng& rng, FinalInit final_init = FinalInit::Glorot, double slope = 0.1);

  Tensor operator()(const Tensor& x) const;

  std::size_t in_dim() const { return sizes_.front(); }
  std::size_t out_dim() const { return sizes_.back(); }
  const std::vector<std::size_t>& sizes() const { return sizes_; }
  Activation activation() const { return act_; }

  /// Weight [in,out] and bias [1,out] of layer l.
  Tensor& weight(std::size_t l) { return weights_.at(l); }
  Tensor& bias(std::size_t l) { return biases_.at(l); }
  std::size_t layers() const { return weights_.size(); }

  void named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const;

 private:
  std::vector<std::size_t> sizes_;
  Activation act_;
  double slope_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

/// Conditional bijection x = f(eps; context) acting row-wise on [N,D] inputs.
class Transform {
 public:
  virtual ~Transform() = default;

  virtual std::string kind() const = 0;
  /// Number of context columns; 0 for unconditional transforms.
  virtual std::size_t context_dim() const { return 0; }

  Tensor forward(const Tensor& eps, const Context& ctx = std::nullopt) const;
  Tensor inverse(const Tensor& x, const Context& ctx = std::nullopt) const;
  /// log|df/deps| summed over columns, shape [N,1].
  Tensor log_abs_det_jacobian(const Tensor& eps, const Context& ctx = std::nullopt) const;

  virtual void named_parameters(std::vector<NamedTensor>&, const std::string&) const {}
  /// Fixed, non-trainable state that must persist with the model.
  virtual void named_buffers(std::vector<NamedTensor>&, const std::string&) const {}

  /// True for parameter-free unconditional transforms.
  bool is_fixed() const;

 protected:
  virtual Tensor do_forward(const Tensor& eps, const Context& ctx) const = 0;
  virtual Tensor do_inverse(const Tensor& x, const Context& ctx) const = 0;
  virtual Tensor do_ladj(const Tensor& eps, const Context& ctx) const = 0;

 private:
  void check_context(const Tensor& v, const Context& ctx) const;
};

using TransformPtr = std::shared_ptr<Transform>;

/// x = exp(log_scale) * eps + shift, per column. Learnable or fixed.
class AffineTransform : public Transform {
 public:
  AffineTransform(std::vector<double> scale, std::vector<double> shift, bool learnable);
  static std::shared_ptr<AffineTransform> identity(std::size_t dim, bool learnable);

  std::string kind() const override { return "affine"; }
  void named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const override;
  void named_buffers(std::vector<NamedTensor>& out, const std::string& prefix) const override;
  bool learnable() const { return learnable_; }
  std::vector<double> scale() const;
  std::vector<double> shift() const;

 protected:
  Tensor do_forward(const Tensor& eps, const Context& ctx) const override;
  Tensor do_inverse(const Tensor& x, const Context& ctx) const override;
  Tensor do_ladj(const Tensor& eps, const Context& ctx) const override;

 private:
  Tensor log_scale_;  // [1,D]
  Tensor shift_;      // [1,D]
  bool learnable_;
};

/// Affine map whose raw log-scale and shift (D each) come from a context
/// network: network output columns are [log_scale(D), shift(D)].
class ConditionalAffineTransform : public Transform {
 public:
  ConditionalAffineTransform(std::shared_ptr<ContextNetwork> net, std::size_t dim);

  std::string kind() const override { return "conditional_affine"; }
  std::size_t context_dim() const override { return net_->in_dim(); }
  void named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const override;
  ContextNetwork& network() { return *net_; }

 protected:
  Tensor do_forward(const Tensor& eps, const Context& ctx) const override;
  Tensor do_inverse(const Tensor& x, const Context& ctx) const override;
  Tensor do_ladj(const Tensor& eps, const Context& ctx) const override;

 private:
  std::shared_ptr<ContextNetwork> net_;
  std::size_t dim_;
};

class ExpTransform : public Transform {
 public:
  std::string kind() const override { return "exp"; }

 protected:
  Tensor do_forward(const Tensor& eps, const Context& ctx) const override;
  Tensor do_inverse(const Tensor& x, const Context& ctx) const override;
  Tensor do_ladj(const Tensor& eps, const Context& ctx) const override;
};

class SigmoidTransform : public Transform {
 public:
  std::string kind() const override { return "sigmoid"; }

 protected:
  Tensor do_forward(const Tensor& eps, const Context& ctx) const override;
  Tensor do_inverse(const Tensor& x, const Context& ctx) const override;
  Tensor do_ladj(const Tensor& eps, const Context& ctx) const override;
};

enum class Bounds { Doubly, Singly };

/// Fixed affine normalisation. Doubly bounded: x = low + (high - low) * eps,
/// meant to follow a sigmoid, so its inverse requires low < x < high.
/// Singly bounded: x = mean + sd * eps, a whitening in log space meant to
/// precede an exp.
class AffineNormalisation : public Transform {
 public:
  AffineNormalisation(Bounds bounds, double loc, double scale);

  std::string kind() const override { return "affine_normalisation"; }
  void named_buffers(std::vector<NamedTensor>& out, const std::string& prefix) const override;
  Bounds bounds() const { return bounds_; }
  double loc() const { return loc_.data()[0]; }
  double scale() const { return scale_.data()[0]; }

 protected:
  Tensor do_forward(const Tensor& eps, const Context& ctx) const override;
  Tensor do_inverse(const Tensor& x, const Context& ctx) const override;
  Tensor do_ladj(const Tensor& eps, const Context& ctx) const override;

 private:
  Bounds bounds_;
  Tensor loc_;    // [1,1]
  Tensor scale_;  // [1,1]
};

/// Fits the normalisation to a data column: doubly uses min and max, singly
/// uses the mean and (population) standard deviation of log(data).
std::shared_ptr<AffineNormalisation> affine_normalisation_fit(const Tensor& data, Bounds bounds);

/// Monotone piecewise-linear spline on [-bound, bound] with K bins and
/// identity tails. Zero raw parameters give the identity.
class LinearSplineTransform : public Transform {
 public:
  explicit LinearSplineTransform(std::size_t bins = 8, double bound = 3.0);

  std::string kind() const override { return "linear_spline"; }
  void named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const override;
  Tensor& raw_widths() { return raw_widths_; }
  Tensor& raw_heights() { return raw_heights_; }
  std::size_t bins() const { return bins_; }
  double bound() const { return bound_; }

 protected:
  Tensor do_forward(const Tensor& eps, const Context& ctx) const override;
  Tensor do_inverse(const Tensor& x, const Context& ctx) const override;
  Tensor do_ladj(const Tensor& eps, const Context& ctx) const override;

 private:
  Tensor knots(const Tensor& raw) const;

  std::size_t bins_;
  double bound_;
  Tensor raw_widths_;   // [1,K]
  Tensor raw_heights_;  // [1,K]
  Tensor cumsum_;       // [K,K+1] constant
};

/// Applies parts in order: x = f_n(...f_1(eps)). Every conditional part
/// receives the same context.
class ComposedTransform : public Transform {
 public:
  explicit ComposedTransform(std::vector<TransformPtr> parts);

  std::string kind() const override { return "composition"; }
  std::size_t context_dim() const override;
  void named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const override;
  void named_buffers(std::vector<NamedTensor>& out, const std::string& prefix) const override;

  const std::vector<TransformPtr>& parts() const { return parts_; }

  /// Inverts only the trailing run of fixed parts, mapping a value to its
  /// unconstrained normalised form.
  Tensor normalise(const Tensor& x) const;
  /// Forward and summed log-det in one pass, returning {x, ladj}.
  std::pair<Tensor, Tensor> forward_with_ladj(const Tensor& eps, const Context& ctx) const;

 protected:
  Tensor do_forward(const Tensor& eps, const Context& ctx) const override;
  Tensor do_inverse(const Tensor& x, const Context& ctx) const override;
  Tensor do_ladj(const Tensor& eps, const Context& ctx) const override;

 private:
  std::vector<TransformPtr> parts_;
};

/// Maps pixel values in [0,255] to logit space and back, with margin 1e-3.
struct ImagePreprocessing {
  static constexpr double kMargin = 1e-3;
  /// Logit of the rescaled pixels.
  static Tensor to_logit(const Tensor& pixels);
  /// Inverse map, clamped to [0,255].
  static Tensor to_pixels(const Tensor& logits);
  /// Per-row sum of log|d logit / d pixel|, shape [N,1].
  static Tensor log_abs_det(const Tensor& pixels);
};

// Piecewise-linear map through knots (xk[j], yk[j]) with identity outside
// [xk[0], xk[K]]; differentiable in v and both knot vectors.
Tensor piecewise_linear(const Tensor& v, const Tensor& xk, const Tensor& yk);
// log slope of the piecewise-linear map at v; 0 in the tails.
Tensor piecewise_linear_log_slope(const Tensor& v, const Tensor& xk, const Tensor& yk);

}  // namespace dscm
