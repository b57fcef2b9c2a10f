#include "dscm/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dscm/ops.hpp"

namespace dscm {
namespace {

constexpr double kMinBinFraction = 1e-3;

std::size_t find_bin(std::span<const double> knots, double v) {
  const std::size_t k = knots.size() - 1;
  auto it = std::upper_bound(knots.begin(), knots.end(), v);
  std::size_t j = static_cast<std::size_t>(it - knots.begin());
  j = j == 0 ? 0 : j - 1;
  return std::min(j, k - 1);
}

bool in_range(std::span<const double> knots, double v) { return v >= knots.front() && v <= knots.back(); }

void require_row_vector(const Tensor& t, const char* what) {
  if (t.rank() != 2 || t.rows() != 1 || t.cols() < 2) {
    throw ShapeError(std::string(what) + ": knots must be [1,K+1], got " + shape_str(t.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------- networks

ContextNetwork::ContextNetwork(std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
                               Activation act, Rng& rng, FinalInit final_init, double slope)
    : act_(act), slope_(slope) {
  if (in == 0 || out == 0) throw std::invalid_argument("ContextNetwork: zero-width input or output");
  sizes_.push_back(in);
  for (auto h : hidden) {
    if (h == 0) throw std::invalid_argument("ContextNetwork: zero-width hidden layer");
    sizes_.push_back(h);
  }
  sizes_.push_back(out);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const std::size_t a = sizes_[l], b = sizes_[l + 1];
    std::vector<double> w(a * b, 0.0);
    const bool last = l + 2 == sizes_.size();
    if (!(last && final_init == FinalInit::Zero)) {
      const double limit = std::sqrt(6.0 / static_cast<double>(a + b));
      for (auto& x : w) x = limit * (2.0 * rng.uniform() - 1.0);
    }
    weights_.push_back(Tensor::parameter(Shape{a, b}, std::move(w), ""));
    biases_.push_back(Tensor::parameter(Shape{1, b}, std::vector<double>(b, 0.0), ""));
  }
}

Tensor ContextNetwork::operator()(const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != in_dim()) {
    throw ShapeError("ContextNetwork: expected input with " + std::to_string(in_dim()) +
                     " columns, got " + shape_str(x.shape()));
  }
  Tensor h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = linear(h, weights_[l], biases_[l]);
    if (l + 1 < weights_.size() && act_ == Activation::LeakyRelu) h = leaky_relu(h, slope_);
  }
  return h;
}

void ContextNetwork::named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back({prefix + "layer" + std::to_string(l) + ".weight", weights_[l]});
    out.push_back({prefix + "layer" + std::to_string(l) + ".bias", biases_[l]});
  }
}

// ---------------------------------------------------------------- base

Tensor Transform::forward(const Tensor& eps, const Context& ctx) const {
  check_context(eps, ctx);
  return do_forward(eps, ctx);
}

Tensor Transform::inverse(const Tensor& x, const Context& ctx) const {
  check_context(x, ctx);
  return do_inverse(x, ctx);
}

Tensor Transform::log_abs_det_jacobian(const Tensor& eps, const Context& ctx) const {
  check_context(eps, ctx);
  return do_ladj(eps, ctx);
}

bool Transform::is_fixed() const {
  std::vector<NamedTensor> p;
  named_parameters(p, "");
  return p.empty() && context_dim() == 0;
}

void Transform::check_context(const Tensor& v, const Context& ctx) const {
  if (v.rank() != 2) throw ShapeError(kind() + ": expected a rank-2 input, got " + shape_str(v.shape()));
  const std::size_t need = context_dim();
  if (need == 0) {
    if (ctx) throw std::invalid_argument(kind() + ": unconditional transform given a context");
    return;
  }
  if (!ctx) throw std::invalid_argument(kind() + ": conditional transform requires a context");
  if (ctx->rank() != 2 || ctx->cols() != need || ctx->rows() != v.rows()) {
    throw ShapeError(kind() + ": context shape " + shape_str(ctx->shape()) + " does not match [" +
                     std::to_string(v.rows()) + "," + std::to_string(need) + "]");
  }
}

// ---------------------------------------------------------------- affine

AffineTransform::AffineTransform(std::vector<double> scale, std::vector<double> shift, bool learnable)
    : learnable_(learnable) {
  if (scale.empty() || scale.size() != shift.size()) {
    throw std::invalid_argument("AffineTransform: scale and shift must be nonempty and equal length");
  }
  std::vector<double> ls(scale.size());
  for (std::size_t i = 0; i < scale.size(); ++i) {
    if (!(scale[i] > 0.0)) throw std::invalid_argument("AffineTransform: scale must be positive");
    ls[i] = std::log(scale[i]);
  }
  const std::size_t d = scale.size();
  log_scale_ = Tensor(Shape{1, d}, std::move(ls), learnable);
  shift_ = Tensor(Shape{1, d}, std::move(shift), learnable);
}

std::shared_ptr<AffineTransform> AffineTransform::identity(std::size_t dim, bool learnable) {
  return std::make_shared<AffineTransform>(std::vector<double>(dim, 1.0), std::vector<double>(dim, 0.0),
                                           learnable);
}

std::vector<double> AffineTransform::scale() const {
  std::vector<double> s;
  for (double v : log_scale_.data()) s.push_back(std::exp(v));
  return s;
}

std::vector<double> AffineTransform::shift() const {
  return {shift_.data().begin(), shift_.data().end()};
}

void AffineTransform::named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const {
  if (!learnable_) return;
  out.push_back({prefix + "log_scale", log_scale_});
  out.push_back({prefix + "shift", shift_});
}

void AffineTransform::named_buffers(std::vector<NamedTensor>& out, const std::string& prefix) const {
  if (learnable_) return;
  out.push_back({prefix + "log_scale", log_scale_});
  out.push_back({prefix + "shift", shift_});
}

Tensor AffineTransform::do_forward(const Tensor& eps, const Context&) const {
  return eps * exp(log_scale_) + shift_;
}

Tensor AffineTransform::do_inverse(const Tensor& x, const Context&) const {
  return (x - shift_) * exp(-log_scale_);
}

Tensor AffineTransform::do_ladj(const Tensor& eps, const Context&) const {
  return sum(log_scale_, 1) + Tensor(Shape{eps.rows(), 1}, 0.0);
}

// ---------------------------------------------------------------- conditional affine

ConditionalAffineTransform::ConditionalAffineTransform(std::shared_ptr<ContextNetwork> net,
                                                       std::size_t dim)
    : net_(std::move(net)), dim_(dim) {
  if (!net_) throw std::invalid_argument("ConditionalAffineTransform: null context network");
  if (net_->out_dim() != 2 * dim_) {
    throw std::invalid_argument("ConditionalAffineTransform: context network must output " +
                                std::to_string(2 * dim_) + " values, has " +
                                std::to_string(net_->out_dim()));
  }
}

void ConditionalAffineTransform::named_parameters(std::vector<NamedTensor>& out,
                                                  const std::string& prefix) const {
  net_->named_parameters(out, prefix + "net.");
}

Tensor ConditionalAffineTransform::do_forward(const Tensor& eps, const Context& ctx) const {
  const Tensor p = (*net_)(*ctx);
  return eps * exp(slice(p, 1, 0, dim_)) + slice(p, 1, dim_, 2 * dim_);
}

Tensor ConditionalAffineTransform::do_inverse(const Tensor& x, const Context& ctx) const {
  const Tensor p = (*net_)(*ctx);
  return (x - slice(p, 1, dim_, 2 * dim_)) * exp(-slice(p, 1, 0, dim_));
}

Tensor ConditionalAffineTransform::do_ladj(const Tensor&, const Context& ctx) const {
  return sum(slice((*net_)(*ctx), 1, 0, dim_), 1);
}

// ---------------------------------------------------------------- exp / sigmoid

Tensor ExpTransform::do_forward(const Tensor& eps, const Context&) const { return exp(eps); }

Tensor ExpTransform::do_inverse(const Tensor& x, const Context&) const {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("exp: inverse needs positive input, got " + std::to_string(v));
  }
  return log(x);
}

Tensor ExpTransform::do_ladj(const Tensor& eps, const Context&) const { return sum(eps, 1); }

Tensor SigmoidTransform::do_forward(const Tensor& eps, const Context&) const { return sigmoid(eps); }

Tensor SigmoidTransform::do_inverse(const Tensor& x, const Context&) const {
  for (double v : x.data()) {
    if (!(v > 0.0 && v < 1.0)) {
      throw DomainError("sigmoid: inverse needs input in (0,1), got " + std::to_string(v));
    }
  }
  return log(x) - log(1.0 - x);
}

Tensor SigmoidTransform::do_ladj(const Tensor& eps, const Context&) const {
  return sum(log_sigmoid(eps) + log_sigmoid(-eps), 1);
}

// ---------------------------------------------------------------- affine normalisation

AffineNormalisation::AffineNormalisation(Bounds bounds, double loc, double scale)
    : bounds_(bounds),
      loc_(Tensor(Shape{1, 1}, std::vector<double>{loc})),
      scale_(Tensor(Shape{1, 1}, std::vector<double>{scale})) {
  if (!(scale > 0.0) || !std::isfinite(scale) || !std::isfinite(loc)) {
    throw std::invalid_argument("AffineNormalisation: needs finite loc and positive scale");
  }
}

void AffineNormalisation::named_buffers(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + "loc", loc_});
  out.push_back({prefix + "scale", scale_});
}

Tensor AffineNormalisation::do_forward(const Tensor& eps, const Context&) const {
  return eps * scale_ + loc_;
}

Tensor AffineNormalisation::do_inverse(const Tensor& x, const Context&) const {
  if (bounds_ == Bounds::Doubly) {
    const double lo = loc(), hi = loc() + scale();
    for (double v : x.data()) {
      if (v <= lo) {
        throw DomainError("affine_normalisation: " + std::to_string(v) + " at or below lower bound " +
                          std::to_string(lo) + " maps to -inf in unconstrained space");
      }
      if (v >= hi) {
        throw DomainError("affine_normalisation: " + std::to_string(v) + " at or above upper bound " +
                          std::to_string(hi) + " maps to +inf in unconstrained space");
      }
    }
  }
  return (x - loc_) / scale_;
}

Tensor AffineNormalisation::do_ladj(const Tensor& eps, const Context&) const {
  return Tensor(Shape{eps.rows(), 1}, static_cast<double>(eps.cols()) * std::log(scale()));
}

std::shared_ptr<AffineNormalisation> affine_normalisation_fit(const Tensor& data, Bounds bounds) {
  const auto v = data.data();
  if (v.empty()) throw std::invalid_argument("affine_normalisation_fit: empty data");
  if (bounds == Bounds::Doubly) {
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    if (!(*mx > *mn)) throw std::invalid_argument("affine_normalisation_fit: degenerate data (max = min)");
    return std::make_shared<AffineNormalisation>(bounds, *mn, *mx - *mn);
  }
  double mean = 0.0;
  for (double x : v) {
    if (!(x > 0.0)) throw std::invalid_argument("affine_normalisation_fit: singly bounded data must be positive");
    mean += std::log(x);
  }
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (std::log(x) - mean) * (std::log(x) - mean);
  var /= static_cast<double>(v.size());
  if (!(var > 0.0)) throw std::invalid_argument("affine_normalisation_fit: degenerate data (zero variance)");
  return std::make_shared<AffineNormalisation>(bounds, mean, std::sqrt(var));
}

// ---------------------------------------------------------------- piecewise linear ops

Tensor piecewise_linear(const Tensor& v, const Tensor& xk, const Tensor& yk) {
  require_row_vector(xk, "piecewise_linear");
  require_row_vector(yk, "piecewise_linear");
  if (xk.size() != yk.size()) throw ShapeError("piecewise_linear: knot vectors differ in length");
  const auto xs = xk.data();
  const auto ys = yk.data();
  const auto vv = v.data();
  std::vector<double> out(vv.size());
  for (std::size_t i = 0; i < vv.size(); ++i) {
    if (!in_range(xs, vv[i])) {
      out[i] = vv[i];
      continue;
    }
    const std::size_t j = find_bin(xs, vv[i]);
    const double dx = xs[j + 1] - xs[j];
    out[i] = ys[j] + (vv[i] - xs[j]) * (ys[j + 1] - ys[j]) / dx;
  }
  Tensor vc = v, xc = xk, yc = yk;
  return Tensor::make_result(
      v.shape(), std::move(out), {v, xk, yk},
      [vc, xc, yc](std::span<const double> g, std::span<std::span<double>> gi) {
        const auto xs = xc.data();
        const auto ys = yc.data();
        const auto vv = vc.data();
        for (std::size_t i = 0; i < vv.size(); ++i) {
          if (!in_range(xs, vv[i])) {
            if (!gi[0].empty()) gi[0][i] += g[i];
            continue;
          }
          const std::size_t j = find_bin(xs, vv[i]);
          const double dx = xs[j + 1] - xs[j];
          const double s = (ys[j + 1] - ys[j]) / dx;
          const double r = (vv[i] - xs[j]) / dx;
          if (!gi[0].empty()) gi[0][i] += g[i] * s;
          if (!gi[1].empty()) {
            gi[1][j] += -g[i] * s * (1.0 - r);
            gi[1][j + 1] += -g[i] * s * r;
          }
          if (!gi[2].empty()) {
            gi[2][j] += g[i] * (1.0 - r);
            gi[2][j + 1] += g[i] * r;
          }
        }
      });
}

Tensor piecewise_linear_log_slope(const Tensor& v, const Tensor& xk, const Tensor& yk) {
  require_row_vector(xk, "piecewise_linear_log_slope");
  require_row_vector(yk, "piecewise_linear_log_slope");
  const auto xs = xk.data();
  const auto ys = yk.data();
  const auto vv = v.data();
  std::vector<double> out(vv.size(), 0.0);
  for (std::size_t i = 0; i < vv.size(); ++i) {
    if (!in_range(xs, vv[i])) continue;
    const std::size_t j = find_bin(xs, vv[i]);
    out[i] = std::log(ys[j + 1] - ys[j]) - std::log(xs[j + 1] - xs[j]);
  }
  Tensor vc = v, xc = xk, yc = yk;
  return Tensor::make_result(
      v.shape(), std::move(out), {v, xk, yk},
      [vc, xc, yc](std::span<const double> g, std::span<std::span<double>> gi) {
        const auto xs = xc.data();
        const auto ys = yc.data();
        const auto vv = vc.data();
        for (std::size_t i = 0; i < vv.size(); ++i) {
          if (!in_range(xs, vv[i])) continue;
          const std::size_t j = find_bin(xs, vv[i]);
          const double dx = xs[j + 1] - xs[j];
          const double dy = ys[j + 1] - ys[j];
          if (!gi[1].empty()) {
            gi[1][j] += g[i] / dx;
            gi[1][j + 1] -= g[i] / dx;
          }
          if (!gi[2].empty()) {
            gi[2][j] -= g[i] / dy;
            gi[2][j + 1] += g[i] / dy;
          }
        }
      });
}

// ---------------------------------------------------------------- linear spline

LinearSplineTransform::LinearSplineTransform(std::size_t bins, double bound) : bins_(bins), bound_(bound) {
  if (bins < 1) throw std::invalid_argument("LinearSplineTransform: needs at least one bin");
  if (!(bound > 0.0)) throw std::invalid_argument("LinearSplineTransform: bound must be positive");
  raw_widths_ = Tensor(Shape{1, bins}, std::vector<double>(bins, 0.0), true);
  raw_heights_ = Tensor(Shape{1, bins}, std::vector<double>(bins, 0.0), true);
  std::vector<double> c(bins * (bins + 1), 0.0);
  for (std::size_t i = 0; i < bins; ++i) {
    for (std::size_t j = i + 1; j <= bins; ++j) c[i * (bins + 1) + j] = 1.0;
  }
  cumsum_ = Tensor(Shape{bins, bins + 1}, std::move(c));
}

void LinearSplineTransform::named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + "raw_widths", raw_widths_});
  out.push_back({prefix + "raw_heights", raw_heights_});
}

Tensor LinearSplineTransform::knots(const Tensor& raw) const {
  const double k = static_cast<double>(bins_);
  const Tensor frac = softmax(raw) * (1.0 - k * kMinBinFraction) + kMinBinFraction;
  return matmul(frac, cumsum_) * (2.0 * bound_) - bound_;
}

Tensor LinearSplineTransform::do_forward(const Tensor& eps, const Context&) const {
  return piecewise_linear(eps, knots(raw_widths_), knots(raw_heights_));
}

Tensor LinearSplineTransform::do_inverse(const Tensor& x, const Context&) const {
  return piecewise_linear(x, knots(raw_heights_), knots(raw_widths_));
}

Tensor LinearSplineTransform::do_ladj(const Tensor& eps, const Context&) const {
  return sum(piecewise_linear_log_slope(eps, knots(raw_widths_), knots(raw_heights_)), 1);
}

// ---------------------------------------------------------------- composition

ComposedTransform::ComposedTransform(std::vector<TransformPtr> parts) : parts_(std::move(parts)) {
  if (parts_.empty()) throw std::invalid_argument("ComposedTransform: needs at least one part");
  std::size_t dim = 0;
  for (const auto& p : parts_) {
    if (!p) throw std::invalid_argument("ComposedTransform: null part");
    const std::size_t d = p->context_dim();
    if (d != 0 && dim != 0 && d != dim) {
      throw std::invalid_argument("ComposedTransform: parts disagree on context width");
    }
    if (d != 0) dim = d;
  }
}

std::size_t ComposedTransform::context_dim() const {
  for (const auto& p : parts_) {
    if (p->context_dim() != 0) return p->context_dim();
  }
  return 0;
}

void ComposedTransform::named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    parts_[i]->named_parameters(out, prefix + std::to_string(i) + "." + parts_[i]->kind() + ".");
  }
}

void ComposedTransform::named_buffers(std::vector<NamedTensor>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    parts_[i]->named_buffers(out, prefix + std::to_string(i) + "." + parts_[i]->kind() + ".");
  }
}

namespace {
Context part_context(const Transform& t, const Context& ctx) {
  return t.context_dim() == 0 ? std::nullopt : ctx;
}
}  // namespace

Tensor ComposedTransform::do_forward(const Tensor& eps, const Context& ctx) const {
  Tensor h = eps;
  for (const auto& p : parts_) h = p->forward(h, part_context(*p, ctx));
  return h;
}

Tensor ComposedTransform::do_inverse(const Tensor& x, const Context& ctx) const {
  Tensor h = x;
  for (auto it = parts_.rbegin(); it != parts_.rend(); ++it) h = (*it)->inverse(h, part_context(**it, ctx));
  return h;
}

std::pair<Tensor, Tensor> ComposedTransform::forward_with_ladj(const Tensor& eps, const Context& ctx) const {
  Tensor h = eps;
  Tensor total;
  for (const auto& p : parts_) {
    const Context c = part_context(*p, ctx);
    Tensor l = p->log_abs_det_jacobian(h, c);
    total = total.defined() ? total + l : l;
    h = p->forward(h, c);
  }
  return {h, total};
}

Tensor ComposedTransform::do_ladj(const Tensor& eps, const Context& ctx) const {
  return forward_with_ladj(eps, ctx).second;
}

Tensor ComposedTransform::normalise(const Tensor& x) const {
  Tensor h = x;
  for (auto it = parts_.rbegin(); it != parts_.rend() && (*it)->is_fixed(); ++it) h = (*it)->inverse(h);
  return h.detach();
}

// ---------------------------------------------------------------- preprocessing

Tensor ImagePreprocessing::to_logit(const Tensor& pixels) {
  const auto v = pixels.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double p = kMargin + (1.0 - 2.0 * kMargin) * v[i] / 255.0;
    out[i] = std::log(p) - std::log1p(-p);
  }
  return Tensor(pixels.shape(), std::move(out));
}

Tensor ImagePreprocessing::to_pixels(const Tensor& logits) {
  const auto v = logits.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-v[i]));
    out[i] = std::clamp((p - kMargin) / (1.0 - 2.0 * kMargin) * 255.0, 0.0, 255.0);
  }
  return Tensor(logits.shape(), std::move(out));
}

Tensor ImagePreprocessing::log_abs_det(const Tensor& pixels) {
  if (pixels.rank() != 2) throw ShapeError("ImagePreprocessing: expected [N,D] pixels");
  const std::size_t n = pixels.rows(), d = pixels.cols();
  const double c = std::log((1.0 - 2.0 * kMargin) / 255.0);
  const auto v = pixels.data();
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double p = kMargin + (1.0 - 2.0 * kMargin) * v[r * d + k] / 255.0;
      s += c - std::log(p) - std::log1p(-p);
    }
    out[r] = s;
  }
  return Tensor(Shape{n, 1}, std::move(out));
}

}  // namespace dscm
