#include "dscm/mechanisms.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dscm/ops.hpp"

namespace dscm {
namespace {

Tensor normal_noise(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal();
  return Tensor(Shape{rows, cols}, std::move(v));
}

std::size_t category_of(double v, std::size_t k) {
  if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(k)) {
    throw DomainError("category value " + std::to_string(v) + " out of range for K=" + std::to_string(k));
  }
  return static_cast<std::size_t>(v);
}

double logaddexp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::string to_string(MechanismKind kind) {
  switch (kind) {
    case MechanismKind::Invertible: return "invertible";
    case MechanismKind::Amortised: return "amortised";
    case MechanismKind::AmortisedImplicit: return "amortised_implicit";
    case MechanismKind::Gumbel: return "gumbel";
    case MechanismKind::Constant: return "constant";
    case MechanismKind::Shifted: return "shifted";
  }
  return "unknown";
}

const Tensor& NodePosterior::at(std::size_t s) const {
  if (noise.empty()) throw std::logic_error("NodePosterior: no abduced noise for a skipped node");
  return kind == Kind::Exact ? noise.front() : noise.at(s);
}

void Mechanism::check_inputs(const Tensor& v, std::size_t cols, const Context& ctx, const char* what) const {
  if (v.rank() != 2 || v.cols() != cols) {
    throw ShapeError(std::string(what) + ": expected [N," + std::to_string(cols) + "], got " +
                     shape_str(v.shape()));
  }
  if (context_dim() == 0) {
    if (ctx) throw std::invalid_argument(std::string(what) + ": root mechanism given parent values");
    return;
  }
  if (!ctx) throw std::invalid_argument(std::string(what) + ": parent values required");
  if (ctx->rank() != 2 || ctx->cols() != context_dim() || ctx->rows() != v.rows()) {
    throw ShapeError(std::string(what) + ": parent context " + shape_str(ctx->shape()) + " does not match [" +
                     std::to_string(v.rows()) + "," + std::to_string(context_dim()) + "]");
  }
}

// ---------------------------------------------------------------- invertible

InvertibleMechanism::InvertibleMechanism(std::shared_ptr<ComposedTransform> flow, Distribution noise,
                                         std::size_t dim)
    : flow_(std::move(flow)), noise_(std::move(noise)), dim_(dim) {
  if (!flow_) throw std::invalid_argument("InvertibleMechanism: null flow");
  validate(noise_);
}

Tensor InvertibleMechanism::sample_noise(Rng& rng, std::size_t n) const {
  if (dim_ == 1) return dscm::sample(noise_, rng, n);
  std::vector<double> v;
  v.reserve(n * dim_);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor row = dscm::sample(noise_, rng, dim_);
    v.insert(v.end(), row.data().begin(), row.data().end());
  }
  return Tensor(Shape{n, dim_}, std::move(v));
}

Tensor InvertibleMechanism::push(const Tensor& noise, const Context& ctx) const {
  check_inputs(noise, dim_, ctx, "invertible mechanism");
  return flow_->forward(noise, ctx);
}

Tensor InvertibleMechanism::log_prob(const Tensor& x, const Context& ctx) const {
  check_inputs(x, dim_, ctx, "invertible mechanism");
  const Tensor eps = flow_->inverse(x, ctx);
  return sum(dscm::log_prob(noise_, eps), 1) - flow_->log_abs_det_jacobian(eps, ctx);
}

Tensor InvertibleMechanism::objective(const Tensor& x, const Context& ctx, std::size_t, Rng&) const {
  return log_prob(x, ctx);
}

NodePosterior InvertibleMechanism::abduct(const Tensor& x, const Context& ctx, Rng&, std::size_t) const {
  check_inputs(x, dim_, ctx, "invertible mechanism");
  return {NodePosterior::Kind::Exact, {flow_->inverse(x, ctx).detach()}};
}

void InvertibleMechanism::named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const {
  flow_->named_parameters(out, prefix + "flow.");
}

void InvertibleMechanism::named_buffers(std::vector<NamedTensor>& out, const std::string& prefix) const {
  flow_->named_buffers(out, prefix + "flow.");
}

// ---------------------------------------------------------------- amortised

AmortisedMechanism::AmortisedMechanism(AmortisedOptions options, std::size_t context_dim, Rng& rng)
    : options_(std::move(options)), context_dim_(context_dim) {
  if (options_.dim == 0 || options_.latent == 0) {
    throw std::invalid_argument("AmortisedMechanism: dimension and latent size must be positive");
  }
  if (!std::isfinite(options_.log_variance)) {
    throw std::invalid_argument("AmortisedMechanism: log-variance must be finite");
  }
  encoder_ = std::make_shared<ContextNetwork>(options_.dim + context_dim_, options_.encoder_hidden,
                                              2 * options_.latent, Activation::LeakyRelu, rng,
                                              FinalInit::Glorot);
  decoder_ = std::make_shared<ContextNetwork>(options_.latent + context_dim_, options_.decoder_hidden,
                                              options_.dim, Activation::LeakyRelu, rng, FinalInit::Glorot);
  // A small decoder output layer keeps early reconstructions near the bias.
  auto w = decoder_->weight(decoder_->layers() - 1).mutable_data();
  for (auto& v : w) v *= 0.1;
}

double AmortisedMechanism::sigma() const { return std::exp(0.5 * options_.log_variance); }

Tensor AmortisedMechanism::with_context(const Tensor& v, const Context& ctx) const {
  return ctx ? concat({v, *ctx}, 1) : v;
}

Tensor AmortisedMechanism::decode(const Tensor& z, const Context& ctx) const {
  return (*decoder_)(with_context(z, ctx));
}

std::pair<Tensor, Tensor> AmortisedMechanism::encode(const Tensor& x, const Context& ctx) const {
  check_inputs(x, options_.dim, ctx, "amortised mechanism");
  const Tensor h = (*encoder_)(with_context(x * (1.0 / 255.0), ctx));
  const std::size_t l = options_.latent;
  return {slice(h, 1, 0, l), slice(h, 1, l, 2 * l)};
}

Tensor AmortisedMechanism::sample_noise(Rng& rng, std::size_t n) const {
  return normal_noise(rng, n, options_.latent + options_.dim);
}

Tensor AmortisedMechanism::push(const Tensor& noise, const Context& ctx) const {
  check_inputs(noise, options_.latent + options_.dim, ctx, "amortised mechanism");
  const std::size_t l = options_.latent;
  const Tensor z = slice(noise, 1, 0, l).detach();
  const Tensor u = slice(noise, 1, l, l + options_.dim).detach();
  const Tensor mu = decode(z, ctx).detach();
  return ImagePreprocessing::to_pixels(mu + u * sigma());
}

Tensor AmortisedMechanism::objective(const Tensor& x, const Context& ctx, std::size_t particles,
                                     Rng& rng) const {
  if (particles == 0) throw std::invalid_argument("amortised mechanism: particles must be at least 1");
  const auto [mean, logvar] = encode(x, ctx);
  const std::size_t n = x.rows();
  const std::size_t l = options_.latent;
  const double s = sigma();

  const Tensor y = ImagePreprocessing::to_logit(x);
  const Tensor mean_r = repeat_rows(mean, particles);
  const Tensor logvar_r = repeat_rows(logvar, particles);
  const Tensor z = mean_r + exp(logvar_r * 0.5) * normal_noise(rng, n * particles, l);
  const Context ctx_r = ctx ? Context(repeat_rows(*ctx, particles)) : std::nullopt;
  const Tensor mu = decode(z, ctx_r);

  const double per_pixel = -std::log(s) - kHalfLog2Pi;
  const Tensor recon_all = sum(square(repeat_rows(y, particles) - mu), 1) * (-0.5 / (s * s));
  Tensor recon = slice(recon_all, 0, 0, n);
  for (std::size_t p = 1; p < particles; ++p) recon = recon + slice(recon_all, 0, p * n, (p + 1) * n);
  recon = recon * (1.0 / static_cast<double>(particles)) +
          (ImagePreprocessing::log_abs_det(x) + per_pixel * static_cast<double>(options_.dim));

  const Tensor kl = sum(exp(logvar) + square(mean) - 1.0 - logvar, 1) * 0.5;
  return recon - kl;
}

NodePosterior AmortisedMechanism::abduct(const Tensor& x, const Context& ctx, Rng& rng,
                                         std::size_t samples) const {
  if (samples == 0) throw std::invalid_argument("amortised mechanism: samples must be at least 1");
  for (double v : x.data()) {
    if (!(v >= 0.0 && v <= 255.0)) throw DomainError("amortised mechanism: pixel outside [0,255]");
  }
  const auto [mean, logvar] = encode(x, ctx);
  const Tensor m = mean.detach();
  const Tensor sd = exp(logvar * 0.5).detach();
  const Tensor y = ImagePreprocessing::to_logit(x);
  NodePosterior post{NodePosterior::Kind::Amortised, {}};
  for (std::size_t s = 0; s < samples; ++s) {
    const Tensor z = m + sd * normal_noise(rng, x.rows(), options_.latent);
    const Tensor u = (y - decode(z, ctx).detach()) * (1.0 / sigma());
    post.noise.push_back(concat({z, u}, 1));
  }
  return post;
}

Tensor AmortisedMechanism::reconstruct(const Tensor& x, const Context& ctx, Rng& rng,
                                       std::size_t samples) const {
  if (samples == 0) throw std::invalid_argument("amortised mechanism: samples must be at least 1");
  const auto [mean, logvar] = encode(x, ctx);
  const Tensor m = mean.detach();
  const Tensor sd = exp(logvar * 0.5).detach();
  std::vector<double> acc(x.size(), 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    const Tensor z = m + sd * normal_noise(rng, x.rows(), options_.latent);
    const Tensor px = ImagePreprocessing::to_pixels(decode(z, ctx).detach());
    const auto v = px.data();
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
  }
  for (auto& v : acc) v /= static_cast<double>(samples);
  return Tensor(x.shape(), std::move(acc));
}

Tensor AmortisedMechanism::normalise(const Tensor&) const {
  throw std::logic_error("amortised node values cannot be used as parent context");
}

void AmortisedMechanism::set_output_bias(std::span<const double> bias) {
  auto b = decoder_->bias(decoder_->layers() - 1).mutable_data();
  if (bias.size() != b.size()) throw ShapeError("set_output_bias: size mismatch");
  std::copy(bias.begin(), bias.end(), b.begin());
}

void AmortisedMechanism::named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const {
  encoder_->named_parameters(out, prefix + "encoder.");
  decoder_->named_parameters(out, prefix + "decoder.");
}

AmortisedImplicitMechanism::AmortisedImplicitMechanism() {
  throw std::logic_error("amortised implicit mechanism is not implemented");
}

// ---------------------------------------------------------------- gumbel

GumbelMechanism::GumbelMechanism(std::size_t categories) : k_(categories) {
  if (k_ == 0) throw std::invalid_argument("GumbelMechanism: needs at least one category");
  root_logits_ = Tensor(Shape{1, k_}, std::vector<double>(k_, 0.0), true);
}

GumbelMechanism::GumbelMechanism(std::vector<double> logits) : k_(logits.size()), learnable_(false) {
  validate(CategoricalDist{logits});
  root_logits_ = Tensor(Shape{1, k_}, std::move(logits));
}

GumbelMechanism::GumbelMechanism(std::shared_ptr<ContextNetwork> net) : net_(std::move(net)) {
  if (!net_) throw std::invalid_argument("GumbelMechanism: null logit network");
  k_ = net_->out_dim();
}

Tensor GumbelMechanism::logits(const Context& ctx, std::size_t n) const {
  if (net_) return (*net_)(*ctx);
  return root_logits_ + Tensor(Shape{n, k_}, 0.0);
}

Tensor GumbelMechanism::sample_noise(Rng& rng, std::size_t n) const {
  std::vector<double> v(n * k_);
  for (auto& x : v) x = gumbel_from_uniform(rng.uniform_open());
  return Tensor(Shape{n, k_}, std::move(v));
}

Tensor GumbelMechanism::push(const Tensor& noise, const Context& ctx) const {
  check_inputs(noise, k_, ctx, "gumbel mechanism");
  const Tensor lam = logits(ctx, noise.rows()).detach();
  const std::size_t n = noise.rows();
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    out[r] = static_cast<double>(gumbel_counterfactual(noise.data().subspan(r * k_, k_),
                                                       lam.data().subspan(r * k_, k_)));
  }
  return Tensor(Shape{n, 1}, std::move(out));
}

Tensor GumbelMechanism::objective(const Tensor& x, const Context& ctx, std::size_t, Rng&) const {
  check_inputs(x, 1, ctx, "gumbel mechanism");
  std::vector<std::size_t> idx(x.rows());
  for (std::size_t r = 0; r < idx.size(); ++r) idx[r] = category_of(x.data()[r], k_);
  return pick(log_softmax(logits(ctx, x.rows())), idx);
}

NodePosterior GumbelMechanism::abduct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const {
  check_inputs(x, 1, ctx, "gumbel mechanism");
  if (samples == 0) throw std::invalid_argument("gumbel mechanism: samples must be at least 1");
  const Tensor lam = logits(ctx, x.rows()).detach();
  NodePosterior post{NodePosterior::Kind::DiscreteExact, {}};
  for (std::size_t s = 0; s < samples; ++s) {
    std::vector<double> v;
    v.reserve(x.rows() * k_);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const auto e = gumbel_posterior_sample(lam.data().subspan(r * k_, k_), category_of(x.data()[r], k_), rng);
      v.insert(v.end(), e.begin(), e.end());
    }
    post.noise.emplace_back(Shape{x.rows(), k_}, std::move(v));
  }
  return post;
}

void GumbelMechanism::named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const {
  if (net_) {
    net_->named_parameters(out, prefix + "net.");
  } else if (learnable_) {
    out.push_back({prefix + "logits", root_logits_});
  }
}

std::vector<double> gumbel_posterior_sample(std::span<const double> logits, std::size_t k, Rng& rng) {
  const std::size_t n = logits.size();
  if (k >= n) throw std::invalid_argument("gumbel_posterior_sample: observed category out of range");
  double lse = -std::numeric_limits<double>::infinity();
  for (double l : logits) {
    if (!std::isfinite(l)) throw std::invalid_argument("gumbel_posterior_sample: logits must be finite");
    lse = logaddexp(lse, l);
  }
  std::vector<double> eps(n);
  eps[k] = gumbel_from_uniform(rng.uniform_open()) + lse - logits[k];
  const double top = eps[k] + logits[k];
  for (std::size_t l = 0; l < n; ++l) {
    if (l == k) continue;
    const double g = gumbel_from_uniform(rng.uniform_open());
    double e = -logaddexp(-g - logits[l], -top) - logits[l];
    // Rounding can tie with the observed maximum; step strictly below it.
    while (e + logits[l] >= top) e = std::nextafter(e, -std::numeric_limits<double>::infinity());
    eps[l] = e;
  }
  return eps;
}

std::size_t gumbel_counterfactual(std::span<const double> eps, std::span<const double> logits) {
  if (eps.size() != logits.size() || eps.empty()) {
    throw ShapeError("gumbel_counterfactual: noise and logits must have equal nonzero length");
  }
  std::size_t best = 0;
  double best_val = eps[0] + logits[0];
  for (std::size_t l = 1; l < eps.size(); ++l) {
    const double v = eps[l] + logits[l];
    if (v > best_val) {
      best_val = v;
      best = l;
    }
  }
  return best;
}

// ---------------------------------------------------------------- constant

ConstantMechanism::ConstantMechanism(Tensor value) : value_(value.detach()) {
  if (value_.rank() != 2 || value_.rows() == 0 || value_.cols() == 0) {
    throw ShapeError("ConstantMechanism: value must be a nonempty [R,D] tensor, got " + shape_str(value_.shape()));
  }
}

Tensor ConstantMechanism::broadcast_rows(std::size_t n) const {
  if (value_.rows() == n) return value_.clone();
  if (value_.rows() != 1) {
    throw ShapeError("constant intervention has " + std::to_string(value_.rows()) + " rows, batch has " +
                     std::to_string(n));
  }
  return repeat_rows(value_, n).detach();
}

Tensor ConstantMechanism::sample_noise(Rng&, std::size_t n) const { return Tensor(Shape{n, 0}); }

Tensor ConstantMechanism::push(const Tensor& noise, const Context&) const {
  return broadcast_rows(noise.shape().empty() ? 1 : noise.shape()[0]);
}

Tensor ConstantMechanism::objective(const Tensor& x, const Context&, std::size_t, Rng&) const {
  const Tensor c = broadcast_rows(x.rows());
  if (x.cols() != c.cols()) throw ShapeError("constant mechanism: value width mismatch");
  std::vector<double> out(x.rows(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t d = 0; d < x.cols(); ++d) {
      if (x(r, d) != c(r, d)) out[r] = -std::numeric_limits<double>::infinity();
    }
  }
  return Tensor(Shape{x.rows(), 1}, std::move(out));
}

NodePosterior ConstantMechanism::abduct(const Tensor&, const Context&, Rng&, std::size_t) const {
  return {NodePosterior::Kind::Skipped, {}};
}

Tensor ConstantMechanism::normalise(const Tensor&) const {
  throw std::logic_error("constant mechanism has no normalisation; use the replaced mechanism");
}

// ---------------------------------------------------------------- shifted

ShiftedMechanism::ShiftedMechanism(std::shared_ptr<InvertibleMechanism> base, double shift)
    : base_(std::move(base)), shift_(shift) {
  if (!base_) throw std::invalid_argument("ShiftedMechanism: null base mechanism");
  if (!std::isfinite(shift_)) throw std::invalid_argument("ShiftedMechanism: shift must be finite");
}

Tensor ShiftedMechanism::push(const Tensor& noise, const Context& ctx) const {
  return base_->push(noise, ctx) + shift_;
}

Tensor ShiftedMechanism::objective(const Tensor& x, const Context& ctx, std::size_t, Rng&) const {
  return base_->log_prob(x - shift_, ctx);
}

NodePosterior ShiftedMechanism::abduct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const {
  return base_->abduct(x - shift_, ctx, rng, samples);
}

}  // namespace dscm
