#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dscm/distributions.hpp"
#include "dscm/random.hpp"
#include "dscm/transforms.hpp"

namespace dscm {

enum class MechanismKind { Invertible, Amortised, AmortisedImplicit, Gumbel, Constant, Shifted };
enum class ParamGroup { Flow, Amortised, Discrete };

std::string to_string(MechanismKind kind);

/// Abduced noise for one node. Exact posteriors hold one tensor; amortised
/// and discrete posteriors hold one tensor per Monte-Carlo sample. Amortised
/// noise rows are [z, u].
struct NodePosterior {
  enum class Kind { Exact, Amortised, DiscreteExact, Skipped };
  Kind kind = Kind::Skipped;
  std::vector<Tensor> noise;

  /// Noise for sample s; exact posteriors ignore s.
  const Tensor& at(std::size_t s) const;
  std::size_t samples() const { return noise.size(); }
};

/// One node's structural assignment x = f(noise; parents).
class Mechanism {
 public:
  virtual ~Mechanism() = default;

  virtual MechanismKind kind() const = 0;
  /// Columns of the node's value.
  virtual std::size_t dim() const = 0;
  /// Columns of the parent context; 0 for roots.
  virtual std::size_t context_dim() const = 0;
  virtual ParamGroup group() const { return ParamGroup::Flow; }

  virtual Tensor sample_noise(Rng& rng, std::size_t n) const = 0;
  /// Deterministic push-forward of noise.
  virtual Tensor push(const Tensor& noise, const Context& ctx) const = 0;
  Tensor sample(Rng& rng, const Context& ctx, std::size_t n) const { return push(sample_noise(rng, n), ctx); }

  /// Per-row log-likelihood (exact kinds) or ELBO (amortised), shape [N,1].
  virtual Tensor objective(const Tensor& x, const Context& ctx, std::size_t particles, Rng& rng) const = 0;
  virtual NodePosterior abduct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const = 0;
  /// Unconstrained normalised value used as context for children.
  virtual Tensor normalise(const Tensor& x) const = 0;

  virtual void named_parameters(std::vector<NamedTensor>&, const std::string&) const {}
  virtual void named_buffers(std::vector<NamedTensor>&, const std::string&) const {}

 protected:
  void check_inputs(const Tensor& v, std::size_t cols, const Context& ctx, const char* what) const;
};

using MechanismPtr = std::shared_ptr<Mechanism>;

/// x = flow(eps; pa) with eps drawn from a fixed base distribution.
class InvertibleMechanism : public Mechanism {
 public:
  InvertibleMechanism(std::shared_ptr<ComposedTransform> flow, Distribution noise, std::size_t dim = 1);

  MechanismKind kind() const override { return MechanismKind::Invertible; }
  std::size_t dim() const override { return dim_; }
  std::size_t context_dim() const override { return flow_->context_dim(); }

  Tensor sample_noise(Rng& rng, std::size_t n) const override;
  Tensor push(const Tensor& noise, const Context& ctx) const override;
  Tensor objective(const Tensor& x, const Context& ctx, std::size_t particles, Rng& rng) const override;
  NodePosterior abduct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const override;
  Tensor normalise(const Tensor& x) const override { return flow_->normalise(x); }

  /// Exact conditional log-density, [N,1].
  Tensor log_prob(const Tensor& x, const Context& ctx) const;
  Tensor invert(const Tensor& x, const Context& ctx) const { return flow_->inverse(x, ctx); }

  void named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const override;
  void named_buffers(std::vector<NamedTensor>& out, const std::string& prefix) const override;

  const ComposedTransform& flow() const { return *flow_; }
  const Distribution& noise() const { return noise_; }

 private:
  std::shared_ptr<ComposedTransform> flow_;
  Distribution noise_;
  std::size_t dim_;
};

struct AmortisedOptions {
  std::size_t dim = 784;
  std::size_t latent = 16;
  std::vector<std::size_t> encoder_hidden{128, 64};
  std::vector<std::size_t> decoder_hidden{64, 128};
  double log_variance = -5.0;
};

/// Image mechanism x = pre^-1(mu(z; pa) + sigma * u) with a Gaussian encoder
/// q(z | x, pa). Pixel values live in [0,255].
class AmortisedMechanism : public Mechanism {
 public:
  AmortisedMechanism(AmortisedOptions options, std::size_t context_dim, Rng& rng);

  MechanismKind kind() const override { return MechanismKind::Amortised; }
  std::size_t dim() const override { return options_.dim; }
  std::size_t context_dim() const override { return context_dim_; }
  ParamGroup group() const override { return ParamGroup::Amortised; }
  std::size_t latent() const { return options_.latent; }
  double sigma() const;

  Tensor sample_noise(Rng& rng, std::size_t n) const override;
  Tensor push(const Tensor& noise, const Context& ctx) const override;
  Tensor objective(const Tensor& x, const Context& ctx, std::size_t particles, Rng& rng) const override;
  NodePosterior abduct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const override;
  Tensor normalise(const Tensor& x) const override;

  /// Decoder mean in logit space, [N,dim].
  Tensor decode(const Tensor& z, const Context& ctx) const;
  /// Encoder mean and log-variance, each [N,latent].
  std::pair<Tensor, Tensor> encode(const Tensor& x, const Context& ctx) const;
  /// Mean over S posterior draws of pre^-1(mu(z; pa)).
  Tensor reconstruct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const;
  /// Sets the decoder output bias, e.g. to the mean logit image.
  void set_output_bias(std::span<const double> bias);

  void named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const override;

 private:
  Tensor with_context(const Tensor& v, const Context& ctx) const;

  AmortisedOptions options_;
  std::size_t context_dim_;
  std::shared_ptr<ContextNetwork> encoder_;
  std::shared_ptr<ContextNetwork> decoder_;
};

/// Reserved slot for the adversarially trained amortised mechanism; the
/// constructor throws std::logic_error.
class AmortisedImplicitMechanism {
 public:
  AmortisedImplicitMechanism();
};

/// y = argmax_l (eps_l + lambda_l(pa)) with Gumbel(0,1) noise.
class GumbelMechanism : public Mechanism {
 public:
  /// Root node: learnable logits, initialised to zero.
  explicit GumbelMechanism(std::size_t categories);
  /// Fixed root logits.
  explicit GumbelMechanism(std::vector<double> logits);
  /// Logits predicted from the parent context.
  GumbelMechanism(std::shared_ptr<ContextNetwork> net);

  MechanismKind kind() const override { return MechanismKind::Gumbel; }
  std::size_t dim() const override { return 1; }
  std::size_t context_dim() const override { return net_ ? net_->in_dim() : 0; }
  ParamGroup group() const override { return ParamGroup::Discrete; }
  std::size_t categories() const { return k_; }

  Tensor sample_noise(Rng& rng, std::size_t n) const override;
  Tensor push(const Tensor& noise, const Context& ctx) const override;
  Tensor objective(const Tensor& x, const Context& ctx, std::size_t particles, Rng& rng) const override;
  NodePosterior abduct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const override;
  Tensor normalise(const Tensor& x) const override { return x.detach(); }

  /// [N,K] logits.
  Tensor logits(const Context& ctx, std::size_t n) const;

  void named_parameters(std::vector<NamedTensor>& out, const std::string& prefix) const override;

 private:
  std::size_t k_;
  Tensor root_logits_;  // [1,K]
  bool learnable_ = true;
  std::shared_ptr<ContextNetwork> net_;
};

/// Exact posterior draw of the Gumbel noise given logits and the observed
/// category k. The returned noise satisfies argmax(eps + lambda) = k.
std::vector<double> gumbel_posterior_sample(std::span<const double> logits, std::size_t k, Rng& rng);
/// argmax_l(eps_l + lambda_l), ties to the lowest index.
std::size_t gumbel_counterfactual(std::span<const double> eps, std::span<const double> logits);

/// Atomic intervention: a constant value, either one row broadcast to every
/// record or one row per record.
class ConstantMechanism : public Mechanism {
 public:
  explicit ConstantMechanism(Tensor value);

  MechanismKind kind() const override { return MechanismKind::Constant; }
  std::size_t dim() const override { return value_.cols(); }
  std::size_t context_dim() const override { return 0; }

  Tensor sample_noise(Rng& rng, std::size_t n) const override;
  Tensor push(const Tensor& noise, const Context& ctx) const override;
  /// 0 where x equals the constant, -inf elsewhere.
  Tensor objective(const Tensor& x, const Context& ctx, std::size_t particles, Rng& rng) const override;
  NodePosterior abduct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const override;
  Tensor normalise(const Tensor& x) const override;

  const Tensor& value() const { return value_; }

 private:
  Tensor broadcast_rows(std::size_t n) const;
  Tensor value_;
};

/// Noise-shift surrogate x = f(eps; pa) + c over an invertible mechanism.
class ShiftedMechanism : public Mechanism {
 public:
  ShiftedMechanism(std::shared_ptr<InvertibleMechanism> base, double shift);

  MechanismKind kind() const override { return MechanismKind::Shifted; }
  std::size_t dim() const override { return base_->dim(); }
  std::size_t context_dim() const override { return base_->context_dim(); }

  Tensor sample_noise(Rng& rng, std::size_t n) const override { return base_->sample_noise(rng, n); }
  Tensor push(const Tensor& noise, const Context& ctx) const override;
  Tensor objective(const Tensor& x, const Context& ctx, std::size_t particles, Rng& rng) const override;
  NodePosterior abduct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const override;
  Tensor normalise(const Tensor& x) const override { return base_->normalise(x); }

  double shift() const { return shift_; }

 private:
  std::shared_ptr<InvertibleMechanism> base_;
  double shift_;
};

}  // namespace dscm
