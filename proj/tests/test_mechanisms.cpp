#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "dscm/mechanisms.hpp"
#include "dscm/ops.hpp"
#include "dscm/synthdata.hpp"

using namespace dscm;

namespace {

Tensor col(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

double log_mean_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(v.size()));
}

double normal_logpdf(double x, double mean, double logvar) {
  return -0.5 * (std::log(2 * std::numbers::pi) + logvar + (x - mean) * (x - mean) / std::exp(logvar));
}

AmortisedMechanism toy_amortised(Rng& rng, std::size_t dim, std::size_t ctx) {
  AmortisedOptions opt;
  opt.dim = dim;
  opt.latent = 2;
  opt.encoder_hidden = {8};
  opt.decoder_hidden = {8};
  opt.log_variance = -1.0;
  return AmortisedMechanism(opt, ctx, rng);
}

// log p(x | ctx) by importance sampling with the encoder as proposal, written
// against the model definition: logit(x) ~ N(mu(z), sigma^2) plus the
// preprocessing Jacobian, z ~ N(0, I).
double importance_log_likelihood(const AmortisedMechanism& m, const Tensor& x, const Context& ctx, std::size_t k,
                                 Rng& rng, double* standard_error) {
  const auto [mean, logvar] = m.encode(x, ctx);
  const Tensor y = ImagePreprocessing::to_logit(x);
  const double ladj = ImagePreprocessing::log_abs_det(x).item();
  const double lv = 2 * std::log(m.sigma());
  std::vector<double> w(k);
  for (std::size_t s = 0; s < k; ++s) {
    std::vector<double> z(m.latent());
    double log_q = 0, log_prior = 0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      z[j] = mean.data()[j] + std::exp(0.5 * logvar.data()[j]) * rng.normal();
      log_q += normal_logpdf(z[j], mean.data()[j], logvar.data()[j]);
      log_prior += normal_logpdf(z[j], 0, 0);
    }
    const Tensor mu = m.decode(Tensor({1, z.size()}, z), ctx);
    double log_lik = ladj;
    for (std::size_t p = 0; p < m.dim(); ++p) log_lik += normal_logpdf(y.data()[p], mu.data()[p], lv);
    w[s] = log_lik + log_prior - log_q;
  }
  const double est = log_mean_exp(w);
  // Delta-method standard error of the log of the mean weight.
  const double mx = *std::max_element(w.begin(), w.end());
  double m1 = 0, m2 = 0;
  for (double v : w) {
    const double e = std::exp(v - mx);
    m1 += e;
    m2 += e * e;
  }
  m1 /= static_cast<double>(k);
  m2 /= static_cast<double>(k);
  *standard_error = std::sqrt(std::max(0.0, m2 - m1 * m1) / static_cast<double>(k)) / m1;
  return est;
}

}  // namespace

TEST(Invertible, TrueThicknessMechanism) {
  const Scm scm = synth::true_scm(false);
  EXPECT_NEAR(scm.node("t").mechanism->push(col({1.5}), std::nullopt).item(), 2.0, 1e-15);
}

TEST(Invertible, AffineLogProb) {
  const double s = 1.7, shift = -0.4;
  InvertibleMechanism m(std::make_shared<ComposedTransform>(std::vector<TransformPtr>{
                            std::make_shared<AffineTransform>(std::vector<double>{s}, std::vector<double>{shift}, false)}),
                        StandardNormal{});
  EXPECT_NEAR(m.log_prob(col({shift}), std::nullopt).item(), -0.5 * std::log(2 * std::numbers::pi) - std::log(s), 1e-14);
}

TEST(Invertible, DensityIntegratesToOne) {
  Rng rng(1);
  auto spline = std::make_shared<LinearSplineTransform>(8, 3.0);
  for (double& v : spline->raw_widths().mutable_data()) v = 0.5 * rng.normal();
  for (double& v : spline->raw_heights().mutable_data()) v = 0.5 * rng.normal();
  auto net = std::make_shared<ContextNetwork>(1, std::vector<std::size_t>{}, 2, Activation::Linear, rng);
  InvertibleMechanism m(std::make_shared<ComposedTransform>(std::vector<TransformPtr>{
                            spline, std::make_shared<ConditionalAffineTransform>(net, 1),
                            std::make_shared<SigmoidTransform>(), std::make_shared<AffineNormalisation>(Bounds::Doubly, 64, 191)}),
                        StandardNormal{});
  const std::size_t n = 100000;
  std::vector<double> xs(n + 1);
  for (std::size_t k = 0; k <= n; ++k) xs[k] = 64 + 191 * (static_cast<double>(k) + 0.5) / static_cast<double>(n + 1);
  const Tensor ctx({n + 1, 1}, std::vector<double>(n + 1, 0.8));
  const Tensor lp = m.log_prob(col(xs), ctx);
  double total = 0;
  for (std::size_t k = 0; k < n; ++k) total += 0.5 * (std::exp(lp.data()[k]) + std::exp(lp.data()[k + 1])) * (xs[k + 1] - xs[k]);
  EXPECT_NEAR(total, 1.0, 1e-2);
}

TEST(Invertible, AbductionIsExact) {
  const Scm scm = synth::true_scm(false);
  const auto& mech = *scm.node("i").mechanism;
  Rng rng(2);
  const std::size_t n = 10000;
  const Tensor eps = mech.sample_noise(rng, n);
  std::vector<double> t(n);
  for (double& v : t) v = 0.5 + sample_gamma(10, 5, rng);
  const Tensor ctx = col(t);
  const Tensor x = mech.push(eps, ctx);
  const NodePosterior post = mech.abduct(x, ctx, rng, 4);
  ASSERT_EQ(post.kind, NodePosterior::Kind::Exact);
  double worst = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double s = 1 / (1 + std::exp(-std::abs(0.5 * eps.data()[k])));
    if (s > 1 - 1e-9) continue;  // saturated sigmoid
    worst = std::max(worst, std::abs(post.at(0).data()[k] - eps.data()[k]));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(Invertible, ArityErrors) {
  const Scm scm = synth::true_scm(false);
  const auto& i = *scm.node("i").mechanism;
  EXPECT_ANY_THROW(i.push(col({0.0}), std::nullopt));
  EXPECT_ANY_THROW(i.push(Tensor({1, 2}, {0.0, 0.0}), col({1.0})));
  const auto& t = *scm.node("t").mechanism;
  EXPECT_ANY_THROW(t.push(col({1.0}), col({1.0})));
}

TEST(Invertible, OutOfSupportLogProb) {
  const Scm scm = synth::true_scm(false);
  auto m = std::dynamic_pointer_cast<InvertibleMechanism>(scm.node("t").mechanism);
  ASSERT_TRUE(m);
  EXPECT_EQ(m->log_prob(col({0.2}), std::nullopt).item(), -INFINITY);
}

TEST(Amortised, PushAtZeroNoise) {
  Rng rng(3);
  const auto m = toy_amortised(rng, 4, 2);
  const Tensor ctx({1, 2}, {0.3, -0.2});
  const Tensor x = m.push(Tensor({1, 2 + 4}), ctx);
  const Tensor want = ImagePreprocessing::to_pixels(m.decode(Tensor({1, 2}), ctx));
  for (std::size_t p = 0; p < 4; ++p) EXPECT_NEAR(x.data()[p], want.data()[p], 1e-12);
}

TEST(Amortised, ElboWithPerfectDecoderAndPriorPosterior) {
  Rng rng(4);
  auto m = toy_amortised(rng, 4, 0);
  std::vector<NamedTensor> params;
  m.named_parameters(params, "");
  for (auto& p : params) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
  const Tensor x({1, 4}, {12.0, 100.0, 180.0, 240.0});
  const Tensor y = ImagePreprocessing::to_logit(x);
  m.set_output_bias(y.data());
  const double want = 4 * (-0.5 * std::log(2 * std::numbers::pi) - std::log(m.sigma())) +
                      ImagePreprocessing::log_abs_det(x).item();
  EXPECT_NEAR(m.objective(x, std::nullopt, 4, rng).item(), want, 1e-10);
}

TEST(Amortised, ElboBelowImportanceSampledLikelihood) {
  Rng rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    const auto m = toy_amortised(rng, 4, 1);
    const Tensor ctx({1, 1}, {rng.normal()});
    const Tensor x({1, 4}, {40.0 + 50 * rng.uniform(), 120.0, 200.0 * rng.uniform() + 20, 250.0});
    double elbo = 0;
    for (int r = 0; r < 200; ++r) elbo += m.objective(x, ctx, 4, rng).item() / 200;
    double se = 0;
    const double ll = importance_log_likelihood(m, x, ctx, 10000, rng, &se);
    EXPECT_LE(elbo, ll + 3 * se) << "trial " << trial;
  }
}

TEST(Amortised, MoreParticlesLowerVariance) {
  Rng rng(6);
  const auto m = toy_amortised(rng, 4, 0);
  const Tensor x({1, 4}, {30.0, 90.0, 150.0, 210.0});
  auto variance = [&](std::size_t particles) {
    std::vector<double> v(100);
    for (double& e : v) e = m.objective(x, std::nullopt, particles, rng).item();
    const double mu = std::accumulate(v.begin(), v.end(), 0.0) / 100;
    double s = 0;
    for (double e : v) s += (e - mu) * (e - mu);
    return s / 99;
  };
  EXPECT_LT(variance(4), variance(1));
}

TEST(Amortised, ReplayReconstructsObservation) {
  Rng rng(7);
  const auto m = toy_amortised(rng, 4, 2);
  const Tensor x({3, 4}, {0.0, 12.5, 200.0, 255.0, 1.0, 2.0, 3.0, 4.0, 100.0, 101.0, 102.0, 103.0});
  const Tensor ctx({3, 2}, {0.1, 0.2, -1.0, 0.5, 2.0, -2.0});
  const NodePosterior post = m.abduct(x, ctx, rng, 8);
  ASSERT_EQ(post.samples(), 8u);
  for (std::size_t s = 0; s < 8; ++s) {
    const Tensor back = m.push(post.at(s), ctx);
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(back.data()[k], x.data()[k], 1e-9);
  }
  EXPECT_THROW(m.abduct(Tensor({1, 4}, {-1.0, 0, 0, 0}), Tensor({1, 2}), rng, 1), DomainError);
}

TEST(Amortised, ImplicitKindIsReserved) { EXPECT_THROW(AmortisedImplicitMechanism(), std::logic_error); }

TEST(Gumbel, DominantLogit) {
  GumbelMechanism m(std::vector<double>{10.0, 0.0, 0.0});
  Rng rng(8);
  for (int k = 0; k < 1000; ++k) {
    std::vector<double> e(3);
    for (double& v : e) v = 8 * rng.uniform() - 4;
    EXPECT_EQ(m.push(Tensor({1, 3}, e), std::nullopt).item(), 0.0);
  }
}

TEST(Gumbel, SamplingMatchesSoftmax) {
  const std::vector<double> logits{0.2, 1.0, -0.5};
  GumbelMechanism m(logits);
  Rng rng(9);
  const std::size_t n = 100000;
  const Tensor y = m.sample(rng, std::nullopt, n);
  double z = 0;
  for (double l : logits) z += std::exp(l);
  for (std::size_t k = 0; k < 3; ++k) {
    const double freq = static_cast<double>(std::count(y.data().begin(), y.data().end(), double(k))) / n;
    const double p = std::exp(logits[k]) / z;
    EXPECT_NEAR(freq, p, 3 * std::sqrt(p * (1 - p) / n));
  }
}

TEST(Gumbel, PosteriorSamplesReproduceObservation) {
  Rng rng(10);
  const std::vector<double> logits{0.3, -2.0, 1.2, 0.0};
  for (std::size_t trial = 0; trial < 100000; ++trial) {
    const std::size_t k = trial % 4;
    const auto eps = gumbel_posterior_sample(logits, k, rng);
    ASSERT_EQ(gumbel_counterfactual(eps, logits), k);
  }
}

TEST(Gumbel, MechanismAbductionReproducesObservation) {
  Rng rng(11);
  auto net = std::make_shared<ContextNetwork>(2, std::vector<std::size_t>{4}, 3, Activation::LeakyRelu, rng);
  GumbelMechanism m(net);
  const std::size_t n = 200;
  std::vector<double> c(2 * n), ys(n);
  for (double& v : c) v = rng.normal();
  for (std::size_t r = 0; r < n; ++r) ys[r] = static_cast<double>(r % 3);
  const Tensor ctx({n, 2}, c);
  const NodePosterior post = m.abduct(col(ys), ctx, rng, 50);
  ASSERT_EQ(post.kind, NodePosterior::Kind::DiscreteExact);
  for (std::size_t s = 0; s < post.samples(); ++s) {
    const Tensor back = m.push(post.at(s), ctx);
    for (std::size_t r = 0; r < n; ++r) ASSERT_EQ(back.data()[r], ys[r]);
  }
}

TEST(Gumbel, SingleCategoryIsUnconstrained) {
  Rng rng(12);
  double s = 0;
  const std::size_t n = 1000000;
  for (std::size_t k = 0; k < n; ++k) s += gumbel_posterior_sample(std::vector<double>{0.7}, 0, rng)[0];
  EXPECT_NEAR(s / n, std::numbers::egamma, 0.01);
}

TEST(Gumbel, ShiftedPosteriorMean) {
  Rng rng(13);
  const std::vector<double> logits{0.0, 0.0};
  double s = 0;
  const std::size_t n = 1000000;
  for (std::size_t k = 0; k < n; ++k) s += gumbel_posterior_sample(logits, 0, rng)[0];
  EXPECT_NEAR(s / n, std::numbers::egamma + std::log(2.0), 0.01);
}

TEST(Gumbel, NullInterventionKeepsCategory) {
  Rng rng(14);
  const std::vector<double> logits{1.0, 0.5, -0.3, 2.0, 0.0};
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t k = rng.index(5);
    EXPECT_EQ(gumbel_counterfactual(gumbel_posterior_sample(logits, k, rng), logits), k);
  }
}

TEST(Gumbel, PermutationEquivariance) {
  Rng rng(15);
  const std::vector<double> logits{1.0, 0.5, -0.3, 2.0};
  const std::vector<std::size_t> perm{2, 0, 3, 1};  // category l moves to perm[l]
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t k = rng.index(4);
    const auto eps = gumbel_posterior_sample(logits, k, rng);
    std::vector<double> new_logits(4);
    for (double& v : new_logits) v = rng.normal();
    std::vector<double> pe(4), pl(4);
    for (std::size_t l = 0; l < 4; ++l) {
      pe[perm[l]] = eps[l];
      pl[perm[l]] = new_logits[l];
    }
    EXPECT_EQ(gumbel_counterfactual(pe, pl), perm[gumbel_counterfactual(eps, new_logits)]);
  }
}

TEST(Gumbel, RaisingObservedLogitKeepsCategory) {
  Rng rng(16);
  const std::vector<double> logits{0.4, -1.0, 0.9};
  for (int trial = 0; trial < 100000; ++trial) {
    const std::size_t k = static_cast<std::size_t>(trial % 3);
    const auto eps = gumbel_posterior_sample(logits, k, rng);
    for (int inc = 1; inc <= 10; ++inc) {
      std::vector<double> raised = logits;
      raised[k] += 0.5 * inc;
      ASSERT_EQ(gumbel_counterfactual(eps, raised), k);
    }
  }
}

TEST(Gumbel, TiesBreakToLowestIndex) {
  EXPECT_EQ(gumbel_counterfactual(std::vector<double>{1.0, 1.0, 0.0}, std::vector<double>{0.0, 0.0, 1.0}), 0u);
}

TEST(Constant, BroadcastAndPerRecord) {
  ConstantMechanism one(Tensor({1, 1}, {3.0}));
  Rng rng(17);
  const Tensor x = one.sample(rng, std::nullopt, 4);
  for (double v : x.data()) EXPECT_EQ(v, 3.0);
  const Tensor ll = one.objective(col({3.0, 2.0}), std::nullopt, 1, rng);
  EXPECT_EQ(ll.data()[0], 0.0);
  EXPECT_EQ(ll.data()[1], -INFINITY);
}

TEST(Shifted, AddsConstantToMechanism) {
  const Scm scm = synth::true_scm(false);
  auto base = std::dynamic_pointer_cast<InvertibleMechanism>(scm.node("t").mechanism);
  ShiftedMechanism shifted(base, 1.0);
  const Tensor eps = col({1.0, 2.0, 3.0});
  const Tensor a = base->push(eps, std::nullopt), b = shifted.push(eps, std::nullopt);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(b.data()[k], a.data()[k] + 1.0, 1e-14);
  Rng rng(18);
  const NodePosterior post = shifted.abduct(b, std::nullopt, rng, 1);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(post.at(0).data()[k], eps.data()[k], 1e-12);
}
