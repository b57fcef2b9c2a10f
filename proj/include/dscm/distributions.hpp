#pragma once

#include <string>
#include <variant>
#include <vector>

#include "dscm/random.hpp"
#include "dscm/tensor.hpp"

namespace dscm {

struct StandardNormal {};
/// Shape-rate parametrisation: mean shape / rate.
struct GammaDist {
  double shape = 1.0;
  double rate = 1.0;
};
struct UniformDist {
  double low = 0.0;
  double high = 1.0;
};
struct GumbelDist {
  double loc = 0.0;
  double scale = 1.0;
};
struct BernoulliDist {
  double p = 0.5;
};
struct CategoricalDist {
  std::vector<double> logits;
};

using Distribution =
    std::variant<StandardNormal, GammaDist, UniformDist, GumbelDist, BernoulliDist, CategoricalDist>;

std::string describe(const Distribution& d);

/// Throws std::invalid_argument for parameters outside their valid range.
void validate(const Distribution& d);

/// n i.i.d. draws as an [n,1] column. Discrete kinds return category indices.
Tensor sample(const Distribution& d, Rng& rng, std::size_t n);

/// Pointwise log-density (or log-mass). Continuous kinds return -inf outside
/// the support; discrete kinds throw DomainError for impossible outcomes.
/// The standard normal is differentiable in x.
Tensor log_prob(const Distribution& d, const Tensor& x);

double gumbel_from_uniform(double u);
double sample_gamma(double shape, double rate, Rng& rng);

/// Differential entropy of Gamma(shape, rate).
double gamma_entropy(double shape, double rate);

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

}  // namespace dscm
