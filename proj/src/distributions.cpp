#include "dscm/distributions.hpp"

#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "dscm/ops.hpp"

namespace dscm {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Tensor map_values(const Tensor& x, auto f) {
  std::vector<double> out(x.size());
  const auto v = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = f(v[i]);
  return Tensor(x.shape(), std::move(out));
}

double logsumexp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

std::string describe(const Distribution& d) {
  std::ostringstream os;
  std::visit(overloaded{
                 [&](const StandardNormal&) { os << "normal(0,1)"; },
                 [&](const GammaDist& g) { os << "gamma(" << g.shape << "," << g.rate << ")"; },
                 [&](const UniformDist& u) { os << "uniform(" << u.low << "," << u.high << ")"; },
                 [&](const GumbelDist& g) { os << "gumbel(" << g.loc << "," << g.scale << ")"; },
                 [&](const BernoulliDist& b) { os << "bernoulli(" << b.p << ")"; },
                 [&](const CategoricalDist& c) { os << "categorical(K=" << c.logits.size() << ")"; },
             },
             d);
  return os.str();
}

void validate(const Distribution& d) {
  std::visit(overloaded{
                 [](const StandardNormal&) {},
                 [](const GammaDist& g) {
                   if (!(g.shape > 0.0) || !(g.rate > 0.0))
                     throw std::invalid_argument("gamma needs shape > 0 and rate > 0");
                 },
                 [](const UniformDist& u) {
                   if (!(u.low < u.high)) throw std::invalid_argument("uniform needs low < high");
                 },
                 [](const GumbelDist& g) {
                   if (!(g.scale > 0.0)) throw std::invalid_argument("gumbel needs scale > 0");
                 },
                 [](const BernoulliDist& b) {
                   if (!(b.p >= 0.0 && b.p <= 1.0))
                     throw std::invalid_argument("bernoulli needs 0 <= p <= 1");
                 },
                 [](const CategoricalDist& c) {
                   if (c.logits.empty()) throw std::invalid_argument("categorical needs logits");
                   for (double l : c.logits)
                     if (!std::isfinite(l)) throw std::invalid_argument("categorical logits must be finite");
                 },
             },
             d);
}

double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

// Marsaglia & Tsang (2000) squeeze method; shape < 1 is boosted through
// Gamma(shape + 1) * U^(1/shape).
double sample_gamma(double shape, double rate, Rng& rng) {
  if (shape < 1.0) {
    const double u = rng.uniform_open();
    return sample_gamma(shape + 1.0, rate, rng) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform_open();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v / rate;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v / rate;
  }
}

Tensor sample(const Distribution& d, Rng& rng, std::size_t n) {
  if (n == 0) throw std::invalid_argument("sample: n must be at least 1");
  validate(d);
  std::vector<double> out(n);
  std::visit(overloaded{
                 [&](const StandardNormal&) {
                   for (auto& v : out) v = rng.normal();
                 },
                 [&](const GammaDist& g) {
                   for (auto& v : out) v = sample_gamma(g.shape, g.rate, rng);
                 },
                 [&](const UniformDist& u) {
                   for (auto& v : out) v = u.low + (u.high - u.low) * rng.uniform();
                 },
                 [&](const GumbelDist& g) {
                   for (auto& v : out) v = g.loc + g.scale * gumbel_from_uniform(rng.uniform_open());
                 },
                 [&](const BernoulliDist& b) {
                   for (auto& v : out) v = rng.uniform() < b.p ? 1.0 : 0.0;
                 },
                 [&](const CategoricalDist& c) {
                   const std::size_t k = c.logits.size();
                   for (auto& v : out) {
                     std::size_t best = 0;
                     double best_val = -std::numeric_limits<double>::infinity();
                     for (std::size_t l = 0; l < k; ++l) {
                       const double s = gumbel_from_uniform(rng.uniform_open()) + c.logits[l];
                       if (s > best_val) {
                         best_val = s;
                         best = l;
                       }
                     }
                     v = static_cast<double>(best);
                   }
                 },
             },
             d);
  return Tensor(Shape{n, 1}, std::move(out));
}

Tensor log_prob(const Distribution& d, const Tensor& x) {
  validate(d);
  return std::visit(
      overloaded{
          [&](const StandardNormal&) -> Tensor { return square(x) * -0.5 - kHalfLog2Pi; },
          [&](const GammaDist& g) -> Tensor {
            const double norm = g.shape * std::log(g.rate) - std::lgamma(g.shape);
            return map_values(x, [&](double v) {
              if (!(v > 0.0)) return kNegInf;
              return norm + (g.shape - 1.0) * std::log(v) - g.rate * v;
            });
          },
          [&](const UniformDist& u) -> Tensor {
            const double lp = -std::log(u.high - u.low);
            return map_values(x, [&](double v) { return v >= u.low && v <= u.high ? lp : kNegInf; });
          },
          [&](const GumbelDist& g) -> Tensor {
            return map_values(x, [&](double v) {
              const double z = (v - g.loc) / g.scale;
              return -std::log(g.scale) - z - std::exp(-z);
            });
          },
          [&](const BernoulliDist& b) -> Tensor {
            return map_values(x, [&](double v) {
              if (v == 1.0) return std::log(b.p);
              if (v == 0.0) return std::log1p(-b.p);
              throw DomainError("bernoulli outcome must be 0 or 1, got " + std::to_string(v));
            });
          },
          [&](const CategoricalDist& c) -> Tensor {
            const double lse = logsumexp(c.logits);
            return map_values(x, [&](double v) {
              const double k = std::floor(v);
              if (k != v || k < 0.0 || k >= static_cast<double>(c.logits.size())) {
                throw DomainError("categorical index " + std::to_string(v) + " out of range for K=" +
                                  std::to_string(c.logits.size()));
              }
              return c.logits[static_cast<std::size_t>(k)] - lse;
            });
          },
      },
      d);
}

double gamma_entropy(double shape, double rate) {
  if (!(shape > 0.0) || !(rate > 0.0)) throw std::invalid_argument("gamma_entropy: bad parameters");
  return shape - std::log(rate) + std::lgamma(shape) + (1.0 - shape) * boost::math::digamma(shape);
}

}  // namespace dscm
