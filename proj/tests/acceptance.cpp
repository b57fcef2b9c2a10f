// End-to-end acceptance run: generates the synthetic dataset, trains the
// three graph variants and checks every acceptance criterion, printing one
// PASS/FAIL line each. Exit code 0 only when all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dscm/cli.hpp"
#include "dscm/config.hpp"
#include "dscm/distributions.hpp"
#include "dscm/evalsuite.hpp"
#include "dscm/mechanisms.hpp"
#include "dscm/ops.hpp"
#include "dscm/optim.hpp"
#include "dscm/synthdata.hpp"
#include "dscm/train.hpp"
#include "dscm/transforms.hpp"

using namespace dscm;
using eval::Sample2;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Outcome& o) {
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << title << "): " << o.detail << std::endl;
  if (!o.pass) ++failures;
}

void note(const std::string& s) { std::cerr << "  " << s << std::endl; }

// ----------------------------------------------------------------- oracles

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }
double logit(double p) { return std::log(p) - std::log1p(-p); }

// Generator written out directly: t = 0.5 + Gamma(10, rate 5),
// i = 64 + 191 sigmoid(0.5 eps + 2 t - 5).
double oracle_log_p_t(double t) {
  const double e = t - 0.5;
  if (e <= 0) return -INFINITY;
  return 10 * std::log(5.0) - std::lgamma(10.0) + 9 * std::log(e) - 5 * e;
}

double oracle_log_p_i_given_t(double i, double t) {
  const double p = (i - 64.0) / 191.0;
  if (!(p > 0 && p < 1)) return -INFINITY;
  const double eps = (logit(p) - 2 * t + 5) / 0.5;
  return -0.5 * eps * eps - 0.5 * std::log(2 * std::numbers::pi) - std::log(0.5 * 191.0 * p * (1 - p));
}

// Differential entropy of Gamma(shape k, rate b) for integer k, with
// digamma(k) = -gamma + sum_{j<k} 1/j.
double oracle_gamma_entropy(int k, double b) {
  double digamma = -std::numbers::egamma;
  for (int j = 1; j < k; ++j) digamma += 1.0 / j;
  return k - std::log(b) + std::lgamma(k) + (1 - k) * digamma;
}

// Monte-Carlo estimates of E log p(i | t) and E log p(i) under the generator.
std::pair<double, double> oracle_intensity_floors(std::size_t n_cond, std::size_t n_marg) {
  Rng rng(777);
  double cond = 0;
  std::vector<Sample2> draws;
  for (std::size_t k = 0; k < n_cond; ++k) {
    const double t = 0.5 + sample_gamma(10.0, 5.0, rng);
    const double i = 64 + 191 * sigmoid(0.5 * rng.normal() + 2 * t - 5);
    cond += oracle_log_p_i_given_t(i, t);
    if (k < n_marg) draws.push_back({t, i});
  }
  // p(i) by trapezoid quadrature over t.
  const std::size_t grid = 1500;
  std::vector<double> ts(grid), pt(grid);
  for (std::size_t g = 0; g < grid; ++g) {
    ts[g] = 0.5 + 9.5 * static_cast<double>(g) / (grid - 1);
    pt[g] = std::exp(oracle_log_p_t(ts[g]));
  }
  const double h = ts[1] - ts[0];
  double marg = 0;
  for (const auto& d : draws) {
    double s = 0;
    for (std::size_t g = 0; g < grid; ++g) {
      const double w = (g == 0 || g + 1 == grid) ? 0.5 : 1.0;
      const double l = oracle_log_p_i_given_t(d[1], ts[g]);
      if (std::isfinite(l)) s += w * pt[g] * std::exp(l);
    }
    marg += std::log(s * h);
  }
  return {cond / static_cast<double>(n_cond), marg / static_cast<double>(draws.size())};
}

// Counterfactual intensity under the generator: the abducted noise is kept,
// so the pre-sigmoid activation moves by 2 (t' - t).
double oracle_cf_intensity(double t, double i, double t_cf) {
  return 64 + 191 * sigmoid(logit((i - 64.0) / 191.0) + 2 * (t_cf - t));
}

// ------------------------------------------------------------------ models

struct Trained {
  std::string name;
  config::GraphConfig cfg;
  Scm scm;
  double seconds = 0;
};

Trained train_model(const std::string& name, const Observation& train, const Observation& val) {
  Trained m{name, config::load_config(std::filesystem::path(DSCM_CONFIG_DIR) / (name + ".json")), {}, 0};
  Rng rng(m.cfg.training.seed);
  m.scm = config::build_scm(m.cfg, &train, rng);
  Trainer trainer(m.scm, m.cfg.training);
  TrainState state;
  const auto start = Clock::now();
  trainer.fit(train, val, state, [&](const EpochRecord& r) {
    std::ostringstream s;
    s << name << " epoch " << r.epoch << " (" << fmt(r.seconds, 3) << " s)";
    for (const auto& [node, v] : r.validation) s << " " << node << "=" << fmt(v, 6);
    note(s.str());
  });
  m.seconds = seconds_since(start);
  restore(m.scm, trainer.best());
  return m;
}

double mean_log_lik(const Scm& scm, const std::string& node, const Observation& data) {
  NoGradGuard no_grad;
  Rng rng(3);
  const std::set<std::string> only{node};
  return scm.joint_objective(data, 1, rng, &only).item();
}

// Scalar part of a graph: every node except amortised ones.
config::GraphConfig scalar_part(config::GraphConfig cfg) {
  std::erase_if(cfg.nodes, [](const config::NodeConfig& n) { return n.mechanism.kind == "amortised"; });
  return cfg;
}

Scm train_scalar_part(const std::string& name, const Observation& train, const Observation& val) {
  const auto cfg = scalar_part(config::load_config(std::filesystem::path(DSCM_CONFIG_DIR) / (name + ".json")));
  Rng rng(cfg.training.seed);
  Scm scm = config::build_scm(cfg, &train, rng);
  Trainer trainer(scm, cfg.training);
  TrainState state;
  trainer.fit(train, val, state);
  restore(scm, trainer.best());
  return scm;
}

// ---------------------------------------------------------------- criteria

Outcome thickness_likelihood(const std::vector<Trained>& models, const Observation& test,
                             const Observation& scalar_train, const Observation& scalar_val) {
  const double floor = -oracle_gamma_entropy(10, 5.0);
  // Timed run on the scalar nodes alone.
  const auto start = Clock::now();
  const Scm scm = train_scalar_part("full", scalar_train, scalar_val);
  const double secs = seconds_since(start);

  Outcome o{secs < 600.0, ""};
  std::ostringstream s;
  s << "scalar training " << fmt(secs, 3) << " s on " << scalar_train.at("t").shape()[0] << " records (< 600 s)"
    << ", log p(t): scalar-only " << fmt(mean_log_lik(scm, "t", test));
  for (const auto& m : models) {
    const double v = mean_log_lik(m.scm, "t", test);
    o.pass = o.pass && std::abs(v - (-0.93)) <= 0.05;
    s << ", " << m.name << " " << fmt(v);
  }
  s << " (target -0.93 +- 0.05, analytic " << fmt(floor) << ")";
  o.detail = s.str();
  return o;
}

Outcome intensity_likelihood(const std::vector<Trained>& models, const Observation& test) {
  const auto [cond_floor, marg_floor] = oracle_intensity_floors(1000000, 100000);
  Outcome o{true, ""};
  std::ostringstream s;
  for (const auto& m : models) {
    const double v = mean_log_lik(m.scm, "i", test);
    const bool conditional = !m.cfg.node("i").parents.empty();
    const double target = conditional ? -4.30 : -5.19;
    o.pass = o.pass && std::abs(v - target) <= 0.10;
    s << m.name << (conditional ? " log p(i|t) " : " log p(i) ") << fmt(v) << " (target " << target << "); ";
  }
  s << "Monte-Carlo floors: log p(i|t) " << fmt(cond_floor) << ", log p(i) " << fmt(marg_floor);
  o.detail = s.str();
  return o;
}

Outcome interventional_density(const Trained& full, const Trained& conditional, const Observation& scalar_train,
                               const Observation& scalar_val, const Observation& test) {
  Outcome o{true, ""};
  std::ostringstream s;
  // Scalar part of the nonlinear-context variant, reported alongside but not scored.
  const Scm variant = train_scalar_part("full_nonlinear_context", scalar_train, scalar_val);
  std::ostringstream v;
  v << "[diagnostic, not scored] nonlinear-context variant: log p(i|t) " << fmt(mean_log_lik(variant, "i", test));
  std::uint64_t seed = 100;
  for (double c : {1.0, -0.5}) {
    const auto oracle = eval::oracle_samples({"t", eval::ScalarIntervention::Kind::NoiseShift, c}, 10000, seed++);
    const auto fs = eval::sample_pair(full.scm.intervene(Intervention().noise_shift("t", c)), "t", "i", 10000, seed++);
    const auto cs =
        eval::sample_pair(conditional.scm.intervene(Intervention().noise_shift("t", c)), "t", "i", 10000, seed++);
    const double sks = eval::sliced_ks(fs, oracle);
    const double full_i = eval::marginal_ks(fs, oracle, 1);
    const double cond_i = eval::marginal_ks(cs, oracle, 1);
    o.pass = o.pass && sks <= 0.05 && cond_i >= 2 * full_i;
    s << "shift " << c << ": sliced KS " << fmt(sks, 3) << " (<= 0.05), i-marginal KS conditional " << fmt(cond_i, 3)
      << " vs full " << fmt(full_i, 3) << " (>= 2x); ";
    const auto vs = eval::sample_pair(variant.intervene(Intervention().noise_shift("t", c)), "t", "i", 10000, seed++);
    v << ", shift " << c << " sliced KS " << fmt(eval::sliced_ks(vs, oracle), 3);
  }
  o.detail = s.str() + v.str();
  return o;
}

// Histogram of t samples against bin masses of a grid density.
double sample_tv(std::span<const Sample2> samples, const GridDensity& p, double lo, double hi, std::size_t bins) {
  std::vector<double> cdf(p.grid.size(), 0.0);
  for (std::size_t k = 1; k < p.grid.size(); ++k) {
    cdf[k] = cdf[k - 1] + 0.5 * (p.density[k] + p.density[k - 1]) * (p.grid[k] - p.grid[k - 1]);
  }
  auto cdf_at = [&](double x) {
    const auto it = std::upper_bound(p.grid.begin(), p.grid.end(), x);
    if (it == p.grid.begin()) return 0.0;
    if (it == p.grid.end()) return cdf.back();
    const std::size_t k = static_cast<std::size_t>(it - p.grid.begin());
    const double w = (x - p.grid[k - 1]) / (p.grid[k] - p.grid[k - 1]);
    return cdf[k - 1] + w * (cdf[k] - cdf[k - 1]);
  };
  std::vector<double> counts(bins, 0.0);
  double outside = 0;
  for (const auto& s : samples) {
    if (s[0] < lo || s[0] >= hi) {
      ++outside;
      continue;
    }
    counts[std::min(bins - 1, static_cast<std::size_t>((s[0] - lo) / (hi - lo) * bins))] += 1;
  }
  double tv = outside / static_cast<double>(samples.size());
  for (std::size_t b = 0; b < bins; ++b) {
    const double a = lo + (hi - lo) * b / bins, z = lo + (hi - lo) * (b + 1) / bins;
    tv += std::abs(counts[b] / static_cast<double>(samples.size()) - (cdf_at(z) - cdf_at(a)));
  }
  return 0.5 * tv;
}

Outcome conditioning_vs_intervening(const Trained& full, const std::vector<synth::SyntheticRecord>& test) {
  const double lo = 0.5, hi = 8.0;
  const GridDensity prior = full.scm.posterior_grid_1d("t", {}, lo, hi);
  std::vector<double> is;
  for (const auto& r : test) is.push_back(r.i);
  std::sort(is.begin(), is.end());
  auto quantile = [&](double q) { return is[static_cast<std::size_t>(q * static_cast<double>(is.size() - 1))]; };

  Outcome o{true, ""};
  std::ostringstream s;
  std::uint64_t seed = 300;
  for (double c : {100.0, 160.0, 240.0}) {
    const Scm iv = full.scm.intervene(Intervention().set("i", c));
    const double grid_tv = eval::tv_distance(iv.posterior_grid_1d("t", {{"i", c}}, lo, hi), prior);
    const double samp_tv = sample_tv(eval::sample_pair(iv, "t", "i", 100000, seed++), prior, lo, hi, 50);
    o.pass = o.pass && grid_tv <= 0.02 && samp_tv <= 0.02;
    s << "do(i=" << c << ") TV grid " << fmt(grid_tv, 3) << " samples " << fmt(samp_tv, 3) << "; ";
  }
  s << "(<= 0.02); ";
  for (double q : {0.9, 0.95, 0.99}) {
    const double c = quantile(q);
    const double tv = eval::tv_distance(full.scm.posterior_grid_1d("t", {{"i", c}}, lo, hi), prior);
    o.pass = o.pass && tv >= 0.1;
    s << "i=" << fmt(c, 4) << " (q" << q << ") TV " << fmt(tv, 3) << "; ";
  }
  s << "(>= 0.1)";
  o.detail = s.str();
  return o;
}

Outcome counterfactual_ordering(const std::vector<Trained>& models, const std::vector<synth::SyntheticRecord>& test) {
  std::vector<synth::SyntheticRecord> usable;
  for (const auto& r : test) {
    if (r.t + 2.0 <= synth::kMaxThickness && usable.size() < 1000) usable.push_back(r);
  }
  std::vector<double> maes;
  std::ostringstream s;
  for (const auto& m : models) {
    const auto b = eval::counterfactual_mae_benchmark(m.scm, usable, 2.0, 32, 11);
    maes.push_back(b.mae);
    s << m.name << " " << fmt(b.mae) << " (" << b.used << " records); ";
  }
  const bool ok = usable.size() == 1000 && maes[0] <= 0.9 * maes[1] && maes[1] <= 0.9 * maes[2];
  s << "ratios full/conditional " << fmt(maes[0] / maes[1], 3) << ", conditional/independent "
    << fmt(maes[1] / maes[2], 3) << " (<= 0.9)";
  return {ok, s.str()};
}

Outcome exact_model_counterfactuals() {
  const Scm scm = synth::true_scm(false);
  const auto recs = synth::generate_dataset(10000, 21, synth::Split::Test, false);
  Rng rng(22);
  double worst = 0;
  std::size_t checked = 0;
  std::map<std::string, int> kinds;
  const std::size_t batch = 500;
  for (std::size_t b = 0; b < recs.size(); b += batch) {
    const std::vector<synth::SyntheticRecord> part(recs.begin() + static_cast<std::ptrdiff_t>(b),
                                                   recs.begin() + static_cast<std::ptrdiff_t>(b + batch));
    const Observation obs = synth::to_observation(part, false);
    const std::size_t n = part.size();
    std::vector<double> t_cf(n);
    Intervention iv;
    std::vector<double> i_set;
    switch (rng.index(4)) {
      case 0: {  // per-record constant
        for (double& v : t_cf) v = 0.5 + 7.5 * rng.uniform();
        iv.set("t", Tensor(Shape{n, 1}, t_cf));
        ++kinds["do(t:=c_n)"];
        break;
      }
      case 1: {  // additive shift
        const double d = 4 * rng.uniform() - 2;
        for (std::size_t k = 0; k < n; ++k) t_cf[k] = part[k].t + d;
        iv.set("t", Tensor(Shape{n, 1}, t_cf));
        ++kinds["do(t:=t+d)"];
        break;
      }
      case 2: {  // noise shift: f_T(eps) + c with the abducted eps
        const double c = 3 * rng.uniform() - 1;
        for (std::size_t k = 0; k < n; ++k) t_cf[k] = part[k].t + c;
        iv.noise_shift("t", c);
        ++kinds["do(t:=f_T+c)"];
        break;
      }
      default: {  // one constant for the whole batch
        const double c = 0.5 + 7.5 * rng.uniform();
        std::fill(t_cf.begin(), t_cf.end(), c);
        iv.set("t", c);
        ++kinds["do(t:=c)"];
        break;
      }
    }
    const auto cf = scm.counterfactual(obs, iv, rng, 1);
    for (std::size_t k = 0; k < n; ++k) {
      const double want = oracle_cf_intensity(part[k].t, part[k].i, t_cf[k]);
      worst = std::max(worst, std::abs(cf.mean.at("i")(k, 0) - want));
      worst = std::max(worst, std::abs(cf.mean.at("t")(k, 0) - t_cf[k]));
      ++checked;
    }
  }
  // do(i := c) leaves t and sets i; checked on the same records.
  const Observation obs = synth::to_observation(recs, false);
  const double c = 64 + 191 * rng.uniform();
  const auto cf = scm.counterfactual(obs, Intervention().set("i", c), rng, 1);
  for (std::size_t k = 0; k < recs.size(); ++k) {
    worst = std::max(worst, std::abs(cf.mean.at("i")(k, 0) - c));
    worst = std::max(worst, std::abs(cf.mean.at("t")(k, 0) - recs[k].t));
  }
  std::ostringstream s;
  s << checked << " records, interventions";
  for (const auto& [k, count] : kinds) s << " " << k << " x" << count;
  s << " plus do(i:=" << fmt(c, 4) << "); max |error| " << fmt(worst, 3) << " (<= 1e-6)";
  return {worst <= 1e-6 && checked == 10000, s.str()};
}

Outcome null_counterfactuals(const std::vector<Trained>& models, const std::vector<synth::SyntheticRecord>& test) {
  const auto start = Clock::now();
  double worst_scalar = 0;
  std::size_t image_mismatch = 0;
  const std::size_t batch = 1000;
  NoGradGuard no_grad;
  for (const auto& m : models) {
    Rng rng(31);
    for (std::size_t b = 0; b < test.size(); b += batch) {
      const std::vector<synth::SyntheticRecord> part(
          test.begin() + static_cast<std::ptrdiff_t>(b),
          test.begin() + static_cast<std::ptrdiff_t>(std::min(test.size(), b + batch)));
      const Observation obs = synth::to_observation(part, true);
      const auto cf = m.scm.counterfactual(obs, Intervention(), rng, 4);
      for (const auto& sample : cf.samples) {
        for (const char* node : {"t", "i"}) {
          const auto a = sample.at(node).data(), o = obs.at(node).data();
          for (std::size_t k = 0; k < a.size(); ++k) worst_scalar = std::max(worst_scalar, std::abs(a[k] - o[k]));
        }
        const auto a = sample.at("x").data(), o = obs.at("x").data();
        for (std::size_t k = 0; k < a.size(); ++k) image_mismatch += a[k] != o[k];
      }
    }
  }
  const double secs = seconds_since(start);
  std::ostringstream s;
  s << models.size() << " models x " << test.size() << " records x 4 samples: max scalar error " << fmt(worst_scalar, 3)
    << " (<= 1e-9), image pixels differing " << image_mismatch << " (0), " << fmt(secs, 3) << " s (< 60 s)";
  return {worst_scalar <= 1e-9 && image_mismatch == 0 && secs < 60.0, s.str()};
}

Outcome gumbel_suite() {
  Rng rng(41);
  std::size_t violations = 0;
  // Posterior samples reproduce the observation.
  for (std::size_t trial = 0; trial < 100000; ++trial) {
    std::vector<double> logits(2 + rng.index(6));
    for (double& v : logits) v = 2 * rng.normal();
    const std::size_t k = rng.index(logits.size());
    violations += gumbel_counterfactual(gumbel_posterior_sample(logits, k, rng), logits) != k;
  }
  const std::size_t reproduce = violations;
  // Permutation equivariance of the counterfactual.
  std::size_t equivariance = 0;
  for (std::size_t trial = 0; trial < 100000; ++trial) {
    const std::size_t n = 2 + rng.index(6);
    std::vector<double> logits(n), fresh(n);
    for (double& v : logits) v = 2 * rng.normal();
    for (double& v : fresh) v = 2 * rng.normal();
    const std::size_t k = rng.index(n);
    const auto eps = gumbel_posterior_sample(logits, k, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t j = n - 1; j > 0; --j) std::swap(perm[j], perm[rng.index(j + 1)]);
    std::vector<double> pe(n), pl(n);
    for (std::size_t l = 0; l < n; ++l) {
      pe[perm[l]] = eps[l];
      pl[perm[l]] = fresh[l];
    }
    equivariance += gumbel_counterfactual(pe, pl) != perm[gumbel_counterfactual(eps, fresh)];
  }
  // Raising only the observed logit never flips the counterfactual.
  std::size_t flips = 0;
  for (std::size_t trial = 0; trial < 100000; ++trial) {
    std::vector<double> logits(2 + rng.index(6));
    for (double& v : logits) v = 2 * rng.normal();
    const std::size_t k = rng.index(logits.size());
    const auto eps = gumbel_posterior_sample(logits, k, rng);
    for (int inc = 1; inc <= 10; ++inc) {
      std::vector<double> raised = logits;
      raised[k] += 0.3 * inc;
      flips += gumbel_counterfactual(eps, raised) != k;
    }
  }
  std::ostringstream s;
  s << "1e5 posterior draws reproducing the observation, violations " << reproduce << "; 1e5 random permutations, "
    << "equivariance violations " << equivariance << "; 1e5 samples x 10 increments, flips " << flips;
  return {reproduce == 0 && equivariance == 0 && flips == 0, s.str()};
}

double relative_error(double got, double want) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), 1e-3});
}

double network_gradcheck(std::size_t networks) {
  Rng rng(51);
  double worst = 0;
  for (std::size_t trial = 0; trial < networks; ++trial) {
    const std::size_t in = 1 + rng.index(4), out = 1 + rng.index(3);
    std::vector<std::size_t> hidden;
    for (std::size_t l = 0, layers = rng.index(3); l < layers; ++l) hidden.push_back(2 + rng.index(6));
    ContextNetwork net(in, hidden, out, rng.uniform() < 0.5 ? Activation::Linear : Activation::LeakyRelu, rng);
    const std::size_t n = 1 + rng.index(5);
    std::vector<double> xs(n * in), ws(n * out);
    for (double& v : xs) v = rng.normal();
    for (double& v : ws) v = rng.normal();
    const Tensor weights({n, out}, ws);
    auto loss_of = [&](const Tensor& x) { return sum(tanh(net(x)) * weights); };
    Tensor x(Shape{n, in}, xs, true);
    for (std::size_t l = 0; l < net.layers(); ++l) {
      net.weight(l).zero_grad();
      net.bias(l).zero_grad();
    }
    backward(loss_of(x));
    const Tensor fd = finite_diff_grad([&](const Tensor& v) { return loss_of(v).item(); }, Tensor({n, in}, xs), 1e-6);
    for (std::size_t k = 0; k < xs.size(); ++k) worst = std::max(worst, relative_error(x.grad()[k], fd.data()[k]));
    const Tensor fixed({n, in}, xs);
    for (std::size_t l = 0; l < net.layers(); ++l) {
      for (Tensor* p : {&net.weight(l), &net.bias(l)}) {
        auto values = p->mutable_data();
        for (std::size_t k = 0; k < values.size(); ++k) {
          const double keep = values[k];
          values[k] = keep + 1e-6;
          const double up = loss_of(fixed).item();
          values[k] = keep - 1e-6;
          const double down = loss_of(fixed).item();
          values[k] = keep;
          worst = std::max(worst, relative_error(p->grad()[k], (up - down) / 2e-6));
        }
      }
    }
  }
  return worst;
}

std::shared_ptr<LinearSplineTransform> random_spline(Rng& rng) {
  auto s = std::make_shared<LinearSplineTransform>(8, 3.0);
  for (double& v : s->raw_widths().mutable_data()) v = rng.normal();
  for (double& v : s->raw_heights().mutable_data()) v = rng.normal();
  return s;
}

std::shared_ptr<ConditionalAffineTransform> random_conditional(Rng& rng) {
  auto net = std::make_shared<ContextNetwork>(2, std::vector<std::size_t>{8}, 2, Activation::LeakyRelu, rng);
  return std::make_shared<ConditionalAffineTransform>(net, 1);
}

// Worst |inverse(forward(e)) - e| over every transform kind, inputs kept
// where the forward map is numerically invertible.
double bijection_round_trips(std::size_t n) {
  Rng rng(61);
  double worst = 0;
  for (int rep = 0; rep < 3; ++rep) {
    std::vector<TransformPtr> family{
        std::make_shared<AffineTransform>(std::vector<double>{std::exp(rng.normal())}, std::vector<double>{rng.normal()},
                                          true),
        random_conditional(rng),
        std::make_shared<ExpTransform>(),
        std::make_shared<SigmoidTransform>(),
        std::make_shared<AffineNormalisation>(Bounds::Singly, rng.normal(), 0.5 + rng.uniform()),
        random_spline(rng),
        std::make_shared<ComposedTransform>(std::vector<TransformPtr>{random_spline(rng), random_conditional(rng),
                                                                      std::make_shared<SigmoidTransform>(),
                                                                      std::make_shared<AffineNormalisation>(
                                                                          Bounds::Doubly, 64, 191)})};
    for (const auto& t : family) {
      std::vector<double> e(n);
      for (double& v : e) v = 2.5 * rng.normal();
      Context ctx;
      if (t->context_dim() > 0) {
        std::vector<double> c(n * t->context_dim());
        for (double& v : c) v = rng.normal();
        ctx = Tensor({n, t->context_dim()}, c);
      }
      const Tensor x = t->forward(Tensor({n, 1}, e), ctx);
      // Outputs within 1e-7 of a bound carry too little information about e
      // to invert, so they are left out.
      const bool bounded = t->kind() == "sigmoid" || t->kind() == "composition";
      const double lo = t->kind() == "sigmoid" ? 0.0 : 64.0, hi = t->kind() == "sigmoid" ? 1.0 : 255.0;
      std::vector<double> xs, es, cs;
      for (std::size_t k = 0; k < n; ++k) {
        const double y = x.data()[k];
        if (bounded && ((y - lo) / (hi - lo) < 1e-7 || (hi - y) / (hi - lo) < 1e-7)) continue;
        xs.push_back(y);
        es.push_back(e[k]);
        if (ctx) {
          for (std::size_t j = 0; j < t->context_dim(); ++j) cs.push_back((*ctx)(k, j));
        }
      }
      const std::size_t m = xs.size();
      const Context kept_ctx = ctx ? Context(Tensor({m, t->context_dim()}, cs)) : std::nullopt;
      const Tensor back = t->inverse(Tensor({m, 1}, xs), kept_ctx);
      for (std::size_t k = 0; k < m; ++k) worst = std::max(worst, std::abs(back.data()[k] - es[k]));
    }
  }
  // Image preprocessing round trip on pixel values.
  std::vector<double> px(n);
  for (double& v : px) v = 255 * rng.uniform();
  const Tensor back = ImagePreprocessing::to_pixels(ImagePreprocessing::to_logit(Tensor({n, 1}, px)));
  for (std::size_t k = 0; k < n; ++k) worst = std::max(worst, std::abs(back.data()[k] - px[k]));
  return worst;
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

// Counts toy amortised mechanisms whose ELBO exceeds an importance-sampled
// log-likelihood (encoder proposal, written from the model definition) by
// more than three standard errors.
std::pair<std::size_t, std::size_t> elbo_versus_likelihood(std::size_t trials) {
  Rng rng(71);
  std::size_t violations = 0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    AmortisedOptions opt;
    opt.dim = 4;
    opt.latent = 2;
    opt.encoder_hidden = {8};
    opt.decoder_hidden = {8};
    opt.log_variance = -1.0;
    const AmortisedMechanism m(opt, 1, rng);
    const Tensor ctx({1, 1}, {rng.normal()});
    const Tensor x({1, 4}, {40.0 + 50 * rng.uniform(), 120.0, 200.0 * rng.uniform() + 20, 250.0});
    double elbo = 0;
    for (int r = 0; r < 200; ++r) elbo += m.objective(x, ctx, 4, rng).item() / 200;

    const auto [mean, logvar] = m.encode(x, ctx);
    const Tensor y = ImagePreprocessing::to_logit(x);
    const double ladj = ImagePreprocessing::log_abs_det(x).item();
    const double lv = 2 * std::log(m.sigma());
    const std::size_t k = 10000;
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
    const double ll = log_mean_exp(w);
    const double mx = *std::max_element(w.begin(), w.end());
    double m1 = 0, m2 = 0;
    for (double v : w) {
      const double e = std::exp(v - mx);
      m1 += e / static_cast<double>(k);
      m2 += e * e / static_cast<double>(k);
    }
    const double se = std::sqrt(std::max(0.0, m2 - m1 * m1) / static_cast<double>(k)) / m1;
    violations += elbo > ll + 3 * se;
  }
  return {violations, trials};
}

Outcome numerics_suite() {
  const double grad = network_gradcheck(100);
  const double trip = bijection_round_trips(10000);
  const auto [bad, trials] = elbo_versus_likelihood(20);
  std::ostringstream s;
  s << "100 random networks, worst relative gradient error " << fmt(grad, 3) << " (<= 1e-4); bijection round trips "
    << "worst " << fmt(trip, 3) << " (<= 1e-5); ELBO above importance-sampled likelihood in " << bad << " of "
    << trials << " toy mechanisms";
  return {grad <= 1e-4 && trip <= 1e-5 && bad == 0, s.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Acceptance run");
  std::size_t n_train = 60000, n_val = 10000, n_test = 10000;
  std::uint64_t seed = 1;
  app.add_option("--train", n_train, "Training records");
  app.add_option("--val", n_val, "Validation records");
  app.add_option("--test", n_test, "Test records");
  app.add_option("--seed", seed, "Dataset seed");
  CLI11_PARSE(app, argc, argv);
  cli::tune_allocator();

  const auto start = Clock::now();
  auto train_recs = synth::generate_dataset(n_train, seed, synth::Split::Train, true);
  const Observation train = synth::to_observation(train_recs, true);
  const Observation scalar_train = synth::to_observation(train_recs, false);
  train_recs.clear();
  train_recs.shrink_to_fit();
  const auto val_recs = synth::generate_dataset(n_val, seed, synth::Split::Validation, true);
  const Observation val = synth::to_observation(val_recs, true);
  const Observation scalar_val = synth::to_observation(val_recs, false);
  const auto test_recs = synth::generate_dataset(n_test, seed, synth::Split::Test, true);
  const Observation test = synth::to_observation(test_recs, false);
  note("generated " + std::to_string(n_train) + "/" + std::to_string(n_val) + "/" + std::to_string(n_test) +
       " records in " + fmt(seconds_since(start), 3) + " s");

  std::vector<Trained> models;
  for (const char* name : {"full", "conditional", "independent"}) {
    models.push_back(train_model(name, train, val));
    note(std::string(name) + " trained in " + fmt(models.back().seconds, 4) + " s");
  }

  report(1, "thickness likelihood", thickness_likelihood(models, test, scalar_train, scalar_val));
  report(2, "intensity likelihood", intensity_likelihood(models, test));
  report(3, "interventional density", interventional_density(models[0], models[1], scalar_train, scalar_val, test));
  report(4, "conditioning vs intervening", conditioning_vs_intervening(models[0], test_recs));
  report(5, "counterfactual ordering", counterfactual_ordering(models, test_recs));
  report(6, "exact-model counterfactuals", exact_model_counterfactuals());
  report(7, "null counterfactuals", null_counterfactuals(models, test_recs));
  report(8, "Gumbel-max suite", gumbel_suite());
  report(9, "numerics suite", numerics_suite());
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << " in "
            << fmt(seconds_since(start), 4) << " s" << std::endl;
  return failures == 0 ? 0 : 1;
}
