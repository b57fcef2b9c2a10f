#include "dscm/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "dscm/ops.hpp"

namespace dscm::eval {
namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  return f;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
    syy += (y[k] - my) * (y[k] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

const AmortisedMechanism* amortised(const Scm& scm, const std::string& node) {
  return dynamic_cast<const AmortisedMechanism*>(scm.node(node).mechanism.get());
}

}  // namespace

double mae(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("mae: sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw std::invalid_argument("mae: empty input");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
  return s / static_cast<double>(a.size());
}

double mae(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mae: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  return mae(a.data(), b.data());
}

double ks_distance(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_distance: empty sample");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double nx = static_cast<double>(x.size()), ny = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / nx - static_cast<double>(j) / ny));
  }
  return d;
}

double marginal_ks(std::span<const Sample2> a, std::span<const Sample2> b, std::size_t axis) {
  if (axis > 1) throw std::out_of_range("marginal_ks: axis must be 0 or 1");
  std::vector<double> x, y;
  for (const auto& s : a) x.push_back(s[axis]);
  for (const auto& s : b) y.push_back(s[axis]);
  return ks_distance(x, y);
}

double sliced_ks(std::span<const Sample2> a, std::span<const Sample2> b, std::size_t directions, std::uint64_t seed) {
  if (a.empty() || b.empty()) throw std::invalid_argument("sliced_ks: empty sample");
  if (directions == 0) throw std::invalid_argument("sliced_ks: need at least one direction");
  double mean[2] = {0, 0}, sd[2] = {0, 0};
  const double n = static_cast<double>(a.size() + b.size());
  for (auto set : {a, b}) {
    for (const auto& s : set) {
      mean[0] += s[0];
      mean[1] += s[1];
    }
  }
  mean[0] /= n;
  mean[1] /= n;
  for (auto set : {a, b}) {
    for (const auto& s : set) {
      sd[0] += (s[0] - mean[0]) * (s[0] - mean[0]);
      sd[1] += (s[1] - mean[1]) * (s[1] - mean[1]);
    }
  }
  for (double& s : sd) s = s > 0.0 ? std::sqrt(s / n) : 1.0;

  Rng rng(seed);
  double total = 0.0;
  std::vector<double> pa(a.size()), pb(b.size());
  for (std::size_t d = 0; d < directions; ++d) {
    const double angle = 2.0 * std::numbers::pi * rng.uniform();
    const double c = std::cos(angle) / sd[0], s = std::sin(angle) / sd[1];
    for (std::size_t k = 0; k < a.size(); ++k) pa[k] = c * (a[k][0] - mean[0]) + s * (a[k][1] - mean[1]);
    for (std::size_t k = 0; k < b.size(); ++k) pb[k] = c * (b[k][0] - mean[0]) + s * (b[k][1] - mean[1]);
    total += ks_distance(pa, pb);
  }
  return total / static_cast<double>(directions);
}

Histogram2d histogram_2d(std::span<const Sample2> samples, double x_low, double x_high, double y_low, double y_high,
                         std::size_t bins) {
  if (!(x_high > x_low && y_high > y_low) || bins == 0) throw std::invalid_argument("histogram_2d: bad range");
  if (samples.empty()) throw std::invalid_argument("histogram_2d: empty sample");
  Histogram2d h{bins, x_low, x_high, y_low, y_high, std::vector<double>(bins * bins, 0.0)};
  const double wx = (x_high - x_low) / static_cast<double>(bins), wy = (y_high - y_low) / static_cast<double>(bins);
  const double unit = 1.0 / (static_cast<double>(samples.size()) * wx * wy);
  for (const auto& s : samples) {
    if (s[0] < x_low || s[0] > x_high || s[1] < y_low || s[1] > y_high) continue;
    const auto bx = std::min(bins - 1, static_cast<std::size_t>((s[0] - x_low) / wx));
    const auto by = std::min(bins - 1, static_cast<std::size_t>((s[1] - y_low) / wy));
    h.density[bx * bins + by] += unit;
  }
  return h;
}

void write_histograms_csv(const std::filesystem::path& path, const std::string& x_name, const std::string& y_name,
                          const Histogram2d& a, const std::string& a_name, const Histogram2d& b,
                          const std::string& b_name) {
  if (a.bins != b.bins || a.x_low != b.x_low || a.x_high != b.x_high || a.y_low != b.y_low || a.y_high != b.y_high) {
    throw std::invalid_argument("write_histograms_csv: histograms use different bins");
  }
  auto f = open_csv(path);
  f << x_name << "_low," << x_name << "_high," << y_name << "_low," << y_name << "_high," << a_name << "_density,"
    << b_name << "_density\n";
  const double wx = (a.x_high - a.x_low) / static_cast<double>(a.bins);
  const double wy = (a.y_high - a.y_low) / static_cast<double>(a.bins);
  for (std::size_t bx = 0; bx < a.bins; ++bx) {
    for (std::size_t by = 0; by < a.bins; ++by) {
      const double x0 = a.x_low + wx * static_cast<double>(bx), y0 = a.y_low + wy * static_cast<double>(by);
      f << fmt(x0) << ',' << fmt(x0 + wx) << ',' << fmt(y0) << ',' << fmt(y0 + wy) << ','
        << fmt(a.density[bx * a.bins + by]) << ',' << fmt(b.density[bx * a.bins + by]) << '\n';
    }
  }
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

void write_samples_csv(const std::filesystem::path& path, const std::string& x_name, const std::string& y_name,
                       std::span<const Sample2> samples) {
  auto f = open_csv(path);
  f << x_name << ',' << y_name << '\n';
  char buf[96];
  for (const auto& s : samples) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", s[0], s[1]);
    f << buf;
  }
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

double tv_distance(const GridDensity& p, const GridDensity& q) {
  if (p.grid != q.grid) throw std::invalid_argument("tv_distance: densities live on different grids");
  if (p.grid.size() < 2) throw std::invalid_argument("tv_distance: grid needs at least two points");
  double s = 0.0;
  for (std::size_t k = 0; k + 1 < p.grid.size(); ++k) {
    const double h = p.grid[k + 1] - p.grid[k];
    s += 0.5 * h * (std::abs(p.density[k] - q.density[k]) + std::abs(p.density[k + 1] - q.density[k + 1]));
  }
  return 0.5 * s;
}

std::vector<Sample2> sample_pair(const Scm& scm, const std::string& first, const std::string& second, std::size_t n,
                                 std::uint64_t seed) {
  NoGradGuard no_grad;
  const Observation s = scm.ancestral_sample(n, Rng(seed), true);
  const Tensor& a = s.at(first);
  const Tensor& b = s.at(second);
  std::vector<Sample2> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = {a(k, 0), b(k, 0)};
  return out;
}

std::vector<Sample2> oracle_samples(const ScalarIntervention& iv, std::size_t n, std::uint64_t seed) {
  using synth::true_intensity;
  if (iv.node != "t" && iv.node != "i") throw std::invalid_argument("oracle: unknown node '" + iv.node + "'");
  Rng rng(seed);
  std::vector<Sample2> out(n);
  const bool shift = iv.kind == ScalarIntervention::Kind::NoiseShift;
  for (auto& s : out) {
    const double eps_t = sample_gamma(synth::kGammaShape, synth::kGammaRate, rng);
    const double eps_i = rng.normal();
    double t = synth::kThicknessShift + eps_t;
    if (iv.node == "t") t = shift ? t + iv.value : iv.value;
    double i = true_intensity(t, eps_i);
    if (iv.node == "i") i = shift ? i + iv.value : iv.value;
    s = {t, i};
  }
  return out;
}

AssociationRow association_report(const std::string& model, const Scm& scm, const Observation& test,
                                  std::size_t particles, std::size_t recon_samples, std::uint64_t seed,
                                  const NodeNames& names) {
  NoGradGuard no_grad;
  AssociationRow row;
  row.model = model;
  const std::size_t n = test.at(names.thickness).rows();
  const bool has_image = scm.has(names.image) && test.count(names.image);
  Rng parts_rng = Rng(seed).split(1), joint_rng = Rng(seed).split(2), recon_rng = Rng(seed).split(3);
  const std::size_t chunk = 1000;
  double sum_t = 0, sum_i = 0, sum_x = 0, sum_gap = 0, sum_gap2 = 0, sum_abs = 0;
  for (std::size_t b = 0; b < n; b += chunk) {
    const auto batch = select_rows(test, b, std::min(n, b + chunk));
    const auto parts = scm.node_objectives(batch, particles, parts_rng);
    const auto joint = scm.node_objectives(batch, particles, joint_rng);
    const std::size_t m = batch.at(names.thickness).rows();
    for (std::size_t r = 0; r < m; ++r) {
      double p = 0.0, j = 0.0;
      for (const auto& [node, v] : parts) p += v(r, 0);
      for (const auto& [node, v] : joint) j += v(r, 0);
      sum_t += parts.at(names.thickness)(r, 0);
      sum_i += parts.at(names.intensity)(r, 0);
      if (has_image) sum_x += parts.at(names.image)(r, 0);
      sum_gap += j - p;
      sum_gap2 += (j - p) * (j - p);
    }
    if (has_image) {
      const auto* am = amortised(scm, names.image);
      if (am) {
        const Tensor& x = batch.at(names.image);
        const Tensor rec = am->reconstruct(x, scm.context(names.image, batch), recon_rng, recon_samples);
        sum_abs += mae(rec, x) * static_cast<double>(x.size());
      }
    }
  }
  const double dn = static_cast<double>(n);
  row.log_p_t = sum_t / dn;
  row.log_p_i = sum_i / dn;
  row.image_bound = has_image ? sum_x / dn : 0.0;
  row.additivity_gap = sum_gap / dn;
  const double var = std::max(0.0, sum_gap2 / dn - row.additivity_gap * row.additivity_gap);
  row.additivity_tolerance = 3.0 * std::sqrt(var / dn) + 1e-9 * (1.0 + std::abs(row.image_bound));
  row.joint_bound = row.log_p_t + row.log_p_i + row.image_bound + row.additivity_gap;
  row.reconstruction_mae = has_image && amortised(scm, names.image)
                               ? sum_abs / (dn * static_cast<double>(test.at(names.image).cols()))
                               : std::numeric_limits<double>::quiet_NaN();
  return row;
}

void write_association_csv(const std::filesystem::path& path, const std::vector<AssociationRow>& rows) {
  auto f = open_csv(path);
  f << "model,joint_bound,image_bound,log_p_t,log_p_i,reconstruction_mae,additivity_gap,additivity_tolerance\n";
  for (const auto& r : rows) {
    f << r.model << ',' << fmt(r.joint_bound) << ',' << fmt(r.image_bound) << ',' << fmt(r.log_p_t) << ','
      << fmt(r.log_p_i) << ',' << fmt(r.reconstruction_mae) << ',' << fmt(r.additivity_gap) << ','
      << fmt(r.additivity_tolerance) << '\n';
  }
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

std::vector<FidelityRow> covariate_fidelity(const Scm& scm, std::span<const Sample2> targets,
                                            std::size_t samples_per_target, std::uint64_t seed,
                                            const NodeNames& names) {
  NoGradGuard no_grad;
  if (targets.empty() || samples_per_target == 0) throw std::invalid_argument("covariate_fidelity: nothing to sample");
  const auto& mech = *scm.node(names.image).mechanism;
  Rng rng(seed);
  std::vector<FidelityRow> out;
  for (const auto& target : targets) {
    Observation values{{names.thickness, Tensor(Shape{samples_per_target, 1}, target[0])},
                       {names.intensity, Tensor(Shape{samples_per_target, 1}, target[1])}};
    const Tensor x = mech.sample(rng, scm.context(names.image, values), samples_per_target);
    for (std::size_t k = 0; k < samples_per_target; ++k) {
      const auto img = x.data().subspan(k * x.cols(), x.cols());
      FidelityRow row{target[0], target[1], std::numeric_limits<double>::quiet_NaN(),
                      std::numeric_limits<double>::quiet_NaN()};
      try {
        row.i_measured = synth::measure_intensity(img);
        row.t_measured = synth::measure_thickness(img);
      } catch (const std::domain_error&) {
        // Empty mask: leave the measurement undefined.
      }
      out.push_back(row);
    }
  }
  return out;
}

FidelitySummary summarise(std::span<const FidelityRow> rows) {
  std::vector<double> tt, tm, it, im;
  for (const auto& r : rows) {
    if (std::isnan(r.t_measured) || std::isnan(r.i_measured)) continue;
    tt.push_back(r.t_target);
    tm.push_back(r.t_measured);
    it.push_back(r.i_target);
    im.push_back(r.i_measured);
  }
  FidelitySummary s;
  if (tt.size() < 2) return s;
  const double n = static_cast<double>(tt.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < tt.size(); ++k) {
    mx += tt[k];
    my += tm[k];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, et = 0, ei = 0;
  for (std::size_t k = 0; k < tt.size(); ++k) {
    sxy += (tt[k] - mx) * (tm[k] - my);
    sxx += (tt[k] - mx) * (tt[k] - mx);
    et += (tm[k] - tt[k]) * (tm[k] - tt[k]);
    ei += (im[k] - it[k]) * (im[k] - it[k]);
  }
  s.thickness_slope = sxx > 0 ? sxy / sxx : 0.0;
  s.thickness_r = pearson(tt, tm);
  s.intensity_r = pearson(it, im);
  s.thickness_rms = std::sqrt(et / n);
  s.intensity_rms = std::sqrt(ei / n);
  return s;
}

void write_fidelity_csv(const std::filesystem::path& path, std::span<const FidelityRow> rows) {
  auto f = open_csv(path);
  f << "t_target,i_target,t_measured,i_measured\n";
  for (const auto& r : rows) {
    f << fmt(r.t_target) << ',' << fmt(r.i_target) << ',' << fmt(r.t_measured) << ',' << fmt(r.i_measured) << '\n';
  }
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

CounterfactualBenchmark counterfactual_mae_benchmark(const Scm& scm, std::span<const synth::SyntheticRecord> records,
                                                     double delta, std::size_t samples, std::uint64_t seed,
                                                     const NodeNames& names, std::size_t batch) {
  NoGradGuard no_grad;
  CounterfactualBenchmark out;
  std::vector<synth::SyntheticRecord> usable;
  for (const auto& r : records) {
    if (r.image.size() != synth::kPixels) throw std::invalid_argument("counterfactual benchmark needs images");
    const double t = r.t + delta;
    if (t < synth::kMinThickness || t > synth::kMaxThickness) {
      ++out.skipped;
      continue;
    }
    usable.push_back(r);
  }
  if (usable.empty()) throw std::invalid_argument("counterfactual benchmark: no record stays in range");
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t b = 0; b < usable.size(); b += batch) {
    const std::vector<synth::SyntheticRecord> part(usable.begin() + static_cast<std::ptrdiff_t>(b),
                                                   usable.begin() + static_cast<std::ptrdiff_t>(std::min(usable.size(), b + batch)));
    Observation obs = synth::to_observation(part, true);
    std::vector<double> shifted(part.size());
    for (std::size_t k = 0; k < part.size(); ++k) shifted[k] = part[k].t + delta;
    Intervention iv;
    if (delta != 0.0) iv.set(names.thickness, Tensor(Shape{part.size(), 1}, shifted));
    const auto cf = scm.counterfactual(obs, iv, rng, samples);
    const Tensor& x = cf.mean.at(names.image);
    for (std::size_t k = 0; k < part.size(); ++k) {
      const auto ref = delta == 0.0 ? part[k]
                                    : synth::reference_counterfactual(
                                          part[k], {synth::ReferenceIntervention::Target::Thickness, shifted[k]});
      total += mae(x.data().subspan(k * synth::kPixels, synth::kPixels), ref.image) * synth::kPixels;
    }
  }
  out.used = usable.size();
  out.mae = total / (static_cast<double>(out.used) * synth::kPixels);
  return out;
}

}  // namespace dscm::eval
