#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dscm/scm.hpp"
#include "dscm/synthdata.hpp"

namespace dscm::eval {

using Sample2 = std::array<double, 2>;

/// Mean absolute difference over every element.
double mae(std::span<const double> a, std::span<const double> b);
double mae(const Tensor& a, const Tensor& b);

/// Two-sample Kolmogorov-Smirnov statistic.
double ks_distance(std::span<const double> a, std::span<const double> b);
/// Mean 1-D KS over `directions` fixed-seed random projections, after
/// standardising both sets with their pooled per-coordinate mean and sd.
double sliced_ks(std::span<const Sample2> a, std::span<const Sample2> b, std::size_t directions = 16,
                 std::uint64_t seed = 0x51CEDULL);
/// KS on one coordinate.
double marginal_ks(std::span<const Sample2> a, std::span<const Sample2> b, std::size_t axis);

struct Histogram2d {
  std::size_t bins = 64;
  double x_low = 0.0, x_high = 1.0, y_low = 0.0, y_high = 1.0;
  /// Row-major [x bin][y bin] densities; samples outside the range are dropped.
  std::vector<double> density;
};

/// Density estimate on a bins x bins grid over the given ranges.
Histogram2d histogram_2d(std::span<const Sample2> samples, double x_low, double x_high, double y_low,
                         double y_high, std::size_t bins = 64);
/// Writes two histograms on the same bins as one CSV table.
void write_histograms_csv(const std::filesystem::path& path, const std::string& x_name, const std::string& y_name,
                          const Histogram2d& a, const std::string& a_name, const Histogram2d& b,
                          const std::string& b_name);
void write_samples_csv(const std::filesystem::path& path, const std::string& x_name, const std::string& y_name,
                       std::span<const Sample2> samples);

/// Total variation 0.5 * integral |p - q| of two densities on the same grid.
double tv_distance(const GridDensity& p, const GridDensity& q);

/// (first, second) columns of scalar nodes sampled ancestrally; amortised sinks are skipped.
std::vector<Sample2> sample_pair(const Scm& scm, const std::string& first, const std::string& second,
                                 std::size_t n, std::uint64_t seed);

/// A do-operation on one scalar node of the generator.
struct ScalarIntervention {
  enum class Kind { Constant, NoiseShift };
  std::string node;
  Kind kind = Kind::Constant;
  double value = 0.0;
};
/// (t, i) samples of the true generator under the intervention.
std::vector<Sample2> oracle_samples(const ScalarIntervention& iv, std::size_t n, std::uint64_t seed);

struct NodeNames {
  std::string thickness = "t";
  std::string intensity = "i";
  std::string image = "x";
};

struct AssociationRow {
  std::string model;
  double joint_bound = 0.0;
  double image_bound = 0.0;
  double log_p_t = 0.0;
  /// log p(i | t) when i has t as a parent, otherwise log p(i).
  double log_p_i = 0.0;
  double reconstruction_mae = 0.0;
  /// Independently estimated joint bound minus the sum of the parts.
  double additivity_gap = 0.0;
  /// Three Monte-Carlo standard errors of that difference.
  double additivity_tolerance = 0.0;
};

AssociationRow association_report(const std::string& model, const Scm& scm, const Observation& test,
                                  std::size_t particles, std::size_t recon_samples, std::uint64_t seed,
                                  const NodeNames& names = {});
void write_association_csv(const std::filesystem::path& path, const std::vector<AssociationRow>& rows);

struct FidelityRow {
  double t_target = 0.0, i_target = 0.0;
  double t_measured = 0.0, i_measured = 0.0;
};
struct FidelitySummary {
  double thickness_slope = 0.0;
  double thickness_r = 0.0;
  double intensity_r = 0.0;
  double thickness_rms = 0.0;
  double intensity_rms = 0.0;
};

/// Samples images conditioned on each (t, i) target and measures them.
std::vector<FidelityRow> covariate_fidelity(const Scm& scm, std::span<const Sample2> targets,
                                            std::size_t samples_per_target, std::uint64_t seed,
                                            const NodeNames& names = {});
FidelitySummary summarise(std::span<const FidelityRow> rows);
void write_fidelity_csv(const std::filesystem::path& path, std::span<const FidelityRow> rows);

struct CounterfactualBenchmark {
  double mae = 0.0;
  std::size_t used = 0;
  /// Records whose counterfactual thickness leaves the renderer's range.
  std::size_t skipped = 0;
};

/// MAE between the model's counterfactual images under do(t := t + delta)
/// (mean over `samples` abductions) and the generator's reference images.
CounterfactualBenchmark counterfactual_mae_benchmark(const Scm& scm, std::span<const synth::SyntheticRecord> records,
                                                     double delta, std::size_t samples, std::uint64_t seed,
                                                     const NodeNames& names = {}, std::size_t batch = 100);

}  // namespace dscm::eval
