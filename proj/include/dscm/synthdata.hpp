#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dscm/mechanisms.hpp"
#include "dscm/scm.hpp"

namespace dscm::synth {

inline constexpr std::size_t kSide = 28;
inline constexpr std::size_t kPixels = kSide * kSide;
inline constexpr double kStrokeLength = 20.0;
inline constexpr double kMaskThreshold = 0.5;
inline constexpr int kShapeClasses = 10;
inline constexpr double kMaxOffset = 2.0;
inline constexpr double kMinThickness = 0.5;
inline constexpr double kMaxThickness = 8.0;
inline constexpr double kMinIntensity = 64.0;
inline constexpr double kMaxIntensity = 255.0;

// Generator constants: t = 0.5 + eps_t, eps_t ~ Gamma(10, 5) (shape, rate);
// i = 191 * sigmoid(0.5 * eps_i + 2 t - 5) + 64, eps_i ~ N(0, 1).
inline constexpr double kGammaShape = 10.0;
inline constexpr double kGammaRate = 5.0;
inline constexpr double kThicknessShift = 0.5;
inline constexpr double kIntensityNoiseScale = 0.5;
inline constexpr double kIntensitySlope = 2.0;
inline constexpr double kIntensityOffset = -5.0;
inline constexpr double kIntensityRange = 191.0;

struct StrokeIdentity {
  int shape_class = 0;
  double offset_x = 0.0;
  double offset_y = 0.0;
};

struct SyntheticRecord {
  std::size_t index = 0;
  double t = 0.0;
  double i = 0.0;
  double eps_t = 0.0;
  double eps_i = 0.0;
  StrokeIdentity identity;
  /// Row-major 28x28 pixels in [0,255]; empty when images were not requested.
  std::vector<double> image;
};

enum class Split { Train, Validation, Test };
std::string split_name(Split split);

double stroke_angle(int shape_class);
double true_intensity(double t, double eps_i);
/// Inverse of true_intensity in eps_i.
double true_intensity_noise(double t, double i);

/// Anti-aliased stroke of length 20 and width t; the foreground level makes
/// the median over the 50%-of-max mask equal i. Values clamped to [0,255].
std::vector<double> render(const StrokeIdentity& id, double t, double i);
/// Exact area of the stroke rectangle inside each pixel.
std::vector<double> stroke_coverage(const StrokeIdentity& id, double t);

/// Width across the principal axis from the second moment of the pixel mass.
double measure_thickness(std::span<const double> image);
/// Median over the 50%-of-max mask.
double measure_intensity(std::span<const double> image);
/// Shape class and offset from the image centroid and principal axis.
StrokeIdentity estimate_identity(std::span<const double> image);

/// Record `index` of a split, drawn from its own seed-derived stream.
SyntheticRecord generate_record(std::uint64_t seed, Split split, std::size_t index, bool with_image);
std::vector<SyntheticRecord> generate_dataset(std::size_t n, std::uint64_t seed, Split split = Split::Train,
                                              bool with_images = true);

struct ReferenceIntervention {
  enum class Target { Thickness, Intensity };
  Target target = Target::Thickness;
  double value = 0.0;
};

/// Ground-truth counterfactual using the stored noise and identity.
SyntheticRecord reference_counterfactual(const SyntheticRecord& record, const ReferenceIntervention& iv);

/// (t, i) samples of the generator under do(t := f_T(eps_T) + shift), from the
/// closed-form assignments.
std::vector<std::array<double, 2>> oracle_noise_shift_samples(std::size_t n, double shift, std::uint64_t seed);

/// Observation with nodes "t", "i" and, when images are present, "x".
Observation to_observation(const std::vector<SyntheticRecord>& records, bool with_images);

/// Image mechanism of the generator: noise is (shape class, offset x,
/// offset y), parents are raw (t, i). Abduction reads the identity back from
/// the image.
class RenderMechanism : public Mechanism {
 public:
  MechanismKind kind() const override { return MechanismKind::Invertible; }
  std::size_t dim() const override { return kPixels; }
  std::size_t context_dim() const override { return 2; }

  Tensor sample_noise(Rng& rng, std::size_t n) const override;
  Tensor push(const Tensor& noise, const Context& ctx) const override;
  Tensor objective(const Tensor& x, const Context& ctx, std::size_t particles, Rng& rng) const override;
  NodePosterior abduct(const Tensor& x, const Context& ctx, Rng& rng, std::size_t samples) const override;
  Tensor normalise(const Tensor& x) const override;
};

/// The generator encoded as an Scm over "t", "i" and optionally "x".
Scm true_scm(bool with_image);

// File formats. Covariates: CSV with header
// index,t,i,eps_t,eps_i,shape_class,offset_x,offset_y. Images: little-endian
// float32 blob plus a JSON header {count, height, width, mask_threshold}.
void write_covariates(const std::filesystem::path& path, const std::vector<SyntheticRecord>& records);
void write_images(const std::filesystem::path& blob, const std::vector<std::vector<double>>& images);
std::vector<SyntheticRecord> read_covariates(const std::filesystem::path& path);
std::vector<std::vector<double>> read_images(const std::filesystem::path& blob);
/// Reads "<split>.csv" and, if present and requested, "<split>_images.f32".
std::vector<SyntheticRecord> read_split(const std::filesystem::path& dir, Split split, bool with_images);
void write_split(const std::filesystem::path& dir, Split split, const std::vector<SyntheticRecord>& records);

}  // namespace dscm::synth
