#include "dscm/synthdata.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "dscm/distributions.hpp"
#include "dscm/ops.hpp"
#include "json.hpp"

namespace dscm::synth {
namespace {

struct Pt {
  double x, y;
};

// Keeps the part of a convex polygon with a*x + b*y <= c.
std::size_t clip(const Pt* in, std::size_t n, Pt* out, double a, double b, double c) {
  std::size_t m = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const Pt& p = in[k];
    const Pt& q = in[(k + 1) % n];
    const double fp = a * p.x + b * p.y - c;
    const double fq = a * q.x + b * q.y - c;
    if (fp <= 0.0) out[m++] = p;
    if ((fp < 0.0 && fq > 0.0) || (fp > 0.0 && fq < 0.0)) {
      const double s = fp / (fp - fq);
      out[m++] = {p.x + s * (q.x - p.x), p.y + s * (q.y - p.y)};
    }
  }
  return m;
}

double polygon_area(const Pt* p, std::size_t n) {
  if (n < 3) return 0.0;
  double a = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const Pt& u = p[k];
    const Pt& v = p[(k + 1) % n];
    a += u.x * v.y - v.x * u.y;
  }
  return 0.5 * std::abs(a);
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::domain_error("median of an empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

std::vector<double> mask_values(std::span<const double> img) {
  if (img.size() != kPixels) throw std::invalid_argument("image must have 784 pixels");
  const double mx = *std::max_element(img.begin(), img.end());
  if (!(mx > 0.0)) throw std::domain_error("image has an empty mask");
  std::vector<double> out;
  for (double v : img) {
    if (v >= kMaskThreshold * mx) out.push_back(v);
  }
  return out;
}

std::vector<double> scaled(const std::vector<double>& cov, double level) {
  std::vector<double> out(cov.size());
  for (std::size_t k = 0; k < cov.size(); ++k) out[k] = std::min(255.0, level * cov[k]);
  return out;
}

struct Moments {
  double mx, my, cxx, cyy, cxy;
};

Moments moments(std::span<const double> img) {
  if (img.size() != kPixels) throw std::invalid_argument("image must have 784 pixels");
  double w = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t r = 0; r < kSide; ++r) {
    for (std::size_t c = 0; c < kSide; ++c) {
      const double v = img[r * kSide + c];
      w += v;
      sx += v * (static_cast<double>(c) + 0.5);
      sy += v * (static_cast<double>(r) + 0.5);
    }
  }
  if (!(w > 0.0)) throw std::domain_error("image has an empty mask");
  Moments m{sx / w, sy / w, 0.0, 0.0, 0.0};
  for (std::size_t r = 0; r < kSide; ++r) {
    for (std::size_t c = 0; c < kSide; ++c) {
      const double v = img[r * kSide + c] / w;
      const double dx = static_cast<double>(c) + 0.5 - m.mx;
      const double dy = static_cast<double>(r) + 0.5 - m.my;
      m.cxx += v * dx * dx;
      m.cyy += v * dy * dy;
      m.cxy += v * dx * dy;
    }
  }
  return m;
}

void check_render_args(const StrokeIdentity& id, double t, double i) {
  if (id.shape_class < 0 || id.shape_class >= kShapeClasses) {
    throw std::out_of_range("render: shape class must be in [0,9]");
  }
  if (!(std::abs(id.offset_x) <= kMaxOffset && std::abs(id.offset_y) <= kMaxOffset)) {
    throw std::out_of_range("render: offsets must lie in [-2,2]");
  }
  if (!(t >= kMinThickness && t <= kMaxThickness)) {
    throw std::out_of_range("render: thickness " + std::to_string(t) + " outside [0.5,8]");
  }
  if (!(i >= kMinIntensity && i <= kMaxIntensity)) {
    throw std::out_of_range("render: intensity " + std::to_string(i) + " outside [64,255]");
  }
}

std::uint64_t split_stream(Split s) {
  switch (s) {
    case Split::Train: return 1;
    case Split::Validation: return 2;
    case Split::Test: return 3;
  }
  return 0;
}

}  // namespace

std::string split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Validation: return "val";
    case Split::Test: return "test";
  }
  return "unknown";
}

double stroke_angle(int shape_class) { return shape_class * std::numbers::pi / 10.0 + 0.13; }

double true_intensity(double t, double eps_i) {
  const double a = kIntensityNoiseScale * eps_i + kIntensitySlope * t + kIntensityOffset;
  return kIntensityRange / (1.0 + std::exp(-a)) + kMinIntensity;
}

double true_intensity_noise(double t, double i) {
  const double p = (i - kMinIntensity) / kIntensityRange;
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("intensity outside (64,255)");
  return (std::log(p) - std::log1p(-p) - kIntensitySlope * t - kIntensityOffset) / kIntensityNoiseScale;
}

std::vector<double> stroke_coverage(const StrokeIdentity& id, double t) {
  const double th = stroke_angle(id.shape_class);
  const double dx = std::cos(th), dy = std::sin(th);
  const double nx = -dy, ny = dx;
  const double cx = 14.0 + id.offset_x, cy = 14.0 + id.offset_y;
  const double hl = kStrokeLength / 2.0, hw = t / 2.0;
  std::array<Pt, 4> rect;
  const int sgn[4][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
  double xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
  for (int k = 0; k < 4; ++k) {
    rect[k] = {cx + sgn[k][0] * hl * dx + sgn[k][1] * hw * nx, cy + sgn[k][0] * hl * dy + sgn[k][1] * hw * ny};
    xmin = std::min(xmin, rect[k].x);
    xmax = std::max(xmax, rect[k].x);
    ymin = std::min(ymin, rect[k].y);
    ymax = std::max(ymax, rect[k].y);
  }
  std::vector<double> cov(kPixels, 0.0);
  const auto lo = [](double v) { return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, 27.0)); };
  std::array<Pt, 16> a, b;
  for (std::size_t r = lo(ymin); r <= lo(ymax); ++r) {
    for (std::size_t c = lo(xmin); c <= lo(xmax); ++c) {
      const double x0 = static_cast<double>(c), y0 = static_cast<double>(r);
      std::size_t n = clip(rect.data(), 4, a.data(), -1.0, 0.0, -x0);
      n = clip(a.data(), n, b.data(), 1.0, 0.0, x0 + 1.0);
      n = clip(b.data(), n, a.data(), 0.0, -1.0, -y0);
      n = clip(a.data(), n, b.data(), 0.0, 1.0, y0 + 1.0);
      cov[r * kSide + c] = std::min(1.0, polygon_area(b.data(), n));
    }
  }
  return cov;
}

std::vector<double> render(const StrokeIdentity& id, double t, double i) {
  check_render_args(id, t, i);
  const std::vector<double> cov = stroke_coverage(id, t);
  const double cmax = *std::max_element(cov.begin(), cov.end());
  std::vector<double> masked;
  for (double c : cov) {
    if (c >= kMaskThreshold * cmax) masked.push_back(c);
  }
  const double level = i / median(masked);
  if (level * cmax <= 255.0) return scaled(cov, level);

  // Clamping changes the mask, so solve median(mask) = i for the level.
  const auto med = [&](double lv) { return median(mask_values(scaled(cov, lv))); };
  double lo = level, hi = level;
  while (med(hi) < i) hi *= 2.0;
  for (int it = 0; it < 100 && hi - lo > 1e-13 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (med(mid) < i ? lo : hi) = mid;
  }
  return scaled(cov, hi);
}

double measure_intensity(std::span<const double> image) { return median(mask_values(image)); }

namespace {

double minor_moment(std::span<const double> image) {
  const Moments m = moments(image);
  const double tr = m.cxx + m.cyy;
  const double det = m.cxx * m.cyy - m.cxy * m.cxy;
  return 0.5 * tr - std::sqrt(std::max(0.0, 0.25 * tr * tr - det));
}

}  // namespace

double measure_thickness(std::span<const double> image) {
  const double i = std::clamp(measure_intensity(image), kMinIntensity, kMaxIntensity);
  const StrokeIdentity id = estimate_identity(image);
  const double target = minor_moment(image);
  // Across the stroke the mass is a width-t box blurred by the unit pixel, so
  // t^2 = 12 lambda - 1 without clamping. Clamping flattens the profile; the
  // renderer's own lambda(t) curve is monotone, so invert it by bisection.
  double lo = kMinThickness, hi = kMaxThickness;
  if (target <= minor_moment(render(id, lo, i))) return std::sqrt(std::max(0.0, 12.0 * target - 1.0));
  if (target >= minor_moment(render(id, hi, i))) return std::sqrt(std::max(0.0, 12.0 * target - 1.0));
  while (hi - lo > 1e-6) {
    const double mid = 0.5 * (lo + hi);
    (minor_moment(render(id, mid, i)) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

StrokeIdentity estimate_identity(std::span<const double> image) {
  mask_values(image);
  const Moments m = moments(image);
  double phi = 0.5 * std::atan2(2.0 * m.cxy, m.cxx - m.cyy);
  StrokeIdentity id;
  double best = 1e9;
  for (int c = 0; c < kShapeClasses; ++c) {
    double d = std::fmod(std::abs(phi - stroke_angle(c)), std::numbers::pi);
    d = std::min(d, std::numbers::pi - d);
    if (d < best) {
      best = d;
      id.shape_class = c;
    }
  }
  id.offset_x = std::clamp(m.mx - 14.0, -kMaxOffset, kMaxOffset);
  id.offset_y = std::clamp(m.my - 14.0, -kMaxOffset, kMaxOffset);
  return id;
}

SyntheticRecord generate_record(std::uint64_t seed, Split split, std::size_t index, bool with_image) {
  Rng rng = Rng(seed).split(split_stream(split)).split(index);
  SyntheticRecord r;
  r.index = index;
  r.eps_t = sample_gamma(kGammaShape, kGammaRate, rng);
  r.t = kThicknessShift + r.eps_t;
  r.eps_i = rng.normal();
  r.i = true_intensity(r.t, r.eps_i);
  r.identity.shape_class = static_cast<int>(rng.index(kShapeClasses));
  r.identity.offset_x = kMaxOffset * (2.0 * rng.uniform() - 1.0);
  r.identity.offset_y = kMaxOffset * (2.0 * rng.uniform() - 1.0);
  if (with_image) r.image = render(r.identity, std::min(r.t, kMaxThickness), r.i);
  return r;
}

std::vector<SyntheticRecord> generate_dataset(std::size_t n, std::uint64_t seed, Split split, bool with_images) {
  if (n == 0) throw std::invalid_argument("generate_dataset: n must be at least 1");
  std::vector<SyntheticRecord> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) out.push_back(generate_record(seed, split, k, with_images));
  return out;
}

SyntheticRecord reference_counterfactual(const SyntheticRecord& record, const ReferenceIntervention& iv) {
  SyntheticRecord out = record;
  if (iv.target == ReferenceIntervention::Target::Thickness) {
    out.t = iv.value;
    out.eps_t = iv.value - kThicknessShift;
    out.i = iv.value == record.t ? record.i : true_intensity(iv.value, record.eps_i);
  } else {
    out.i = iv.value;
  }
  if (out.t == record.t && out.i == record.i) return out;
  out.image = render(out.identity, out.t, out.i);
  return out;
}

std::vector<std::array<double, 2>> oracle_noise_shift_samples(std::size_t n, double shift, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::array<double, 2>> out(n);
  for (auto& s : out) {
    const double eps_t = sample_gamma(kGammaShape, kGammaRate, rng);
    const double eps_i = rng.normal();
    const double t = kThicknessShift + eps_t + shift;
    s = {t, true_intensity(t, eps_i)};
  }
  return out;
}

Observation to_observation(const std::vector<SyntheticRecord>& records, bool with_images) {
  if (records.empty()) throw std::invalid_argument("to_observation: no records");
  const std::size_t n = records.size();
  std::vector<double> t(n), i(n);
  for (std::size_t k = 0; k < n; ++k) {
    t[k] = records[k].t;
    i[k] = records[k].i;
  }
  Observation obs;
  obs["t"] = Tensor(Shape{n, 1}, std::move(t));
  obs["i"] = Tensor(Shape{n, 1}, std::move(i));
  if (with_images) {
    std::vector<double> x;
    x.reserve(n * kPixels);
    for (const auto& r : records) {
      if (r.image.size() != kPixels) throw std::invalid_argument("to_observation: record without image");
      x.insert(x.end(), r.image.begin(), r.image.end());
    }
    obs["x"] = Tensor(Shape{n, kPixels}, std::move(x));
  }
  return obs;
}

// ---------------------------------------------------------------- render mechanism

Tensor RenderMechanism::sample_noise(Rng& rng, std::size_t n) const {
  std::vector<double> v(n * 3);
  for (std::size_t k = 0; k < n; ++k) {
    v[3 * k] = static_cast<double>(rng.index(kShapeClasses));
    v[3 * k + 1] = kMaxOffset * (2.0 * rng.uniform() - 1.0);
    v[3 * k + 2] = kMaxOffset * (2.0 * rng.uniform() - 1.0);
  }
  return Tensor(Shape{n, 3}, std::move(v));
}

Tensor RenderMechanism::push(const Tensor& noise, const Context& ctx) const {
  check_inputs(noise, 3, ctx, "render mechanism");
  const std::size_t n = noise.rows();
  std::vector<double> out;
  out.reserve(n * kPixels);
  for (std::size_t k = 0; k < n; ++k) {
    const StrokeIdentity id{static_cast<int>(noise(k, 0)), noise(k, 1), noise(k, 2)};
    const auto img = render(id, (*ctx)(k, 0), (*ctx)(k, 1));
    out.insert(out.end(), img.begin(), img.end());
  }
  return Tensor(Shape{n, kPixels}, std::move(out));
}

Tensor RenderMechanism::objective(const Tensor&, const Context&, std::size_t, Rng&) const {
  throw std::logic_error("render mechanism has no tractable density");
}

NodePosterior RenderMechanism::abduct(const Tensor& x, const Context& ctx, Rng&, std::size_t) const {
  check_inputs(x, kPixels, ctx, "render mechanism");
  std::vector<double> v;
  for (std::size_t k = 0; k < x.rows(); ++k) {
    const auto img = x.data().subspan(k * kPixels, kPixels);
    StrokeIdentity id = estimate_identity(img);
    // Clamping and pixelation bias the centroid slightly; the bias is smooth
    // in the offset, so a fixed-point iteration on the centroid removes it.
    const Moments target = moments(img);
    const double t = std::clamp((*ctx)(k, 0), kMinThickness, kMaxThickness);
    const double i = std::clamp((*ctx)(k, 1), kMinIntensity, kMaxIntensity);
    for (int it = 0; it < 20; ++it) {
      const Moments m = moments(render(id, t, i));
      const double ex = target.mx - m.mx, ey = target.my - m.my;
      id.offset_x = std::clamp(id.offset_x + ex, -kMaxOffset, kMaxOffset);
      id.offset_y = std::clamp(id.offset_y + ey, -kMaxOffset, kMaxOffset);
      if (std::abs(ex) + std::abs(ey) < 1e-12) break;
    }
    v.insert(v.end(), {static_cast<double>(id.shape_class), id.offset_x, id.offset_y});
  }
  return {NodePosterior::Kind::Exact, {Tensor(Shape{x.rows(), 3}, std::move(v))}};
}

Tensor RenderMechanism::normalise(const Tensor&) const {
  throw std::logic_error("image values cannot be used as parent context");
}

Scm true_scm(bool with_image) {
  auto t_flow = std::make_shared<ComposedTransform>(std::vector<TransformPtr>{
      std::make_shared<AffineTransform>(std::vector<double>{1.0}, std::vector<double>{kThicknessShift}, false)});
  auto t_mech = std::make_shared<InvertibleMechanism>(t_flow, GammaDist{kGammaShape, kGammaRate});

  Rng unused(0);
  auto net = std::make_shared<ContextNetwork>(1, std::vector<std::size_t>{}, 2, Activation::Linear, unused,
                                              FinalInit::Zero);
  auto w = net->weight(0).mutable_data();
  auto b = net->bias(0).mutable_data();
  w[0] = 0.0;
  w[1] = kIntensitySlope;
  b[0] = std::log(kIntensityNoiseScale);
  b[1] = kIntensityOffset;
  net->weight(0).set_requires_grad(false);
  net->bias(0).set_requires_grad(false);
  auto i_flow = std::make_shared<ComposedTransform>(std::vector<TransformPtr>{
      std::make_shared<ConditionalAffineTransform>(net, 1), std::make_shared<SigmoidTransform>(),
      std::make_shared<AffineNormalisation>(Bounds::Doubly, kMinIntensity, kIntensityRange)});
  auto i_mech = std::make_shared<InvertibleMechanism>(i_flow, StandardNormal{});

  std::vector<NodeSpec> nodes{{"t", {}, t_mech, true}, {"i", {"t"}, i_mech, true}};
  if (with_image) nodes.push_back({"x", {"t", "i"}, std::make_shared<RenderMechanism>(), true});
  return Scm(std::move(nodes));
}

// ---------------------------------------------------------------- files

void write_covariates(const std::filesystem::path& path, const std::vector<SyntheticRecord>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "index,t,i,eps_t,eps_i,shape_class,offset_x,offset_y\n";
  char buf[512];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%d,%.17g,%.17g\n", r.index, r.t, r.i, r.eps_t,
                  r.eps_i, r.identity.shape_class, r.identity.offset_x, r.identity.offset_y);
    f << buf;
  }
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

void write_images(const std::filesystem::path& blob, const std::vector<std::vector<double>>& images) {
  std::ofstream f(blob, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + blob.string());
  std::vector<char> buf(kPixels * 4);
  for (const auto& img : images) {
    if (img.size() != kPixels) throw std::invalid_argument("write_images: image must have 784 pixels");
    for (std::size_t k = 0; k < kPixels; ++k) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(img[k]));
      for (int b = 0; b < 4; ++b) buf[4 * k + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
    }
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  nlohmann::ordered_json header{{"count", images.size()},
                                {"height", kSide},
                                {"width", kSide},
                                {"mask_threshold", kMaskThreshold}};
  std::filesystem::path hp = blob;
  hp.replace_extension(".json");
  std::ofstream h(hp, std::ios::binary);
  if (!h) throw std::runtime_error("cannot write " + hp.string());
  h << header.dump(2) << "\n";
  if (!f || !h) throw std::runtime_error("failed writing " + blob.string());
}

std::vector<SyntheticRecord> read_covariates(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "index,t,i,eps_t,eps_i,shape_class,offset_x,offset_y") {
    throw std::runtime_error(path.string() + ": unexpected covariate header");
  }
  std::vector<SyntheticRecord> out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    SyntheticRecord r;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf,%d,%lf,%lf", &r.index, &r.t, &r.i, &r.eps_t, &r.eps_i,
                    &r.identity.shape_class, &r.identity.offset_x, &r.identity.offset_y) != 8) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    out.push_back(r);
  }
  return out;
}

std::vector<std::vector<double>> read_images(const std::filesystem::path& blob) {
  std::filesystem::path hp = blob;
  hp.replace_extension(".json");
  std::ifstream h(hp);
  if (!h) throw std::runtime_error("cannot read " + hp.string());
  const auto header = nlohmann::json::parse(h);
  const std::size_t count = header.at("count").get<std::size_t>();
  if (header.at("height").get<std::size_t>() != kSide || header.at("width").get<std::size_t>() != kSide) {
    throw std::runtime_error(hp.string() + ": only 28x28 images are supported");
  }
  std::ifstream f(blob, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + blob.string());
  std::vector<std::vector<double>> out(count, std::vector<double>(kPixels));
  std::vector<unsigned char> buf(kPixels * 4);
  for (auto& img : out) {
    if (!f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw std::runtime_error(blob.string() + ": truncated image blob");
    }
    for (std::size_t k = 0; k < kPixels; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[4 * k + b]) << (8 * b);
      img[k] = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  return out;
}

std::vector<SyntheticRecord> read_split(const std::filesystem::path& dir, Split split, bool with_images) {
  auto records = read_covariates(dir / (split_name(split) + ".csv"));
  if (with_images) {
    const auto images = read_images(dir / (split_name(split) + "_images.f32"));
    if (images.size() != records.size()) {
      throw std::runtime_error("image count does not match covariate rows for split " + split_name(split));
    }
    for (std::size_t k = 0; k < records.size(); ++k) records[k].image = images[k];
  }
  return records;
}

void write_split(const std::filesystem::path& dir, Split split, const std::vector<SyntheticRecord>& records) {
  write_covariates(dir / (split_name(split) + ".csv"), records);
  if (!records.empty() && !records.front().image.empty()) {
    std::vector<std::vector<double>> images;
    images.reserve(records.size());
    for (const auto& r : records) images.push_back(r.image);
    write_images(dir / (split_name(split) + "_images.f32"), images);
  }
}

}  // namespace dscm::synth
