#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dscm/mechanisms.hpp"
#include "dscm/scm.hpp"
#include "json.hpp"

namespace dscm::config {

/// Invalid configuration. what() carries "<origin>:<line>: <field>: <problem>".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, std::size_t line, const std::string& message);
  const std::string& field() const { return field_; }
  std::size_t line() const { return line_; }

 private:
  std::string field_;
  std::size_t line_;
};

struct NoiseSpec {
  std::string kind = "normal";
  double a = 0.0;  // gamma shape, uniform low, gumbel loc
  double b = 1.0;  // gamma rate, uniform high, gumbel scale
};

Distribution to_distribution(const NoiseSpec& noise);

struct TransformSpec {
  std::string kind;
  // spline
  std::size_t bins = 8;
  double bound = 3.0;
  // affine
  bool learnable = true;
  std::vector<double> scale;
  std::vector<double> shift;
  // conditional_affine
  std::vector<std::size_t> hidden;
  Activation activation = Activation::LeakyRelu;
  // affine_normalisation; unset loc/scale are fitted to training data
  Bounds bounds = Bounds::Singly;
  std::optional<double> loc;
  std::optional<double> norm_scale;
};

struct MechanismSpec {
  std::string kind;
  std::size_t dim = 1;
  NoiseSpec noise;
  std::vector<TransformSpec> transforms;
  AmortisedOptions amortised;
  std::size_t categories = 2;
  std::vector<std::size_t> hidden;
};

struct NodeConfig {
  std::string name;
  std::vector<std::string> parents;
  MechanismSpec mechanism;
  bool raw_context = false;
};

struct TrainingConfig {
  double lr_flow = 5e-3;
  double lr_amortised = 1e-4;
  double lr_discrete = 5e-3;
  std::size_t batch_size = 256;
  std::size_t epochs = 100;
  /// Epoch budget for amortised nodes; 0 means `epochs`.
  std::size_t amortised_epochs = 0;
  /// Training records used by amortised nodes; 0 means all.
  std::size_t amortised_records = 0;
  std::size_t particles = 4;
  std::size_t mc_samples = 32;
  std::uint64_t seed = 0;

  double lr_for(ParamGroup g) const;
  std::size_t epochs_for(ParamGroup g) const;
};

struct DataConfig {
  std::string dir;
};

struct GraphConfig {
  std::string name;
  std::vector<NodeConfig> nodes;
  TrainingConfig training;
  DataConfig data;
  /// Parsed document, kept for embedding in checkpoints.
  nlohmann::json source;

  /// FNV-1a over the canonical serialisation of the "nodes" block: two
  /// configs with the same hash build models with identical parameter layouts.
  std::string hash() const;
  const NodeConfig& node(const std::string& name) const;
};

GraphConfig parse_config(std::string_view text, const std::string& origin = "<config>");
GraphConfig load_config(const std::filesystem::path& path);

std::uint64_t fnv1a(std::string_view bytes);

/// Builds the model. Normalisations without explicit loc/scale are fitted to
/// `train`, and amortised decoders start from the mean logit image; with no
/// data, placeholders are used and a checkpoint is expected to overwrite them.
Scm build_scm(const GraphConfig& config, const Observation* train, Rng& rng);

}  // namespace dscm::config
