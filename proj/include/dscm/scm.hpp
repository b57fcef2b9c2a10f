#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dscm/mechanisms.hpp"

namespace dscm {

/// Node name -> [N,D] values. A complete observation has every node.
using Observation = std::map<std::string, Tensor>;
/// Node name -> abduced noise.
using NoisePosterior = std::map<std::string, NodePosterior>;

struct NodeSpec {
  std::string name;
  std::vector<std::string> parents;
  MechanismPtr mechanism;
  /// Feed parents' raw values as context instead of their normalised values.
  bool raw_context = false;
};

/// One replaced assignment.
struct InterventionTarget {
  enum class Kind { Constant, NoiseShift, Mechanism };
  Kind kind = Kind::Constant;
  /// Constant: [1,D] (broadcast) or [N,D] (per record).
  Tensor value;
  /// NoiseShift: x := f(eps; pa) + shift.
  double shift = 0.0;
  /// Mechanism: replacement and its parents.
  MechanismPtr mechanism;
  std::vector<std::string> parents;
};

class Intervention {
 public:
  Intervention& set(const std::string& node, double value);
  Intervention& set(const std::string& node, Tensor value);
  Intervention& noise_shift(const std::string& node, double shift);
  Intervention& replace(const std::string& node, MechanismPtr mechanism, std::vector<std::string> parents);

  bool empty() const { return targets_.empty(); }
  const std::map<std::string, InterventionTarget>& targets() const { return targets_; }

 private:
  std::map<std::string, InterventionTarget> targets_;
};

struct CounterfactualResult {
  /// One complete observation per Monte-Carlo sample.
  std::vector<Observation> samples;
  /// Per-node mean over samples.
  Observation mean;
};

struct GridDensity {
  std::vector<double> grid;
  std::vector<double> density;
};

/// Structural causal model over a DAG of named mechanisms.
class Scm {
 public:
  Scm() = default;
  explicit Scm(std::vector<NodeSpec> nodes);

  /// Checks names, parents, acyclicity and context widths; recomputes the
  /// topological order. Throws std::invalid_argument naming the problem.
  void validate();

  const std::vector<NodeSpec>& nodes() const { return nodes_; }
  const std::vector<std::size_t>& order() const { return order_; }
  std::vector<std::string> order_names() const;
  std::size_t index_of(const std::string& name) const;
  bool has(const std::string& name) const;
  const NodeSpec& node(const std::string& name) const { return nodes_[index_of(name)]; }
  /// Nodes strictly downstream of any of `roots`.
  std::set<std::string> descendants(const std::set<std::string>& roots) const;
  std::set<std::string> ancestral_closure(const std::set<std::string>& nodes) const;

  /// Parent context for a node given values of its parents, or nullopt for roots.
  Context context(const std::string& name, const Observation& values) const;

  /// Samples every node in topological order. Node k draws from rng.split(k).
  /// With skip_amortised_sinks, amortised nodes without children are omitted.
  Observation ancestral_sample(std::size_t n, const Rng& rng, bool skip_amortised_sinks = false) const;

  /// Per-node log-likelihood or ELBO terms, each [N,1].
  std::map<std::string, Tensor> node_objectives(const Observation& obs, std::size_t particles, Rng& rng,
                                                const std::set<std::string>* only = nullptr) const;
  /// Mean over the batch of the summed node terms; the training loss is its negation.
  Tensor joint_objective(const Observation& obs, std::size_t particles, Rng& rng,
                         const std::set<std::string>* only = nullptr) const;

  /// Returns the intervened model; this model is unchanged.
  Scm intervene(const Intervention& iv) const;

  NoisePosterior abduct(const Observation& obs, Rng& rng, std::size_t samples,
                        const std::set<std::string>* only = nullptr) const;
  /// Prediction step: re-propagates nodes in `changed` (in this model's
  /// topological order) from abduced noise sample s; others keep `obs`.
  Observation replay(const NoisePosterior& posterior, const Observation& obs, const std::set<std::string>& changed,
                     std::size_t s) const;

  CounterfactualResult counterfactual(const Observation& obs, const Intervention& iv, Rng& rng,
                                      std::size_t samples) const;

  /// Normalised grid density of p(target | evidence) by trapezoid quadrature.
  /// The ancestral closure of target and evidence must consist of exactly
  /// those nodes, all with exact scalar likelihoods.
  GridDensity posterior_grid_1d(const std::string& target, const std::map<std::string, double>& evidence,
                                double low, double high, std::size_t points = 2048) const;

  /// Mechanism whose normalisation defines a node's context for children;
  /// unaffected by interventions.
  const Mechanism& normaliser(const std::string& name) const;

  void named_parameters(std::vector<NamedTensor>& out) const;
  void named_buffers(std::vector<NamedTensor>& out) const;
  std::vector<NamedTensor> parameters_of(const std::string& node) const;

 private:
  void require_complete(const Observation& obs, const char* what) const;
  std::size_t rows_of(const Observation& obs) const;

  std::vector<NodeSpec> nodes_;
  std::vector<std::size_t> order_;
  std::vector<MechanismPtr> normalisers_;
};

/// Row subset of a batch.
Observation select_rows(const Observation& obs, std::size_t begin, std::size_t end);
Observation select_rows(const Observation& obs, std::span<const std::size_t> rows);

}  // namespace dscm
