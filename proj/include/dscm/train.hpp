#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dscm/config.hpp"
#include "dscm/optim.hpp"
#include "dscm/scm.hpp"
#include "json.hpp"

namespace dscm {

struct EpochRecord {
  std::size_t epoch = 0;
  std::int64_t step = 0;
  /// Mean training loss (negative objective) per node trained this epoch.
  std::map<std::string, double> train_loss;
  /// Mean validation objective per node (log-likelihood or ELBO per record).
  std::map<std::string, double> validation;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

struct TrainState {
  std::int64_t step = 0;
  std::size_t epoch = 0;
  std::vector<EpochRecord> history;
};

/// Parameter values by name.
using ParameterSnapshot = std::map<std::string, std::vector<double>>;
ParameterSnapshot snapshot(const Scm& scm);
void restore(const Scm& scm, const ParameterSnapshot& values);

/// Maximum-likelihood / ELBO training. The joint objective is a sum of
/// per-node terms with disjoint parameters, so each node is optimised on its
/// own term with its own Adam state, learning rate, epoch budget and record
/// subset, and keeps its own best-validation snapshot.
class Trainer {
 public:
  Trainer(const Scm& scm, config::TrainingConfig cfg);

  /// Runs epochs state.epoch+1 .. cfg.epochs. `on_epoch` runs after each
  /// epoch's validation, e.g. to write checkpoints.
  void fit(const Observation& train, const Observation& validation, TrainState& state,
           const std::function<void(const EpochRecord&)>& on_epoch = {});

  /// Current parameters with every node replaced by its best-validation values.
  ParameterSnapshot best() const;
  /// Per-node best validation objective so far.
  const std::map<std::string, double>& best_validation() const { return best_value_; }
  /// Restores best-so-far bookkeeping on resume.
  void seed_best(const std::map<std::string, double>& validation, const ParameterSnapshot& values);

  /// Mean per-record objective of one node, evaluated without gradients in
  /// chunks with a fixed seed.
  double evaluate(const std::string& node, const Observation& data, std::uint64_t seed) const;

 private:
  struct Unit {
    std::string node;
    ParamGroup group;
    std::vector<Tensor> params;
    AdamState adam;
    std::size_t epochs;
  };

  Observation unit_data(const Unit& u, const Observation& data, bool training) const;

  const Scm& scm_;
  config::TrainingConfig cfg_;
  std::vector<Unit> units_;
  std::map<std::string, double> best_value_;
  std::map<std::string, ParameterSnapshot> best_params_;
};

}  // namespace dscm
