#include "dscm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "dscm/ops.hpp"

namespace dscm {

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"train_loss", r.train_loss},
          {"validation", r.validation},
          {"seconds", r.seconds}};
}

EpochRecord epoch_record_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.step = j.at("step").get<std::int64_t>();
  r.train_loss = j.at("train_loss").get<std::map<std::string, double>>();
  r.validation = j.at("validation").get<std::map<std::string, double>>();
  r.seconds = j.value("seconds", 0.0);
  return r;
}

ParameterSnapshot snapshot(const Scm& scm) {
  std::vector<NamedTensor> params;
  scm.named_parameters(params);
  ParameterSnapshot out;
  for (const auto& p : params) out[p.name] = {p.tensor.data().begin(), p.tensor.data().end()};
  return out;
}

void restore(const Scm& scm, const ParameterSnapshot& values) {
  std::vector<NamedTensor> params;
  scm.named_parameters(params);
  for (auto& p : params) {
    auto it = values.find(p.name);
    if (it == values.end()) continue;
    auto dst = p.tensor.mutable_data();
    if (it->second.size() != dst.size()) throw ShapeError("restore: size mismatch for " + p.name);
    std::copy(it->second.begin(), it->second.end(), dst.begin());
  }
}

Trainer::Trainer(const Scm& scm, config::TrainingConfig cfg) : scm_(scm), cfg_(cfg) {
  for (auto idx : scm_.order()) {
    const auto& n = scm_.nodes()[idx];
    auto named = scm_.parameters_of(n.name);
    std::vector<Tensor> params;
    for (auto& p : named) {
      if (p.tensor.requires_grad()) params.push_back(p.tensor);
    }
    if (params.empty()) continue;
    const ParamGroup g = n.mechanism->group();
    units_.push_back({n.name, g, std::move(params), AdamState(AdamOptions{cfg_.lr_for(g)}), cfg_.epochs_for(g)});
  }
}

Observation Trainer::unit_data(const Unit& u, const Observation& data, bool training) const {
  Observation out;
  auto add = [&](const std::string& name) {
    auto it = data.find(name);
    if (it == data.end()) throw std::invalid_argument("training data has no column for node '" + name + "'");
    out[name] = it->second;
  };
  add(u.node);
  for (const auto& p : scm_.node(u.node).parents) add(p);
  const std::size_t rows = out.begin()->second.rows();
  if (training && u.group == ParamGroup::Amortised && cfg_.amortised_records > 0 && cfg_.amortised_records < rows) {
    return select_rows(out, 0, cfg_.amortised_records);
  }
  return out;
}

double Trainer::evaluate(const std::string& node, const Observation& data, std::uint64_t seed) const {
  NoGradGuard no_grad;
  Rng rng(seed);
  const std::set<std::string> only{node};
  const std::size_t n = data.at(node).rows();
  const std::size_t chunk = 1024;
  double total = 0.0;
  for (std::size_t b = 0; b < n; b += chunk) {
    const auto batch = select_rows(data, b, std::min(n, b + chunk));
    const auto terms = scm_.node_objectives(batch, cfg_.particles, rng, &only);
    for (double v : terms.at(node).data()) total += v;
  }
  return total / static_cast<double>(n);
}

void Trainer::fit(const Observation& train, const Observation& validation, TrainState& state,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  std::map<std::string, Observation> train_sets, val_sets;
  for (const auto& u : units_) {
    train_sets[u.node] = unit_data(u, train, true);
    val_sets[u.node] = unit_data(u, validation, false);
  }

  const Rng root(cfg_.seed);
  for (std::size_t epoch = state.epoch + 1; epoch <= cfg_.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t k = 0; k < units_.size(); ++k) {
      Unit& u = units_[k];
      if (epoch > u.epochs) continue;
      const Observation& data = train_sets.at(u.node);
      const std::size_t n = data.at(u.node).rows();
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng = root.split(epoch).split(k);
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      const std::set<std::string> only{u.node};
      double loss_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t b = 0; b < n; b += cfg_.batch_size) {
        const std::span<const std::size_t> rows(perm.data() + b, std::min(cfg_.batch_size, n - b));
        const auto batch = select_rows(data, rows);
        const Tensor loss = neg(scm_.joint_objective(batch, cfg_.particles, rng, &only));
        const double lv = loss.item();
        if (!std::isfinite(lv)) {
          throw std::runtime_error("training diverged: non-finite loss for node '" + u.node + "' at epoch " +
                                   std::to_string(epoch));
        }
        backward(loss);
        adam_step(u.params, u.adam);
        ++state.step;
        loss_sum += lv;
        ++batches;
      }
      rec.train_loss[u.node] = loss_sum / static_cast<double>(batches);
      const double val = evaluate(u.node, val_sets.at(u.node), cfg_.seed ^ 0x5eedULL);
      rec.validation[u.node] = val;
      auto it = best_value_.find(u.node);
      if (it == best_value_.end() || val > it->second) {
        best_value_[u.node] = val;
        ParameterSnapshot snap;
        for (const auto& p : scm_.parameters_of(u.node)) {
          snap[p.name] = {p.tensor.data().begin(), p.tensor.data().end()};
        }
        best_params_[u.node] = std::move(snap);
      }
    }
    rec.step = state.step;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    state.epoch = epoch;
    state.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
}

ParameterSnapshot Trainer::best() const {
  ParameterSnapshot out = snapshot(scm_);
  for (const auto& [node, snap] : best_params_) {
    for (const auto& [name, values] : snap) out[name] = values;
  }
  return out;
}

void Trainer::seed_best(const std::map<std::string, double>& validation, const ParameterSnapshot& values) {
  for (const auto& u : units_) {
    auto it = validation.find(u.node);
    if (it == validation.end()) continue;
    best_value_[u.node] = it->second;
    ParameterSnapshot snap;
    for (const auto& p : scm_.parameters_of(u.node)) {
      auto v = values.find(p.name);
      if (v == values.end()) throw std::invalid_argument("seed_best: no values for " + p.name);
      snap[p.name] = v->second;
    }
    best_params_[u.node] = std::move(snap);
  }
}

}  // namespace dscm
