#include "dscm/scm.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include "dscm/ops.hpp"

namespace dscm {

// ---------------------------------------------------------------- intervention

Intervention& Intervention::set(const std::string& node, double value) {
  return set(node, Tensor(Shape{1, 1}, std::vector<double>{value}));
}

Intervention& Intervention::set(const std::string& node, Tensor value) {
  InterventionTarget t;
  t.kind = InterventionTarget::Kind::Constant;
  t.value = value.detach();
  targets_[node] = std::move(t);
  return *this;
}

Intervention& Intervention::noise_shift(const std::string& node, double shift) {
  InterventionTarget t;
  t.kind = InterventionTarget::Kind::NoiseShift;
  t.shift = shift;
  targets_[node] = std::move(t);
  return *this;
}

Intervention& Intervention::replace(const std::string& node, MechanismPtr mechanism,
                                    std::vector<std::string> parents) {
  if (!mechanism) throw std::invalid_argument("Intervention: null replacement mechanism");
  InterventionTarget t;
  t.kind = InterventionTarget::Kind::Mechanism;
  t.mechanism = std::move(mechanism);
  t.parents = std::move(parents);
  targets_[node] = std::move(t);
  return *this;
}

// ---------------------------------------------------------------- structure

Scm::Scm(std::vector<NodeSpec> nodes) : nodes_(std::move(nodes)) {
  for (const auto& n : nodes_) normalisers_.push_back(n.mechanism);
  validate();
}

void Scm::validate() {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.name.empty()) throw std::invalid_argument("scm: node with empty name");
    if (!n.mechanism) throw std::invalid_argument("scm: node '" + n.name + "' has no mechanism");
    if (!index.emplace(n.name, i).second) throw std::invalid_argument("scm: duplicate node '" + n.name + "'");
  }
  for (const auto& n : nodes_) {
    std::set<std::string> seen;
    for (const auto& p : n.parents) {
      if (!index.count(p)) {
        throw std::invalid_argument("scm: node '" + n.name + "' has unknown parent '" + p + "'");
      }
      if (!seen.insert(p).second) {
        throw std::invalid_argument("scm: node '" + n.name + "' lists parent '" + p + "' twice");
      }
    }
  }

  // Depth-first search with colours; a back edge yields the cycle path.
  enum Colour { White, Grey, Black };
  std::vector<Colour> colour(nodes_.size(), White);
  std::vector<std::size_t> stack_path;
  order_.clear();
  std::function<void(std::size_t)> visit = [&](std::size_t i) {
    colour[i] = Grey;
    stack_path.push_back(i);
    for (const auto& p : nodes_[i].parents) {
      const std::size_t j = index.at(p);
      if (colour[j] == Grey) {
        // The stack runs from j through successive parents to i; read it
        // backwards to follow the causal edges.
        const auto it = std::find(stack_path.begin(), stack_path.end(), j);
        std::string path = nodes_[j].name;
        for (auto k = stack_path.end(); k != it + 1;) path += " -> " + nodes_[*--k].name;
        throw std::invalid_argument("scm: cycle detected: " + path + " -> " + nodes_[j].name);
      }
      if (colour[j] == White) visit(j);
    }
    stack_path.pop_back();
    colour[i] = Black;
    order_.push_back(i);
  };
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (colour[i] == White) visit(i);
  }

  for (const auto& n : nodes_) {
    std::size_t width = 0;
    for (const auto& p : n.parents) width += nodes_[index.at(p)].mechanism->dim();
    const std::size_t need = n.mechanism->context_dim();
    if (need != 0 || !n.parents.empty()) {
      if (n.mechanism->kind() == MechanismKind::Constant) continue;
      if (width != need) {
        throw std::invalid_argument("scm: node '" + n.name + "' expects a parent context of width " +
                                    std::to_string(need) + " but its parents provide " + std::to_string(width));
      }
    }
  }
}

std::vector<std::string> Scm::order_names() const {
  std::vector<std::string> out;
  for (auto i : order_) out.push_back(nodes_[i].name);
  return out;
}

std::size_t Scm::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].name == name) return i;
  }
  throw std::invalid_argument("scm: unknown node '" + name + "'");
}

bool Scm::has(const std::string& name) const {
  return std::any_of(nodes_.begin(), nodes_.end(), [&](const NodeSpec& n) { return n.name == name; });
}

std::set<std::string> Scm::descendants(const std::set<std::string>& roots) const {
  std::set<std::string> out;
  std::set<std::string> frontier = roots;
  for (auto i : order_) {
    const auto& n = nodes_[i];
    for (const auto& p : n.parents) {
      if (frontier.count(p) || out.count(p)) {
        out.insert(n.name);
        break;
      }
    }
  }
  for (const auto& r : roots) out.erase(r);
  return out;
}

std::set<std::string> Scm::ancestral_closure(const std::set<std::string>& names) const {
  std::set<std::string> out;
  std::vector<std::string> todo(names.begin(), names.end());
  while (!todo.empty()) {
    const std::string n = todo.back();
    todo.pop_back();
    if (!out.insert(n).second) continue;
    for (const auto& p : node(n).parents) todo.push_back(p);
  }
  return out;
}

const Mechanism& Scm::normaliser(const std::string& name) const { return *normalisers_[index_of(name)]; }

Context Scm::context(const std::string& name, const Observation& values) const {
  const auto& n = node(name);
  if (n.parents.empty()) return std::nullopt;
  std::vector<Tensor> parts;
  for (const auto& p : n.parents) {
    auto it = values.find(p);
    if (it == values.end()) throw std::invalid_argument("scm: missing value for parent '" + p + "' of '" + name + "'");
    parts.push_back(n.raw_context ? it->second.detach() : normaliser(p).normalise(it->second));
  }
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

void Scm::require_complete(const Observation& obs, const char* what) const {
  std::string missing;
  for (const auto& n : nodes_) {
    if (!obs.count(n.name)) missing += (missing.empty() ? "" : ", ") + n.name;
  }
  if (!missing.empty()) throw std::invalid_argument(std::string(what) + ": observation is missing nodes: " + missing);
}

std::size_t Scm::rows_of(const Observation& obs) const {
  if (obs.empty()) throw std::invalid_argument("scm: empty observation");
  const std::size_t n = obs.begin()->second.rows();
  for (const auto& [name, v] : obs) {
    if (v.rows() != n) throw ShapeError("scm: node '" + name + "' has a different row count");
  }
  return n;
}

// ---------------------------------------------------------------- sampling and likelihood

Observation Scm::ancestral_sample(std::size_t n, const Rng& rng, bool skip_amortised_sinks) const {
  if (n == 0) throw std::invalid_argument("ancestral_sample: n must be at least 1");
  std::set<std::string> has_children;
  for (const auto& node : nodes_) has_children.insert(node.parents.begin(), node.parents.end());
  Observation out;
  for (auto i : order_) {
    const auto& node = nodes_[i];
    if (skip_amortised_sinks && node.mechanism->kind() == MechanismKind::Amortised &&
        !has_children.count(node.name)) {
      continue;
    }
    Rng r = rng.split(i);
    const Tensor noise = node.mechanism->sample_noise(r, n);
    const Context ctx = node.mechanism->kind() == MechanismKind::Constant ? std::nullopt : context(node.name, out);
    out[node.name] = node.mechanism->push(noise, ctx).detach();
  }
  return out;
}

std::map<std::string, Tensor> Scm::node_objectives(const Observation& obs, std::size_t particles, Rng& rng,
                                                   const std::set<std::string>* only) const {
  std::map<std::string, Tensor> out;
  for (auto i : order_) {
    const auto& node = nodes_[i];
    if (only && !only->count(node.name)) continue;
    auto it = obs.find(node.name);
    if (it == obs.end()) require_complete(obs, "joint_objective");
    const Context ctx = node.mechanism->kind() == MechanismKind::Constant ? std::nullopt : context(node.name, obs);
    out[node.name] = node.mechanism->objective(it->second, ctx, particles, rng);
  }
  return out;
}

Tensor Scm::joint_objective(const Observation& obs, std::size_t particles, Rng& rng,
                            const std::set<std::string>* only) const {
  if (!only) require_complete(obs, "joint_objective");
  const auto terms = node_objectives(obs, particles, rng, only);
  if (terms.empty()) throw std::invalid_argument("joint_objective: no nodes selected");
  Tensor total;
  for (const auto& [name, t] : terms) total = total.defined() ? total + t : t;
  return mean(total);
}

// ---------------------------------------------------------------- interventions

Scm Scm::intervene(const Intervention& iv) const {
  Scm out = *this;
  for (const auto& [name, target] : iv.targets()) {
    auto& node = out.nodes_[index_of(name)];
    switch (target.kind) {
      case InterventionTarget::Kind::Constant: {
        if (target.value.rank() != 2 || target.value.cols() != node.mechanism->dim()) {
          throw ShapeError("do(" + name + "): value must have " + std::to_string(node.mechanism->dim()) +
                           " columns");
        }
        node.mechanism = std::make_shared<ConstantMechanism>(target.value);
        node.parents.clear();
        break;
      }
      case InterventionTarget::Kind::NoiseShift: {
        auto base = std::dynamic_pointer_cast<InvertibleMechanism>(node.mechanism);
        if (!base) throw std::invalid_argument("do(" + name + "): noise shift needs an invertible mechanism");
        node.mechanism = std::make_shared<ShiftedMechanism>(base, target.shift);
        break;
      }
      case InterventionTarget::Kind::Mechanism: {
        node.mechanism = target.mechanism;
        node.parents = target.parents;
        break;
      }
    }
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------- counterfactuals

NoisePosterior Scm::abduct(const Observation& obs, Rng& rng, std::size_t samples,
                           const std::set<std::string>* only) const {
  require_complete(obs, "abduct");
  rows_of(obs);
  NoisePosterior post;
  for (auto i : order_) {
    const auto& node = nodes_[i];
    if (only && !only->count(node.name)) continue;
    const Context ctx = node.mechanism->kind() == MechanismKind::Constant ? std::nullopt : context(node.name, obs);
    post[node.name] = node.mechanism->abduct(obs.at(node.name), ctx, rng, samples);
  }
  return post;
}

Observation Scm::replay(const NoisePosterior& posterior, const Observation& obs, const std::set<std::string>& changed,
                        std::size_t s) const {
  Observation values = obs;
  const std::size_t n = rows_of(obs);
  for (auto i : order_) {
    const auto& node = nodes_[i];
    if (!changed.count(node.name)) continue;
    if (node.mechanism->kind() == MechanismKind::Constant) {
      values[node.name] = node.mechanism->push(Tensor(Shape{n, 0}), std::nullopt);
      continue;
    }
    auto it = posterior.find(node.name);
    if (it == posterior.end()) throw std::logic_error("replay: no abduced noise for '" + node.name + "'");
    values[node.name] = node.mechanism->push(it->second.at(s), context(node.name, values)).detach();
  }
  return values;
}

CounterfactualResult Scm::counterfactual(const Observation& obs, const Intervention& iv, Rng& rng,
                                         std::size_t samples) const {
  if (samples == 0) throw std::invalid_argument("counterfactual: samples must be at least 1");
  require_complete(obs, "counterfactual");
  rows_of(obs);
  CounterfactualResult result;
  if (iv.empty()) {
    result.samples.assign(samples, obs);
    result.mean = obs;
    return result;
  }

  const Scm post_model = intervene(iv);
  std::set<std::string> targets;
  for (const auto& [name, t] : iv.targets()) targets.insert(name);
  const std::set<std::string> downstream = post_model.descendants(targets);
  std::set<std::string> changed = downstream;
  changed.insert(targets.begin(), targets.end());

  // Abduction uses the original mechanisms; constant targets discard their noise.
  std::set<std::string> need;
  for (const auto& name : changed) {
    if (post_model.node(name).mechanism->kind() != MechanismKind::Constant) need.insert(name);
  }
  const NoisePosterior posterior = abduct(obs, rng, samples, &need);

  std::size_t distinct = 1;
  for (const auto& [name, p] : posterior) {
    if (p.kind != NodePosterior::Kind::Exact) distinct = samples;
  }
  for (std::size_t s = 0; s < distinct; ++s) result.samples.push_back(post_model.replay(posterior, obs, changed, s));
  while (result.samples.size() < samples) result.samples.push_back(result.samples.front());

  for (const auto& [name, v] : obs) {
    if (!changed.count(name)) {
      result.mean[name] = v;
      continue;
    }
    std::vector<double> acc(v.size(), 0.0);
    for (std::size_t s = 0; s < distinct; ++s) {
      const auto d = result.samples[s].at(name).data();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += d[k];
    }
    for (auto& a : acc) a /= static_cast<double>(distinct);
    result.mean[name] = Tensor(v.shape(), std::move(acc));
  }
  return result;
}

// ---------------------------------------------------------------- conditioning on a grid

GridDensity Scm::posterior_grid_1d(const std::string& target, const std::map<std::string, double>& evidence,
                                   double low, double high, std::size_t points) const {
  if (!(high > low) || points < 2) throw std::invalid_argument("posterior_grid_1d: bad grid");
  std::set<std::string> query{target};
  for (const auto& [name, v] : evidence) {
    if (name == target) throw std::invalid_argument("posterior_grid_1d: target also given as evidence");
    query.insert(name);
  }
  const auto closure = ancestral_closure(query);
  for (const auto& name : closure) {
    const auto& m = *node(name).mechanism;
    if (m.kind() == MechanismKind::Amortised) {
      throw std::invalid_argument("posterior_grid_1d: amortised node '" + name + "' is not supported");
    }
    if (m.dim() != 1) throw std::invalid_argument("posterior_grid_1d: node '" + name + "' is not scalar");
    if (!query.count(name)) {
      throw std::invalid_argument("posterior_grid_1d: unobserved ancestor '" + name +
                                  "' would need integration; add it as evidence");
    }
  }

  GridDensity out;
  out.grid.resize(points);
  for (std::size_t k = 0; k < points; ++k) {
    out.grid[k] = low + (high - low) * static_cast<double>(k) / static_cast<double>(points - 1);
  }
  Observation values;
  values[target] = Tensor(Shape{points, 1}, out.grid);
  for (const auto& [name, v] : evidence) values[name] = Tensor(Shape{points, 1}, v);

  std::vector<double> logp(points, 0.0);
  Rng unused(0);
  for (auto i : order_) {
    const auto& node = nodes_[i];
    if (!closure.count(node.name)) continue;
    const Context ctx = node.mechanism->kind() == MechanismKind::Constant ? std::nullopt : context(node.name, values);
    Tensor term;
    try {
      term = node.mechanism->objective(values.at(node.name), ctx, 1, unused);
    } catch (const DomainError&) {
      // Out-of-support grid points (e.g. past a doubly bounded range).
      std::vector<double> col(points);
      for (std::size_t k = 0; k < points; ++k) {
        try {
          const Tensor one = Tensor(Shape{1, 1}, std::vector<double>{values.at(node.name).data()[k]});
          Context c1;
          if (ctx) c1 = slice(*ctx, 0, k, k + 1).detach();
          col[k] = node.mechanism->objective(one, c1, 1, unused).item();
        } catch (const DomainError&) {
          col[k] = -std::numeric_limits<double>::infinity();
        }
      }
      term = Tensor(Shape{points, 1}, std::move(col));
    }
    for (std::size_t k = 0; k < points; ++k) logp[k] += term.data()[k];
  }

  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logp) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw std::domain_error("posterior_grid_1d: evidence has zero density on the grid");
  out.density.resize(points);
  for (std::size_t k = 0; k < points; ++k) out.density[k] = std::exp(logp[k] - mx);
  const double h = (high - low) / static_cast<double>(points - 1);
  double z = 0.0;
  for (std::size_t k = 0; k + 1 < points; ++k) z += 0.5 * h * (out.density[k] + out.density[k + 1]);
  for (auto& d : out.density) d /= z;
  return out;
}

// ---------------------------------------------------------------- parameters

void Scm::named_parameters(std::vector<NamedTensor>& out) const {
  for (const auto& n : nodes_) n.mechanism->named_parameters(out, n.name + ".");
}

void Scm::named_buffers(std::vector<NamedTensor>& out) const {
  for (const auto& n : nodes_) n.mechanism->named_buffers(out, n.name + ".");
}

std::vector<NamedTensor> Scm::parameters_of(const std::string& name) const {
  std::vector<NamedTensor> out;
  node(name).mechanism->named_parameters(out, name + ".");
  return out;
}

// ---------------------------------------------------------------- batches

Observation select_rows(const Observation& obs, std::size_t begin, std::size_t end) {
  Observation out;
  for (const auto& [name, v] : obs) out[name] = slice(v, 0, begin, end).detach();
  return out;
}

Observation select_rows(const Observation& obs, std::span<const std::size_t> rows) {
  Observation out;
  for (const auto& [name, v] : obs) {
    const std::size_t c = v.cols();
    std::vector<double> data;
    data.reserve(rows.size() * c);
    for (auto r : rows) {
      if (r >= v.rows()) throw std::out_of_range("select_rows: row index out of range");
      const auto src = v.data().subspan(r * c, c);
      data.insert(data.end(), src.begin(), src.end());
    }
    out[name] = Tensor(Shape{rows.size(), c}, std::move(data));
  }
  return out;
}

}  // namespace dscm
