#include "dscm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dscm {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
  node_->value.assign(numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                     std::to_string(numel(shape)) + " elements, got " +
                     std::to_string(data.size()));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return Tensor(Shape{0, 0});
  const std::size_t c = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * c);
  for (const auto& r : rows) {
    if (r.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor(Shape{rows.size(), c}, std::move(data));
}

Tensor Tensor::column(std::span<const double> values) {
  return Tensor(Shape{values.size(), 1}, std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data, std::string name) {
  Tensor t(std::move(shape), std::move(data), true);
  t.node_->name = std::move(name);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() needs a rank-2 tensor, got " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() needs a rank-2 tensor, got " + shape_str(shape()));
  return shape()[1];
}

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::operator()(std::size_t r, std::size_t c) const {
  return node_->value[r * cols() + c];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.clear(); }

const std::string& Tensor::name() const { return node_->name; }
void Tensor::set_name(std::string name) { node_->name = std::move(name); }

Tensor Tensor::detach() const {
  auto n = std::make_shared<detail::Node>();
  n->shape = node_->shape;
  n->value = node_->value;
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const { return detach(); }

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::make_result(Shape shape, std::vector<double> value,
                           std::vector<Tensor> inputs, detail::BackwardFn backward) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  const bool any = grad_mode_enabled() &&
                   std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.node_);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

void backward(const Tensor& loss) {
  auto* root = loss.node_.get();
  if (root->value.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(root->shape));
  }
  if (root->released) {
    throw std::logic_error("backward() called twice on the same graph");
  }
  if (!root->requires_grad) {
    throw std::logic_error("backward() on a loss that does not depend on any parameter");
  }

  // Iterative post-order DFS gives a topological order of interior nodes.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->backward && child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  root->grad.assign(1, 1.0);
  std::vector<std::span<double>> grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
    grads.clear();
    for (auto& in : node->inputs) {
      if (in->requires_grad) {
        if (in->grad.empty()) in->grad.assign(in->value.size(), 0.0);
        grads.emplace_back(in->grad);
      } else {
        grads.emplace_back();
      }
    }
    node->backward(node->grad, grads);
  }
  for (detail::Node* node : order) {
    node->inputs.clear();
    node->backward = nullptr;
    node->released = true;
    if (node != root) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

}  // namespace dscm
