#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dscm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an argument lies outside the domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

struct Node;

/// Receives the upstream gradient and one writable span per input. Inputs
/// that do not require a gradient are handed an empty span.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::span<double>> grad_in)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool released = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major array of doubles that records operations for reverse-mode
/// differentiation. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double v);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor column(std::span<const double> values);
  static Tensor parameter(Shape shape, std::vector<double> data, std::string name);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator()(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  const std::string& name() const;
  void set_name(std::string name);

  /// Same values, no history.
  Tensor detach() const;
  /// Independent copy of the values, no history.
  Tensor clone() const;

  bool defined() const { return static_cast<bool>(node_); }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // Builds a result node for a differentiable operation. The node records
  // `inputs` only when at least one of them requires a gradient.
  static Tensor make_result(Shape shape, std::vector<double> value,
                            std::vector<Tensor> inputs,
                            detail::BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node);
  std::shared_ptr<detail::Node> node_;

  friend void backward(const Tensor& loss);
};

/// While alive, operations on this thread record no history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_mode_enabled();

/// Runs reverse-mode accumulation from a scalar loss. Gradients accumulate
/// into every reachable leaf that requires one; the recorded graph is then
/// released, so a second call on the same loss throws.
void backward(const Tensor& loss);

}  // namespace dscm

namespace dscm {

/// A tensor with a stable name, used to enumerate parameters and buffers.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace dscm
