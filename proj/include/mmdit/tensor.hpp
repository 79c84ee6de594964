#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmdit/errors.hpp"
#include "mmdit/random.hpp"

namespace mmdit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

// Receives the upstream gradient and one accumulator per input. Accumulators
// are null for inputs that do not require a gradient.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> grad_in)>;

// Dense row-major float64 tensor. Copies share storage: a Tensor is a handle
// onto a node of the reverse-mode tape. Results of differentiable ops keep
// their inputs alive until backward() releases the graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Write access for leaves only (parameters, optimizer updates, finite
  // differences). Throws if the tensor is the output of a recorded op.
  std::span<double> mutable_data();

  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Reverse pass from a single-element tensor. Interior nodes release their
  // closures afterwards; leaf gradients accumulate.
  void backward();

  // Same values, new leaf without history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Builds the output of a custom differentiable op. The tape entry is only
  // recorded when grad mode is on and some input requires a gradient.
  static Tensor from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                        BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const detail::Node& node() const;
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

// Disables tape recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mmdit
