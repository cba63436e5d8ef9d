#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a shared graph node. Values are immutable
// once produced by an op; only parameter tensors are updated in place through
// mutable_data(). Gradients accumulate additively until zero_grad().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace convbert {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Parameter updates only; never call on an op result that is still part of
  // a live graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  // Lazily allocated gradient buffer; empty span when the tensor does not
  // require grad.
  std::span<double> grad_sink() const;
  void zero_grad();

  // Stable identity of the underlying node, for deduplication.
  std::uintptr_t id() const { return reinterpret_cast<std::uintptr_t>(node_.get()); }

  // Copy of the values detached from any graph.
  Tensor detach() const;

  // Builds an op result. `inputs` become graph parents; `backward` receives
  // the gradient flowing into the result and must accumulate into the
  // inputs' grad_sink(). No graph is recorded when grad mode is off or no
  // input requires grad.
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::initializer_list<Tensor> inputs, BackwardFn backward);
  static Tensor make_result(Shape shape, std::vector<double> values,
                            const std::vector<Tensor>& inputs, BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& node() const;

  std::shared_ptr<detail::Node> node_;

  friend class GradTape;
};

// Reverse topological order of every node reachable from a root through
// nodes that require grad. Each node appears exactly once.
class GradTape {
 public:
  explicit GradTape(const Tensor& root);

  // Seeds d(root)/d(root) = 1 and runs every recorded backward closure in
  // reverse order. Interior-node gradients are reset first; leaf gradients
  // accumulate.
  void backward();
  void clear();

  std::size_t size() const { return order_.size(); }
  // Nodes in topological order (parents before children).
  std::vector<Tensor> nodes() const;

 private:
  Tensor root_;
  std::vector<std::shared_ptr<detail::Node>> order_;
};

// Scalar loss only; throws ContractError otherwise.
void backward(const Tensor& loss);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Counts multiply-adds (and per-element work of softmax, normalization and
// activations) executed by forward ops on this thread while alive.
class MaddCounter {
 public:
  MaddCounter();
  ~MaddCounter();
  MaddCounter(const MaddCounter&) = delete;
  MaddCounter& operator=(const MaddCounter&) = delete;

  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  MaddCounter* previous_;

  friend void record_madds(std::uint64_t n);
};

// Called by op implementations.
void record_madds(std::uint64_t n);

}  // namespace convbert
