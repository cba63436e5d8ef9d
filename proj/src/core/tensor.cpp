#include "convbert/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <atomic>
#include <cstdint>

#include "convbert/errors.hpp"

namespace convbert {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  Tensor::BackwardFn backward;
  std::uint64_t visit_stamp = 0;

  bool is_leaf() const { return !backward; }
};

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;
thread_local MaddCounter* t_counter = nullptr;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(shape_numel(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

detail::Node& Tensor::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node().value.size(); }

std::span<const double> Tensor::data() const { return node().value; }

std::span<double> Tensor::mutable_data() { return node().value; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node().value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  const Shape& s = shape();
  if (s.size() != 2) throw DimensionError("at(row, col) needs a 2-D tensor, got " + shape_string(s));
  return node().value[row * s[1] + col];
}

bool Tensor::requires_grad() const { return node().requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node().is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
  node().requires_grad = on;
}

bool Tensor::has_grad() const { return !node().grad.empty(); }

std::span<const double> Tensor::grad() const { return node().grad; }

std::span<double> Tensor::grad_sink() const {
  detail::Node& n = node();
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tensor::zero_grad() {
  detail::Node& n = node();
  std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node().value, false); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                           BackwardFn backward) {
  return make_result(std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(backward));
}

Tensor Tensor::make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                           BackwardFn backward) {
  Tensor out = from(std::move(shape), std::move(values), false);
  if (!t_grad_enabled) return out;
  bool any = false;
  for (const Tensor& t : inputs) {
    if (t.defined() && t.requires_grad()) any = true;
  }
  if (!any) return out;
  detail::Node& n = out.node();
  n.requires_grad = true;
  for (const Tensor& t : inputs) {
    if (t.defined() && t.requires_grad()) n.parents.push_back(t.node_);
  }
  n.backward = std::move(backward);
  return out;
}

GradTape::GradTape(const Tensor& root) : root_(root) {
  if (!root.defined()) throw ContractError("gradient tape root is undefined");
  if (!root.requires_grad()) return;
  // Iterative post-order DFS: a node is emitted after all of its parents.
  static std::atomic<std::uint64_t> next_stamp{0};
  const std::uint64_t stamp = ++next_stamp;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(root.node_, 0);
  root.node_->visit_stamp = stamp;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      std::shared_ptr<detail::Node> parent = node->parents[next++];
      if (parent->visit_stamp != stamp) {
        parent->visit_stamp = stamp;
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order_.push_back(std::move(node));
      stack.pop_back();
    }
  }
}

void GradTape::backward() {
  if (order_.empty()) throw ContractError("loss is not connected to any tensor that requires grad");
  for (auto& node : order_) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), 0.0);
  }
  detail::Node& root = *order_.back();
  if (root.grad.size() != root.value.size()) root.grad.assign(root.value.size(), 0.0);
  root.grad[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node& node = **it;
    if (!node.is_leaf()) node.backward(node.grad);
  }
}

void GradTape::clear() {
  order_.clear();
  root_ = Tensor();
}

std::vector<Tensor> GradTape::nodes() const {
  std::vector<Tensor> out;
  out.reserve(order_.size());
  for (const auto& n : order_) out.push_back(Tensor(n));
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  GradTape tape(loss);
  tape.backward();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

MaddCounter::MaddCounter() : previous_(t_counter) { t_counter = this; }

MaddCounter::~MaddCounter() { t_counter = previous_; }

void record_madds(std::uint64_t n) {
  for (MaddCounter* c = t_counter; c != nullptr; c = c->previous_) c->count_ += n;
}

}  // namespace convbert
