#include "arvsr/core/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/rng.hpp"

namespace arvsr {

namespace {

thread_local bool g_grad_enabled = true;

void round_to(DType dtype, std::vector<double>& values) {
  if (dtype != DType::kF32) return;
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

std::shared_ptr<detail::Node> make_leaf(Shape shape, DType dtype, std::vector<double> values) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("element count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
  }
  round_to(dtype, values);
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError("non-finite value in tensor construction");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->dtype = dtype;
  node->value = std::move(values);
  return node;
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

DType promote(DType a, DType b) {
  return (a == DType::kF64 || b == DType::kF64) ? DType::kF64 : DType::kF32;
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  const int64_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), dtype, std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  const int64_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), dtype, std::vector<double>(n, value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, DType dtype) {
  return Tensor(make_leaf(std::move(shape), dtype, std::move(values)));
}

Tensor Tensor::scalar(double value, DType dtype) { return from_data({}, {value}, dtype); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, DType dtype) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = stddev * rng.normal();
  return from_data(std::move(shape), std::move(v), dtype);
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, DType dtype) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(v), dtype);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("use of undefined tensor");
  return node_->shape;
}

int64_t Tensor::size(int d) const {
  const int r = rank();
  const int idx = d < 0 ? d + r : d;
  if (idx < 0 || idx >= r) throw ShapeError("dimension " + std::to_string(d) + " out of range for rank " + std::to_string(r));
  return shape()[idx];
}

int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  if (!node_) throw ShapeError("use of undefined tensor");
  return node_->dtype;
}

std::span<const double> Tensor::data() const {
  if (!node_) throw ShapeError("use of undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ShapeError("use of undefined tensor");
  if (!node_->is_leaf()) throw Error("mutable_data() on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_) throw ShapeError("use of undefined tensor");
  if (!node_->is_leaf()) throw Error("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw Error("tensor has no gradient");
  return node_->grad;
}

Tensor Tensor::grad_tensor() const {
  if (!has_grad()) return Tensor::zeros(shape(), DType::kF64);
  return from_data(shape(), node_->grad, DType::kF64);
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a single-element tensor, got " + shape_str(shape()));
  GradTape tape = GradTape::record(*this);
  const double one = 1.0;
  tape.run(std::span<const double>(&one, 1));
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape();
  node->dtype = dtype();
  node->value = node_->value;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad && node_->is_leaf();
  return t;
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return *this;
  std::vector<double> v = node_->value;
  return detail::make_result(shape(), target, std::move(v), "to", {*this}, [](detail::Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

GradTape GradTape::record(const Tensor& root) {
  GradTape tape;
  tape.root_ = root.node_ptr();
  std::unordered_set<detail::Node*> seen;
  // Iterative post-order DFS; recursion depth would scale with graph length.
  std::vector<std::pair<detail::Node*, size_t>> stack;
  if (root.requires_grad()) stack.emplace_back(root.node_ptr().get(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next == 0 && !seen.insert(node).second) {
      stack.pop_back();
      continue;
    }
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void GradTape::run(std::span<const double> seed) {
  if (order_.empty()) return;
  detail::Node* root = root_.get();
  auto& g = root->grad_buffer();
  if (seed.size() != g.size()) throw ShapeError("gradient seed size mismatch");
  for (size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) {
      node->backward(*node);
    }
  }
  // Interior gradients and history are released; leaf gradients persist.
  for (detail::Node* node : order_) {
    if (!node->is_leaf()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor detail::make_result(Shape shape, DType dtype, std::vector<double> values, const char* op,
                           std::vector<Tensor> inputs, BackwardFn backward) {
  round_to(dtype, values);
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite output from ") + op);
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->dtype = dtype;
  node->value = std::move(values);
  node->op = op;
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->backward = std::move(backward);
      node->inputs.reserve(inputs.size());
      for (const Tensor& t : inputs) node->inputs.push_back(t.node_ptr());
    }
  }
  return Tensor(std::move(node));
}

}  // namespace arvsr
