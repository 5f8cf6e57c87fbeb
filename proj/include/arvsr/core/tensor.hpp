#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace arvsr {

class Rng;

// Storage precision of a tensor. Values are held as doubles; kF32 tensors are
// rounded to single precision after every operation, so their stored values
// are exactly the float results.
enum class DType : uint8_t { kF32 = 0, kF64 = 1 };

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
DType promote(DType a, DType b);

namespace detail {

struct Node {
  Shape shape;
  DType dtype = DType::kF32;
  std::vector<double> value;
  std::vector<double> grad;  // lazily allocated by accumulate()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::vector<double>& grad_buffer();
  bool is_leaf() const { return !backward; }
};

}  // namespace detail

// Dense row-major n-d array with optional reverse-mode gradient tracking.
// Copies share the underlying node; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, DType dtype = DType::kF32);
  static Tensor full(Shape shape, double value, DType dtype = DType::kF32);
  static Tensor from_data(Shape shape, std::vector<double> values, DType dtype = DType::kF32);
  static Tensor scalar(double value, DType dtype = DType::kF32);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, DType dtype = DType::kF32);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, DType dtype = DType::kF32);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  // Extent of dimension `d`; negative values count from the back.
  int64_t size(int d) const;
  int64_t numel() const;
  DType dtype() const;

  std::span<const double> data() const;
  // Write access for leaf tensors (parameters, fixtures); throws on interior nodes.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag = true);
  bool has_grad() const;
  std::span<const double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();
  // Reverse accumulation from a single-element tensor (seed 1).
  void backward() const;

  // Same values, no history.
  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  const detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Reverse-topological record of the graph reachable from a root. One step owns
// one tape; running it accumulates into every reachable requires_grad leaf.
class GradTape {
 public:
  static GradTape record(const Tensor& root);
  void run(std::span<const double> seed);
  size_t size() const { return order_.size(); }

 private:
  std::vector<detail::Node*> order_;  // inputs before outputs
  std::shared_ptr<detail::Node> root_;
};

bool grad_enabled();

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

using BackwardFn = std::function<void(Node&)>;

// Finalizes an op result: rounds to the output dtype, rejects non-finite
// values, and records inputs + backward when any input requires grad.
Tensor make_result(Shape shape, DType dtype, std::vector<double> values, const char* op,
                   std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace detail

}  // namespace arvsr
