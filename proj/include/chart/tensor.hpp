#pragma once

// Dense float64 tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Operations on tensors that
// require gradients record a node holding the inputs and a backward rule;
// Graph orders those nodes and runs the backward sweep.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace chart {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

struct Node {
  std::string_view op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads the output's grad and accumulates into the inputs' grads.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves

  // Grad buffer, zero-allocated on first use.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; intended for leaves (parameter updates, init).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Runs reverse-mode differentiation from this scalar.
  void backward() const;

  // Same values, no history, no gradient.
  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Topologically ordered view of the recorded computation behind a tensor.
class Graph {
 public:
  explicit Graph(const Tensor& root);

  // Non-leaf tensors in topological order: every node's inputs precede it.
  const std::vector<TensorImpl*>& order() const { return order_; }
  std::vector<std::string_view> ops() const;
  std::size_t size() const { return order_.size(); }

  // Seeds d(root)/d(root) = 1 and propagates. Leaf gradients accumulate.
  void backward();

 private:
  Tensor root_;
  std::vector<TensorImpl*> order_;
};

// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Primitive operations. All shapes are checked; violations raise InputError.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// Adds a vector of length shape[axis] along that axis.
Tensor add_broadcast(const Tensor& x, const Tensor& bias, std::size_t axis);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
// Rows of a rank-2 table (embedding lookup / row selection).
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduces one axis, dropping it from the shape.
Tensor sum_axis(const Tensor& x, std::size_t axis);

Tensor softmax(const Tensor& x, std::size_t axis);
// Row softmax of a rank-2 tensor restricted to entries with keep != 0.
// Fully masked rows produce zeros.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t axis,
                  double epsilon = 1e-5);

enum class Activation { gelu, relu, sigmoid, tanh };
Tensor pointwise(const Tensor& x, Activation kind);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

// x: [C_in, H, W], kernel: [C_out, C_in, k, k], bias: [C_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding);
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

// x: [C, H, W]; points: [P, 2] as (x, y) = (column, row) in grid coordinates.
// Coordinates are clamped to [0, W-1] x [0, H-1]. Returns [P, C].
Tensor bilinear_sample(const Tensor& x, const Tensor& points);

// Multi-head attention of each grid location over its window x window
// neighbourhood (clipped at the borders). q, k, v: [H*W, C] row-major tokens.
Tensor local_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t height,
                       std::size_t width, std::size_t window, std::size_t heads);

// Weighted mean negative log-likelihood of integer targets under row softmax.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const double> class_weights = {});

// Elementwise sigmoid focal loss of logits against {0,1} targets.
Tensor sigmoid_focal(const Tensor& logits, std::span<const double> targets, double alpha,
                     double gamma);

}  // namespace chart
