// Dense float64 tensors with reverse-mode automatic differentiation.
//
// Every operation on tracked inputs records a node in a dynamic graph. Backward
// rules are written in terms of the same tensor operations, so running
// backward() with create_graph = true yields gradients that are themselves
// differentiable (gradients of gradients).
//
// Nodes carry a monotonically increasing sequence number; processing nodes in
// decreasing sequence order is a valid reverse topological order because an
// operation is always recorded after its inputs.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaseg {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node;

class Tensor {
 public:
  Tensor() = default;  // undefined; see defined()

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);
  // A tracked leaf: gradients can be requested with respect to it.
  static Tensor leaf(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t size() const { return data_->size(); }

  std::span<const double> data() const { return *data_; }
  double at(std::size_t flat_index) const { return (*data_)[flat_index]; }
  double item() const;
  std::vector<double> to_vector() const { return *data_; }

  bool tracked() const { return node_ != nullptr; }
  const std::shared_ptr<Node>& node() const { return node_; }

  // Same values, no graph node. Shares the underlying buffer.
  Tensor detach() const;
  // Fresh leaf with the same values; used to start a new graph.
  Tensor as_leaf() const;

  bool defined() const { return data_ != nullptr; }
  const std::shared_ptr<const std::vector<double>>& buffer() const {
    return data_;
  }

 private:
  friend Tensor make_tensor(Shape, std::shared_ptr<const std::vector<double>>,
                            std::shared_ptr<Node>);
  std::shared_ptr<const std::vector<double>> data_;
  Shape shape_;
  std::shared_ptr<Node> node_;
};

// Backward rule: given the output gradient, the output itself (tracked when
// the graph is being extended) and a mask of which inputs need a gradient,
// return one gradient per input. Slots whose input is not needed may be left
// undefined.
using BackwardFn = std::function<std::vector<Tensor>(
    const Tensor& grad_out, const Tensor& out, const std::vector<bool>& need)>;

struct Node : std::enable_shared_from_this<Node> {
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<Tensor> inputs;
  std::shared_ptr<const std::vector<double>> out_data;
  Shape out_shape;
  BackwardFn backward;
};

// Records an operation result. When grad mode is off, or no input is tracked,
// the result is a plain constant.
Tensor record(Shape shape, std::vector<double> values, const char* op,
              std::vector<Tensor> inputs, BackwardFn backward);
Tensor record_buffer(Shape shape, std::shared_ptr<const std::vector<double>> data,
                     const char* op, std::vector<Tensor> inputs,
                     BackwardFn backward);

// Thread-local switch controlling whether operations build graph nodes.
class GradMode {
 public:
  static bool enabled();
  static void set(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct GradientResult {
  std::vector<Tensor> grads;  // one per requested tensor, same shape
  std::vector<bool> reached;  // false when the tensor is not on the loss graph
  bool all_reached() const;
};

// Reverse-mode gradients of a scalar loss. With create_graph the returned
// gradients are tracked and can be differentiated again.
GradientResult backward(const Tensor& loss, std::span<const Tensor> wrt,
                        bool create_graph = false);

// ---------------------------------------------------------------------------
// Primitive operations.

Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& x);
Tensor operator*(double s, const Tensor& x);
Tensor operator*(const Tensor& x, double s);

Tensor exp(const Tensor& x);
// Natural log with the argument guarded by kLogEpsilon.
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);

inline constexpr double kLogEpsilon = 1e-12;

Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
// Sums x down to `shape`, the inverse of broadcasting.
Tensor sum_to(const Tensor& x, const Shape& shape);

Tensor matmul(const Tensor& a, const Tensor& b);  // 2-D only
// op(a)·op(b), op = transpose when the flag is set.
Tensor matmul(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b);
Tensor transpose(const Tensor& x);                // 2-D only

// Patch extraction for convolution: C×H×W -> (C·k·k)×(Ho·Wo).
Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride,
              std::size_t pad);
// Adjoint of im2col: scatters-and-sums columns back into C×H×W.
Tensor col2im(const Tensor& cols, std::size_t channels, std::size_t height,
              std::size_t width, std::size_t kernel, std::size_t stride,
              std::size_t pad);

// Nearest-neighbour ×2 upsampling of C×H×W and its adjoint 2×2 sum pooling.
Tensor upsample2x(const Tensor& x);
Tensor sum_pool2x(const Tensor& x);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length);
// Adjoint of slice: places x at [start, start + len) of a zero tensor whose
// extent along `axis` is `full_length`.
Tensor pad_slice(const Tensor& x, std::size_t axis, std::size_t start,
                 std::size_t full_length);

// Column gather on a 2-D tensor and its adjoint.
Tensor select_columns(const Tensor& x, std::span<const std::size_t> columns);
Tensor scatter_columns(const Tensor& x, std::span<const std::size_t> columns,
                       std::size_t total_columns);

// ---------------------------------------------------------------------------
// Composite operations (differentiable through their primitives).

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::span<const std::size_t> axes, bool keepdim);
Tensor mean(const Tensor& x, std::span<const std::size_t> axes, bool keepdim);
// Untracked per-slice maximum along `axis` (kept as a size-1 dimension).
Tensor max_along(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor square(const Tensor& x);

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
};
// x: C×H×W, weight: O×C×k×k, bias: O (or undefined for none).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dSpec spec = {});
Tensor avg_pool2x(const Tensor& x);
// Per-channel normalisation over the spatial extent of C×H×W.
Tensor instance_norm(const Tensor& x, double epsilon = 1e-5);
// C×H×W -> C×1×1.
Tensor global_avg_pool(const Tensor& x);

}  // namespace metaseg
