#include "metaseg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace metaseg {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) +
                   " and " + to_string(b));
}

[[noreturn]] void shape_fail(const char* op, const std::string& what,
                             const Shape& a) {
  throw ShapeError(std::string(op) + ": " + what + ", got shape " +
                   to_string(a));
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(op) + ": undefined tensor");
  }
}

// Strides of `in` laid against the dimensions of `out` (right-aligned);
// broadcast dimensions get stride 0.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t ii = in.size() - 1 - i;
    const std::size_t oi = out.size() - 1 - i;
    if (in[ii] != 1) strides[oi] = stride;
    stride *= in[ii];
  }
  return strides;
}

// Calls fn(out_index, a_index, b_index) over every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& fn) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  if (out.empty()) {
    fn(0, 0, 0);
    return;
  }
  const std::size_t nd = out.size();
  const std::size_t inner = out[nd - 1];
  const std::size_t ia_step = sa[nd - 1];
  const std::size_t ib_step = sb[nd - 1];
  std::vector<std::size_t> counter(nd, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    std::size_t a = ia;
    std::size_t b = ib;
    for (std::size_t j = 0; j < inner; ++j) {
      fn(o + j, a, b);
      a += ia_step;
      b += ib_step;
    }
    for (std::size_t d = nd - 1; d-- > 0;) {
      ++counter[d];
      ia += sa[d];
      ib += sb[d];
      if (counter[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      counter[d] = 0;
    }
  }
}

template <class F>
std::vector<double> broadcast_binary(const char* op, const Tensor& a,
                                     const Tensor& b, Shape& out_shape, F f) {
  require_defined(op, a);
  require_defined(op, b);
  if (a.shape() == b.shape()) {
    out_shape = a.shape();
    std::vector<double> out(a.size());
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[i]);
    return out;
  }
  try {
    out_shape = broadcast_shapes(a.shape(), b.shape());
  } catch (const ShapeError&) {
    shape_fail(op, a.shape(), b.shape());
  }
  std::vector<double> out(numel(out_shape));
  const auto da = a.data();
  const auto db = b.data();
  if (b.size() == 1) {
    const double bv = db[0];
    if (a.size() == out.size()) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], bv);
      return out;
    }
  }
  if (a.size() == 1) {
    const double av = da[0];
    if (b.size() == out.size()) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av, db[i]);
      return out;
    }
  }
  for_each_broadcast(out_shape, aligned_strides(a.shape(), out_shape),
                     aligned_strides(b.shape(), out_shape),
                     [&](std::size_t o, std::size_t ia, std::size_t ib) {
                       out[o] = f(da[ia], db[ib]);
                     });
  return out;
}

template <class F>
std::vector<double> map_values(const Tensor& x, F f) {
  std::vector<double> out(x.size());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(d[i]);
  return out;
}

Tensor constant_like(const Tensor& x, std::vector<double> values) {
  return Tensor::from(x.shape(), std::move(values));
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor make_tensor(Shape shape, std::shared_ptr<const std::vector<double>> data,
                   std::shared_ptr<Node> node) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + to_string(shape) + " needs " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  return make_tensor(
      std::move(shape),
      std::make_shared<const std::vector<double>>(std::move(values)), nullptr);
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  auto node = std::make_shared<Node>();
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  node->out_data = t.data_;
  node->out_shape = t.shape_;
  t.node_ = std::move(node);
  return t;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= shape_.size()) {
    throw ShapeError("Tensor::dim: axis " + std::to_string(i) +
                     " out of range for shape " + to_string(shape_));
  }
  return shape_[i];
}

double Tensor::item() const {
  if (!defined() || data_->size() != 1) {
    throw ShapeError("Tensor::item: expected a single element, got shape " +
                     (defined() ? to_string(shape_) : std::string("<undefined>")));
  }
  return (*data_)[0];
}

Tensor Tensor::detach() const { return make_tensor(shape_, data_, nullptr); }

Tensor Tensor::as_leaf() const {
  Tensor t = detach();
  auto node = std::make_shared<Node>();
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  node->out_data = t.data_;
  node->out_shape = t.shape_;
  t.node_ = std::move(node);
  return t;
}

bool GradMode::enabled() { return t_grad_enabled; }
void GradMode::set(bool on) { t_grad_enabled = on; }

Tensor record(Shape shape, std::vector<double> values, const char* op,
              std::vector<Tensor> inputs, BackwardFn backward_fn) {
  return record_buffer(
      std::move(shape),
      std::make_shared<const std::vector<double>>(std::move(values)), op,
      std::move(inputs), std::move(backward_fn));
}

Tensor record_buffer(Shape shape, std::shared_ptr<const std::vector<double>> data,
                     const char* op, std::vector<Tensor> inputs,
                     BackwardFn backward_fn) {
  if (data->size() != numel(shape)) {
    throw ShapeError(std::string(op) + ": produced " +
                     std::to_string(data->size()) + " values for shape " +
                     to_string(shape));
  }
  const bool any_tracked =
      std::any_of(inputs.begin(), inputs.end(),
                  [](const Tensor& t) { return t.tracked(); });
  if (!GradMode::enabled() || !any_tracked) {
    return make_tensor(std::move(shape), std::move(data), nullptr);
  }
  auto node = std::make_shared<Node>();
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  node->op = op;
  node->inputs = std::move(inputs);
  node->out_data = data;
  node->out_shape = shape;
  node->backward = std::move(backward_fn);
  return make_tensor(std::move(shape), std::move(data), std::move(node));
}

bool GradientResult::all_reached() const {
  return std::all_of(reached.begin(), reached.end(), [](bool b) { return b; });
}

GradientResult backward(const Tensor& loss, std::span<const Tensor> wrt,
                        bool create_graph) {
  require_defined("backward", loss);
  if (loss.size() != 1) {
    shape_fail("backward", "loss must be a scalar", loss.shape());
  }
  if (!loss.tracked()) {
    throw std::invalid_argument("backward: loss is not attached to a graph");
  }

  std::unordered_set<const Node*> targets;
  for (const auto& t : wrt) {
    if (t.tracked()) targets.insert(t.node().get());
  }

  // Collect the reachable subgraph.
  std::vector<Node*> nodes;
  {
    std::unordered_set<const Node*> seen;
    std::vector<Node*> stack{loss.node().get()};
    seen.insert(stack.back());
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      nodes.push_back(n);
      for (const auto& in : n->inputs) {
        if (in.tracked() && seen.insert(in.node().get()).second) {
          stack.push_back(in.node().get());
        }
      }
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const Node* a, const Node* b) { return a->seq < b->seq; });

  // A node matters only if some target is reachable from it.
  std::unordered_map<const Node*, bool> leads_to_target;
  leads_to_target.reserve(nodes.size());
  for (const Node* n : nodes) {
    bool leads = targets.contains(n);
    for (const auto& in : n->inputs) {
      if (leads) break;
      if (in.tracked()) leads = leads_to_target[in.node().get()];
    }
    leads_to_target[n] = leads;
  }

  std::optional<NoGradGuard> no_grad;
  if (!create_graph) no_grad.emplace();
  const bool previous_mode = GradMode::enabled();
  if (create_graph) GradMode::set(true);

  std::unordered_map<const Node*, Tensor> grads;
  grads[loss.node().get()] = Tensor::full(loss.shape(), 1.0);

  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node* n = *it;
    if (!leads_to_target[n] || !n->backward) continue;
    auto git = grads.find(n);
    if (git == grads.end()) continue;
    const Tensor grad_out = git->second;
    if (!targets.contains(n)) grads.erase(git);

    std::vector<bool> need(n->inputs.size(), false);
    bool any = false;
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      const auto& in = n->inputs[i];
      need[i] = in.tracked() && leads_to_target[in.node().get()];
      any = any || need[i];
    }
    if (!any) continue;

    const Tensor self = make_tensor(
        n->out_shape, n->out_data,
        create_graph ? n->shared_from_this() : std::shared_ptr<Node>{});
    std::vector<Tensor> in_grads = n->backward(grad_out, self, need);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      if (!need[i] || i >= in_grads.size() || !in_grads[i].defined()) continue;
      const auto& in = n->inputs[i];
      if (in_grads[i].shape() != in.shape()) {
        throw ShapeError(std::string("backward of ") + n->op +
                         ": gradient shape " + to_string(in_grads[i].shape()) +
                         " does not match input shape " + to_string(in.shape()));
      }
      auto [slot, inserted] = grads.try_emplace(in.node().get(), in_grads[i]);
      if (!inserted) slot->second = add(slot->second, in_grads[i]);
    }
  }
  GradMode::set(previous_mode);

  GradientResult result;
  result.grads.reserve(wrt.size());
  result.reached.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto git = t.tracked() ? grads.find(t.node().get()) : grads.end();
    if (git != grads.end()) {
      result.grads.push_back(git->second);
      result.reached.push_back(true);
    } else {
      result.grads.push_back(Tensor::zeros(t.shape()));
      result.reached.push_back(false);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) shape_fail("broadcast", a, b);
    out[nd - 1 - i] = da == 1 ? db : da;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Shape shape;
  auto v = broadcast_binary("add", a, b, shape,
                            [](double x, double y) { return x + y; });
  return record(std::move(shape), std::move(v), "add", {a, b},
                [sa = a.shape(), sb = b.shape()](const Tensor& g, const Tensor&,
                                                 const std::vector<bool>& need) {
                  return std::vector<Tensor>{
                      need[0] ? sum_to(g, sa) : Tensor{},
                      need[1] ? sum_to(g, sb) : Tensor{}};
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape shape;
  auto v = broadcast_binary("sub", a, b, shape,
                            [](double x, double y) { return x - y; });
  return record(std::move(shape), std::move(v), "sub", {a, b},
                [sa = a.shape(), sb = b.shape()](const Tensor& g, const Tensor&,
                                                 const std::vector<bool>& need) {
                  return std::vector<Tensor>{
                      need[0] ? sum_to(g, sa) : Tensor{},
                      need[1] ? sum_to(neg(g), sb) : Tensor{}};
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape shape;
  auto v = broadcast_binary("mul", a, b, shape,
                            [](double x, double y) { return x * y; });
  return record(std::move(shape), std::move(v), "mul", {a, b},
                [a, b](const Tensor& g, const Tensor&,
                       const std::vector<bool>& need) {
                  return std::vector<Tensor>{
                      need[0] ? sum_to(mul(g, b), a.shape()) : Tensor{},
                      need[1] ? sum_to(mul(g, a), b.shape()) : Tensor{}};
                });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Shape shape;
  auto v = broadcast_binary("div", a, b, shape,
                            [](double x, double y) { return x / y; });
  return record(std::move(shape), std::move(v), "div", {a, b},
                [a, b](const Tensor& g, const Tensor& out,
                       const std::vector<bool>& need) {
                  return std::vector<Tensor>{
                      need[0] ? sum_to(div(g, b), a.shape()) : Tensor{},
                      need[1] ? sum_to(neg(div(mul(g, out), b)), b.shape())
                              : Tensor{}};
                });
}

Tensor neg(const Tensor& x) {
  require_defined("neg", x);
  return record(x.shape(), map_values(x, [](double v) { return -v; }), "neg",
                {x},
                [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{neg(g)};
                });
}

Tensor scale(const Tensor& x, double factor) {
  require_defined("scale", x);
  return record(x.shape(), map_values(x, [factor](double v) { return v * factor; }),
                "scale", {x},
                [factor](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{scale(g, factor)};
                });
}

Tensor add_scalar(const Tensor& x, double value) {
  require_defined("add_scalar", x);
  return record(x.shape(), map_values(x, [value](double v) { return v + value; }),
                "add_scalar", {x},
                [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{g};
                });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& x) { return neg(x); }
Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
Tensor operator*(const Tensor& x, double s) { return scale(x, s); }

Tensor exp(const Tensor& x) {
  require_defined("exp", x);
  return record(x.shape(), map_values(x, [](double v) { return std::exp(v); }),
                "exp", {x},
                [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                  return std::vector<Tensor>{mul(g, out)};
                });
}

Tensor log(const Tensor& x) {
  require_defined("log", x);
  return record(
      x.shape(), map_values(x, [](double v) { return std::log(v + kLogEpsilon); }),
      "log", {x},
      [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
        return std::vector<Tensor>{div(g, add_scalar(x, kLogEpsilon))};
      });
}

Tensor tanh(const Tensor& x) {
  require_defined("tanh", x);
  return record(x.shape(), map_values(x, [](double v) { return std::tanh(v); }),
                "tanh", {x},
                [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                  // d tanh = 1 - tanh²
                  return std::vector<Tensor>{
                      sub(g, mul(g, mul(out, out)))};
                });
}

Tensor sigmoid(const Tensor& x) {
  require_defined("sigmoid", x);
  return record(x.shape(), map_values(x, stable_sigmoid), "sigmoid", {x},
                [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                  return std::vector<Tensor>{
                      mul(g, sub(out, mul(out, out)))};
                });
}

Tensor softplus(const Tensor& x) {
  require_defined("softplus", x);
  return record(
      x.shape(),
      map_values(x,
                 [](double v) {
                   return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
                 }),
      "softplus", {x},
      [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, sigmoid(x))};
      });
}

Tensor relu(const Tensor& x) {
  require_defined("relu", x);
  return record(x.shape(), map_values(x, [](double v) { return v > 0 ? v : 0.0; }),
                "relu", {x},
                [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  const Tensor mask = constant_like(
                      x, map_values(x, [](double v) { return v > 0 ? 1.0 : 0.0; }));
                  return std::vector<Tensor>{mul(g, mask)};
                });
}

Tensor sqrt(const Tensor& x) {
  require_defined("sqrt", x);
  return record(x.shape(), map_values(x, [](double v) { return std::sqrt(v); }),
                "sqrt", {x},
                [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                  return std::vector<Tensor>{div(scale(g, 0.5), out)};
                });
}

Tensor abs(const Tensor& x) {
  require_defined("abs", x);
  return record(x.shape(), map_values(x, [](double v) { return std::abs(v); }),
                "abs", {x},
                [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  const Tensor sign = constant_like(x, map_values(x, [](double v) {
                                                      return v > 0 ? 1.0
                                                             : v < 0 ? -1.0
                                                                     : 0.0;
                                                    }));
                  return std::vector<Tensor>{mul(g, sign)};
                });
}

Tensor sin(const Tensor& x) {
  require_defined("sin", x);
  return record(x.shape(), map_values(x, [](double v) { return std::sin(v); }),
                "sin", {x},
                [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{mul(g, cos(x))};
                });
}

Tensor cos(const Tensor& x) {
  require_defined("cos", x);
  return record(x.shape(), map_values(x, [](double v) { return std::cos(v); }),
                "cos", {x},
                [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{neg(mul(g, sin(x)))};
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined("reshape", x);
  if (numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  if (shape == x.shape()) return x;
  // Shares the input buffer.
  return record_buffer(std::move(shape), x.buffer(), "reshape", {x},
                [in_shape = x.shape()](const Tensor& g, const Tensor&,
                                       const std::vector<bool>&) {
                  return std::vector<Tensor>{reshape(g, in_shape)};
                });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  require_defined("broadcast_to", x);
  if (x.shape() == shape) return x;
  if (broadcast_shapes(x.shape(), shape) != shape) {
    shape_fail("broadcast_to", x.shape(), shape);
  }
  std::vector<double> out(numel(shape));
  const auto d = x.data();
  const auto sx = aligned_strides(x.shape(), shape);
  for_each_broadcast(shape, sx, sx,
                     [&](std::size_t o, std::size_t i, std::size_t) { out[o] = d[i]; });
  return record(shape, std::move(out), "broadcast_to", {x},
                [in_shape = x.shape()](const Tensor& g, const Tensor&,
                                       const std::vector<bool>&) {
                  return std::vector<Tensor>{sum_to(g, in_shape)};
                });
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  require_defined("sum_to", x);
  if (x.shape() == shape) return x;
  if (broadcast_shapes(shape, x.shape()) != x.shape()) {
    shape_fail("sum_to", x.shape(), shape);
  }
  std::vector<double> out(numel(shape), 0.0);
  const auto d = x.data();
  const auto st = aligned_strides(shape, x.shape());
  for_each_broadcast(x.shape(), st, st,
                     [&](std::size_t i, std::size_t o, std::size_t) { out[o] += d[i]; });
  return record(shape, std::move(out), "sum_to", {x},
                [in_shape = x.shape()](const Tensor& g, const Tensor&,
                                       const std::vector<bool>&) {
                  return std::vector<Tensor>{broadcast_to(g, in_shape)};
                });
}

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul(a, false, b, false); }

// op(A)·op(B) with op the identity or the transpose. The backward rules use
// the flags instead of materialising transposed copies.
Tensor matmul(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.ndim() != 2 || b.ndim() != 2) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) shape_fail("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n);
  const auto ar = static_cast<Eigen::Index>(a.dim(0)), ac = static_cast<Eigen::Index>(a.dim(1));
  const auto br = static_cast<Eigen::Index>(b.dim(0)), bc = static_cast<Eigen::Index>(b.dim(1));
  Eigen::Map<const RowMatrix> ma(a.data().data(), ar, ac);
  Eigen::Map<const RowMatrix> mb(b.data().data(), br, bc);
  Eigen::Map<RowMatrix> mo(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (!trans_a && !trans_b) {
    mo.noalias() = ma * mb;
  } else if (!trans_a) {
    mo.noalias() = ma * mb.transpose();
  } else if (!trans_b) {
    mo.noalias() = ma.transpose() * mb;
  } else {
    mo.noalias() = ma.transpose() * mb.transpose();
  }
  return record({m, n}, std::move(out), "matmul", {a, b},
                [a, b, trans_a, trans_b](const Tensor& g, const Tensor&,
                                         const std::vector<bool>& need) {
                  Tensor ga, gb;
                  if (need[0]) {
                    ga = trans_a ? matmul(b, trans_b, g, true) : matmul(g, false, b, !trans_b);
                  }
                  if (need[1]) {
                    gb = trans_b ? matmul(g, true, a, trans_a) : matmul(a, !trans_a, g, false);
                  }
                  return std::vector<Tensor>{ga, gb};
                });
}

Tensor transpose(const Tensor& x) {
  require_defined("transpose", x);
  if (x.ndim() != 2) shape_fail("transpose", "expected a 2-D tensor", x.shape());
  const auto r = static_cast<Eigen::Index>(x.dim(0));
  const auto c = static_cast<Eigen::Index>(x.dim(1));
  std::vector<double> out(x.size());
  Eigen::Map<const RowMatrix> mx(x.data().data(), r, c);
  Eigen::Map<RowMatrix> mo(out.data(), c, r);
  mo = mx.transpose();
  return record({x.dim(1), x.dim(0)}, std::move(out), "transpose", {x},
                [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{transpose(g)};
                });
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
};

ConvGeometry conv_geometry(const char* op, std::size_t c, std::size_t h,
                           std::size_t w, std::size_t k, std::size_t s,
                           std::size_t p) {
  if (k == 0 || s == 0 || h + 2 * p < k || w + 2 * p < k) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) +
                     " stride " + std::to_string(s) + " pad " +
                     std::to_string(p) + " invalid for input " +
                     to_string({c, h, w}));
  }
  return {c, h, w, k, s, p, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1};
}

}  // namespace

Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride,
              std::size_t pad) {
  require_defined("im2col", x);
  if (x.ndim() != 3) shape_fail("im2col", "expected C×H×W", x.shape());
  const auto g = conv_geometry("im2col", x.dim(0), x.dim(1), x.dim(2), kernel,
                               stride, pad);
  const std::size_t cols = g.out_h * g.out_w;
  std::vector<double> out(g.channels * kernel * kernel * cols, 0.0);
  const auto d = x.data();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        double* row = out.data() + ((c * kernel + ky) * kernel + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          const double* src = d.data() + (c * g.height + iy) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            row[oy * g.out_w + ox] = src[ix];
          }
        }
      }
    }
  }
  return record({g.channels * kernel * kernel, cols}, std::move(out), "im2col",
                {x},
                [g](const Tensor& grad, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{col2im(grad, g.channels, g.height,
                                                    g.width, g.kernel, g.stride,
                                                    g.pad)};
                });
}

Tensor col2im(const Tensor& cols, std::size_t channels, std::size_t height,
              std::size_t width, std::size_t kernel, std::size_t stride,
              std::size_t pad) {
  require_defined("col2im", cols);
  const auto g =
      conv_geometry("col2im", channels, height, width, kernel, stride, pad);
  const std::size_t n = g.out_h * g.out_w;
  if (cols.shape() != Shape{channels * kernel * kernel, n}) {
    shape_fail("col2im", cols.shape(), Shape{channels * kernel * kernel, n});
  }
  std::vector<double> out(channels * height * width, 0.0);
  const auto d = cols.data();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const double* row = d.data() + ((c * kernel + ky) * kernel + kx) * n;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          double* dst = out.data() + (c * height + iy) * width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            dst[ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
  return record({channels, height, width}, std::move(out), "col2im", {cols},
                [g](const Tensor& grad, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{
                      im2col(grad, g.kernel, g.stride, g.pad)};
                });
}

Tensor upsample2x(const Tensor& x) {
  require_defined("upsample2x", x);
  if (x.ndim() != 3) shape_fail("upsample2x", "expected C×H×W", x.shape());
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(c * 4 * h * w);
  const auto d = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      const double* src = d.data() + (ch * h + y / 2) * w;
      double* dst = out.data() + (ch * 2 * h + y) * 2 * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  }
  return record({c, 2 * h, 2 * w}, std::move(out), "upsample2x", {x},
                [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{sum_pool2x(g)};
                });
}

Tensor sum_pool2x(const Tensor& x) {
  require_defined("sum_pool2x", x);
  if (x.ndim() != 3 || x.dim(1) % 2 || x.dim(2) % 2) {
    shape_fail("sum_pool2x", "expected C×H×W with even H and W", x.shape());
  }
  const std::size_t c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  std::vector<double> out(c * h * w, 0.0);
  const auto d = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      const double* src = d.data() + (ch * 2 * h + y) * 2 * w;
      double* dst = out.data() + (ch * h + y / 2) * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
    }
  }
  return record({c, h, w}, std::move(out), "sum_pool2x", {x},
                [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{upsample2x(g)};
                });
}

namespace {

std::pair<std::size_t, std::size_t> outer_inner(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

}  // namespace

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined("concat", p);
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_fail("concat", "axis out of range", first);
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) shape_fail("concat", first, probe);
    probe[axis] = first[axis];
    if (probe != first) shape_fail("concat", first, p.shape());
    out_shape[axis] += p.dim(axis);
  }
  const auto [outer, inner] = outer_inner(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  const std::size_t out_block = out_shape[axis] * inner;
  std::size_t offset = 0;
  std::vector<std::size_t> starts;
  for (const auto& p : parts) {
    starts.push_back(offset / inner);
    const std::size_t block = p.dim(axis) * inner;
    const auto d = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(d.data() + o * block, block, out.data() + o * out_block + offset);
    }
    offset += block;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) lengths.push_back(p.dim(axis));
  return record(out_shape, std::move(out), "concat", std::move(inputs),
                [axis, starts, lengths](const Tensor& g, const Tensor&,
                                        const std::vector<bool>& need) {
                  std::vector<Tensor> grads(starts.size());
                  for (std::size_t i = 0; i < starts.size(); ++i) {
                    if (need[i]) grads[i] = slice(g, axis, starts[i], lengths[i]);
                  }
                  return grads;
                });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  require_defined("slice", x);
  if (axis >= x.ndim() || start + length > x.dim(axis)) {
    shape_fail("slice",
               "range [" + std::to_string(start) + ", " +
                   std::to_string(start + length) + ") on axis " +
                   std::to_string(axis) + " out of bounds",
               x.shape());
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const auto [outer, inner] = outer_inner(x.shape(), axis);
  std::vector<double> out(numel(out_shape));
  const auto d = x.data();
  const std::size_t in_block = x.dim(axis) * inner;
  const std::size_t block = length * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(d.data() + o * in_block + start * inner, block,
                out.data() + o * block);
  }
  return record(std::move(out_shape), std::move(out), "slice", {x},
                [axis, start, full = x.dim(axis)](const Tensor& g, const Tensor&,
                                                  const std::vector<bool>&) {
                  return std::vector<Tensor>{pad_slice(g, axis, start, full)};
                });
}

Tensor pad_slice(const Tensor& x, std::size_t axis, std::size_t start,
                 std::size_t full_length) {
  require_defined("pad_slice", x);
  if (axis >= x.ndim() || start + x.dim(axis) > full_length) {
    shape_fail("pad_slice", "slice does not fit in target extent", x.shape());
  }
  Shape out_shape = x.shape();
  out_shape[axis] = full_length;
  const auto [outer, inner] = outer_inner(x.shape(), axis);
  std::vector<double> out(numel(out_shape), 0.0);
  const auto d = x.data();
  const std::size_t block = x.dim(axis) * inner;
  const std::size_t out_block = full_length * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(d.data() + o * block, block,
                out.data() + o * out_block + start * inner);
  }
  return record(std::move(out_shape), std::move(out), "pad_slice", {x},
                [axis, start, len = x.dim(axis)](const Tensor& g, const Tensor&,
                                                 const std::vector<bool>&) {
                  return std::vector<Tensor>{slice(g, axis, start, len)};
                });
}

Tensor select_columns(const Tensor& x, std::span<const std::size_t> columns) {
  require_defined("select_columns", x);
  if (x.ndim() != 2) shape_fail("select_columns", "expected a 2-D tensor", x.shape());
  const std::size_t rows = x.dim(0), n = x.dim(1), m = columns.size();
  for (auto c : columns) {
    if (c >= n) shape_fail("select_columns", "column index out of range", x.shape());
  }
  std::vector<double> out(rows * m);
  const auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = d[r * n + columns[j]];
  }
  auto cols = std::make_shared<const std::vector<std::size_t>>(columns.begin(),
                                                               columns.end());
  return record({rows, m}, std::move(out), "select_columns", {x},
                [cols, n](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{scatter_columns(g, *cols, n)};
                });
}

Tensor scatter_columns(const Tensor& x, std::span<const std::size_t> columns,
                       std::size_t total_columns) {
  require_defined("scatter_columns", x);
  if (x.ndim() != 2 || x.dim(1) != columns.size()) {
    shape_fail("scatter_columns", "expected rows × len(columns)", x.shape());
  }
  const std::size_t rows = x.dim(0), m = columns.size();
  std::vector<double> out(rows * total_columns, 0.0);
  const auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < m; ++j) {
      if (columns[j] >= total_columns) {
        shape_fail("scatter_columns", "column index out of range", x.shape());
      }
      out[r * total_columns + columns[j]] += d[r * m + j];
    }
  }
  auto cols = std::make_shared<const std::vector<std::size_t>>(columns.begin(),
                                                               columns.end());
  return record({rows, total_columns}, std::move(out), "scatter_columns", {x},
                [cols](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                  return std::vector<Tensor>{select_columns(g, *cols)};
                });
}

// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) { return sum_to(x, Shape{}); }

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, std::span<const std::size_t> axes, bool keepdim) {
  Shape kept = x.shape();
  for (auto a : axes) {
    if (a >= kept.size()) shape_fail("sum", "axis out of range", x.shape());
    kept[a] = 1;
  }
  Tensor r = sum_to(x, kept);
  if (keepdim) return r;
  Shape squeezed;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (std::find(axes.begin(), axes.end(), i) == axes.end()) {
      squeezed.push_back(kept[i]);
    }
  }
  return reshape(r, squeezed);
}

Tensor mean(const Tensor& x, std::span<const std::size_t> axes, bool keepdim) {
  std::size_t count = 1;
  for (auto a : axes) count *= x.dim(a);
  return scale(sum(x, axes, keepdim), 1.0 / static_cast<double>(count));
}

Tensor max_along(const Tensor& x, std::size_t axis) {
  require_defined("max_along", x);
  if (axis >= x.ndim()) shape_fail("max_along", "axis out of range", x.shape());
  const auto [outer, inner] = outer_inner(x.shape(), axis);
  const std::size_t len = x.dim(axis);
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  std::vector<double> out(outer * inner, -std::numeric_limits<double>::infinity());
  const auto d = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = d.data() + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] = std::max(dst[i], src[i]);
    }
  }
  return Tensor::from(std::move(out_shape), std::move(out));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Tensor e = exp(sub(x, max_along(x, axis)));
  const std::size_t axes[] = {axis};
  return div(e, sum(e, axes, true));
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const Tensor z = sub(x, max_along(x, axis));
  const std::size_t axes[] = {axis};
  return sub(z, log(sum(exp(z), axes, true)));
}

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dSpec spec) {
  require_defined("conv2d", x);
  require_defined("conv2d", weight);
  if (x.ndim() != 3 || weight.ndim() != 4 || weight.dim(1) != x.dim(0) ||
      weight.dim(2) != weight.dim(3)) {
    shape_fail("conv2d", x.shape(), weight.shape());
  }
  const std::size_t out_ch = weight.dim(0), in_ch = weight.dim(1),
                    k = weight.dim(2);
  if (bias.defined() && bias.shape() != Shape{out_ch}) {
    shape_fail("conv2d", weight.shape(), bias.shape());
  }
  const auto g = conv_geometry("conv2d", in_ch, x.dim(1), x.dim(2), k,
                               spec.stride, spec.pad);
  const Tensor cols = (k == 1 && spec.stride == 1 && spec.pad == 0)
                          ? reshape(x, {in_ch, g.height * g.width})
                          : im2col(x, k, spec.stride, spec.pad);
  Tensor y = matmul(reshape(weight, {out_ch, in_ch * k * k}), cols);
  if (bias.defined()) y = add(y, reshape(bias, {out_ch, 1}));
  return reshape(y, {out_ch, g.out_h, g.out_w});
}

Tensor avg_pool2x(const Tensor& x) { return scale(sum_pool2x(x), 0.25); }

Tensor instance_norm(const Tensor& x, double epsilon) {
  if (x.ndim() != 3) shape_fail("instance_norm", "expected C×H×W", x.shape());
  const Tensor flat = reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
  const std::size_t axes[] = {1};
  const Tensor centered = sub(flat, mean(flat, axes, true));
  const Tensor var = mean(square(centered), axes, true);
  return reshape(div(centered, sqrt(add_scalar(var, epsilon))), x.shape());
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.ndim() != 3) shape_fail("global_avg_pool", "expected C×H×W", x.shape());
  const std::size_t axes[] = {1, 2};
  return mean(x, axes, true);
}

}  // namespace metaseg
