#pragma once

// Define-by-run reverse-mode differentiation over dense Eigen matrices.
//
// A Tape owns an append-only list of nodes. Every primitive below evaluates
// eagerly, appends one node holding its output, and returns a Var handle.
// Gradients are obtained by sweeping the tape backwards from an objective
// (backward) or from an arbitrary output with a caller-supplied cotangent
// (vector_jacobian_product).

#include <rgm/tensor.hpp>

#include <algorithm>
#include <cstring>
#include <cmath>
#include <cstdint>
#include <deque>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rgm::ad {

using NodeId = std::size_t;

inline constexpr int kAllAxes = -1;

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  ScalarMul,
  Shift,
  Relu,
  Exp,
  Log,
  Sum,
  Mean,
  Softmax,
  LogSoftmax,
  Concat,
  Transpose,
  Slice,
  Broadcast,
  Sqrt,
  Div,
  Maximum,
  Reshape,
  SuffixSum,
};

constexpr std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::ScalarMul: return "scalar_mul";
    case Op::Shift: return "shift";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Concat: return "concat";
    case Op::Transpose: return "transpose";
    case Op::Slice: return "slice";
    case Op::Broadcast: return "broadcast";
    case Op::Sqrt: return "sqrt";
    case Op::Div: return "div";
    case Op::Maximum: return "maximum";
    case Op::Reshape: return "reshape";
    case Op::SuffixSum: return "suffix_sum";
  }
  return "unknown";
}

template <typename Scalar>
struct Node {
  Op op = Op::Leaf;
  std::vector<NodeId> inputs;
  Tensor<Scalar> value;
  bool differentiable = false;  // leaf marked variable, or depends on one
  int axis = kAllAxes;
  Index offset = 0;
  Index extent = 0;
  Index rows = 0;
  Index cols = 0;
  Scalar scalar{};
};

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, NodeId id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Tensor<Scalar>& value() const { return tape_->node(id_).value; }
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  [[nodiscard]] NodeId id() const { return id_; }
  [[nodiscard]] Tape<Scalar>* tape() const { return tape_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] Scalar item() const {
    if (rows() != 1 || cols() != 1) {
      throw ShapeError("item: expected [1x1], got " + shape_string(value()));
    }
    return value()(0, 0);
  }

 private:
  Tape<Scalar>* tape_ = nullptr;
  NodeId id_ = 0;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> log_softmax_rows(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    const Scalar lse = m + std::log((x.row(i).array() - m).exp().sum());
    y.row(i) = (x.row(i).array() - lse).matrix();
  }
  return y;
}

// Forward rule shared by recording and replay.
template <typename Scalar>
Tensor<Scalar> evaluate(const Node<Scalar>& n, const std::vector<const Tensor<Scalar>*>& in) {
  using T = Tensor<Scalar>;
  switch (n.op) {
    case Op::Leaf: return n.value;
    case Op::MatMul: return (*in[0]) * (*in[1]);
    case Op::Add: return *in[0] + *in[1];
    case Op::Sub: return *in[0] - *in[1];
    case Op::Mul: return in[0]->cwiseProduct(*in[1]);
    case Op::ScalarMul: return n.scalar * (*in[0]);
    case Op::Shift: return (in[0]->array() + n.scalar).matrix();
    case Op::Relu: return in[0]->cwiseMax(Scalar(0));
    case Op::Exp: return in[0]->array().exp().matrix();
    case Op::Log: return in[0]->array().log().matrix();
    case Op::Sum:
    case Op::Mean: {
      const T& x = *in[0];
      T y;
      Scalar count = 1;
      if (n.axis == kAllAxes) {
        y = T::Constant(1, 1, x.sum());
        count = static_cast<Scalar>(x.size());
      } else if (n.axis == 0) {
        y = x.colwise().sum();
        count = static_cast<Scalar>(x.rows());
      } else {
        y = x.rowwise().sum();
        count = static_cast<Scalar>(x.cols());
      }
      if (n.op == Op::Mean) y /= count;
      return y;
    }
    case Op::Softmax:
      if (n.axis == 1) return softmax_rows<Scalar>(*in[0]);
      return softmax_rows<Scalar>(in[0]->transpose()).transpose();
    case Op::LogSoftmax:
      if (n.axis == 1) return log_softmax_rows<Scalar>(*in[0]);
      return log_softmax_rows<Scalar>(in[0]->transpose()).transpose();
    case Op::Concat: {
      T y(n.rows, n.cols);
      Index at = 0;
      for (const T* part : in) {
        if (n.axis == 0) {
          y.middleRows(at, part->rows()) = *part;
          at += part->rows();
        } else {
          y.middleCols(at, part->cols()) = *part;
          at += part->cols();
        }
      }
      return y;
    }
    case Op::Transpose: return in[0]->transpose();
    case Op::Slice:
      if (n.axis == 0) return in[0]->middleRows(n.offset, n.extent);
      return in[0]->middleCols(n.offset, n.extent);
    case Op::Broadcast: {
      const T& x = *in[0];
      if (x.rows() == n.rows && x.cols() == n.cols) return x;
      if (x.rows() == 1 && x.cols() == 1) return T::Constant(n.rows, n.cols, x(0, 0));
      if (x.rows() == 1) return x.replicate(n.rows, 1);
      return x.replicate(1, n.cols);
    }
    case Op::Sqrt: return in[0]->array().sqrt().matrix();
    case Op::Div: return in[0]->cwiseQuotient(*in[1]);
    case Op::Maximum: return in[0]->cwiseMax(*in[1]);
    case Op::Reshape: return Eigen::Map<const T>(in[0]->data(), n.rows, n.cols);
    case Op::SuffixSum: {
      T y = *in[0];
      for (Index t = y.rows() - 2; t >= 0; --t) y.row(t) += y.row(t + 1);
      return y;
    }
  }
  throw std::logic_error("evaluate: unhandled op");
}

template <typename Scalar>
void accumulate(Tensor<Scalar>& slot, const Tensor<Scalar>& g) {
  if (slot.size() == 0) {
    slot = g;
  } else {
    slot += g;
  }
}

}  // namespace detail

template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable leaf (a parameter or any input we want gradients for).
  Var<Scalar> variable(Tensor<Scalar> value) { return push_leaf(std::move(value), true); }

  /// Leaf that never receives a gradient.
  Var<Scalar> constant(Tensor<Scalar> value) { return push_leaf(std::move(value), false); }

  Var<Scalar> constant(Index rows, Index cols, Scalar fill) {
    return constant(Tensor<Scalar>::Constant(rows, cols, fill));
  }

  Var<Scalar> record(Node<Scalar> node) {
    std::vector<const Tensor<Scalar>*> in;
    in.reserve(node.inputs.size());
    node.differentiable = false;
    for (NodeId id : node.inputs) {
      in.push_back(&nodes_.at(id).value);
      node.differentiable = node.differentiable || nodes_[id].differentiable;
    }
    node.value = detail::evaluate(node, in);
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  [[nodiscard]] const Node<Scalar>& node(NodeId id) const { return nodes_[id]; }
  [[nodiscard]] const std::deque<Node<Scalar>>& nodes() const { return nodes_; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] bool is_leaf(NodeId id) const { return nodes_.at(id).op == Op::Leaf; }

  /// Recomputes every node from its recorded inputs; true when all outputs
  /// match the stored values bit for bit.
  [[nodiscard]] bool replay_matches() const {
    for (const Node<Scalar>& n : nodes_) {
      if (n.op == Op::Leaf) continue;
      std::vector<const Tensor<Scalar>*> in;
      for (NodeId id : n.inputs) in.push_back(&nodes_[id].value);
      const Tensor<Scalar> again = detail::evaluate(n, in);
      if (again.rows() != n.value.rows() || again.cols() != n.value.cols()) return false;
      for (Index i = 0; i < again.size(); ++i) {
        if (std::memcmp(again.data() + i, n.value.data() + i, sizeof(Scalar)) != 0) return false;
      }
    }
    return true;
  }

 private:
  Var<Scalar> push_leaf(Tensor<Scalar> value, bool differentiable) {
    Node<Scalar> n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.differentiable = differentiable;
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  // deque keeps node values at stable addresses while the tape grows
  std::deque<Node<Scalar>> nodes_;
};

/// Gradients keyed by leaf id, in the order they were requested.
template <typename Scalar>
class GradientMap {
 public:
  void insert(NodeId id, Tensor<Scalar> grad) {
    index_.emplace(id, grads_.size());
    ids_.push_back(id);
    grads_.push_back(std::move(grad));
  }

  [[nodiscard]] const Tensor<Scalar>& at(NodeId id) const { return grads_.at(index_.at(id)); }
  [[nodiscard]] const Tensor<Scalar>& at(const Var<Scalar>& v) const { return at(v.id()); }
  [[nodiscard]] bool contains(NodeId id) const { return index_.contains(id); }
  [[nodiscard]] std::size_t size() const { return grads_.size(); }
  [[nodiscard]] const std::vector<NodeId>& ids() const { return ids_; }
  [[nodiscard]] const std::vector<Tensor<Scalar>>& grads() const { return grads_; }
  std::vector<Tensor<Scalar>> release() { return std::move(grads_); }

 private:
  std::vector<NodeId> ids_;
  std::vector<Tensor<Scalar>> grads_;
  std::unordered_map<NodeId, std::size_t> index_;
};

namespace detail {

inline void require(bool ok, Op op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op_name(op)) + ": " + what);
}

template <typename Scalar>
Tape<Scalar>& same_tape(const Var<Scalar>& a, const Var<Scalar>& b, Op op) {
  require(a.valid() && b.valid() && a.tape() == b.tape(), op, "operands live on different tapes");
  return *a.tape();
}

template <typename Scalar>
Node<Scalar> make(Op op, std::initializer_list<NodeId> inputs) {
  Node<Scalar> n;
  n.op = op;
  n.inputs.assign(inputs.begin(), inputs.end());
  return n;
}

template <typename Scalar>
std::string shapes(const Var<Scalar>& a, const Var<Scalar>& b) {
  return shape_string(a.value()) + " vs " + shape_string(b.value());
}

template <typename Scalar>
void same_shape(const Var<Scalar>& a, const Var<Scalar>& b, Op op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), op, "shape mismatch " + shapes(a, b));
}

inline void check_axis(int axis, Op op, bool allow_all) {
  require(axis == 0 || axis == 1 || (allow_all && axis == kAllAxes), op,
          "axis must be 0 or 1" + std::string(allow_all ? " or kAllAxes" : ""));
}

// Pull a gradient shaped like the output back to each input.
template <typename Scalar>
void backprop_node(const std::deque<Node<Scalar>>& nodes, const Node<Scalar>& n, const Tensor<Scalar>& g,
                   std::vector<Tensor<Scalar>>& grads) {
  using T = Tensor<Scalar>;
  auto wants = [&](std::size_t k) { return nodes[n.inputs[k]].differentiable; };
  auto slot = [&](std::size_t k) -> T& { return grads[n.inputs[k]]; };
  auto in = [&](std::size_t k) -> const T& { return nodes[n.inputs[k]].value; };

  switch (n.op) {
    case Op::Leaf: return;
    case Op::MatMul:
      if (wants(0)) accumulate<Scalar>(slot(0), g * in(1).transpose());
      if (wants(1)) accumulate<Scalar>(slot(1), in(0).transpose() * g);
      return;
    case Op::Add:
      if (wants(0)) accumulate<Scalar>(slot(0), g);
      if (wants(1)) accumulate<Scalar>(slot(1), g);
      return;
    case Op::Sub:
      if (wants(0)) accumulate<Scalar>(slot(0), g);
      if (wants(1)) accumulate<Scalar>(slot(1), -g);
      return;
    case Op::Mul:
      if (wants(0)) accumulate<Scalar>(slot(0), g.cwiseProduct(in(1)));
      if (wants(1)) accumulate<Scalar>(slot(1), g.cwiseProduct(in(0)));
      return;
    case Op::ScalarMul:
      if (wants(0)) accumulate<Scalar>(slot(0), n.scalar * g);
      return;
    case Op::Shift:
    case Op::Reshape:
      if (wants(0)) {
        if (n.op == Op::Shift) {
          accumulate<Scalar>(slot(0), g);
        } else {
          accumulate<Scalar>(slot(0), T(Eigen::Map<const T>(g.data(), in(0).rows(), in(0).cols())));
        }
      }
      return;
    case Op::Relu:
      if (wants(0)) accumulate<Scalar>(slot(0), T((in(0).array() > Scalar(0)).select(g, Scalar(0))));
      return;
    case Op::Exp:
      if (wants(0)) accumulate<Scalar>(slot(0), g.cwiseProduct(n.value));
      return;
    case Op::Log:
      if (wants(0)) accumulate<Scalar>(slot(0), g.cwiseQuotient(in(0)));
      return;
    case Op::Sum:
    case Op::Mean: {
      if (!wants(0)) return;
      const T& x = in(0);
      T d(x.rows(), x.cols());
      Scalar scale = 1;
      if (n.axis == kAllAxes) {
        if (n.op == Op::Mean) scale = Scalar(1) / static_cast<Scalar>(x.size());
        d.setConstant(g(0, 0) * scale);
      } else if (n.axis == 0) {
        if (n.op == Op::Mean) scale = Scalar(1) / static_cast<Scalar>(x.rows());
        d = (scale * g).replicate(x.rows(), 1);
      } else {
        if (n.op == Op::Mean) scale = Scalar(1) / static_cast<Scalar>(x.cols());
        d = (scale * g).replicate(1, x.cols());
      }
      accumulate<Scalar>(slot(0), d);
      return;
    }
    case Op::Softmax: {
      if (!wants(0)) return;
      const T& y = n.value;
      T gy = g.cwiseProduct(y);
      T d;
      if (n.axis == 1) {
        d = y.cwiseProduct(g - gy.rowwise().sum().replicate(1, y.cols()));
      } else {
        d = y.cwiseProduct(g - gy.colwise().sum().replicate(y.rows(), 1));
      }
      accumulate<Scalar>(slot(0), d);
      return;
    }
    case Op::LogSoftmax: {
      if (!wants(0)) return;
      T p = n.value.array().exp().matrix();
      T d;
      if (n.axis == 1) {
        d = g - p.cwiseProduct(g.rowwise().sum().replicate(1, p.cols()));
      } else {
        d = g - p.cwiseProduct(g.colwise().sum().replicate(p.rows(), 1));
      }
      accumulate<Scalar>(slot(0), d);
      return;
    }
    case Op::Concat: {
      Index at = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const T& part = in(k);
        if (n.axis == 0) {
          if (wants(k)) accumulate<Scalar>(slot(k), T(g.middleRows(at, part.rows())));
          at += part.rows();
        } else {
          if (wants(k)) accumulate<Scalar>(slot(k), T(g.middleCols(at, part.cols())));
          at += part.cols();
        }
      }
      return;
    }
    case Op::Transpose:
      if (wants(0)) accumulate<Scalar>(slot(0), T(g.transpose()));
      return;
    case Op::Slice: {
      if (!wants(0)) return;
      T& s = slot(0);
      if (s.size() == 0) s = T::Zero(in(0).rows(), in(0).cols());
      if (n.axis == 0) {
        s.middleRows(n.offset, n.extent) += g;
      } else {
        s.middleCols(n.offset, n.extent) += g;
      }
      return;
    }
    case Op::Broadcast: {
      if (!wants(0)) return;
      const T& x = in(0);
      if (x.rows() == g.rows() && x.cols() == g.cols()) {
        accumulate<Scalar>(slot(0), g);
      } else if (x.rows() == 1 && x.cols() == 1) {
        accumulate<Scalar>(slot(0), T::Constant(1, 1, g.sum()));
      } else if (x.rows() == 1) {
        accumulate<Scalar>(slot(0), T(g.colwise().sum()));
      } else {
        accumulate<Scalar>(slot(0), T(g.rowwise().sum()));
      }
      return;
    }
    case Op::Sqrt:
      if (wants(0)) accumulate<Scalar>(slot(0), T((Scalar(0.5) * g.array() / n.value.array()).matrix()));
      return;
    case Op::Div:
      if (wants(0)) accumulate<Scalar>(slot(0), g.cwiseQuotient(in(1)));
      if (wants(1)) {
        accumulate<Scalar>(slot(1), T((-g.array() * in(0).array() / in(1).array().square()).matrix()));
      }
      return;
    case Op::Maximum: {
      auto pick_a = (in(0).array() >= in(1).array());
      if (wants(0)) accumulate<Scalar>(slot(0), T(pick_a.select(g, Scalar(0))));
      if (wants(1)) accumulate<Scalar>(slot(1), T(pick_a.select(Scalar(0), g)));
      return;
    }
    case Op::SuffixSum: {
      if (!wants(0)) return;
      T d = g;
      for (Index t = 1; t < d.rows(); ++t) d.row(t) += d.row(t - 1);
      accumulate<Scalar>(slot(0), d);
      return;
    }
  }
}

template <typename Scalar>
GradientMap<Scalar> sweep(const Tape<Scalar>& tape, std::vector<Tensor<Scalar>> grads, NodeId start,
                          std::span<const Var<Scalar>> wrt) {
  for (const Var<Scalar>& w : wrt) {
    if (w.tape() != &tape || !tape.is_leaf(w.id())) {
      throw std::invalid_argument("backward: requested id " + std::to_string(w.id()) + " is not a leaf of this tape");
    }
    if (!tape.node(w.id()).differentiable) {
      throw std::invalid_argument("backward: requested id " + std::to_string(w.id()) + " is a constant leaf");
    }
  }
  for (NodeId id = start + 1; id-- > 0;) {
    const Node<Scalar>& n = tape.node(id);
    if (grads[id].size() == 0 || !n.differentiable || n.op == Op::Leaf) continue;
    backprop_node<Scalar>(tape.nodes(), n, grads[id], grads);
  }
  GradientMap<Scalar> out;
  for (const Var<Scalar>& w : wrt) {
    if (out.contains(w.id())) continue;
    Tensor<Scalar>& g = grads[w.id()];
    if (g.size() == 0) g = Tensor<Scalar>::Zero(w.rows(), w.cols());
    out.insert(w.id(), g);
  }
  return out;
}

// Push input tangents forward through one node. Empty tensors stand for zero
// tangents; the result is empty when every input tangent is.
template <typename Scalar>
Tensor<Scalar> tangent_node(const std::deque<Node<Scalar>>& nodes, const Node<Scalar>& n,
                            const std::vector<Tensor<Scalar>>& tangents) {
  using T = Tensor<Scalar>;
  auto has = [&](std::size_t k) { return tangents[n.inputs[k]].size() != 0; };
  auto dt = [&](std::size_t k) -> const T& { return tangents[n.inputs[k]]; };
  auto in = [&](std::size_t k) -> const T& { return nodes[n.inputs[k]].value; };
  bool any = false;
  for (std::size_t k = 0; k < n.inputs.size(); ++k) any = any || has(k);
  if (!any) return T();
  // Linear ops map the tangent through the same evaluation as the value.
  auto linear = [&]() {
    std::vector<T> zero_filled;
    std::vector<const T*> ptrs;
    zero_filled.reserve(n.inputs.size());
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      zero_filled.push_back(has(k) ? dt(k) : T::Zero(in(k).rows(), in(k).cols()));
    }
    for (const T& z : zero_filled) ptrs.push_back(&z);
    return evaluate(n, ptrs);
  };

  switch (n.op) {
    case Op::Leaf: return T();
    case Op::Add:
    case Op::Sub:
    case Op::ScalarMul:
    case Op::Sum:
    case Op::Mean:
    case Op::Concat:
    case Op::Transpose:
    case Op::Slice:
    case Op::Broadcast:
    case Op::Reshape:
    case Op::SuffixSum:
      return linear();
    case Op::Shift: return dt(0);
    case Op::MatMul: {
      T d = T::Zero(n.value.rows(), n.value.cols());
      if (has(0)) d += dt(0) * in(1);
      if (has(1)) d += in(0) * dt(1);
      return d;
    }
    case Op::Mul: {
      T d = T::Zero(n.value.rows(), n.value.cols());
      if (has(0)) d += dt(0).cwiseProduct(in(1));
      if (has(1)) d += in(0).cwiseProduct(dt(1));
      return d;
    }
    case Op::Relu: return T((in(0).array() > Scalar(0)).select(dt(0), Scalar(0)));
    case Op::Exp: return dt(0).cwiseProduct(n.value);
    case Op::Log: return dt(0).cwiseQuotient(in(0));
    case Op::Sqrt: return T((Scalar(0.5) * dt(0).array() / n.value.array()).matrix());
    case Op::Softmax: {
      const T& y = n.value;
      const T yd = y.cwiseProduct(dt(0));
      if (n.axis == 1) return yd - y.cwiseProduct(yd.rowwise().sum().replicate(1, y.cols()));
      return yd - y.cwiseProduct(yd.colwise().sum().replicate(y.rows(), 1));
    }
    case Op::LogSoftmax: {
      const T p = n.value.array().exp().matrix();
      const T pd = p.cwiseProduct(dt(0));
      if (n.axis == 1) return dt(0) - pd.rowwise().sum().replicate(1, p.cols());
      return dt(0) - pd.colwise().sum().replicate(p.rows(), 1);
    }
    case Op::Div: {
      T d = T::Zero(n.value.rows(), n.value.cols());
      if (has(0)) d += dt(0).cwiseQuotient(in(1));
      if (has(1)) d -= T((dt(1).array() * in(0).array() / in(1).array().square()).matrix());
      return d;
    }
    case Op::Maximum: {
      auto pick_a = (in(0).array() >= in(1).array());
      const T da = has(0) ? dt(0) : T::Zero(n.value.rows(), n.value.cols());
      const T db = has(1) ? dt(1) : T::Zero(n.value.rows(), n.value.cols());
      return T(pick_a.select(da, db));
    }
  }
  throw std::logic_error("tangent_node: unhandled op");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Shape rules are strict: only broadcast() expands dimensions.
// ---------------------------------------------------------------------------

/// [m x k] * [k x n] -> [m x n]
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& t = detail::same_tape(a, b, Op::MatMul);
  detail::require(a.cols() == b.rows(), Op::MatMul, "inner dimensions differ " + detail::shapes(a, b));
  return t.record(detail::make<Scalar>(Op::MatMul, {a.id(), b.id()}));
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& t = detail::same_tape(a, b, Op::Add);
  detail::same_shape(a, b, Op::Add);
  return t.record(detail::make<Scalar>(Op::Add, {a.id(), b.id()}));
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& t = detail::same_tape(a, b, Op::Sub);
  detail::same_shape(a, b, Op::Sub);
  return t.record(detail::make<Scalar>(Op::Sub, {a.id(), b.id()}));
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& t = detail::same_tape(a, b, Op::Mul);
  detail::same_shape(a, b, Op::Mul);
  return t.record(detail::make<Scalar>(Op::Mul, {a.id(), b.id()}));
}

/// Elementwise quotient.
template <typename Scalar>
Var<Scalar> operator/(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& t = detail::same_tape(a, b, Op::Div);
  detail::same_shape(a, b, Op::Div);
  return t.record(detail::make<Scalar>(Op::Div, {a.id(), b.id()}));
}

template <typename Scalar>
Var<Scalar> scalar_mul(Scalar s, const Var<Scalar>& a) {
  auto n = detail::make<Scalar>(Op::ScalarMul, {a.id()});
  n.scalar = s;
  return a.tape()->record(std::move(n));
}

template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) {
  return scalar_mul(s, a);
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a) {
  return scalar_mul(Scalar(-1), a);
}

/// x + c for a scalar constant c.
template <typename Scalar>
Var<Scalar> shift(const Var<Scalar>& a, Scalar c) {
  auto n = detail::make<Scalar>(Op::Shift, {a.id()});
  n.scalar = c;
  return a.tape()->record(std::move(n));
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  return a.tape()->record(detail::make<Scalar>(Op::Relu, {a.id()}));
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  return a.tape()->record(detail::make<Scalar>(Op::Exp, {a.id()}));
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  if (a.value().array().isNaN().any()) throw NumericalError("log: NaN input");
  if (!(a.value().array() > Scalar(0)).all()) throw DomainError("log: input has nonpositive entries");
  return a.tape()->record(detail::make<Scalar>(Op::Log, {a.id()}));
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& a) {
  if (a.value().array().isNaN().any()) throw NumericalError("sqrt: NaN input");
  if (!(a.value().array() > Scalar(0)).all()) throw DomainError("sqrt: input has nonpositive entries");
  return a.tape()->record(detail::make<Scalar>(Op::Sqrt, {a.id()}));
}

/// Sum over all entries (kAllAxes -> [1x1]), over rows (0 -> [1 x cols]) or
/// over columns (1 -> [rows x 1]).
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a, int axis = kAllAxes) {
  detail::check_axis(axis, Op::Sum, true);
  auto n = detail::make<Scalar>(Op::Sum, {a.id()});
  n.axis = axis;
  return a.tape()->record(std::move(n));
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a, int axis = kAllAxes) {
  detail::check_axis(axis, Op::Mean, true);
  auto n = detail::make<Scalar>(Op::Mean, {a.id()});
  n.axis = axis;
  return a.tape()->record(std::move(n));
}

/// Normalizes along `axis` (1: each row sums to one, 0: each column).
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a, int axis) {
  detail::check_axis(axis, Op::Softmax, false);
  auto n = detail::make<Scalar>(Op::Softmax, {a.id()});
  n.axis = axis;
  return a.tape()->record(std::move(n));
}

template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& a, int axis) {
  detail::check_axis(axis, Op::LogSoftmax, false);
  auto n = detail::make<Scalar>(Op::LogSoftmax, {a.id()});
  n.axis = axis;
  return a.tape()->record(std::move(n));
}

template <typename Scalar>
Var<Scalar> concat(std::span<const Var<Scalar>> parts, int axis) {
  detail::check_axis(axis, Op::Concat, false);
  detail::require(!parts.empty(), Op::Concat, "no inputs");
  Node<Scalar> n;
  n.op = Op::Concat;
  n.axis = axis;
  n.rows = axis == 0 ? 0 : parts.front().rows();
  n.cols = axis == 1 ? 0 : parts.front().cols();
  for (const Var<Scalar>& p : parts) {
    detail::same_tape(parts.front(), p, Op::Concat);
    if (axis == 0) {
      detail::require(p.cols() == n.cols, Op::Concat, "column counts differ " + detail::shapes(parts.front(), p));
      n.rows += p.rows();
    } else {
      detail::require(p.rows() == n.rows, Op::Concat, "row counts differ " + detail::shapes(parts.front(), p));
      n.cols += p.cols();
    }
    n.inputs.push_back(p.id());
  }
  return parts.front().tape()->record(std::move(n));
}

template <typename Scalar>
Var<Scalar> concat(std::initializer_list<Var<Scalar>> parts, int axis) {
  return concat(std::span<const Var<Scalar>>(parts.begin(), parts.size()), axis);
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  return a.tape()->record(detail::make<Scalar>(Op::Transpose, {a.id()}));
}

/// Rows (axis 0) or columns (axis 1) [begin, begin + length).
template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& a, int axis, Index begin, Index length) {
  detail::check_axis(axis, Op::Slice, false);
  const Index dim = axis == 0 ? a.rows() : a.cols();
  detail::require(begin >= 0 && length > 0 && begin + length <= dim, Op::Slice,
                  "range [" + std::to_string(begin) + ", " + std::to_string(begin + length) + ") outside " +
                      shape_string(a.value()));
  auto n = detail::make<Scalar>(Op::Slice, {a.id()});
  n.axis = axis;
  n.offset = begin;
  n.extent = length;
  return a.tape()->record(std::move(n));
}

/// Expands [1x1], [1 x c] or [r x 1] to [rows x cols].
template <typename Scalar>
Var<Scalar> broadcast(const Var<Scalar>& a, Index rows, Index cols) {
  const bool ok = (a.rows() == rows || a.rows() == 1) && (a.cols() == cols || a.cols() == 1);
  detail::require(ok && rows > 0 && cols > 0, Op::Broadcast,
                  "cannot expand " + shape_string(a.value()) + " to [" + std::to_string(rows) + "x" +
                      std::to_string(cols) + "]");
  auto n = detail::make<Scalar>(Op::Broadcast, {a.id()});
  n.rows = rows;
  n.cols = cols;
  return a.tape()->record(std::move(n));
}

template <typename Scalar>
Var<Scalar> maximum(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& t = detail::same_tape(a, b, Op::Maximum);
  detail::same_shape(a, b, Op::Maximum);
  return t.record(detail::make<Scalar>(Op::Maximum, {a.id(), b.id()}));
}

/// Reinterprets the row-major data with a new shape of equal size.
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Index rows, Index cols) {
  detail::require(rows > 0 && cols > 0 && rows * cols == a.value().size(), Op::Reshape,
                  "cannot view " + shape_string(a.value()) + " as [" + std::to_string(rows) + "x" +
                      std::to_string(cols) + "]");
  auto n = detail::make<Scalar>(Op::Reshape, {a.id()});
  n.rows = rows;
  n.cols = cols;
  return a.tape()->record(std::move(n));
}

/// y_t = sum_{l >= t} x_l along rows.
template <typename Scalar>
Var<Scalar> suffix_sum(const Var<Scalar>& a) {
  return a.tape()->record(detail::make<Scalar>(Op::SuffixSum, {a.id()}));
}

// ---------------------------------------------------------------------------
// Reverse sweeps
// ---------------------------------------------------------------------------

/// d(objective)/d(wrt) for a scalar objective. Leaves the objective does not
/// reach get zero gradients.
template <typename Scalar>
GradientMap<Scalar> backward(const Tape<Scalar>& tape, const Var<Scalar>& objective,
                             std::span<const Var<Scalar>> wrt) {
  if (objective.tape() != &tape) throw std::invalid_argument("backward: objective not recorded on this tape");
  if (objective.rows() != 1 || objective.cols() != 1) {
    throw ShapeError("backward: objective must be [1x1], got " + shape_string(objective.value()));
  }
  std::vector<Tensor<Scalar>> grads(tape.size());
  grads[objective.id()] = Tensor<Scalar>::Ones(1, 1);
  return detail::sweep(tape, std::move(grads), objective.id(), wrt);
}

template <typename Scalar>
GradientMap<Scalar> backward(const Tape<Scalar>& tape, const Var<Scalar>& objective,
                             std::initializer_list<Var<Scalar>> wrt) {
  return backward(tape, objective, std::span<const Var<Scalar>>(wrt.begin(), wrt.size()));
}

/// sum_k cotangents[k]^T * d(outputs[k])/d(wrt), without forming a Jacobian.
template <typename Scalar>
GradientMap<Scalar> vector_jacobian_product(const Tape<Scalar>& tape, std::span<const Var<Scalar>> outputs,
                                            std::span<const Tensor<Scalar>> cotangents,
                                            std::span<const Var<Scalar>> wrt) {
  if (outputs.size() != cotangents.size()) {
    throw ShapeError("vector_jacobian_product: " + std::to_string(outputs.size()) + " outputs but " +
                     std::to_string(cotangents.size()) + " cotangents");
  }
  std::vector<Tensor<Scalar>> grads(tape.size());
  NodeId start = 0;
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const Var<Scalar>& y = outputs[k];
    if (y.tape() != &tape) throw std::invalid_argument("vector_jacobian_product: output not on this tape");
    if (y.rows() != cotangents[k].rows() || y.cols() != cotangents[k].cols()) {
      throw ShapeError("vector_jacobian_product: cotangent " + shape_string(cotangents[k]) + " vs output " +
                       shape_string(y.value()));
    }
    detail::accumulate<Scalar>(grads[y.id()], cotangents[k]);
    start = std::max(start, y.id());
  }
  return detail::sweep(tape, std::move(grads), start, wrt);
}

template <typename Scalar>
GradientMap<Scalar> vector_jacobian_product(const Tape<Scalar>& tape, const Var<Scalar>& output,
                                            const Tensor<Scalar>& cotangent, std::span<const Var<Scalar>> wrt) {
  return vector_jacobian_product(tape, std::span<const Var<Scalar>>(&output, 1),
                                 std::span<const Tensor<Scalar>>(&cotangent, 1), wrt);
}

// ---------------------------------------------------------------------------
// Forward sweep
// ---------------------------------------------------------------------------

/// d(outputs[k])/d(wrt) * tangents, one forward pass over the recorded tape.
/// Each tangent is shaped like its leaf; the result is shaped like each output.
template <typename Scalar>
std::vector<Tensor<Scalar>> jacobian_vector_product(const Tape<Scalar>& tape, std::span<const Var<Scalar>> wrt,
                                                    std::span<const Tensor<Scalar>> tangents,
                                                    std::span<const Var<Scalar>> outputs) {
  if (wrt.size() != tangents.size()) {
    throw ShapeError("jacobian_vector_product: " + std::to_string(wrt.size()) + " leaves but " +
                     std::to_string(tangents.size()) + " tangents");
  }
  std::vector<Tensor<Scalar>> dt(tape.size());
  NodeId first = tape.size();
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    const Var<Scalar>& w = wrt[k];
    if (w.tape() != &tape || !tape.is_leaf(w.id()) || !tape.node(w.id()).differentiable) {
      throw std::invalid_argument("jacobian_vector_product: id " + std::to_string(w.id()) +
                                  " is not a variable leaf of this tape");
    }
    if (w.rows() != tangents[k].rows() || w.cols() != tangents[k].cols()) {
      throw ShapeError("jacobian_vector_product: tangent " + shape_string(tangents[k]) + " vs leaf " +
                       shape_string(w.value()));
    }
    detail::accumulate<Scalar>(dt[w.id()], tangents[k]);
    first = std::min(first, w.id());
  }
  NodeId last = 0;
  for (const Var<Scalar>& y : outputs) {
    if (y.tape() != &tape) throw std::invalid_argument("jacobian_vector_product: output not on this tape");
    last = std::max(last, y.id());
  }
  for (NodeId id = first; id <= last && id < tape.size(); ++id) {
    const Node<Scalar>& n = tape.node(id);
    if (n.op == Op::Leaf || !n.differentiable) continue;
    dt[id] = detail::tangent_node<Scalar>(tape.nodes(), n, dt);
  }
  std::vector<Tensor<Scalar>> out;
  out.reserve(outputs.size());
  for (const Var<Scalar>& y : outputs) {
    const Tensor<Scalar>& d = dt[y.id()];
    out.push_back(d.size() == 0 ? Tensor<Scalar>::Zero(y.rows(), y.cols()) : d);
  }
  return out;
}

}  // namespace rgm::ad
