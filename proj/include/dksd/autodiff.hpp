#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Graph records every operation as a node holding its value and a closure
// that pushes the node's gradient to its parents. Nodes live in a deque so
// references stay valid while the graph grows. One graph per forward pass;
// graphs are not shared between threads.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dksd/error.hpp"

namespace dksd {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

namespace ad {

template <class S>
class Graph;

template <class S>
class Var {
 public:
  Var() = default;
  Var(Graph<S>* graph, std::size_t id) : graph_(graph), id_(id) {}

  const Matrix<S>& value() const { return graph_->value(id_); }
  Matrix<S> grad() const { return graph_->grad(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S item() const;
  bool requires_grad() const { return graph_->requires_grad(id_); }
  Graph<S>& graph() const { return *graph_; }
  Graph<S>* graph_ptr() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<S>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <class S>
class Graph {
 public:
  using Mat = Matrix<S>;
  using Backward = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<S> input(Mat value, bool requires_grad = true, std::string_view name = "input") {
    check_finite(value, name);
    nodes_.push_back(Node{std::string(name), std::move(value), Mat(), requires_grad, false, {}});
    return Var<S>(this, nodes_.size() - 1);
  }

  Var<S> constant(Mat value) { return input(std::move(value), false, "constant"); }

  /// Appends an operation node. The backward closure is kept only when some
  /// parent participates in differentiation.
  Var<S> record(std::string_view op, Mat value, std::initializer_list<Var<S>> parents,
                Backward backward) {
    return record(op, std::move(value), std::vector<Var<S>>(parents), std::move(backward));
  }

  Var<S> record(std::string_view op, Mat value, const std::vector<Var<S>>& parents,
                Backward backward) {
    bool needs = false;
    for (const auto& p : parents) {
      if (p.graph_ptr() != this) throw ValidationError(std::string(op) + ": operand from another graph");
      needs = needs || nodes_[p.id()].requires_grad;
    }
    nodes_.push_back(Node{std::string(op), std::move(value), Mat(), needs, false,
                          needs ? std::move(backward) : Backward{}});
    return Var<S>(this, nodes_.size() - 1);
  }

  const Mat& value(std::size_t id) const { return nodes_.at(id).value; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  Mat grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.has_grad) return n.grad;
    return Mat::Zero(n.value.rows(), n.value.cols());
  }

  /// Adds `delta` into the gradient buffer of node `id` (no-op for nodes
  /// outside the differentiated subgraph).
  template <class Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (delta.rows() != n.value.rows() || delta.cols() != n.value.cols()) {
      throw ShapeError("gradient shape " + shape_string(delta.rows(), delta.cols()) +
                       " does not match node '" + n.op + "' of shape " +
                       shape_string(n.value.rows(), n.value.cols()));
    }
    if (n.has_grad) {
      n.grad += delta;
    } else {
      n.grad = delta;
      n.has_grad = true;
    }
  }

  /// Reverse sweep from a scalar output.
  void backward(Var<S> out) {
    const Mat& v = value(out.id());
    if (v.rows() != 1 || v.cols() != 1) {
      throw ShapeError("backward requires a scalar output, got " + shape_string(v.rows(), v.cols()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    accumulate(out.id(), Mat::Ones(1, 1));
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.has_grad && n.backward) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    std::string op;
    Mat value;
    Mat grad;
    bool requires_grad;
    bool has_grad;
    Backward backward;
  };

  static void check_finite(const Mat& m, std::string_view name) {
    if (!m.allFinite()) throw NumericError("non-finite value in '" + std::string(name) + "'");
  }

  std::deque<Node> nodes_;

  friend class Var<S>;
};

template <class S>
S Var<S>::item() const {
  const auto& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw ShapeError("item() on non-scalar of shape " + shape_string(v.rows(), v.cols()));
  }
  return v(0, 0);
}

namespace detail {

template <class S>
void require_same_shape(std::string_view op, const Var<S>& a, const Var<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                     " vs " + shape_string(b.rows(), b.cols()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear primitives
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require_same_shape("add", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("add", a.value() + b.value(), {a, b}, [ia, ib](Graph<S>& g, std::size_t self) {
    const auto gr = g.grad(self);
    g.accumulate(ia, gr);
    g.accumulate(ib, gr);
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require_same_shape("sub", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("sub", a.value() - b.value(), {a, b}, [ia, ib](Graph<S>& g, std::size_t self) {
    const auto gr = g.grad(self);
    g.accumulate(ia, gr);
    g.accumulate(ib, -gr);
  });
}

/// Elementwise (Hadamard) product.
template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::require_same_shape("mul", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  Matrix<S> v = a.value().cwiseProduct(b.value());
  return a.graph().record("mul", std::move(v), {a, b}, [ia, ib](Graph<S>& g, std::size_t self) {
    const auto gr = g.grad(self);
    g.accumulate(ia, gr.cwiseProduct(g.value(ib)));
    g.accumulate(ib, gr.cwiseProduct(g.value(ia)));
  });
}

template <class S>
Var<S> scale(Var<S> a, S factor) {
  const std::size_t ia = a.id();
  return a.graph().record("scale", a.value() * factor, {a}, [ia, factor](Graph<S>& g, std::size_t self) {
    g.accumulate(ia, g.grad(self) * factor);
  });
}

template <class S>
Var<S> add_scalar(Var<S> a, S offset) {
  const std::size_t ia = a.id();
  Matrix<S> v = a.value().array() + offset;
  return a.graph().record("add_scalar", std::move(v), {a}, [ia](Graph<S>& g, std::size_t self) {
    g.accumulate(ia, g.grad(self));
  });
}

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.rows(), a.cols()) + " * " +
                     shape_string(b.rows(), b.cols()));
  }
  const std::size_t ia = a.id(), ib = b.id();
  Matrix<S> v = a.value() * b.value();
  return a.graph().record("matmul", std::move(v), {a, b}, [ia, ib](Graph<S>& g, std::size_t self) {
    const auto gr = g.grad(self);
    if (g.requires_grad(ia)) g.accumulate(ia, gr * g.value(ib).transpose());
    if (g.requires_grad(ib)) g.accumulate(ib, g.value(ia).transpose() * gr);
  });
}

template <class S>
Var<S> transpose(Var<S> a) {
  const std::size_t ia = a.id();
  Matrix<S> v = a.value().transpose();
  return a.graph().record("transpose", std::move(v), {a}, [ia](Graph<S>& g, std::size_t self) {
    g.accumulate(ia, g.grad(self).transpose());
  });
}

/// Adds a 1xN row to every row of an MxN matrix.
template <class S>
Var<S> add_row(Var<S> a, Var<S> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                     shape_string(row.rows(), row.cols()));
  }
  const std::size_t ia = a.id(), ir = row.id();
  Matrix<S> v = a.value().rowwise() + row.value().row(0);
  return a.graph().record("add_row", std::move(v), {a, row}, [ia, ir](Graph<S>& g, std::size_t self) {
    const auto gr = g.grad(self);
    g.accumulate(ia, gr);
    g.accumulate(ir, gr.colwise().sum());
  });
}

template <class S>
Var<S> tanh(Var<S> a) {
  const std::size_t ia = a.id();
  Matrix<S> v = a.value().array().tanh();
  return a.graph().record("tanh", std::move(v), {a}, [ia](Graph<S>& g, std::size_t self) {
    const auto& y = g.value(self);
    g.accumulate(ia, (g.grad(self).array() * (S(1) - y.array().square())).matrix());
  });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  const std::size_t ia = a.id();
  Matrix<S> v = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  return a.graph().record("sigmoid", std::move(v), {a}, [ia](Graph<S>& g, std::size_t self) {
    const auto& y = g.value(self);
    g.accumulate(ia, (g.grad(self).array() * y.array() * (S(1) - y.array())).matrix());
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Var<S> sum(Var<S> a) {
  const std::size_t ia = a.id();
  Matrix<S> v(1, 1);
  v(0, 0) = a.value().sum();
  return a.graph().record("sum", std::move(v), {a}, [ia](Graph<S>& g, std::size_t self) {
    const auto& x = g.value(ia);
    g.accumulate(ia, Matrix<S>::Constant(x.rows(), x.cols(), g.grad(self)(0, 0)));
  });
}

template <class S>
Var<S> mean(Var<S> a) {
  const auto n = static_cast<S>(a.value().size());
  if (a.value().size() == 0) throw ShapeError("mean of empty tensor");
  const std::size_t ia = a.id();
  Matrix<S> v(1, 1);
  v(0, 0) = a.value().sum() / n;
  return a.graph().record("mean", std::move(v), {a}, [ia, n](Graph<S>& g, std::size_t self) {
    const auto& x = g.value(ia);
    g.accumulate(ia, Matrix<S>::Constant(x.rows(), x.cols(), g.grad(self)(0, 0) / n));
  });
}

/// Sum of squared entries.
template <class S>
Var<S> sum_squares(Var<S> a) {
  const std::size_t ia = a.id();
  Matrix<S> v(1, 1);
  v(0, 0) = a.value().squaredNorm();
  return a.graph().record("sum_squares", std::move(v), {a}, [ia](Graph<S>& g, std::size_t self) {
    g.accumulate(ia, g.value(ia) * (S(2) * g.grad(self)(0, 0)));
  });
}

/// Sum over all entries of (a - b)^2.
template <class S>
Var<S> squared_error(Var<S> a, Var<S> b) {
  detail::require_same_shape("squared_error", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  Matrix<S> v(1, 1);
  v(0, 0) = (a.value() - b.value()).squaredNorm();
  return a.graph().record("squared_error", std::move(v), {a, b}, [ia, ib](Graph<S>& g, std::size_t self) {
    const Matrix<S> d = (g.value(ia) - g.value(ib)) * (S(2) * g.grad(self)(0, 0));
    g.accumulate(ia, d);
    g.accumulate(ib, -d);
  });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix<S> v(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.cols();
  }
  return parts.front().graph().record(
      "concat_cols", std::move(v), parts, [ids, offsets](Graph<S>& g, std::size_t self) {
        const auto gr = g.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          g.accumulate(ids[i], gr.middleCols(offsets[i], g.value(ids[i]).cols()));
        }
      });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix<S> v(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
  }
  return parts.front().graph().record(
      "concat_rows", std::move(v), parts, [ids, offsets](Graph<S>& g, std::size_t self) {
        const auto gr = g.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          g.accumulate(ids[i], gr.middleRows(offsets[i], g.value(ids[i]).rows()));
        }
      });
}

/// Rows [begin, end).
template <class S>
Var<S> slice_rows(Var<S> a, Eigen::Index begin, Eigen::Index end) {
  if (begin < 0 || end > a.rows() || begin >= end) {
    throw RangeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + std::to_string(a.rows()) + " rows");
  }
  const std::size_t ia = a.id();
  Matrix<S> v = a.value().middleRows(begin, end - begin);
  return a.graph().record("slice_rows", std::move(v), {a}, [ia, begin](Graph<S>& g, std::size_t self) {
    const auto& x = g.value(ia);
    Matrix<S> full = Matrix<S>::Zero(x.rows(), x.cols());
    const auto gr = g.grad(self);
    full.middleRows(begin, gr.rows()) = gr;
    g.accumulate(ia, full);
  });
}

/// Columns [begin, end).
template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index begin, Eigen::Index end) {
  if (begin < 0 || end > a.cols() || begin >= end) {
    throw RangeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + std::to_string(a.cols()) + " columns");
  }
  const std::size_t ia = a.id();
  Matrix<S> v = a.value().middleCols(begin, end - begin);
  return a.graph().record("slice_cols", std::move(v), {a}, [ia, begin](Graph<S>& g, std::size_t self) {
    const auto& x = g.value(ia);
    Matrix<S> full = Matrix<S>::Zero(x.rows(), x.cols());
    const auto gr = g.grad(self);
    full.middleCols(begin, gr.cols()) = gr;
    g.accumulate(ia, full);
  });
}

/// Output row i is input row index[i]; repeated indices accumulate.
template <class S>
Var<S> gather_rows(Var<S> a, std::vector<Eigen::Index> index) {
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  Matrix<S> v(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) {
      throw RangeError("gather_rows: row " + std::to_string(index[i]) + " outside " +
                       std::to_string(a.rows()) + " rows");
    }
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  const std::size_t ia = a.id();
  return a.graph().record("gather_rows", std::move(v), {a},
                          [ia, index = std::move(index)](Graph<S>& g, std::size_t self) {
                            const auto& x = g.value(ia);
                            Matrix<S> full = Matrix<S>::Zero(x.rows(), x.cols());
                            const auto gr = g.grad(self);
                            for (std::size_t i = 0; i < index.size(); ++i) {
                              full.row(index[i]) += gr.row(static_cast<Eigen::Index>(i));
                            }
                            g.accumulate(ia, full);
                          });
}

/// Identity in the forward pass, blocks gradient flow.
template <class S>
Var<S> detach(Var<S> a) {
  return a.graph().constant(a.value());
}

}  // namespace ad
}  // namespace dksd
