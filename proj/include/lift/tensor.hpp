#pragma once

// Dense 2-D tensors with a tape-based reverse-mode differentiator.
//
// Every value is a row-major Eigen matrix; vectors are stored as 1xN rows and
// scalars as 1x1. Operations are free functions. When a Tape is active on the
// current thread and at least one input requires a gradient, the operation
// appends a node holding its backward closure; otherwise it only computes.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lift {

using Index = Eigen::Index;
using Rng = std::mt19937_64;

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename S>
struct Node {
  Matrix<S> value;
  Matrix<S> grad;  // empty until something accumulates into it
  int rank = 2;
  bool requires_grad = false;
  std::function<void(const Matrix<S>&)> backward;

  template <typename Expr>
  void accumulate(const Expr& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

inline std::string shape_str(Index r, Index c) {
  std::ostringstream os;
  os << '(' << r << 'x' << c << ')';
  return os.str();
}

}  // namespace detail

template <typename S>
class Tape;

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  /// Value that never receives a gradient.
  static Tensor constant(Matrix<S> value, int rank = 2) {
    return Tensor(std::move(value), rank, false);
  }

  /// Leaf value whose gradient accumulates across backward passes.
  static Tensor parameter(Matrix<S> value, int rank = 2) {
    return Tensor(std::move(value), rank, true);
  }

  static Tensor row_vector(const RowVector<S>& v, bool learnable = false) {
    return Tensor(Matrix<S>(v), 1, learnable);
  }

  bool defined() const { return static_cast<bool>(node_); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  int rank() const { return node_->rank; }

  /// Shape as a dimension list: {} for scalars, {n} for vectors, {r, c} otherwise.
  std::vector<Index> shape() const {
    switch (node_->rank) {
      case 0: return {};
      case 1: return {cols()};
      default: return {rows(), cols()};
    }
  }

  const Matrix<S>& value() const { return node_->value; }
  // Parameters are updated in place by the optimizer and checkpoint loader.
  Matrix<S>& mutable_value() { return node_->value; }
  S item() const { return node_->value(0, 0); }
  S operator()(Index r, Index c) const { return node_->value(r, c); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix<S>& grad() const { return node_->grad; }
  /// Gradient buffer, allocated as zeros on first access.
  Matrix<S>& mutable_grad() {
    if (node_->grad.size() == 0) node_->grad = Matrix<S>::Zero(node_->value.rows(), node_->value.cols());
    return node_->grad;
  }
  void clear_grad() { node_->grad.resize(0, 0); }

  /// Fresh leaf with a copy of the value and the same learnability.
  Tensor detached_copy() const {
    return Tensor(node_->value, node_->rank, node_->requires_grad);
  }

  const std::shared_ptr<detail::Node<S>>& node() const { return node_; }

 private:
  Tensor(Matrix<S> value, int rank, bool requires_grad)
      : node_(std::make_shared<detail::Node<S>>()) {
    node_->value = std::move(value);
    node_->rank = rank;
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<detail::Node<S>> n) : node_(std::move(n)) {}

  template <typename T, typename Backward>
  friend Tensor<T> make_result(Matrix<T> value, std::initializer_list<const Tensor<T>*> inputs,
                               Backward&& backward);
  template <typename T, typename Backward>
  friend Tensor<T> make_result(Matrix<T> value, const std::vector<Tensor<T>>& inputs,
                               Backward&& backward);

  std::shared_ptr<detail::Node<S>> node_;
};

/// Ordered record of differentiable operations executed while it is active.
/// Construction makes it the active record for the calling thread; destruction
/// restores the previous one.
template <typename S>
class Tape {
 public:
  Tape() : previous_(active_) { active_ = this; }
  ~Tape() { active_ = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  std::size_t size() const { return ops_.size(); }
  void push(std::shared_ptr<detail::Node<S>> node) { ops_.push_back(std::move(node)); }
  const std::vector<std::shared_ptr<detail::Node<S>>>& ops() const { return ops_; }

 private:
  std::vector<std::shared_ptr<detail::Node<S>>> ops_;
  Tape* previous_;
  inline static thread_local Tape* active_ = nullptr;
};

template <typename S, typename Backward>
Tensor<S> make_result(Matrix<S> value, std::initializer_list<const Tensor<S>*> inputs,
                      Backward&& backward) {
  auto node = std::make_shared<detail::Node<S>>();
  node->value = std::move(value);
  Tape<S>* tape = Tape<S>::active();
  bool needs = false;
  for (const Tensor<S>* t : inputs) needs = needs || t->requires_grad();
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    node->backward = std::forward<Backward>(backward);
    tape->push(node);
  }
  return Tensor<S>(std::move(node));
}

template <typename S, typename Backward>
Tensor<S> make_result(Matrix<S> value, const std::vector<Tensor<S>>& inputs, Backward&& backward) {
  auto node = std::make_shared<detail::Node<S>>();
  node->value = std::move(value);
  Tape<S>* tape = Tape<S>::active();
  bool needs = false;
  for (const Tensor<S>& t : inputs) needs = needs || t.requires_grad();
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    node->backward = std::forward<Backward>(backward);
    tape->push(node);
  }
  return Tensor<S>(std::move(node));
}

/// Reverse sweep over the record. Intermediate gradients are reset first, so
/// repeated calls on the same record add exactly one more loss gradient into
/// every reachable leaf.
template <typename S>
void backward(const Tensor<S>& loss, Tape<S>& tape) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " +
                     detail::shape_str(loss.rows(), loss.cols()));
  }
  if (!loss.requires_grad()) return;
  for (auto& op : tape.ops()) op->grad.resize(0, 0);
  loss.node()->grad = Matrix<S>::Ones(1, 1);
  const auto& ops = tape.ops();
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    detail::Node<S>& n = **it;
    if (n.grad.size() != 0 && n.backward) n.backward(n.grad);
  }
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + detail::shape_str(a.rows(), a.cols()) +
                     " x " + detail::shape_str(b.rows(), b.cols()));
  }
  Matrix<S> out = a.value() * b.value();
  auto na = a.node();
  auto nb = b.node();
  return make_result<S>(std::move(out), {&a, &b}, [na, nb](const Matrix<S>& g) {
    if (na->requires_grad) na->accumulate(g * nb->value.transpose());
    if (nb->requires_grad) nb->accumulate(na->value.transpose() * g);
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  Matrix<S> out = a.value().transpose();
  auto na = a.node();
  return make_result<S>(std::move(out), {&a},
                        [na](const Matrix<S>& g) { na->accumulate(g.transpose()); });
}

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shapes differ " + detail::shape_str(a.rows(), a.cols()) +
                     " vs " + detail::shape_str(b.rows(), b.cols()));
  }
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("add", a, b);
  Matrix<S> out = a.value() + b.value();
  auto na = a.node();
  auto nb = b.node();
  return make_result<S>(std::move(out), {&a, &b}, [na, nb](const Matrix<S>& g) {
    na->accumulate(g);
    nb->accumulate(g);
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("sub", a, b);
  Matrix<S> out = a.value() - b.value();
  auto na = a.node();
  auto nb = b.node();
  return make_result<S>(std::move(out), {&a, &b}, [na, nb](const Matrix<S>& g) {
    na->accumulate(g);
    if (nb->requires_grad) nb->accumulate(-g);
  });
}

/// Elementwise product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("mul", a, b);
  Matrix<S> out = a.value().cwiseProduct(b.value());
  auto na = a.node();
  auto nb = b.node();
  return make_result<S>(std::move(out), {&a, &b}, [na, nb](const Matrix<S>& g) {
    if (na->requires_grad) na->accumulate(g.cwiseProduct(nb->value));
    if (nb->requires_grad) nb->accumulate(g.cwiseProduct(na->value));
  });
}

/// x + row, with the 1xN row repeated over every row of x.
template <typename S>
Tensor<S> add_row(const Tensor<S>& x, const Tensor<S>& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeError("add_row: row " + detail::shape_str(row.rows(), row.cols()) +
                     " does not fit " + detail::shape_str(x.rows(), x.cols()));
  }
  Matrix<S> out = x.value().rowwise() + row.value().row(0);
  auto nx = x.node();
  auto nr = row.node();
  return make_result<S>(std::move(out), {&x, &row}, [nx, nr](const Matrix<S>& g) {
    nx->accumulate(g);
    if (nr->requires_grad) nr->accumulate(g.colwise().sum());
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  Matrix<S> out = x.value() * c;
  auto nx = x.node();
  return make_result<S>(std::move(out), {&x}, [nx, c](const Matrix<S>& g) { nx->accumulate(g * c); });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, b);
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  return sub(a, b);
}
template <typename S>
Tensor<S> operator*(S c, const Tensor<S>& x) {
  return scale(x, c);
}

/// max(x, 0); the subgradient at 0 is 0.
template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Matrix<S> out = x.value().cwiseMax(S(0));
  auto nx = x.node();
  return make_result<S>(std::move(out), {&x}, [nx](const Matrix<S>& g) {
    nx->accumulate(g.cwiseProduct((nx->value.array() > S(0)).matrix().template cast<S>()));
  });
}

/// |x|; the subgradient at 0 is 0.
template <typename S>
Tensor<S> abs(const Tensor<S>& x) {
  Matrix<S> out = x.value().cwiseAbs();
  auto nx = x.node();
  return make_result<S>(std::move(out), {&x}, [nx](const Matrix<S>& g) {
    nx->accumulate(g.cwiseProduct(nx->value.unaryExpr([](S v) {
      return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
    })));
  });
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
  Matrix<S> out = x.value().cwiseAbs2();
  auto nx = x.node();
  return make_result<S>(std::move(out), {&x}, [nx](const Matrix<S>& g) {
    nx->accumulate(S(2) * g.cwiseProduct(nx->value));
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Matrix<S> out(1, 1);
  out(0, 0) = x.value().sum();
  auto nx = x.node();
  Tensor<S> r = make_result<S>(std::move(out), {&x}, [nx](const Matrix<S>& g) {
    nx->accumulate(Matrix<S>::Constant(nx->value.rows(), nx->value.cols(), g(0, 0)));
  });
  r.node()->rank = 0;
  return r;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

/// Row-wise softmax computed with the row maximum subtracted.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  const Matrix<S>& v = x.value();
  Matrix<S> out(v.rows(), v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    const S m = v.row(r).maxCoeff();
    out.row(r) = (v.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  auto nx = x.node();
  Matrix<S> saved = out;
  return make_result<S>(std::move(out), {&x}, [nx, s = std::move(saved)](const Matrix<S>& g) {
    Matrix<S> gs = g.cwiseProduct(s);
    Eigen::Matrix<S, Eigen::Dynamic, 1> dot = gs.rowwise().sum();
    Matrix<S> dx = gs - s.cwiseProduct(dot.replicate(1, s.cols()));
    nx->accumulate(dx);
  });
}

/// Per-row normalization to zero mean and unit (biased) variance, followed by
/// the affine map gamma * xhat + beta.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  const Index n = x.cols();
  if (n < 2) throw ShapeError("layer_norm: need at least 2 features");
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw ShapeError("layer_norm: gamma/beta must be (1x" + std::to_string(n) + ")");
  }
  const Matrix<S>& v = x.value();
  Matrix<S> xhat(v.rows(), n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(v.rows());
  for (Index r = 0; r < v.rows(); ++r) {
    const S mu = v.row(r).mean();
    auto centered = (v.row(r).array() - mu);
    const S var = centered.square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (centered * inv_std(r)).matrix();
  }
  Matrix<S> out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);

  auto nx = x.node();
  auto ng = gamma.node();
  auto nb = beta.node();
  return make_result<S>(
      std::move(out), {&x, &gamma, &beta},
      [nx, ng, nb, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix<S>& g) {
        if (nb->requires_grad) nb->accumulate(g.colwise().sum());
        if (ng->requires_grad) ng->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (!nx->requires_grad) return;
        const Index cols = g.cols();
        Matrix<S> dxhat = (g.array().rowwise() * ng->value.row(0).array()).matrix();
        Matrix<S> dx(g.rows(), cols);
        for (Index r = 0; r < g.rows(); ++r) {
          const S m1 = dxhat.row(r).mean();
          const S m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
          dx.row(r) =
              (inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2)).matrix();
        }
        nx->accumulate(dx);
      });
}

/// Concatenation along the feature (column) dimension.
template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row counts differ " + std::to_string(rows) + " vs " +
                       std::to_string(p.rows()));
    }
    cols += p.cols();
  }
  Matrix<S> out(rows, cols);
  std::vector<std::shared_ptr<detail::Node<S>>> nodes;
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.cols();
  }
  return make_result<S>(std::move(out), parts,
                        [nodes = std::move(nodes), offsets = std::move(offsets)](const Matrix<S>& g) {
                          for (std::size_t i = 0; i < nodes.size(); ++i) {
                            if (nodes[i]->requires_grad) {
                              nodes[i]->accumulate(g.middleCols(offsets[i], nodes[i]->value.cols()));
                            }
                          }
                        });
}

/// Concatenation along rows.
template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column counts differ " + std::to_string(cols) + " vs " +
                       std::to_string(p.cols()));
    }
    rows += p.rows();
  }
  Matrix<S> out(rows, cols);
  std::vector<std::shared_ptr<detail::Node<S>>> nodes;
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.rows();
  }
  return make_result<S>(std::move(out), parts,
                        [nodes = std::move(nodes), offsets = std::move(offsets)](const Matrix<S>& g) {
                          for (std::size_t i = 0; i < nodes.size(); ++i) {
                            if (nodes[i]->requires_grad) {
                              nodes[i]->accumulate(g.middleRows(offsets[i], nodes[i]->value.rows()));
                            }
                          }
                        });
}

/// Rows [from, to).
template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, Index from, Index to) {
  if (from < 0 || to > x.rows() || from >= to) {
    throw ShapeError("slice_rows: range [" + std::to_string(from) + ", " + std::to_string(to) +
                     ") invalid for " + std::to_string(x.rows()) + " rows");
  }
  Matrix<S> out = x.value().middleRows(from, to - from);
  auto nx = x.node();
  return make_result<S>(std::move(out), {&x}, [nx, from](const Matrix<S>& g) {
    if (!nx->requires_grad) return;
    if (nx->grad.size() == 0) nx->grad = Matrix<S>::Zero(nx->value.rows(), nx->value.cols());
    nx->grad.middleRows(from, g.rows()) += g;
  });
}

/// Selects rows by index (repeats allowed); the backward pass scatter-adds.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<Index>& index) {
  Matrix<S> out(static_cast<Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                       std::to_string(x.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = x.value().row(index[i]);
  }
  auto nx = x.node();
  return make_result<S>(std::move(out), {&x}, [nx, index](const Matrix<S>& g) {
    if (!nx->requires_grad) return;
    if (nx->grad.size() == 0) nx->grad = Matrix<S>::Zero(nx->value.rows(), nx->value.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
      nx->grad.row(index[i]) += g.row(static_cast<Index>(i));
    }
  });
}

/// Inverted dropout: in training mode each element is zeroed with probability
/// p and survivors are scaled by 1/(1-p). Identity in eval mode or when p == 0.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const S inv_keep = static_cast<S>(1.0 / (1.0 - p));
  Matrix<S> mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? inv_keep : S(0);
  Matrix<S> out = x.value().cwiseProduct(mask);
  auto nx = x.node();
  return make_result<S>(std::move(out), {&x}, [nx, mask = std::move(mask)](const Matrix<S>& g) {
    nx->accumulate(g.cwiseProduct(mask));
  });
}

/// Scales each row to unit L2 norm, dividing by sqrt(|x|^2 + eps^2).
template <typename S>
Tensor<S> normalize_rows(const Tensor<S>& x, S eps) {
  const Matrix<S>& v = x.value();
  Eigen::Matrix<S, Eigen::Dynamic, 1> norm =
      (v.rowwise().squaredNorm().array() + eps * eps).sqrt().matrix();
  Matrix<S> out = v.array().colwise() / norm.array();
  auto nx = x.node();
  return make_result<S>(std::move(out), {&x}, [nx, norm = std::move(norm)](const Matrix<S>& g) {
    const Matrix<S>& xv = nx->value;
    Matrix<S> dx(g.rows(), g.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      const S n = norm(r);
      const S xg = xv.row(r).dot(g.row(r));
      dx.row(r) = g.row(r) / n - xv.row(r) * (xg / (n * n * n));
    }
    nx->accumulate(dx);
  });
}

}  // namespace lift
