// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record a backward closure and their parents; calling
// backward() on a scalar walks the graph in reverse topological order and
// accumulates gradients into every reachable node. Graphs are freed when the
// last handle goes away. detach() cuts the history.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <algorithm>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pktrack/error.hpp"

namespace pktrack::nn {

using Mat = Eigen::MatrixXd;

struct Node {
  Mat value;
  Mat grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Mat& grad_ref() {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    return grad;
  }

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  // Releases long parent chains iteratively instead of recursively.
  ~Node() {
    std::vector<std::shared_ptr<Node>> pending = std::move(parents);
    backward_fn = nullptr;
    while (!pending.empty()) {
      std::shared_ptr<Node> n = std::move(pending.back());
      pending.pop_back();
      if (n && n.use_count() == 1) {
        for (auto& p : n->parents) pending.push_back(std::move(p));
        n->parents.clear();
        n->backward_fn = nullptr;
      }
    }
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Mat value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  static Tensor scalar(double v) { return Tensor(Mat::Constant(1, 1, v)); }

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  /// Gradient accumulated by the last backward pass (zeros if none reached it).
  Mat grad() const {
    return node_->grad.size() ? node_->grad : Mat::Zero(node_->value.rows(), node_->value.cols());
  }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const {
    if (node_->value.size() != 1) throw ShapeError("item() needs a 1x1 tensor");
    return node_->value(0, 0);
  }

  /// Same value, no history.
  Tensor detach() const { return Tensor(node_->value, false); }

  /// Backpropagates from this 1x1 tensor.
  void backward() const {
    if (node_->value.size() != 1) throw ShapeError("backward() needs a scalar");
    if (!node_->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS; recurrent graphs can be deep.
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_ref()(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && n->grad.size()) n->backward_fn(*n);
    }
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_op(Mat value, std::vector<Tensor> parents, std::function<void(Node&)> fn) {
  Tensor out(std::move(value), false);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  Node& n = *out.node();
  n.requires_grad = true;
  for (auto& p : parents) n.parents.push_back(p.node());
  n.backward_fn = std::move(fn);
  return out;
}

inline void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch");
}

inline void accumulate(const std::shared_ptr<Node>& p, const Mat& g) {
  if (p->requires_grad) p->grad_ref() += g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.value() * b.value(), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_ref().noalias() += self.grad * pb->value.transpose();
    if (pb->requires_grad) pb->grad_ref().noalias() += pa->value.transpose() * self.grad;
  });
}

inline Tensor transpose(const Tensor& a) {
  auto pa = a.node();
  return detail::make_op(a.value().transpose(), {a},
                         [pa](Node& self) { detail::accumulate(pa, self.grad.transpose()); });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same(a, b, "add");
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.value() + b.value(), {a, b}, [pa, pb](Node& self) {
    detail::accumulate(pa, self.grad);
    detail::accumulate(pb, self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.value() - b.value(), {a, b}, [pa, pb](Node& self) {
    detail::accumulate(pa, self.grad);
    detail::accumulate(pb, -self.grad);
  });
}

/// a (n x c) plus row vector b (1 x c) broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw ShapeError("add_row: need a 1 x cols row");
  auto pa = a.node(), pb = b.node();
  Mat v = a.value();
  v.rowwise() += b.value().row(0);
  return detail::make_op(std::move(v), {a, b}, [pa, pb](Node& self) {
    detail::accumulate(pa, self.grad);
    if (pb->requires_grad) pb->grad_ref() += self.grad.colwise().sum();
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.value().cwiseProduct(b.value()), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_ref() += self.grad.cwiseProduct(pb->value);
    if (pb->requires_grad) pb->grad_ref() += self.grad.cwiseProduct(pa->value);
  });
}

inline Tensor scale(const Tensor& a, double s) {
  auto pa = a.node();
  return detail::make_op(a.value() * s, {a}, [pa, s](Node& self) { detail::accumulate(pa, self.grad * s); });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  auto pa = a.node();
  return detail::make_op((a.value().array() + s).matrix(), {a},
                         [pa](Node& self) { detail::accumulate(pa, self.grad); });
}

// ---------------------------------------------------------------------------
// Element-wise nonlinearities

inline Tensor sigmoid(const Tensor& a) {
  auto pa = a.node();
  Mat y = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return detail::make_op(y, {a}, [pa](Node& self) {
    const Mat& y = self.value;
    detail::accumulate(pa, self.grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

/// Exact (erf-based) Gaussian error linear unit.
inline Tensor gelu(const Tensor& a) {
  auto pa = a.node();
  Mat y = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); });
  return detail::make_op(std::move(y), {a}, [pa](Node& self) {
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    Mat d = pa->value.unaryExpr([inv_sqrt_2pi](double x) {
      return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    });
    detail::accumulate(pa, self.grad.cwiseProduct(d));
  });
}

inline Tensor abs(const Tensor& a) {
  auto pa = a.node();
  return detail::make_op(a.value().cwiseAbs(), {a}, [pa](Node& self) {
    Mat s = pa->value.unaryExpr([](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
    detail::accumulate(pa, self.grad.cwiseProduct(s));
  });
}

inline Tensor log(const Tensor& a) {
  auto pa = a.node();
  return detail::make_op(a.value().array().log().matrix(), {a}, [pa](Node& self) {
    detail::accumulate(pa, self.grad.cwiseQuotient(pa->value));
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  auto pa = a.node();
  return detail::make_op(Mat::Constant(1, 1, a.value().sum()), {a}, [pa](Node& self) {
    detail::accumulate(pa, Mat::Constant(pa->value.rows(), pa->value.cols(), self.grad(0, 0)));
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.value().size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw ShapeError("slice_rows out of range");
  auto pa = a.node();
  return detail::make_op(a.value().middleRows(start, n), {a}, [pa, start, n](Node& self) {
    if (pa->requires_grad) pa->grad_ref().middleRows(start, n) += self.grad;
  });
}

inline Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw ShapeError("slice_cols out of range");
  auto pa = a.node();
  return detail::make_op(a.value().middleCols(start, n), {a}, [pa, start, n](Node& self) {
    if (pa->requires_grad) pa->grad_ref().middleCols(start, n) += self.grad;
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Mat v(rows, cols);
  std::vector<std::shared_ptr<Node>> nodes;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    nodes.push_back(p.node());
  }
  return detail::make_op(std::move(v), parts, [nodes](Node& self) {
    Eigen::Index r = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) n->grad_ref() += self.grad.middleRows(r, n->value.rows());
      r += n->value.rows();
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Mat v(rows, cols);
  std::vector<std::shared_ptr<Node>> nodes;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
    nodes.push_back(p.node());
  }
  return detail::make_op(std::move(v), parts, [nodes](Node& self) {
    Eigen::Index c = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) n->grad_ref() += self.grad.middleCols(c, n->value.cols());
      c += n->value.cols();
    }
  });
}

/// Rows of `table` selected by `index` (embedding lookup).
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& index) {
  Mat v(static_cast<Eigen::Index>(index.size()), table.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= table.rows()) throw ShapeError("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(index[i]);
  }
  auto pt = table.node();
  return detail::make_op(std::move(v), {table}, [pt, index](Node& self) {
    if (!pt->requires_grad) return;
    Mat& g = pt->grad_ref();
    for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Row-wise layer normalization with a learned 1 x c gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const Eigen::Index n = x.rows(), c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c)
    throw ShapeError("layer_norm: gain and bias must be 1 x cols");
  Mat xhat(n, c);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Mat y = xhat;
  y.array().rowwise() *= gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::make_op(std::move(y), {x, gamma, beta}, [px, pg, pb, xhat, inv_std](Node& self) {
    const Mat& g = self.grad;
    if (pg->requires_grad) pg->grad_ref() += g.cwiseProduct(xhat).colwise().sum();
    if (pb->requires_grad) pb->grad_ref() += g.colwise().sum();
    if (px->requires_grad) {
      Mat gx = g;
      gx.array().rowwise() *= pg->value.row(0).array();
      const double c = static_cast<double>(gx.cols());
      Mat& out = px->grad_ref();
      for (Eigen::Index i = 0; i < gx.rows(); ++i) {
        const double m1 = gx.row(i).sum() / c;
        const double m2 = gx.row(i).dot(xhat.row(i)) / c;
        out.row(i).array() += inv_std(i) * (gx.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
    }
  });
}

/// Row-wise softmax. Columns with key_valid[j] == false get probability 0.
inline Tensor softmax_rows(const Tensor& a, const std::vector<bool>& key_valid = {}) {
  const Eigen::Index n = a.rows(), c = a.cols();
  if (!key_valid.empty() && static_cast<Eigen::Index>(key_valid.size()) != c)
    throw ShapeError("softmax_rows: mask length differs from column count");
  Mat y = Mat::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < c; ++j)
      if (key_valid.empty() || key_valid[j]) mx = std::max(mx, a.value()(i, j));
    if (!std::isfinite(mx)) continue;  // every key masked
    double z = 0.0;
    for (Eigen::Index j = 0; j < c; ++j)
      if (key_valid.empty() || key_valid[j]) z += (y(i, j) = std::exp(a.value()(i, j) - mx));
    y.row(i) /= z;
  }
  auto pa = a.node();
  return detail::make_op(std::move(y), {a}, [pa](Node& self) {
    const Mat& y = self.value;
    Mat gy = self.grad.cwiseProduct(y);
    Eigen::VectorXd dot = gy.rowwise().sum();
    gy -= y.cwiseProduct(dot.replicate(1, y.cols()));
    detail::accumulate(pa, gy);
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1],
/// over entries with weight > 0 (weights act as a 0/1 mask). Computed from
/// logits for numerical stability.
inline Tensor bce_with_logits(const Tensor& logits, const Mat& targets, const Mat& mask) {
  detail::check_same(logits, Tensor(targets), "bce_with_logits");
  if (mask.rows() != targets.rows() || mask.cols() != targets.cols())
    throw ShapeError("bce_with_logits: mask shape mismatch");
  const double count = mask.sum();
  if (!(count > 0)) throw ShapeError("bce_with_logits: nothing unmasked");
  double loss = 0.0;
  const Mat& z = logits.value();
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (mask(i) == 0.0) continue;
    const double x = z(i);
    // softplus(x) - y x, written to avoid overflow.
    loss += std::max(x, 0.0) - x * targets(i) + std::log1p(std::exp(-std::abs(x)));
  }
  auto pl = logits.node();
  return detail::make_op(Mat::Constant(1, 1, loss / count), {logits}, [pl, targets, mask, count](Node& self) {
    if (!pl->requires_grad) return;
    Mat s = pl->value.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    pl->grad_ref() += ((s - targets).cwiseProduct(mask)) * (self.grad(0, 0) / count);
  });
}

}  // namespace pktrack::nn
