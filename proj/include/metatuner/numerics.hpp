#pragma once

// Dense reverse-mode differentiation over row-major Eigen matrices.
//
// Every value is a 2-D matrix (scalars are 1x1, vectors are 1xn). A Tensor is
// a cheap handle onto a graph node; copying a Tensor aliases the node. Ops
// record their parents and an adjoint closure only when gradient recording is
// enabled and at least one input requires a gradient, so evaluation under
// NoGradGuard builds no graph at all.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "metatuner/errors.hpp"

namespace metatuner {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrixd = Matrix<double>;

inline constexpr int kIgnoreIndex = -1;
inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  bool is_leaf() const { return !backward; }
  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    }
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename Scalar>
class ComputationTape;

template <typename Scalar>
class Tensor {
 public:
  using Mat = Matrix<Scalar>;
  using NodeType = detail::Node<Scalar>;

  Tensor() = default;

  static Tensor constant(Mat value) {
    Tensor t;
    t.node_ = std::make_shared<NodeType>();
    t.node_->value = std::move(value);
    return t;
  }

  /// Trainable leaf; its gradient buffer starts at zero.
  static Tensor parameter(Mat value) {
    Tensor t = constant(std::move(value));
    t.node_->requires_grad = true;
    t.node_->ensure_grad();
    return t;
  }

  static Tensor zeros(Eigen::Index rows, Eigen::Index cols) { return constant(Mat::Zero(rows, cols)); }

  static Tensor scalar(Scalar v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  bool defined() const { return static_cast<bool>(node_); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Eigen::Index size() const { return node_->value.size(); }

  const Mat& value() const { return node_->value; }
  // Only optimizers and checkpoint loaders write through this.
  Mat& mutable_value() const { return node_->value; }

  const Mat& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  Mat& mutable_grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) const {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
  }
  void zero_grad() const {
    node_->ensure_grad();
    node_->grad.setZero();
  }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string());
    return node_->value(0, 0);
  }

  std::string shape_string() const {
    if (!node_) return "(undefined)";
    std::ostringstream os;
    os << '(' << rows() << 'x' << cols() << ')';
    return os.str();
  }

  const char* op() const { return node_->op; }
  const void* id() const { return node_.get(); }
  NodeType& node() const { return *node_; }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

  /// Reverse pass from a 1x1 tensor; leaf gradients accumulate.
  void backward() const;

  /// Copy of the value with no graph history.
  Tensor detach() const { return constant(node_->value); }

 private:
  std::shared_ptr<NodeType> node_;
};

using Tensord = Tensor<double>;

/// Topologically ordered record of the graph reachable from a root.
template <typename Scalar>
class ComputationTape {
 public:
  using NodeType = detail::Node<Scalar>;

  explicit ComputationTape(const Tensor<Scalar>& root) : root_(&root.node()) {
    // Iterative post-order DFS: parents precede children in order_.
    std::unordered_set<const NodeType*> seen;
    std::vector<std::pair<NodeType*, std::size_t>> stack;
    stack.emplace_back(root_, 0);
    seen.insert(root_);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        NodeType* parent = node->parents[next++].get();
        if (seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<NodeType*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

  void backward(const Matrix<Scalar>& seed) {
    if (seed.rows() != root_->value.rows() || seed.cols() != root_->value.cols()) {
      throw ShapeError("backward seed shape does not match root");
    }
    for (NodeType* n : order_) {
      if (n->is_leaf()) {
        if (n->requires_grad) n->ensure_grad();
      } else {
        n->grad = Matrix<Scalar>::Zero(n->value.rows(), n->value.cols());
      }
    }
    root_->ensure_grad();
    root_->grad += seed;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      NodeType* n = *it;
      if (!n->is_leaf()) n->backward(*n);
    }
  }

 private:
  NodeType* root_;
  std::vector<NodeType*> order_;
};

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (size() != 1) throw ShapeError("backward() requires a 1x1 loss, got " + shape_string());
  ComputationTape<Scalar> tape(*this);
  tape.backward(Mat::Ones(1, 1));
}

namespace detail {

template <typename Scalar>
bool any_requires_grad(std::initializer_list<const Tensor<Scalar>*> inputs) {
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Wraps a forward value; attaches parents and the adjoint only when needed.
template <typename Scalar, typename Backward>
Tensor<Scalar> record(Matrix<Scalar> value, std::initializer_list<const Tensor<Scalar>*> inputs,
                      const char* op, Backward&& backward) {
  Tensor<Scalar> out = Tensor<Scalar>::constant(std::move(value));
  if (grad_enabled() && any_requires_grad<Scalar>(inputs)) {
    auto& node = out.node();
    node.requires_grad = true;
    node.op = op;
    for (const auto* t : inputs) node.parents.push_back(t->node_ptr());
    node.backward = std::forward<Backward>(backward);
  }
  return out;
}

template <typename Scalar>
Node<Scalar>* grad_target(Node<Scalar>& self, std::size_t i) {
  Node<Scalar>* p = self.parents[i].get();
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p;
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix<Scalar> out = a.value() * b.value();
  return detail::record<Scalar>(std::move(out), {&a, &b}, "matmul", [](detail::Node<Scalar>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* pa = detail::grad_target(self, 0)) pa->grad.noalias() += self.grad * bv.transpose();
    if (auto* pb = detail::grad_target(self, 1)) pb->grad.noalias() += av.transpose() * self.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  Matrix<Scalar> out = a.value().transpose();
  return detail::record<Scalar>(std::move(out), {&a}, "transpose", [](detail::Node<Scalar>& self) {
    if (auto* pa = detail::grad_target(self, 0)) pa->grad += self.grad.transpose();
  });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  Matrix<Scalar> out = a.value() + b.value();
  return detail::record<Scalar>(std::move(out), {&a, &b}, "add", [](detail::Node<Scalar>& self) {
    if (auto* pa = detail::grad_target(self, 0)) pa->grad += self.grad;
    if (auto* pb = detail::grad_target(self, 1)) pb->grad += self.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}

/// x + bias broadcast over rows; bias is 1 x cols. The only broadcast supported.
template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeError("add_row: bias " + bias.shape_string() + " does not fit " + x.shape_string());
  }
  Matrix<Scalar> out = x.value().rowwise() + bias.value().row(0);
  return detail::record<Scalar>(std::move(out), {&x, &bias}, "add_row", [](detail::Node<Scalar>& self) {
    if (auto* px = detail::grad_target(self, 0)) px->grad += self.grad;
    if (auto* pb = detail::grad_target(self, 1)) pb->grad += self.grad.colwise().sum();
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  Matrix<Scalar> out = a.value() * s;
  return detail::record<Scalar>(std::move(out), {&a}, "scale", [s](detail::Node<Scalar>& self) {
    if (auto* pa = detail::grad_target(self, 0)) pa->grad += self.grad * s;
  });
}

template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) {
  return scale(a, s);
}

template <typename Scalar>
Tensor<Scalar> hadamard(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "hadamard");
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return detail::record<Scalar>(std::move(out), {&a, &b}, "hadamard", [](detail::Node<Scalar>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* pa = detail::grad_target(self, 0)) pa->grad += self.grad.cwiseProduct(bv);
    if (auto* pb = detail::grad_target(self, 1)) pb->grad += self.grad.cwiseProduct(av);
  });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::record<Scalar>(std::move(out), {&a}, "sum", [](detail::Node<Scalar>& self) {
    if (auto* pa = detail::grad_target(self, 0)) pa->grad.array() += self.grad(0, 0);
  });
}

/// max(0, x); the subgradient at exactly 0 is 0.
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  return detail::record<Scalar>(std::move(out), {&a}, "relu", [](detail::Node<Scalar>& self) {
    if (auto* pa = detail::grad_target(self, 0)) {
      pa->grad.array() += (pa->value.array() > Scalar(0)).select(self.grad.array(), Scalar(0));
    }
  });
}

/// Appends zero rows so the result has exactly `rows` rows.
template <typename Scalar>
Tensor<Scalar> pad_rows(const Tensor<Scalar>& a, Eigen::Index rows) {
  if (rows < a.rows()) {
    throw ShapeError("pad_rows: cannot pad " + a.shape_string() + " down to " + std::to_string(rows) + " rows");
  }
  Matrix<Scalar> out = Matrix<Scalar>::Zero(rows, a.cols());
  out.topRows(a.rows()) = a.value();
  return detail::record<Scalar>(std::move(out), {&a}, "pad_rows", [](detail::Node<Scalar>& self) {
    if (auto* pa = detail::grad_target(self, 0)) pa->grad += self.grad.topRows(pa->value.rows());
  });
}

// ---------------------------------------------------------------------------
// Transformer arithmetic

/// Row-wise normalization; eps is added to the variance.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps = Scalar(kLayerNormEps)) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm: gain " + gain.shape_string() + " / bias " + bias.shape_string() +
                     " do not fit " + x.shape_string());
  }
  Matrix<Scalar> xhat(n, d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i);
    const Scalar mu = row.mean();
    const Scalar var = (row.array() - mu).square().mean();
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = (row.array() - mu) * inv_std(i);
  }
  Matrix<Scalar> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return detail::record<Scalar>(
      std::move(out), {&x, &gain, &bias}, "layer_norm",
      [xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<Scalar>& self) {
        const auto& g = self.grad;
        const auto& gainv = self.parents[1]->value;
        if (auto* px = detail::grad_target(self, 0)) {
          const Eigen::Index d = g.cols();
          for (Eigen::Index i = 0; i < g.rows(); ++i) {
            Eigen::Array<Scalar, 1, Eigen::Dynamic> dxhat = g.row(i).array() * gainv.row(0).array();
            const Scalar mean_dxhat = dxhat.sum() / Scalar(d);
            const Scalar mean_dxhat_xhat = (dxhat * xhat.row(i).array()).sum() / Scalar(d);
            px->grad.row(i).array() +=
                inv_std(i) * (dxhat - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat);
          }
        }
        if (auto* pg = detail::grad_target(self, 1)) pg->grad += g.cwiseProduct(xhat).colwise().sum();
        if (auto* pb = detail::grad_target(self, 2)) pb->grad += g.colwise().sum();
      });
}

/// Rows of `table` selected by `ids`.
template <typename Scalar>
Tensor<Scalar> embedding_gather(const Tensor<Scalar>& table, std::span<const int> ids) {
  Matrix<Scalar> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw IndexError("embedding_gather: id " + std::to_string(ids[i]) + " outside table " + table.shape_string());
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::record<Scalar>(std::move(out), {&table}, "embedding_gather",
                                [idv = std::move(idv)](detail::Node<Scalar>& self) {
                                  if (auto* pt = detail::grad_target(self, 0)) {
                                    for (std::size_t i = 0; i < idv.size(); ++i) {
                                      pt->grad.row(idv[i]) += self.grad.row(static_cast<Eigen::Index>(i));
                                    }
                                  }
                                });
}

/// Per-head causal attention probabilities softmax(q_h k_h^T / sqrt(head_dim)),
/// with positions j > i masked out. Plain matrices; not recorded.
template <typename Scalar>
std::vector<Matrix<Scalar>> causal_attention_scores(const Matrix<Scalar>& q, const Matrix<Scalar>& k, int n_heads) {
  const Eigen::Index n = q.rows();
  const Eigen::Index hd = q.cols() / n_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  std::vector<Matrix<Scalar>> probs;
  probs.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Matrix<Scalar> s = (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose()) * inv_sqrt;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar m = s.row(i).head(i + 1).maxCoeff();
      s.row(i).head(i + 1) = (s.row(i).head(i + 1).array() - m).exp().matrix();
      s.row(i).head(i + 1) /= s.row(i).head(i + 1).sum();
      s.row(i).tail(n - i - 1).setZero();
    }
    probs.push_back(std::move(s));
  }
  return probs;
}

/// Multi-head causal self-attention over already-projected q, k, v (n x d each).
template <typename Scalar>
Tensor<Scalar> causal_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                int n_heads) {
  detail::require_same_shape(q, k, "causal_attention(q,k)");
  detail::require_same_shape(q, v, "causal_attention(q,v)");
  if (n_heads <= 0 || q.cols() % n_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(q.cols()) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  const Eigen::Index hd = q.cols() / n_heads;
  auto probs = causal_attention_scores<Scalar>(q.value(), k.value(), n_heads);
  Matrix<Scalar> out(q.rows(), q.cols());
  for (int h = 0; h < n_heads; ++h) {
    out.middleCols(h * hd, hd).noalias() = probs[h] * v.value().middleCols(h * hd, hd);
  }
  return detail::record<Scalar>(
      std::move(out), {&q, &k, &v}, "causal_attention",
      [probs = std::move(probs), n_heads, hd](detail::Node<Scalar>& self) {
        const auto& qv = self.parents[0]->value;
        const auto& kv = self.parents[1]->value;
        const auto& vv = self.parents[2]->value;
        auto* pq = detail::grad_target(self, 0);
        auto* pk = detail::grad_target(self, 1);
        auto* pv = detail::grad_target(self, 2);
        const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
        for (int h = 0; h < n_heads; ++h) {
          const auto& p = probs[h];
          const auto dout = self.grad.middleCols(h * hd, hd);
          if (pv) pv->grad.middleCols(h * hd, hd).noalias() += p.transpose() * dout;
          if (!pq && !pk) continue;
          Matrix<Scalar> dp = dout * vv.middleCols(h * hd, hd).transpose();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = dp.cwiseProduct(p).rowwise().sum();
          Matrix<Scalar> ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * inv_sqrt;
          if (pq) pq->grad.middleCols(h * hd, hd).noalias() += ds * kv.middleCols(h * hd, hd);
          if (pk) pk->grad.middleCols(h * hd, hd).noalias() += ds.transpose() * qv.middleCols(h * hd, hd);
        }
      });
}

/// Mean over non-ignored rows of -log softmax(logits)[target]; rows whose
/// target is kIgnoreIndex do not contribute.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> targets) {
  const Eigen::Index n = logits.rows(), vocab = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     logits.shape_string());
  }
  int count = 0;
  for (int t : targets) {
    if (t == kIgnoreIndex) continue;
    if (t < 0 || t >= vocab) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw ValueError("softmax_cross_entropy: every target is masked");

  Matrix<Scalar> probs(n, vocab);
  Scalar total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = logits.value().row(i);
    const Scalar m = row.maxCoeff();
    auto e = (row.array() - m).exp();
    const Scalar z = e.sum();
    probs.row(i) = e / z;
    if (targets[i] != kIgnoreIndex) total += (m + std::log(z)) - row(targets[i]);
  }
  std::vector<int> tv(targets.begin(), targets.end());
  return detail::record<Scalar>(
      Matrix<Scalar>::Constant(1, 1, total / Scalar(count)), {&logits}, "softmax_cross_entropy",
      [probs = std::move(probs), tv = std::move(tv), count](detail::Node<Scalar>& self) {
        auto* pl = detail::grad_target(self, 0);
        if (!pl) return;
        const Scalar g = self.grad(0, 0) / Scalar(count);
        for (std::size_t i = 0; i < tv.size(); ++i) {
          if (tv[i] == kIgnoreIndex) continue;
          const auto r = static_cast<Eigen::Index>(i);
          pl->grad.row(r) += g * probs.row(r);
          pl->grad(r, tv[i]) -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient verification

struct FiniteDifferenceReport {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  Eigen::Index worst_entry = 0;
  double worst_tape_grad = 0.0;
  double worst_fd_grad = 0.0;
  std::size_t entries_checked = 0;
};

/// Compares tape gradients against central differences for every entry of
/// every parameter. Error per entry is |g_tape - g_fd| / max(1, |g_fd|).
template <typename Scalar>
FiniteDifferenceReport finite_difference_check(const std::function<Tensor<Scalar>()>& loss_fn,
                                               std::span<const Tensor<Scalar>> params, Scalar epsilon = Scalar(1e-5)) {
  if (!(epsilon > 0)) throw ValueError("finite_difference_check: epsilon must be positive");
  for (const auto& p : params) p.zero_grad();

  Tensor<Scalar> loss = loss_fn();
  {
    NoGradGuard guard;
    const Scalar again = loss_fn().item();
    if (again != loss.item()) throw DeterminismError("finite_difference_check: loss_fn is not deterministic");
  }
  loss.backward();

  FiniteDifferenceReport report;
  NoGradGuard guard;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi].mutable_value();
    const Matrix<Scalar> tape = params[pi].grad();
    for (Eigen::Index e = 0; e < value.size(); ++e) {
      Scalar& slot = value.data()[e];
      const Scalar saved = slot;
      slot = saved + epsilon;
      const Scalar up = loss_fn().item();
      slot = saved - epsilon;
      const Scalar down = loss_fn().item();
      slot = saved;
      const double fd = static_cast<double>((up - down) / (Scalar(2) * epsilon));
      const double tg = static_cast<double>(tape.data()[e]);
      const double err = std::abs(tg - fd) / std::max(1.0, std::abs(fd));
      if (report.entries_checked++ == 0 || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_param = pi;
        report.worst_entry = e;
        report.worst_tape_grad = tg;
        report.worst_fd_grad = fd;
      }
    }
  }
  return report;
}

template <typename Scalar>
bool all_finite(const Matrix<Scalar>& m) {
  return m.allFinite();
}

}  // namespace metatuner
