#pragma once

#include <cmath>
#include <span>
#include <unordered_map>
#include <vector>

#include "metatuner/numerics.hpp"

namespace metatuner {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction and a per-parameter step count, so a subset of
/// parameters can be stepped without advancing the others.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<Scalar>> params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (auto& p : params) {
      if (index_.count(p.id())) continue;
      index_.emplace(p.id(), slots_.size());
      slots_.push_back({p, Matrix<Scalar>::Zero(p.rows(), p.cols()), Matrix<Scalar>::Zero(p.rows(), p.cols()), 0, -1.0});
    }
  }

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  /// Per-parameter learning rate that overrides the shared one.
  void set_lr(std::span<const Tensor<Scalar>> subset, double lr) {
    for (const auto& p : subset) slot(p).lr = lr;
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  void step() {
    for (auto& s : slots_) update(s);
  }

  /// Steps only the listed parameters (each must belong to this optimizer).
  void step(std::span<const Tensor<Scalar>> subset) {
    for (const auto& p : subset) update(slot(p));
  }

  std::size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor<Scalar> param;
    Matrix<Scalar> m, v;
    long step;
    double lr;  // < 0: use the shared rate
  };

  Slot& slot(const Tensor<Scalar>& p) {
    auto it = index_.find(p.id());
    if (it == index_.end()) throw ValueError("Adam: parameter not registered with this optimizer");
    return slots_[it->second];
  }

  void update(Slot& s) {
    ++s.step;
    const auto& g = s.param.grad();
    const Scalar b1 = Scalar(cfg_.beta1), b2 = Scalar(cfg_.beta2);
    s.m = b1 * s.m + (Scalar(1) - b1) * g;
    s.v = b2 * s.v + (Scalar(1) - b2) * g.cwiseProduct(g);
    const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(s.step));
    const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(s.step));
    const Scalar lr = Scalar(s.lr >= 0.0 ? s.lr : cfg_.lr);
    auto& w = s.param.mutable_value();
    w.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + Scalar(cfg_.eps));
  }

  AdamConfig cfg_;
  std::vector<Slot> slots_;
  std::unordered_map<const void*, std::size_t> index_;
};

/// Rescales gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
template <typename Scalar>
Scalar clip_grad_norm(std::span<const Tensor<Scalar>> params, Scalar max_norm) {
  Scalar sq = 0;
  for (const auto& p : params) sq += p.grad().squaredNorm();
  const Scalar norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const Scalar f = max_norm / norm;
    for (const auto& p : params) p.mutable_grad() *= f;
  }
  return norm;
}

}  // namespace metatuner
