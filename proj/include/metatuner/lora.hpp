#pragma once

#include <vector>

#include "metatuner/numerics.hpp"

namespace metatuner {

/// Low-rank update for one actor layer: delta W = theta_b * theta_a.
struct LayerLora {
  Tensord theta_b;  // d_M x r_M
  Tensord theta_a;  // r_M x k_M
};

/// Per-query factors, one entry per actor layer.
struct LoraFactors {
  std::vector<LayerLora> layers;
};

/// W + scale * theta_b * theta_a, built on the tape; `base` is never written.
/// A zero scale returns `base` itself.
inline Tensord effective_projection(const Tensord& base, const LayerLora& lora, double scale) {
  if (lora.theta_b.rows() != base.rows() || lora.theta_a.cols() != base.cols() ||
      lora.theta_b.cols() != lora.theta_a.rows()) {
    throw ShapeError("lora: factors " + lora.theta_b.shape_string() + " * " + lora.theta_a.shape_string() +
                     " do not fit projection " + base.shape_string());
  }
  if (scale == 0.0) return base;
  return add(base, scale * matmul(lora.theta_b, lora.theta_a));
}

}  // namespace metatuner
