#pragma once

// Hypernetwork parameter decoder. For each actor layer it maps the padded
// meta-encoder states h (l x h_G) to LoRA factors for the attention output
// projection:
//
//   theta_b = ReLU(W_d_b * h) * W_u_b     (d_M x l)(l x h_G)(h_G x r_M)
//   theta_a = ReLU(W_d_a * h) * W_u_a     (r_M x l)(l x h_G)(h_G x k_M)

#include <cstdint>
#include <vector>

#include "metatuner/lora.hpp"
#include "metatuner/microlm.hpp"

namespace metatuner {

struct LoraConfig {
  int rank = 4;             // r_M
  double lambda = 0.1;      // scale applied to theta_b * theta_a
  int d_model = 32;         // d_M == k_M (square o_proj)
  int n_layers = 2;         // actor layers receiving an update
  bool shared_hypernetwork = false;  // one decoder reused for every layer

  void validate() const;
};

struct HyperLayerWeights {
  Tensord down_b;  // W_d_b: d_M x l
  Tensord up_b;    // W_u_b: h_G x r_M
  Tensord down_a;  // W_d_a: r_M x l
  Tensord up_a;    // W_u_a: h_G x k_M
};

struct HyperNetworkWeights {
  int context_len = 0;  // l
  int hidden = 0;       // h_G
  LoraConfig lora;
  std::vector<HyperLayerWeights> layers;  // one per actor layer, or one when shared

  const HyperLayerWeights& for_layer(std::size_t actor_layer) const {
    return lora.shared_hypernetwork ? layers.front() : layers.at(actor_layer);
  }
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensord> parameters() const;
  HyperNetworkWeights clone() const;
  bool values_equal(const HyperNetworkWeights& other) const;
};

/// W_d ~ N(0, 1/l), W_u_b = 0, W_u_a ~ N(0, 1/h_G): theta_b starts at exactly
/// zero (so the update does too) while theta_a is not.
HyperNetworkWeights init_hypernetwork(const LoraConfig& cfg, int context_len, int hidden, std::uint64_t seed);

LoraFactors generate_lora(const HyperNetworkWeights& hyper, const Tensord& h);

/// Effective o_proj per actor layer: W_o + lambda * theta_b * theta_a.
std::vector<Tensord> apply_lora(const MicroLMWeights& base, const LoraFactors& factors, const LoraConfig& cfg);

/// Forward options that route `factors` into the actor at cfg.lambda.
inline ForwardOptions lora_options(const LoraFactors& factors, const LoraConfig& cfg) {
  ForwardOptions o;
  o.lora = &factors;
  o.lora_scale = cfg.lambda;
  return o;
}

/// FNV-1a over factor values; used to tag rollouts.
std::uint64_t factors_hash(const LoraFactors& factors);
/// Frobenius norm of theta_b * theta_a per layer.
std::vector<double> factor_update_norms(const LoraFactors& factors);

}  // namespace metatuner
