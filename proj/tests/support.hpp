#pragma once

// Small models and helpers shared by the unit tests.

#include <vector>

#include "metatuner/pipeline.hpp"
#include "metatuner/rng.hpp"

namespace metatuner::testing {

inline ArchConfig tiny_generator_arch() {
  ArchConfig a;
  a.context_len = 16;
  a.d_model = 16;
  a.n_layers = 2;
  a.n_heads = 2;
  a.d_ff = 24;
  return a;
}

inline ArchConfig tiny_actor_arch() {
  ArchConfig a;
  a.context_len = 24;
  a.d_model = 16;
  a.n_layers = 2;
  a.n_heads = 2;
  a.d_ff = 24;
  return a;
}

inline Matrixd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
  Matrixd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

/// Overwrites the zero-initialized up-projection so generated factors are nonzero.
inline void randomize_up_projections(MetaTunerModel& m, std::uint64_t seed, double sd = 0.3) {
  Rng rng(seed);
  for (auto& layer : m.phi_q.layers) {
    layer.up_b.mutable_value() = random_matrix(rng, layer.up_b.rows(), layer.up_b.cols(), sd);
    layer.up_a.mutable_value() = random_matrix(rng, layer.up_a.rows(), layer.up_a.cols(), sd);
  }
}

inline MetaTunerModel tiny_model(std::uint64_t seed, int rank = 2, int split = 1, bool independent = false,
                                 double lambda = 0.1) {
  LoraConfig lora;
  lora.rank = rank;
  lora.lambda = lambda;
  PipelineConfig pc;
  pc.split_depth = split;
  pc.max_prompt_len = 3;
  pc.max_answer_len = 7;
  pc.independent_param_encoder = independent;
  const auto gen = MicroLMWeights::init(tiny_generator_arch(), derive_seed(seed, 1));
  const auto act = MicroLMWeights::init(tiny_actor_arch(), derive_seed(seed, 2));
  return MetaTunerModel::assemble(gen, act, lora, pc, derive_seed(seed, 3));
}

/// [CUE_k, operand] with an operand of `len` digits.
inline std::vector<int> random_query(Rng& rng, int len = 4) {
  std::vector<int> x{vocab::kCue1 + static_cast<int>(rng.below(vocab::kNumCues))};
  for (int i = 0; i < len; ++i) x.push_back(vocab::kDigit0 + static_cast<int>(rng.below(10)));
  return x;
}

inline std::vector<std::vector<double>> values_of(const std::vector<Tensord>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.value().data(), p.value().data() + p.value().size());
  return out;
}

}  // namespace metatuner::testing
