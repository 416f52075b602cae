#pragma once

// The joint model. The generator's parameters split at depth k into the
// shared meta-encoder (embeddings + blocks [0, k)) and the private prompt
// decoder (blocks [k, K), final norm, head). The parameter decoder reads the
// meta-encoder's padded states and emits per-query LoRA factors for the
// frozen actor.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "metatuner/adapters.hpp"
#include "metatuner/microlm.hpp"
#include "metatuner/tasks.hpp"

namespace metatuner {

struct PipelineConfig {
  int split_depth = 3;  // k
  int max_prompt_len = 8;  // L_p
  int max_answer_len = 7;  // answer tokens + EOS budget for actor decoding
  std::vector<int> initial_prompt{vocab::kInstrGeneric};
  /// Snapshot sampling also uses the frozen copy of the shared layers.
  bool snapshot_includes_shared = false;
  /// w/o S: the parameter branch gets its own full copy of the generator.
  bool independent_param_encoder = false;
};

enum class PromptSource { snapshot_rollout, live_greedy, expert_oracle };

struct PromptSample {
  std::vector<int> query;
  std::vector<int> prompt;
  PromptSource source = PromptSource::live_greedy;
};

struct PromptMode {
  enum class Kind { greedy_live, sampled_snapshot } kind = Kind::greedy_live;
  double temperature = 0.0;
  std::uint64_t seed = 0;

  static PromptMode greedy() { return {}; }
  static PromptMode snapshot(double t, std::uint64_t seed) { return {Kind::sampled_snapshot, t, seed}; }
};

/// Owns every parameter set. Move-only: parameter handles must not be
/// silently shared between two models.
class MetaTunerModel {
 public:
  MicroLMWeights generator;                     // phi_s + phi_p (live)
  MicroLMWeights snapshot;                      // phi'_p, never on the tape
  std::optional<MicroLMWeights> param_encoder;  // phi_s' when sharing is ablated
  HyperNetworkWeights phi_q;
  MicroLMWeights actor;                         // frozen
  LoraConfig lora;
  PipelineConfig config;

  MetaTunerModel() = default;
  MetaTunerModel(MetaTunerModel&&) = default;
  MetaTunerModel& operator=(MetaTunerModel&&) = default;
  MetaTunerModel(const MetaTunerModel&) = delete;
  MetaTunerModel& operator=(const MetaTunerModel&) = delete;

  /// Builds the joint model around warmed generator/actor weights (cloned).
  static MetaTunerModel assemble(const MicroLMWeights& warmed_generator, const MicroLMWeights& warmed_actor,
                                 LoraConfig lora, PipelineConfig config, std::uint64_t seed);

  MetaTunerModel clone() const;

  /// Split used by the prompt branch: k, or 0 when the parameter branch is independent.
  int prompt_split() const { return config.independent_param_encoder ? 0 : config.split_depth; }
  const MicroLMWeights& meta_encoder_source() const { return param_encoder ? *param_encoder : generator; }

  std::vector<Tensord> shared_parameters() const;          // phi_s of the generator
  std::vector<Tensord> prompt_private_parameters() const;  // phi_p
  std::vector<Tensord> hyper_parameters() const;           // phi_q
  std::vector<Tensord> param_encoder_parameters() const;   // phi_s' (empty unless independent)
  /// Everything the answer loss can reach: meta-encoder + phi_q.
  std::vector<Tensord> parameter_branch() const;
  /// Everything the prompt loss can reach: all generator parameters.
  std::vector<Tensord> prompt_branch() const;
  std::vector<Tensord> trainable_parameters() const;

  void validate() const;
};

/// [BOS, p~, SEP, x]
std::vector<int> generator_prefix(const MetaTunerModel& model, std::span<const int> x);
/// [BOS, prompt, SEP, x, SEP]
std::vector<int> actor_prefix(std::span<const int> prompt, std::span<const int> x);

/// Meta-encoder states for x, layer-normalized without parameters and
/// zero-padded to l rows. On the tape.
Tensord encode_meta(const MetaTunerModel& model, std::span<const int> x);

/// Decodes up to L_p prompt tokens; the tokens carry no gradient.
PromptSample generate_prompt(const MetaTunerModel& model, std::span<const int> x, const PromptMode& mode);

LoraFactors generate_params(const MetaTunerModel& model, std::span<const int> x);

/// Cross-entropy of the gold answer (+EOS) under the actor with factors at lambda.
Tensord answer_loss(const MetaTunerModel& model, std::span<const int> x, std::span<const int> prompt,
                    const LoraFactors& factors, std::span<const int> gold);

/// Greedy actor answer with factors at lambda.
DecodeResult answer_decode(const MetaTunerModel& model, std::span<const int> x, std::span<const int> prompt,
                           const LoraFactors& factors);

struct AnswerResult {
  std::vector<int> decoded;
  std::optional<Tensord> loss;
};

AnswerResult answer(const MetaTunerModel& model, std::span<const int> x, const PromptSample& prompt,
                    const LoraFactors& factors, std::optional<std::span<const int>> gold = std::nullopt);

/// Sum of log-probabilities of gold (+EOS); no tape.
double answer_log_likelihood(const MetaTunerModel& model, std::span<const int> x, std::span<const int> prompt,
                             const LoraFactors& factors, std::span<const int> gold);

/// Prompt cross-entropy of the live generator on (x, prompt + EOS); loss on prompt tokens only.
Tensord prompt_loss(const MetaTunerModel& model, std::span<const int> x, std::span<const int> prompt);

/// snapshot := live generator values.
void update_snapshot(MetaTunerModel& model);

/// Full greedy pipeline for one query: live prompt, generated factors, answer.
struct PipelineOutput {
  std::vector<int> prompt;
  LoraFactors factors;
  DecodeResult answer;
};
PipelineOutput run_pipeline(const MetaTunerModel& model, std::span<const int> x);

}  // namespace metatuner
