#pragma once

// Decoder-only micro-transformer: learned absolute positions, pre-norm
// blocks (attention then ReLU MLP), final layer norm, untied output head.
// Serves both as the prompt generator and as the actor.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metatuner/lora.hpp"
#include "metatuner/numerics.hpp"
#include "metatuner/optimizer.hpp"
#include "metatuner/vocab.hpp"

namespace metatuner {

struct ArchConfig {
  int vocab_size = vocab::kSize;
  int context_len = 32;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  /// Closed form: V*d + l*d + K*(4d^2 + 2*d*f + f + 5d) + 2d + d*V.
  std::size_t parameter_count() const;
  bool operator==(const ArchConfig&) const = default;
};

struct BlockWeights {
  Tensord ln1_gain, ln1_bias;
  Tensord wq, wk, wv, wo;
  Tensord ln2_gain, ln2_bias;
  Tensord w1, b1, w2, b2;
};

struct NamedTensor {
  std::string name;
  Tensord tensor;
};

/// All parameters of one micro-LM. Copies alias the same parameter nodes;
/// use clone() for an independent deep copy.
struct MicroLMWeights {
  ArchConfig arch;
  Tensord tok_emb, pos_emb;
  std::vector<BlockWeights> blocks;
  Tensord lnf_gain, lnf_bias, head;

  static MicroLMWeights init(const ArchConfig& arch, std::uint64_t seed);

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensord> parameters() const;
  std::size_t parameter_count() const;

  MicroLMWeights clone(bool requires_grad = true) const;
  void copy_values_from(const MicroLMWeights& other) const;
  void set_requires_grad(bool on) const;
  void zero_grad() const;
  bool values_equal(const MicroLMWeights& other) const;
  bool all_finite() const;
};

/// Embedding + blocks [0, split) from `lower`; blocks [split, K), final norm
/// and head from `upper`. Both must share an ArchConfig.
MicroLMWeights compose(const MicroLMWeights& lower, const MicroLMWeights& upper, int split);

struct ForwardOptions {
  const LoraFactors* lora = nullptr;
  double lora_scale = 0.0;
  std::optional<int> tap_layer;
};

struct ForwardOutput {
  Tensord logits;                       // n x V
  std::optional<Tensord> tapped_hidden;  // context_len x d_model, zero-padded
};

Tensord embed(const MicroLMWeights& w, std::span<const int> tokens);
Tensord block_forward(const BlockWeights& b, const Tensord& x, int n_heads, const LayerLora* lora = nullptr,
                      double lora_scale = 0.0);
/// Final norm then head.
Tensord output_logits(const MicroLMWeights& w, const Tensord& hidden);

/// Hidden state after `layers` blocks (0 = embeddings), unpadded.
Tensord hidden_states(const MicroLMWeights& w, std::span<const int> tokens, int layers,
                      const ForwardOptions& opts = {});

ForwardOutput forward(const MicroLMWeights& w, std::span<const int> tokens, const ForwardOptions& opts = {});

enum class StopReason { eos, max_len };

struct DecodeResult {
  std::vector<int> tokens;
  std::vector<Matrixd> step_logits;  // 1 x V each
  StopReason stop_reason = StopReason::max_len;
  bool operator==(const DecodeResult&) const = default;
};

/// Appends argmax tokens (lowest id on ties) until EOS or max_new tokens.
/// PAD and BOS are never emitted.
DecodeResult decode_greedy(const MicroLMWeights& w, std::span<const int> prefix, int max_new,
                           const ForwardOptions& opts = {});

/// Samples from softmax(logits / t) by inverse CDF over Rng(seed).uniform();
/// t == 0 is exactly decode_greedy.
DecodeResult sample_with_temperature(const MicroLMWeights& w, std::span<const int> prefix, int max_new,
                                     double temperature, std::uint64_t seed, const ForwardOptions& opts = {});

/// Probabilities used by sample_with_temperature for one logits row.
std::vector<double> sampling_distribution(const Matrixd& logits_row, double temperature);

/// One training sequence: target[i] is the token after input[i], or kIgnoreIndex.
struct SftExample {
  std::vector<int> input;
  std::vector<int> target;
};

/// Builds an SftExample from a sequence whose first `masked_prefix` tokens
/// (predictions of them) carry no loss.
SftExample make_sft_example(std::span<const int> sequence, std::size_t masked_prefix);

/// Token-mean cross-entropy over unmasked targets of the batch, on the tape.
Tensord sft_loss(const MicroLMWeights& w, std::span<const SftExample> batch, const ForwardOptions& opts = {});

/// One Adam step on the batch; returns the pre-step loss.
double sft_step(const MicroLMWeights& w, Adam<double>& opt, std::span<const SftExample> batch);

}  // namespace metatuner
