#include "metatuner/microlm.hpp"

#include <cmath>
#include <limits>

#include "metatuner/errors.hpp"
#include "metatuner/rng.hpp"

namespace metatuner {

void ArchConfig::validate() const {
  if (vocab_size <= 0 || context_len <= 0 || d_model <= 0 || n_layers < 0 || n_heads <= 0 || d_ff <= 0) {
    throw ValueError("ArchConfig: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ValueError("ArchConfig: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                     std::to_string(n_heads));
  }
}

std::size_t ArchConfig::parameter_count() const {
  const std::size_t V = static_cast<std::size_t>(vocab_size), l = static_cast<std::size_t>(context_len),
                    d = static_cast<std::size_t>(d_model), K = static_cast<std::size_t>(n_layers),
                    f = static_cast<std::size_t>(d_ff);
  return V * d + l * d + K * (4 * d * d + 2 * d * f + f + 5 * d) + 2 * d + d * V;
}

namespace {

Tensord random_param(Rng& rng, int rows, int cols, double stddev) {
  Matrixd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, stddev);
  return Tensord::parameter(std::move(m));
}

Tensord const_param(int rows, int cols, double v) { return Tensord::parameter(Matrixd::Constant(rows, cols, v)); }

Tensord clone_tensor(const Tensord& t, bool requires_grad) {
  return requires_grad ? Tensord::parameter(t.value()) : Tensord::constant(t.value());
}

}  // namespace

MicroLMWeights MicroLMWeights::init(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  const int d = arch.d_model, f = arch.d_ff;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_std = proj_std / std::sqrt(2.0 * std::max(1, arch.n_layers));
  MicroLMWeights w;
  w.arch = arch;
  w.tok_emb = random_param(rng, arch.vocab_size, d, 0.5);
  w.pos_emb = random_param(rng, arch.context_len, d, 0.5);
  for (int layer = 0; layer < arch.n_layers; ++layer) {
    BlockWeights b;
    b.ln1_gain = const_param(1, d, 1.0);
    b.ln1_bias = const_param(1, d, 0.0);
    b.wq = random_param(rng, d, d, proj_std);
    b.wk = random_param(rng, d, d, proj_std);
    b.wv = random_param(rng, d, d, proj_std);
    b.wo = random_param(rng, d, d, resid_std);
    b.ln2_gain = const_param(1, d, 1.0);
    b.ln2_bias = const_param(1, d, 0.0);
    b.w1 = random_param(rng, d, f, proj_std);
    b.b1 = const_param(1, f, 0.0);
    b.w2 = random_param(rng, f, d, resid_std * std::sqrt(static_cast<double>(d) / f));
    b.b2 = const_param(1, d, 0.0);
    w.blocks.push_back(std::move(b));
  }
  w.lnf_gain = const_param(1, d, 1.0);
  w.lnf_bias = const_param(1, d, 0.0);
  w.head = random_param(rng, d, arch.vocab_size, proj_std);
  return w;
}

std::vector<NamedTensor> MicroLMWeights::named_parameters() const {
  std::vector<NamedTensor> out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.push_back({p + "ln1_gain", b.ln1_gain});
    out.push_back({p + "ln1_bias", b.ln1_bias});
    out.push_back({p + "wq", b.wq});
    out.push_back({p + "wk", b.wk});
    out.push_back({p + "wv", b.wv});
    out.push_back({p + "wo", b.wo});
    out.push_back({p + "ln2_gain", b.ln2_gain});
    out.push_back({p + "ln2_bias", b.ln2_bias});
    out.push_back({p + "w1", b.w1});
    out.push_back({p + "b1", b.b1});
    out.push_back({p + "w2", b.w2});
    out.push_back({p + "b2", b.b2});
  }
  out.push_back({"lnf_gain", lnf_gain});
  out.push_back({"lnf_bias", lnf_bias});
  out.push_back({"head", head});
  return out;
}

std::vector<Tensord> MicroLMWeights::parameters() const {
  std::vector<Tensord> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

std::size_t MicroLMWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += static_cast<std::size_t>(t.size());
  return n;
}

MicroLMWeights MicroLMWeights::clone(bool requires_grad) const {
  MicroLMWeights w;
  w.arch = arch;
  w.tok_emb = clone_tensor(tok_emb, requires_grad);
  w.pos_emb = clone_tensor(pos_emb, requires_grad);
  for (const auto& b : blocks) {
    w.blocks.push_back({clone_tensor(b.ln1_gain, requires_grad), clone_tensor(b.ln1_bias, requires_grad),
                        clone_tensor(b.wq, requires_grad), clone_tensor(b.wk, requires_grad),
                        clone_tensor(b.wv, requires_grad), clone_tensor(b.wo, requires_grad),
                        clone_tensor(b.ln2_gain, requires_grad), clone_tensor(b.ln2_bias, requires_grad),
                        clone_tensor(b.w1, requires_grad), clone_tensor(b.b1, requires_grad),
                        clone_tensor(b.w2, requires_grad), clone_tensor(b.b2, requires_grad)});
  }
  w.lnf_gain = clone_tensor(lnf_gain, requires_grad);
  w.lnf_bias = clone_tensor(lnf_bias, requires_grad);
  w.head = clone_tensor(head, requires_grad);
  return w;
}

void MicroLMWeights::copy_values_from(const MicroLMWeights& other) const {
  if (!(arch == other.arch)) throw ShapeError("copy_values_from: architecture mismatch");
  const auto dst = parameters();
  const auto src = other.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i].mutable_value() = src[i].value();
}

void MicroLMWeights::set_requires_grad(bool on) const {
  for (const auto& t : parameters()) t.set_requires_grad(on);
}

void MicroLMWeights::zero_grad() const {
  for (const auto& t : parameters()) {
    if (t.requires_grad()) t.zero_grad();
  }
}

bool MicroLMWeights::values_equal(const MicroLMWeights& other) const {
  if (!(arch == other.arch)) return false;
  const auto a = parameters();
  const auto b = other.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].value() != b[i].value()) return false;
  }
  return true;
}

bool MicroLMWeights::all_finite() const {
  for (const auto& t : parameters()) {
    if (!t.value().allFinite()) return false;
  }
  return true;
}

MicroLMWeights compose(const MicroLMWeights& lower, const MicroLMWeights& upper, int split) {
  if (!(lower.arch == upper.arch)) throw ShapeError("compose: architectures differ");
  if (split < 0 || split > lower.arch.n_layers) {
    throw RangeError("compose: split " + std::to_string(split) + " outside [0, " +
                     std::to_string(lower.arch.n_layers) + "]");
  }
  MicroLMWeights w = upper;
  w.tok_emb = lower.tok_emb;
  w.pos_emb = lower.pos_emb;
  for (int i = 0; i < split; ++i) w.blocks[static_cast<std::size_t>(i)] = lower.blocks[static_cast<std::size_t>(i)];
  return w;
}

Tensord embed(const MicroLMWeights& w, std::span<const int> tokens) {
  if (tokens.empty()) throw LengthError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > w.arch.context_len) {
    throw LengthError("forward: " + std::to_string(tokens.size()) + " tokens exceed context_len " +
                      std::to_string(w.arch.context_len));
  }
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  return embedding_gather(w.tok_emb, tokens) + embedding_gather(w.pos_emb, std::span<const int>(positions));
}

Tensord block_forward(const BlockWeights& b, const Tensord& x, int n_heads, const LayerLora* lora,
                      double lora_scale) {
  const Tensord a = layer_norm(x, b.ln1_gain, b.ln1_bias);
  const Tensord attn = causal_attention(matmul(a, b.wq), matmul(a, b.wk), matmul(a, b.wv), n_heads);
  const Tensord wo = lora ? effective_projection(b.wo, *lora, lora_scale) : b.wo;
  const Tensord h = x + matmul(attn, wo);
  const Tensord m = layer_norm(h, b.ln2_gain, b.ln2_bias);
  return h + add_row(matmul(relu(add_row(matmul(m, b.w1), b.b1)), b.w2), b.b2);
}

Tensord output_logits(const MicroLMWeights& w, const Tensord& hidden) {
  return matmul(layer_norm(hidden, w.lnf_gain, w.lnf_bias), w.head);
}

namespace {

void check_lora(const MicroLMWeights& w, const ForwardOptions& opts) {
  if (!opts.lora) return;
  if (opts.lora->layers.size() != w.blocks.size()) {
    throw ShapeError("forward: " + std::to_string(opts.lora->layers.size()) + " LoRA layers for " +
                     std::to_string(w.blocks.size()) + " blocks");
  }
}

Tensord run_blocks(const MicroLMWeights& w, Tensord h, int begin, int end, const ForwardOptions& opts) {
  for (int i = begin; i < end; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const LayerLora* lora = opts.lora ? &opts.lora->layers[idx] : nullptr;
    h = block_forward(w.blocks[idx], h, w.arch.n_heads, lora, opts.lora_scale);
  }
  return h;
}

}  // namespace

Tensord hidden_states(const MicroLMWeights& w, std::span<const int> tokens, int layers, const ForwardOptions& opts) {
  if (layers < 0 || layers > w.arch.n_layers) {
    throw RangeError("hidden_states: layer " + std::to_string(layers) + " outside [0, " +
                     std::to_string(w.arch.n_layers) + "]");
  }
  check_lora(w, opts);
  return run_blocks(w, embed(w, tokens), 0, layers, opts);
}

ForwardOutput forward(const MicroLMWeights& w, std::span<const int> tokens, const ForwardOptions& opts) {
  if (opts.tap_layer && (*opts.tap_layer < 0 || *opts.tap_layer > w.arch.n_layers)) {
    throw RangeError("forward: tap_layer " + std::to_string(*opts.tap_layer) + " outside [0, " +
                     std::to_string(w.arch.n_layers) + "]");
  }
  check_lora(w, opts);
  ForwardOutput out;
  const int tap = opts.tap_layer.value_or(-1);
  Tensord h = embed(w, tokens);
  if (tap == 0) out.tapped_hidden = pad_rows(h, w.arch.context_len);
  for (int i = 0; i < w.arch.n_layers; ++i) {
    h = run_blocks(w, h, i, i + 1, opts);
    if (tap == i + 1) out.tapped_hidden = pad_rows(h, w.arch.context_len);
  }
  out.logits = output_logits(w, h);
  return out;
}

std::vector<double> sampling_distribution(const Matrixd& logits_row, double temperature) {
  const auto V = logits_row.cols();
  std::vector<double> p(static_cast<std::size_t>(V), 0.0);
  double m = -std::numeric_limits<double>::infinity();
  for (Eigen::Index v = 0; v < V; ++v) {
    if (v == vocab::kPad || v == vocab::kBos) continue;
    m = std::max(m, logits_row(0, v) / temperature);
  }
  double z = 0.0;
  for (Eigen::Index v = 0; v < V; ++v) {
    if (v == vocab::kPad || v == vocab::kBos) continue;
    p[static_cast<std::size_t>(v)] = std::exp(logits_row(0, v) / temperature - m);
    z += p[static_cast<std::size_t>(v)];
  }
  for (double& x : p) x /= z;
  return p;
}

namespace {

int argmax_token(const Matrixd& row) {
  int best = -1;
  for (Eigen::Index v = 0; v < row.cols(); ++v) {
    if (v == vocab::kPad || v == vocab::kBos) continue;
    if (best < 0 || row(0, v) > row(0, best)) best = static_cast<int>(v);
  }
  return best;
}

template <typename Pick>
DecodeResult decode_loop(const MicroLMWeights& w, std::span<const int> prefix, int max_new, const ForwardOptions& opts,
                         Pick&& pick) {
  if (prefix.empty()) throw LengthError("decode: empty prefix");
  if (static_cast<int>(prefix.size()) > w.arch.context_len) {
    throw LengthError("decode: prefix of " + std::to_string(prefix.size()) + " tokens exceeds context_len " +
                      std::to_string(w.arch.context_len));
  }
  NoGradGuard no_grad;
  ForwardOptions fo = opts;
  fo.tap_layer.reset();
  DecodeResult result;
  std::vector<int> seq(prefix.begin(), prefix.end());
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(seq.size()) > w.arch.context_len) break;
    const auto out = forward(w, seq, fo);
    Matrixd last = out.logits.value().bottomRows(1);
    const int tok = pick(last);
    result.step_logits.push_back(std::move(last));
    if (tok == vocab::kEos) {
      result.stop_reason = StopReason::eos;
      return result;
    }
    result.tokens.push_back(tok);
    seq.push_back(tok);
  }
  result.stop_reason = StopReason::max_len;
  return result;
}

}  // namespace

DecodeResult decode_greedy(const MicroLMWeights& w, std::span<const int> prefix, int max_new,
                           const ForwardOptions& opts) {
  return decode_loop(w, prefix, max_new, opts, [](const Matrixd& row) { return argmax_token(row); });
}

DecodeResult sample_with_temperature(const MicroLMWeights& w, std::span<const int> prefix, int max_new,
                                     double temperature, std::uint64_t seed, const ForwardOptions& opts) {
  if (temperature < 0.0 || std::isnan(temperature)) {
    throw ValueError("sample_with_temperature: temperature must be >= 0");
  }
  if (temperature == 0.0) return decode_greedy(w, prefix, max_new, opts);
  Rng rng(seed);
  return decode_loop(w, prefix, max_new, opts, [&](const Matrixd& row) {
    const auto p = sampling_distribution(row, temperature);
    const double u = rng.uniform();
    double acc = 0.0;
    int last_allowed = 0;
    for (std::size_t v = 0; v < p.size(); ++v) {
      if (p[v] <= 0.0) continue;
      last_allowed = static_cast<int>(v);
      acc += p[v];
      if (u < acc) return static_cast<int>(v);
    }
    return last_allowed;
  });
}

SftExample make_sft_example(std::span<const int> sequence, std::size_t masked_prefix) {
  if (sequence.size() < 2) throw ValueError("make_sft_example: need at least two tokens");
  SftExample ex;
  ex.input.assign(sequence.begin(), sequence.end() - 1);
  ex.target.resize(ex.input.size());
  for (std::size_t i = 0; i < ex.input.size(); ++i) {
    // target[i] predicts sequence[i + 1]
    ex.target[i] = (i + 1 >= masked_prefix) ? sequence[i + 1] : kIgnoreIndex;
  }
  return ex;
}

Tensord sft_loss(const MicroLMWeights& w, std::span<const SftExample> batch, const ForwardOptions& opts) {
  std::size_t total = 0;
  std::vector<std::size_t> counts(batch.size(), 0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].input.size() != batch[i].target.size()) {
      throw ShapeError("sft_loss: input and target lengths differ");
    }
    for (int t : batch[i].target) counts[i] += (t != kIgnoreIndex);
    total += counts[i];
  }
  if (total == 0) throw ValueError("sft_loss: no unmasked target in batch");
  Tensord loss;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (counts[i] == 0) continue;
    const auto out = forward(w, batch[i].input, opts);
    Tensord term = scale(softmax_cross_entropy(out.logits, std::span<const int>(batch[i].target)),
                         static_cast<double>(counts[i]) / static_cast<double>(total));
    loss = loss.defined() ? loss + term : term;
  }
  return loss;
}

double sft_step(const MicroLMWeights& w, Adam<double>& opt, std::span<const SftExample> batch) {
  const auto params = w.parameters();
  for (const auto& p : params) p.zero_grad();
  const Tensord loss = sft_loss(w, batch);
  loss.backward();
  clip_grad_norm<double>(params, 1.0);
  opt.step(params);
  return loss.item();
}

}  // namespace metatuner
