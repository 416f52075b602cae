#include "metatuner/pipeline.hpp"

#include "metatuner/errors.hpp"
#include "metatuner/rng.hpp"

namespace metatuner {

namespace {

std::vector<Tensord> lower_parameters(const MicroLMWeights& w, int split) {
  std::vector<Tensord> out{w.tok_emb, w.pos_emb};
  for (int i = 0; i < split; ++i) {
    const auto& b = w.blocks[static_cast<std::size_t>(i)];
    for (const Tensord* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w1,
                             &b.b1, &b.w2, &b.b2}) {
      out.push_back(*t);
    }
  }
  return out;
}

std::vector<Tensord> upper_parameters(const MicroLMWeights& w, int split) {
  std::vector<Tensord> out;
  for (int i = split; i < w.arch.n_layers; ++i) {
    const auto& b = w.blocks[static_cast<std::size_t>(i)];
    for (const Tensord* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w1,
                             &b.b1, &b.w2, &b.b2}) {
      out.push_back(*t);
    }
  }
  out.push_back(w.lnf_gain);
  out.push_back(w.lnf_bias);
  out.push_back(w.head);
  return out;
}

void append(std::vector<Tensord>& dst, const std::vector<Tensord>& src) { dst.insert(dst.end(), src.begin(), src.end()); }

}  // namespace

MetaTunerModel MetaTunerModel::assemble(const MicroLMWeights& warmed_generator, const MicroLMWeights& warmed_actor,
                                        LoraConfig lora, PipelineConfig config, std::uint64_t seed) {
  MetaTunerModel m;
  m.generator = warmed_generator.clone(true);
  m.snapshot = warmed_generator.clone(false);
  if (config.independent_param_encoder) m.param_encoder = warmed_generator.clone(true);
  m.actor = warmed_actor.clone(false);
  lora.d_model = warmed_actor.arch.d_model;
  lora.n_layers = warmed_actor.arch.n_layers;
  m.lora = lora;
  m.config = std::move(config);
  m.phi_q = init_hypernetwork(m.lora, warmed_generator.arch.context_len, warmed_generator.arch.d_model, seed);
  m.validate();
  return m;
}

MetaTunerModel MetaTunerModel::clone() const {
  MetaTunerModel m;
  m.generator = generator.clone(true);
  m.snapshot = snapshot.clone(false);
  if (param_encoder) m.param_encoder = param_encoder->clone(true);
  m.phi_q = phi_q.clone();
  m.actor = actor.clone(false);
  m.lora = lora;
  m.config = config;
  return m;
}

void MetaTunerModel::validate() const {
  lora.validate();
  const auto& g = generator.arch;
  if (config.split_depth < 0 || config.split_depth > g.n_layers) {
    throw RangeError("pipeline: split depth " + std::to_string(config.split_depth) + " outside [0, " +
                     std::to_string(g.n_layers) + "]");
  }
  if (!(snapshot.arch == g)) throw ShapeError("pipeline: snapshot architecture differs from generator");
  if (param_encoder && !(param_encoder->arch == g)) throw ShapeError("pipeline: param encoder architecture differs");
  if (phi_q.context_len != g.context_len || phi_q.hidden != g.d_model) {
    throw ShapeError("pipeline: hypernetwork expects h of (" + std::to_string(phi_q.context_len) + "x" +
                     std::to_string(phi_q.hidden) + ") but the generator emits (" + std::to_string(g.context_len) +
                     "x" + std::to_string(g.d_model) + ")");
  }
  if (lora.d_model != actor.arch.d_model || lora.n_layers != actor.arch.n_layers) {
    throw ShapeError("pipeline: LoRA config does not match the actor");
  }
  if (g.vocab_size != actor.arch.vocab_size) throw ShapeError("pipeline: generator and actor vocabularies differ");
  if (config.max_prompt_len < 1 || config.max_answer_len < 1) {
    throw ValueError("pipeline: prompt and answer budgets must be >= 1");
  }
}

std::vector<Tensord> MetaTunerModel::shared_parameters() const { return lower_parameters(generator, prompt_split()); }

std::vector<Tensord> MetaTunerModel::prompt_private_parameters() const {
  return upper_parameters(generator, prompt_split());
}

std::vector<Tensord> MetaTunerModel::hyper_parameters() const { return phi_q.parameters(); }

std::vector<Tensord> MetaTunerModel::param_encoder_parameters() const {
  if (!param_encoder) return {};
  return lower_parameters(*param_encoder, config.split_depth);
}

std::vector<Tensord> MetaTunerModel::parameter_branch() const {
  std::vector<Tensord> out = lower_parameters(meta_encoder_source(), config.split_depth);
  append(out, hyper_parameters());
  return out;
}

std::vector<Tensord> MetaTunerModel::prompt_branch() const { return generator.parameters(); }

std::vector<Tensord> MetaTunerModel::trainable_parameters() const {
  std::vector<Tensord> out = generator.parameters();
  append(out, param_encoder_parameters());
  append(out, hyper_parameters());
  return out;
}

std::vector<int> generator_prefix(const MetaTunerModel& model, std::span<const int> x) {
  std::vector<int> seq{vocab::kBos};
  seq.insert(seq.end(), model.config.initial_prompt.begin(), model.config.initial_prompt.end());
  seq.push_back(vocab::kSep);
  seq.insert(seq.end(), x.begin(), x.end());
  return seq;
}

std::vector<int> actor_prefix(std::span<const int> prompt, std::span<const int> x) {
  std::vector<int> seq{vocab::kBos};
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.push_back(vocab::kSep);
  seq.insert(seq.end(), x.begin(), x.end());
  seq.push_back(vocab::kSep);
  return seq;
}

Tensord encode_meta(const MetaTunerModel& model, std::span<const int> x) {
  const auto& enc = model.meta_encoder_source();
  const auto tokens = generator_prefix(model, x);
  const Tensord hs = hidden_states(enc, tokens, model.config.split_depth);
  // parameter-free normalization of the tapped states
  const auto d = hs.cols();
  return pad_rows(layer_norm(hs, Tensord::constant(Matrixd::Ones(1, d)), Tensord::constant(Matrixd::Zero(1, d))),
                  enc.arch.context_len);
}

PromptSample generate_prompt(const MetaTunerModel& model, std::span<const int> x, const PromptMode& mode) {
  const bool snap = mode.kind == PromptMode::Kind::sampled_snapshot;
  const MicroLMWeights& lower = (snap && model.config.snapshot_includes_shared) ? model.snapshot : model.generator;
  const MicroLMWeights& upper = snap ? model.snapshot : model.generator;
  const MicroLMWeights composite = compose(lower, upper, model.prompt_split());
  const auto prefix = generator_prefix(model, x);
  const DecodeResult r = snap ? sample_with_temperature(composite, prefix, model.config.max_prompt_len,
                                                        mode.temperature, mode.seed)
                              : decode_greedy(composite, prefix, model.config.max_prompt_len);
  PromptSample s;
  s.query.assign(x.begin(), x.end());
  s.prompt = r.tokens;
  s.source = snap ? PromptSource::snapshot_rollout : PromptSource::live_greedy;
  return s;
}

LoraFactors generate_params(const MetaTunerModel& model, std::span<const int> x) {
  return generate_lora(model.phi_q, encode_meta(model, x));
}

Tensord answer_loss(const MetaTunerModel& model, std::span<const int> x, std::span<const int> prompt,
                    const LoraFactors& factors, std::span<const int> gold) {
  auto seq = actor_prefix(prompt, x);
  const std::size_t prefix_len = seq.size();
  seq.insert(seq.end(), gold.begin(), gold.end());
  seq.push_back(vocab::kEos);
  const SftExample ex = make_sft_example(seq, prefix_len);
  const auto out = forward(model.actor, ex.input, lora_options(factors, model.lora));
  return softmax_cross_entropy(out.logits, std::span<const int>(ex.target));
}

DecodeResult answer_decode(const MetaTunerModel& model, std::span<const int> x, std::span<const int> prompt,
                           const LoraFactors& factors) {
  const auto prefix = actor_prefix(prompt, x);
  return decode_greedy(model.actor, prefix, model.config.max_answer_len, lora_options(factors, model.lora));
}

AnswerResult answer(const MetaTunerModel& model, std::span<const int> x, const PromptSample& prompt,
                    const LoraFactors& factors, std::optional<std::span<const int>> gold) {
  AnswerResult r;
  r.decoded = answer_decode(model, x, prompt.prompt, factors).tokens;
  if (gold) r.loss = answer_loss(model, x, prompt.prompt, factors, *gold);
  return r;
}

double answer_log_likelihood(const MetaTunerModel& model, std::span<const int> x, std::span<const int> prompt,
                             const LoraFactors& factors, std::span<const int> gold) {
  NoGradGuard no_grad;
  const double mean_nll = answer_loss(model, x, prompt, factors, gold).item();
  return -mean_nll * static_cast<double>(gold.size() + 1);
}

Tensord prompt_loss(const MetaTunerModel& model, std::span<const int> x, std::span<const int> prompt) {
  auto seq = generator_prefix(model, x);
  const std::size_t prefix_len = seq.size();
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.push_back(vocab::kEos);
  const SftExample ex = make_sft_example(seq, prefix_len);
  return softmax_cross_entropy(forward(model.generator, ex.input).logits, std::span<const int>(ex.target));
}

void update_snapshot(MetaTunerModel& model) { model.snapshot.copy_values_from(model.generator); }

PipelineOutput run_pipeline(const MetaTunerModel& model, std::span<const int> x) {
  NoGradGuard no_grad;
  PipelineOutput out;
  out.prompt = generate_prompt(model, x, PromptMode::greedy()).prompt;
  out.factors = generate_params(model, x);
  out.answer = answer_decode(model, x, out.prompt, out.factors);
  return out;
}

}  // namespace metatuner
