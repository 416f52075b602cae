#include "metatuner/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

#include "json.hpp"

#include "metatuner/errors.hpp"
#include "metatuner/rng.hpp"

namespace metatuner {

std::string_view schedule_name(Schedule s) { return s == Schedule::I ? "I" : "J"; }

Schedule schedule_from_name(std::string_view name) {
  if (name == "I") return Schedule::I;
  if (name == "J") return Schedule::J;
  throw ConfigError("unknown schedule '" + std::string(name) + "' (expected I or J)");
}

std::string_view ablation_name(Ablation a) {
  switch (a) {
    case Ablation::none:
      return "none";
    case Ablation::wo_F:
      return "wo_F";
    case Ablation::wo_P:
      return "wo_P";
    case Ablation::wo_S:
      return "wo_S";
  }
  return "none";
}

Ablation ablation_from_name(std::string_view name) {
  for (Ablation a : {Ablation::none, Ablation::wo_F, Ablation::wo_P, Ablation::wo_S}) {
    if (ablation_name(a) == name) return a;
  }
  throw ConfigError("unknown ablation '" + std::string(name) + "' (expected none, wo_F, wo_P or wo_S)");
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("train.alpha must lie in [0, 1]");
  if (!(temperature >= 0.0)) throw ConfigError("train.temperature must be >= 0");
  if (rollouts < 1) throw ConfigError("train.rollouts must be >= 1");
  if (snapshot_every < 1) throw ConfigError("train.snapshot_every must be >= 1");
  if (!(lr >= 0.0) || !(hyper_lr >= 0.0)) throw ConfigError("train.lr and train.hyper_lr must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (steps < 0) throw ConfigError("train.steps must be >= 0");
  if (eval_every < 0 || eval_limit < 0) throw ConfigError("train.eval_every and train.eval_limit must be >= 0");
  if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be > 0");
}

void WarmupConfig::validate() const {
  if (actor_epochs < 0 || generator_epochs < 0) throw ConfigError("warmup epochs must be >= 0");
  if (!(actor_lr >= 0.0) || !(generator_lr >= 0.0)) throw ConfigError("warmup learning rates must be >= 0");
  if (!(prompt_slot_fraction >= 0.0 && prompt_slot_fraction <= 1.0)) {
    throw ConfigError("warmup.prompt_slot_fraction must lie in [0, 1]");
  }
  if (batch_size < 1) throw ConfigError("warmup.batch_size must be >= 1");
  if (oracle_filler < 0) throw ConfigError("warmup.oracle_filler must be >= 0");
}

namespace {

Tensord mean_of(const std::vector<Tensord>& terms) {
  Tensord acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = acc + terms[i];
  return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

Tensord term1_loss(const MetaTunerModel& model, std::span<const PromptedExample> batch) {
  if (batch.empty()) throw ValueError("answer loss needs at least one query");
  std::vector<Tensord> terms;
  terms.reserve(batch.size());
  for (const auto& item : batch) {
    const LoraFactors factors = generate_params(model, item.example.x);
    terms.push_back(answer_loss(model, item.example.x, item.prompt, factors, item.example.y));
  }
  return mean_of(terms);
}

Tensord term2_loss(const MetaTunerModel& model, std::span<const ExpertPair> pairs) {
  std::vector<Tensord> terms;
  terms.reserve(pairs.size());
  for (const auto& p : pairs) terms.push_back(prompt_loss(model, p.query, p.prompt));
  return mean_of(terms);
}

std::vector<Tensord> unique_union(std::vector<Tensord> a, const std::vector<Tensord>& b) {
  std::set<const void*> seen;
  for (const auto& t : a) seen.insert(t.id());
  for (const auto& t : b) {
    if (seen.insert(t.id()).second) a.push_back(t);
  }
  return a;
}

double max_abs_grad(const std::vector<Tensord>& params) {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.grad().cwiseAbs().maxCoeff());
  return m;
}

bool better_expert(const RolloutRecord& a, const RolloutRecord& b) {
  if (a.actor_loglik != b.actor_loglik) return a.actor_loglik > b.actor_loglik;
  if (a.prompt.size() != b.prompt.size()) return a.prompt.size() < b.prompt.size();
  return a.prompt < b.prompt;
}

}  // namespace

SftExample actor_sft_example(std::span<const int> prompt, std::span<const int> x, std::span<const int> y) {
  auto seq = actor_prefix(prompt, x);
  const std::size_t prefix = seq.size();
  seq.insert(seq.end(), y.begin(), y.end());
  seq.push_back(vocab::kEos);
  return make_sft_example(seq, prefix);
}

double evaluate_actor(const MicroLMWeights& actor, std::span<const Example> examples, const ActorPromptPolicy& prompt,
                      int max_answer_len) {
  if (examples.empty()) throw ValueError("evaluate_actor: empty dataset");
  NoGradGuard no_grad;
  int total = 0;
  for (const auto& ex : examples) {
    const auto p = prompt(ex);
    total += reward(ex.kind, ex.x, decode_greedy(actor, actor_prefix(p, ex.x), max_answer_len).tokens);
  }
  return static_cast<double>(total) / static_cast<double>(examples.size());
}

double actor_loss(const MicroLMWeights& actor, std::span<const Example> examples, const ActorPromptPolicy& prompt) {
  if (examples.empty()) throw ValueError("actor_loss: empty dataset");
  NoGradGuard no_grad;
  std::vector<SftExample> batch;
  for (const auto& ex : examples) batch.push_back(actor_sft_example(prompt(ex), ex.x, ex.y));
  return sft_loss(actor, batch).item();
}

namespace {

double sft_epoch(const MicroLMWeights& actor, Adam<double>& opt, std::span<const Example> examples,
                 const std::vector<std::vector<int>>& prompts, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  double sum = 0.0;
  int batches = 0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<SftExample> batch;
    for (std::size_t j = start; j < std::min(order.size(), start + batch_size); ++j) {
      const Example& ex = examples[order[j]];
      batch.push_back(actor_sft_example(prompts[order[j]], ex.x, ex.y));
    }
    sum += sft_step(actor, opt, batch);
    ++batches;
  }
  return sum / batches;
}

// Cosine decay from lr to lr / 10 over the epochs.
double epoch_lr(double lr, int epoch, int epochs) {
  if (epochs <= 1) return lr;
  const double f = static_cast<double>(epoch) / (epochs - 1);
  return lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.141592653589793 * f)));
}

}  // namespace

std::vector<double> sft_actor(const MicroLMWeights& actor, std::span<const Example> examples,
                              const ActorPromptPolicy& prompt, int epochs, double lr, int batch_size,
                              std::uint64_t seed) {
  if (examples.empty()) throw ValueError("sft_actor: empty dataset");
  Adam<double> opt(actor.parameters(), AdamConfig{.lr = lr});
  Rng rng(seed);
  std::vector<std::vector<int>> prompts;
  for (const auto& ex : examples) prompts.push_back(prompt(ex));
  std::vector<double> losses;
  for (int e = 0; e < epochs; ++e) {
    opt.set_lr(epoch_lr(lr, e, epochs));
    losses.push_back(sft_epoch(actor, opt, examples, prompts, batch_size, rng));
  }
  return losses;
}

ActorWarmupReport warmup_actor(const MicroLMWeights& actor, std::span<const Example> d1,
                               std::span<const int> initial_prompt, const WarmupConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (d1.empty()) throw ConfigError("warmup_actor: empty pretraining set");
  const std::vector<int> p_tilde(initial_prompt.begin(), initial_prompt.end());
  ActorWarmupReport report;
  const ActorPromptPolicy plain = [&](const Example&) { return p_tilde; };
  report.loss_before = actor_loss(actor, d1, plain);

  Adam<double> opt(actor.parameters(), AdamConfig{.lr = cfg.actor_lr});
  Rng order_rng(seed);
  // Re-drawn every epoch, so each epoch sees a fresh mix.
  Rng aug(derive_seed(seed, 0xA7));
  std::vector<Example> rendered;
  std::vector<std::vector<int>> prompts;
  for (int e = 0; e < cfg.actor_epochs; ++e) {
    rendered.assign(d1.begin(), d1.end());
    prompts.assign(rendered.size(), p_tilde);
    for (std::size_t i = 0; i < rendered.size(); ++i) {
      if (aug.uniform() < cfg.prompt_slot_fraction) {
        prompts[i] = {rendered[i].x.front()};
        rendered[i].x.front() = vocab::kCue1 + static_cast<int>(aug.below(vocab::kNumCues));
      }
    }
    opt.set_lr(epoch_lr(cfg.actor_lr, e, cfg.actor_epochs));
    report.epoch_losses.push_back(sft_epoch(actor, opt, rendered, prompts, cfg.batch_size, order_rng));
  }
  report.loss_after = actor_loss(actor, d1, plain);
  return report;
}

GeneratorWarmupReport warmup_generator(MetaTunerModel& model, std::span<const Example> d1, const ExpertOracle& oracle,
                                       const WarmupConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  GeneratorWarmupReport report;
  {
    NoGradGuard no_grad;
    for (const auto& ex : d1) {
      ++report.proposed;
      const auto p = oracle(ex.kind);
      if (static_cast<int>(p.size()) > model.config.max_prompt_len) continue;
      const auto decoded = decode_greedy(model.actor, actor_prefix(p, ex.x), model.config.max_answer_len).tokens;
      if (reward(ex.kind, ex.x, decoded) != 1) continue;
      ExpertPair pair;
      pair.query = ex.x;
      pair.prompt = p;
      pair.answer = decoded;
      pair.kind = ex.kind;
      pair.provenance = Provenance::oracle_warmup;
      {
        auto seq = actor_prefix(p, ex.x);
        const std::size_t prefix = seq.size();
        seq.insert(seq.end(), ex.y.begin(), ex.y.end());
        seq.push_back(vocab::kEos);
        const SftExample s = make_sft_example(seq, prefix);
        pair.actor_loglik = -sft_loss(model.actor, std::span<const SftExample>(&s, 1)).item() *
                            static_cast<double>(ex.y.size() + 1);
      }
      report.kept.push_back(std::move(pair));
    }
  }
  report.keep_rate = report.proposed ? static_cast<double>(report.kept.size()) / report.proposed : 0.0;
  if (report.kept.empty()) {
    throw ConfigError("warmup_generator: no oracle prompt earned reward 1; the expert set is empty");
  }

  const auto& gen = model.generator;
  Adam<double> opt(gen.parameters(), AdamConfig{.lr = cfg.generator_lr});
  Rng rng(derive_seed(seed, 0x6E));
  std::vector<std::size_t> order(report.kept.size());
  for (int e = 0; e < cfg.generator_epochs; ++e) {
    opt.set_lr(epoch_lr(cfg.generator_lr, e, cfg.generator_epochs));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<SftExample> batch;
      for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch_size); ++j) {
        const ExpertPair& p = report.kept[order[j]];
        auto seq = generator_prefix(model, p.query);
        const std::size_t prefix = seq.size();
        seq.insert(seq.end(), p.prompt.begin(), p.prompt.end());
        seq.push_back(vocab::kEos);
        batch.push_back(make_sft_example(seq, prefix));
      }
      sum += sft_step(gen, opt, batch);
      ++batches;
    }
    report.epoch_losses.push_back(sum / batches);
  }
  update_snapshot(model);
  return report;
}

ExpertSetResult build_expert_set(const MetaTunerModel& model, std::span<const Example> batch, double temperature,
                                 int n, std::uint64_t seed) {
  if (n < 1) throw ValueError("build_expert_set: n must be >= 1");
  NoGradGuard no_grad;
  ExpertSetResult result;
  for (std::size_t q = 0; q < batch.size(); ++q) {
    const Example& ex = batch[q];
    const LoraFactors factors = generate_params(model, ex.x);
    const std::uint64_t fh = factors_hash(factors);
    std::vector<RolloutRecord> records;
    const RolloutRecord* best = nullptr;
    records.reserve(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
      RolloutRecord rec;
      rec.query = ex.x;
      rec.kind = ex.kind;
      rec.prompt = generate_prompt(model, ex.x, PromptMode::snapshot(temperature, derive_seed(seed, q, r))).prompt;
      rec.factors_hash = fh;
      rec.answer = answer_decode(model, ex.x, rec.prompt, factors).tokens;
      rec.reward = reward(ex.kind, ex.x, rec.answer);
      if (rec.reward == 1) rec.actor_loglik = answer_log_likelihood(model, ex.x, rec.prompt, factors, ex.y);
      records.push_back(std::move(rec));
    }
    for (const auto& rec : records) {
      if (rec.reward == 1 && (!best || better_expert(rec, *best))) best = &rec;
    }
    if (best) {
      ExpertPair p;
      p.query = best->query;
      p.prompt = best->prompt;
      p.answer = best->answer;
      p.kind = best->kind;
      p.provenance = Provenance::self_rollout;
      p.actor_loglik = best->actor_loglik;
      result.pairs.push_back(std::move(p));
    }
    result.rollouts.push_back(std::move(records));
  }
  return result;
}

JointLoss loss_joint(const MetaTunerModel& model, std::span<const PromptedExample> d1_batch,
                     std::span<const ExpertPair> d2_batch, double alpha, Ablation ablation) {
  JointLoss out;
  out.term1 = term1_loss(model, d1_batch);
  out.term2_empty = d2_batch.empty();
  out.term2 = out.term2_empty ? Tensord::scalar(0.0) : term2_loss(model, d2_batch);
  switch (ablation) {
    case Ablation::wo_F:
      out.combined = scale(out.term2, alpha);
      break;
    case Ablation::wo_P:
      out.combined = out.term1;
      break;
    default:
      out.combined = out.term1 + scale(out.term2, alpha);
  }
  return out;
}

double EvalReport::task_reward(TaskKind kind) const {
  auto it = per_task.find(kind);
  if (it == per_task.end() || it->second.second == 0) return 0.0;
  return static_cast<double>(it->second.first) / it->second.second;
}

EvalReport evaluate(const MetaTunerModel& model, std::span<const Example> dataset) {
  if (dataset.empty()) throw ValueError("evaluate: empty dataset");
  NoGradGuard no_grad;
  EvalReport r;
  int total = 0;
  double loss = 0.0;
  for (const auto& ex : dataset) {
    const PipelineOutput out = run_pipeline(model, ex.x);
    const int rw = reward(ex.kind, ex.x, out.answer.tokens);
    total += rw;
    auto& slot = r.per_task[ex.kind];
    slot.first += rw;
    slot.second += 1;
    loss += answer_loss(model, ex.x, out.prompt, out.factors, ex.y).item();
  }
  r.count = dataset.size();
  r.mean_reward = static_cast<double>(total) / r.count;
  r.mean_answer_loss = loss / r.count;
  return r;
}

std::string metrics_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["schedule"] = schedule_name(m.schedule);
  j["term1"] = m.term1 ? nlohmann::ordered_json(*m.term1) : nlohmann::ordered_json(nullptr);
  j["term2"] = m.term2 ? nlohmann::ordered_json(*m.term2) : nlohmann::ordered_json(nullptr);
  j["alpha"] = m.alpha;
  j["dev_reward"] = m.dev_reward ? nlohmann::ordered_json(*m.dev_reward) : nlohmann::ordered_json(nullptr);
  j["snapshot_age"] = m.snapshot_age;
  j["seed"] = m.seed;
  j["expert_pairs"] = m.expert_pairs;
  j["rollout_reward"] = m.rollout_reward ? nlohmann::ordered_json(*m.rollout_reward) : nlohmann::ordered_json(nullptr);
  j["phi_p_term1_grad"] = m.phi_p_term1_grad;
  j["term2_empty"] = m.term2_empty;
  return j.dump();
}

Trainer::Trainer(MetaTunerModel& model, TrainConfig cfg, std::vector<Example> train, std::vector<Example> dev,
                 std::vector<ExpertPair> seed_pool)
    : model_(model),
      cfg_(cfg),
      train_(std::move(train)),
      dev_(std::move(dev)),
      warn_([](const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }),
      adam_(model.trainable_parameters(), AdamConfig{.lr = cfg.lr}) {
  cfg_.validate();
  model_.validate();
  if (train_.empty()) throw ConfigError("trainer: empty training set");
  if ((cfg_.ablation == Ablation::wo_S) != model_.config.independent_param_encoder) {
    throw ConfigError("trainer: wo_S ablation and the model's independent parameter encoder must agree");
  }
  if (cfg_.hyper_lr > 0.0) adam_.set_lr(model_.hyper_parameters(), cfg_.hyper_lr);
  for (auto& p : seed_pool) {
    auto key = p.query;
    pool_.insert_or_assign(std::move(key), std::move(p));
  }
  order_.resize(train_.size());
}

std::vector<Example> Trainer::next_batch() {
  std::vector<Example> batch;
  while (static_cast<int>(batch.size()) < cfg_.batch_size) {
    if (cursor_ == 0) {
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      Rng rng(derive_seed(cfg_.seed, 0xBA7C, epoch_));
      rng.shuffle(order_);
    }
    batch.push_back(train_[order_[cursor_]]);
    if (++cursor_ == order_.size()) {
      cursor_ = 0;
      ++epoch_;
    }
  }
  return batch;
}

double Trainer::evaluate_dev() const {
  if (dev_.empty()) throw ValueError("trainer: no dev set to evaluate");
  std::span<const Example> d(dev_);
  if (cfg_.eval_limit > 0 && static_cast<std::size_t>(cfg_.eval_limit) < d.size()) d = d.first(cfg_.eval_limit);
  return evaluate(model_, d).mean_reward;
}

std::vector<PromptedExample> Trainer::sample_term1_prompts(std::span<const Example> batch,
                                                           std::uint64_t seed) const {
  NoGradGuard no_grad;
  std::vector<PromptedExample> out;
  for (std::size_t q = 0; q < batch.size(); ++q) {
    const auto mode = PromptMode::snapshot(cfg_.temperature, derive_seed(seed, q, 0));
    out.push_back({batch[q], generate_prompt(model_, batch[q].x, mode).prompt});
  }
  return out;
}

std::vector<ExpertPair> Trainer::term2_batch(const std::vector<ExpertPair>& fresh, std::uint64_t seed) const {
  std::vector<ExpertPair> out = fresh;
  const auto need = static_cast<std::size_t>(cfg_.batch_size);
  if (out.size() >= need) return out;
  std::set<std::vector<int>> taken;
  for (const auto& p : fresh) taken.insert(p.query);
  std::vector<const ExpertPair*> candidates;
  for (const auto& [query, pair] : pool_) {
    if (!taken.count(query)) candidates.push_back(&pair);
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < candidates.size() && out.size() < need; ++i) {
    const std::size_t j = i + rng.below(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
    out.push_back(*candidates[i]);
  }
  return out;
}

void Trainer::absorb(const ExpertSetResult& result) {
  last_rollouts_.clear();
  for (const auto& per_query : result.rollouts) {
    last_rollouts_.insert(last_rollouts_.end(), per_query.begin(), per_query.end());
  }
  for (const auto& p : result.pairs) {
    collected_.push_back(p);
    pool_.insert_or_assign(p.query, p);
  }
}

void Trainer::guard(const StepMetrics& m) {
  const auto bad = [](const std::optional<double>& v) { return v && !std::isfinite(*v); };
  if (bad(m.term1) || bad(m.term2)) throw DivergenceError("training diverged at step " + std::to_string(m.step) + ": non-finite loss");
  if (m.term1 && *m.term1 > 50.0) {
    throw DivergenceError("training diverged at step " + std::to_string(m.step) + ": answer loss " +
                          std::to_string(*m.term1));
  }
}

void Trainer::apply(std::vector<Tensord> params) {
  if (params.empty()) return;
  clip_grad_norm<double>(params, cfg_.grad_clip);
  adam_.step(params);
}

void Trainer::empty_d2(StepMetrics& m) const {
  m.term2 = 0.0;
  m.term2_empty = true;
  if (warn_) warn_("step " + std::to_string(m.step) + ": no expert pairs yet, regularizer term is 0");
}

void Trainer::finish_step(StepMetrics& m) {
  m.snapshot_age = snapshot_age_;
  ++steps_done_;
  ++snapshot_age_;
  if (steps_done_ % cfg_.snapshot_every == 0) {
    update_snapshot(model_);
    snapshot_age_ = 0;
  }
  if (!model_.generator.all_finite()) throw DivergenceError("training diverged: non-finite generator weights");
}

namespace {

double rollout_mean(const ExpertSetResult& es) {
  int total = 0, count = 0;
  for (const auto& q : es.rollouts) {
    for (const auto& r : q) {
      total += r.reward;
      ++count;
    }
  }
  return count ? static_cast<double>(total) / count : 0.0;
}

}  // namespace

StepMetrics Trainer::step_J(std::span<const Example> batch) {
  StepMetrics m;
  m.step = steps_done_ + 1;
  m.schedule = Schedule::J;
  m.alpha = cfg_.alpha;
  m.seed = cfg_.seed;
  const std::uint64_t s = derive_seed(cfg_.seed, 0x57E9, steps_done_);
  const bool term1_on = cfg_.ablation != Ablation::wo_F;
  const bool term2_on = cfg_.ablation != Ablation::wo_P && cfg_.alpha > 0.0;

  std::vector<PromptedExample> d1;
  std::vector<ExpertPair> d2;
  if (term2_on) {
    const ExpertSetResult es = build_expert_set(model_, batch, cfg_.temperature, cfg_.rollouts, s);
    absorb(es);
    m.rollout_reward = rollout_mean(es);
    for (std::size_t q = 0; q < batch.size(); ++q) d1.push_back({batch[q], es.rollouts[q].front().prompt});
    d2 = term2_batch(es.pairs, derive_seed(s, 1));
  } else {
    d1 = sample_term1_prompts(batch, s);
  }
  m.expert_pairs = static_cast<int>(d2.size());

  for (const auto& p : model_.trainable_parameters()) p.zero_grad();
  std::vector<Tensord> active;
  if (term1_on) {
    const Tensord t1 = term1_loss(model_, d1);
    m.term1 = t1.item();
    guard(m);
    t1.backward();
    m.phi_p_term1_grad = max_abs_grad(model_.prompt_private_parameters());
    active = model_.parameter_branch();
  } else {
    NoGradGuard no_grad;
    m.term1 = term1_loss(model_, d1).item();
  }
  if (term2_on && !d2.empty()) {
    const Tensord t2 = term2_loss(model_, d2);
    m.term2 = t2.item();
    guard(m);
    scale(t2, cfg_.alpha).backward();
    active = unique_union(std::move(active), model_.prompt_branch());
  } else if (term2_on) {
    empty_d2(m);
  }
  guard(m);
  apply(std::move(active));
  finish_step(m);
  return m;
}

StepMetrics Trainer::step_I(std::span<const Example> batch) {
  StepMetrics m;
  m.step = steps_done_ + 1;
  m.schedule = Schedule::I;
  m.alpha = cfg_.alpha;
  m.seed = cfg_.seed;
  const std::uint64_t s = derive_seed(cfg_.seed, 0x57E9, steps_done_);
  const bool term1_on = cfg_.ablation != Ablation::wo_F;
  const bool term2_on = cfg_.ablation != Ablation::wo_P && cfg_.alpha > 0.0;
  bool term1_phase = steps_done_ % 2 == 0;
  if (!term2_on) term1_phase = true;
  if (!term1_on) term1_phase = false;

  for (const auto& p : model_.trainable_parameters()) p.zero_grad();
  if (term1_phase && term1_on) {
    const auto d1 = sample_term1_prompts(batch, s);
    const Tensord t1 = term1_loss(model_, d1);
    m.term1 = t1.item();
    guard(m);
    t1.backward();
    m.phi_p_term1_grad = max_abs_grad(model_.prompt_private_parameters());
    apply(model_.parameter_branch());
  } else if (term2_on) {
    const ExpertSetResult es = build_expert_set(model_, batch, cfg_.temperature, cfg_.rollouts, s);
    absorb(es);
    m.rollout_reward = rollout_mean(es);
    const auto d2 = term2_batch(es.pairs, derive_seed(s, 1));
    m.expert_pairs = static_cast<int>(d2.size());
    if (!d2.empty()) {
      const Tensord t2 = term2_loss(model_, d2);
      m.term2 = t2.item();
      guard(m);
      scale(t2, cfg_.alpha).backward();
      apply(model_.prompt_branch());
    } else {
      empty_d2(m);
    }
  }
  finish_step(m);
  return m;
}

StepMetrics Trainer::step() {
  const auto batch = next_batch();
  return cfg_.schedule == Schedule::J ? step_J(batch) : step_I(batch);
}

TrainSummary run_training(MetaTunerModel& model, const TrainConfig& cfg, std::vector<Example> train,
                          std::vector<Example> dev, std::vector<ExpertPair> seed_pool,
                          const std::function<void(const StepMetrics&)>& on_step,
                          const std::function<void(const MetaTunerModel&, int)>& on_best) {
  Trainer trainer(model, cfg, std::move(train), std::move(dev), std::move(seed_pool));
  TrainSummary summary;
  summary.initial_dev_reward = trainer.evaluate_dev();
  summary.best_dev_reward = summary.initial_dev_reward;
  summary.final_dev_reward = summary.initial_dev_reward;
  if (on_best) on_best(model, 0);
  for (int i = 0; i < cfg.steps; ++i) {
    StepMetrics m = trainer.step();
    const bool last = m.step == cfg.steps;
    if (last || (cfg.eval_every > 0 && m.step % cfg.eval_every == 0)) {
      m.dev_reward = trainer.evaluate_dev();
      summary.final_dev_reward = *m.dev_reward;
      if (*m.dev_reward > summary.best_dev_reward) {
        summary.best_dev_reward = *m.dev_reward;
        summary.best_step = m.step;
        if (on_best) on_best(model, m.step);
      }
    }
    if (on_step) on_step(m);
    summary.metrics.push_back(m);
  }
  return summary;
}

}  // namespace metatuner
