#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metatuner/optimizer.hpp"
#include "metatuner/pipeline.hpp"
#include "metatuner/tasks.hpp"

namespace metatuner {

enum class Schedule { I, J };
enum class Ablation { none, wo_F, wo_P, wo_S };

std::string_view schedule_name(Schedule s);
Schedule schedule_from_name(std::string_view name);
std::string_view ablation_name(Ablation a);
Ablation ablation_from_name(std::string_view name);

struct TrainConfig {
  double alpha = 0.5;
  double temperature = 0.7;
  int rollouts = 4;  // n
  int snapshot_every = 10;
  double lr = 1e-3;
  double hyper_lr = 1e-2;  // learning rate of phi_q, 0 = lr
  int batch_size = 8;
  int steps = 500;
  int eval_every = 50;
  int eval_limit = 0;  // dev examples per evaluation, 0 = all
  double grad_clip = 1.0;
  Schedule schedule = Schedule::J;
  Ablation ablation = Ablation::none;
  std::uint64_t seed = 0;

  void validate() const;
};

struct WarmupConfig {
  int actor_epochs = 20;
  double actor_lr = 3e-3;
  /// Share of actor warm-up examples whose instruction is moved from the
  /// query into the prompt slot (the query keeps a random cue instead).
  double prompt_slot_fraction = 0.5;
  int generator_epochs = 1;
  double generator_lr = 1e-3;
  int batch_size = 16;
  int oracle_filler = 0;

  void validate() const;
};

enum class Provenance { oracle_warmup, self_rollout };

/// (query, prompt) whose prompt produced the correct answer when collected.
struct ExpertPair {
  std::vector<int> query;
  std::vector<int> prompt;
  std::vector<int> answer;  // decoded answer at collection time
  TaskKind kind = TaskKind::Copy;
  Provenance provenance = Provenance::self_rollout;
  double actor_loglik = 0.0;
};

struct RolloutRecord {
  std::vector<int> query;
  std::vector<int> prompt;
  std::uint64_t factors_hash = 0;
  std::vector<int> answer;
  int reward = 0;
  double actor_loglik = 0.0;
  TaskKind kind = TaskKind::Copy;
};

/// Prompt the actor sees for an example during actor-only SFT/evaluation.
using ActorPromptPolicy = std::function<std::vector<int>(const Example&)>;

/// Actor SFT sequence [BOS, prompt, SEP, x, SEP, y, EOS] with loss on y + EOS.
SftExample actor_sft_example(std::span<const int> prompt, std::span<const int> x, std::span<const int> y);

/// Mean exact-match reward of the plain actor (no LoRA) under a prompt policy.
double evaluate_actor(const MicroLMWeights& actor, std::span<const Example> examples, const ActorPromptPolicy& prompt,
                      int max_answer_len = 7);

/// Mean answer loss of the plain actor under a prompt policy.
double actor_loss(const MicroLMWeights& actor, std::span<const Example> examples, const ActorPromptPolicy& prompt);

/// Plain SFT of the actor for `epochs` passes; returns per-epoch mean losses.
std::vector<double> sft_actor(const MicroLMWeights& actor, std::span<const Example> examples,
                              const ActorPromptPolicy& prompt, int epochs, double lr, int batch_size,
                              std::uint64_t seed);

struct ActorWarmupReport {
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::vector<double> epoch_losses;
};

/// Warm-up SFT of the actor on the pretraining mixture with p~ as prompt
/// (see WarmupConfig::prompt_slot_fraction). epochs == 0 is the identity.
ActorWarmupReport warmup_actor(const MicroLMWeights& actor, std::span<const Example> d1,
                               std::span<const int> initial_prompt, const WarmupConfig& cfg, std::uint64_t seed);

using ExpertOracle = std::function<std::vector<int>(TaskKind)>;

struct GeneratorWarmupReport {
  std::vector<ExpertPair> kept;  // D_PO
  std::size_t proposed = 0;
  double keep_rate = 0.0;
  std::vector<double> epoch_losses;
};

/// Rejection-sampled SFT of the generator: keep oracle prompts the actor
/// answers correctly, then train on them (loss on prompt tokens only).
/// Throws ConfigError if nothing is kept.
GeneratorWarmupReport warmup_generator(MetaTunerModel& model, std::span<const Example> d1, const ExpertOracle& oracle,
                                       const WarmupConfig& cfg, std::uint64_t seed);

struct ExpertSetResult {
  std::vector<ExpertPair> pairs;                     // at most one per query, query order
  std::vector<std::vector<RolloutRecord>> rollouts;  // [query][rollout]
};

/// n snapshot-sampled prompts per query at temperature t; keeps the reward-1
/// prompt with the highest gold log-likelihood (ties: shorter, then
/// lexicographically smaller prompt). Queries without a success are skipped.
ExpertSetResult build_expert_set(const MetaTunerModel& model, std::span<const Example> batch, double temperature,
                                 int n, std::uint64_t seed);

struct PromptedExample {
  Example example;
  std::vector<int> prompt;  // detached, sampled from the snapshot branch
};

struct JointLoss {
  Tensord term1;     // mean answer loss through generated LoRA
  Tensord term2;     // mean prompt cross-entropy on D2
  Tensord combined;  // per ablation: term1 + alpha * term2
  bool term2_empty = false;
};

JointLoss loss_joint(const MetaTunerModel& model, std::span<const PromptedExample> d1_batch,
                     std::span<const ExpertPair> d2_batch, double alpha, Ablation ablation = Ablation::none);

struct EvalReport {
  double mean_reward = 0.0;
  double mean_answer_loss = 0.0;
  std::size_t count = 0;
  std::map<TaskKind, std::pair<int, int>> per_task;  // kind -> (rewarded, total)

  double task_reward(TaskKind kind) const;
  bool operator==(const EvalReport&) const = default;
};

/// Greedy everywhere: live prompt, generated factors, greedy answer. Throws on empty input.
EvalReport evaluate(const MetaTunerModel& model, std::span<const Example> dataset);

struct StepMetrics {
  int step = 0;
  Schedule schedule = Schedule::J;
  std::optional<double> term1;
  std::optional<double> term2;
  double alpha = 0.0;
  std::optional<double> dev_reward;
  int snapshot_age = 0;
  std::uint64_t seed = 0;
  int expert_pairs = 0;
  std::optional<double> rollout_reward;
  double phi_p_term1_grad = 0.0;  // max |d term1 / d phi_p|, must be exactly 0
  bool term2_empty = false;       // regularizer active but no expert pair available
};

/// One newline-free JSON record.
std::string metrics_json(const StepMetrics& m);

class Trainer {
 public:
  Trainer(MetaTunerModel& model, TrainConfig cfg, std::vector<Example> train, std::vector<Example> dev,
          std::vector<ExpertPair> seed_pool = {});

  StepMetrics step();
  /// Single optimizer step on term1 + alpha * term2.
  StepMetrics step_J(std::span<const Example> batch);
  /// Alternating: even steps update the parameter branch on term1, odd steps
  /// the prompt branch on alpha * term2.
  StepMetrics step_I(std::span<const Example> batch);

  std::vector<Example> next_batch();
  double evaluate_dev() const;

  int steps_done() const { return steps_done_; }
  int snapshot_age() const { return snapshot_age_; }
  const TrainConfig& config() const { return cfg_; }
  /// Every expert pair collected by rollouts so far, in collection order.
  const std::vector<ExpertPair>& collected() const { return collected_; }
  const std::vector<RolloutRecord>& last_rollouts() const { return last_rollouts_; }
  /// Receives warnings (empty D2); defaults to stderr.
  void set_warning_sink(std::function<void(const std::string&)> sink) { warn_ = std::move(sink); }

 private:
  std::vector<PromptedExample> sample_term1_prompts(std::span<const Example> batch, std::uint64_t seed) const;
  std::vector<ExpertPair> term2_batch(const std::vector<ExpertPair>& fresh, std::uint64_t seed) const;
  void absorb(const ExpertSetResult& result);
  void finish_step(StepMetrics& m);
  void empty_d2(StepMetrics& m) const;
  void apply(std::vector<Tensord> params);
  static void guard(const StepMetrics& m);

  MetaTunerModel& model_;
  TrainConfig cfg_;
  std::vector<Example> train_, dev_;
  std::map<std::vector<int>, ExpertPair> pool_;
  std::vector<ExpertPair> collected_;
  std::function<void(const std::string&)> warn_;
  std::vector<RolloutRecord> last_rollouts_;
  Adam<double> adam_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
  int steps_done_ = 0;
  int snapshot_age_ = 0;
};

struct TrainSummary {
  double initial_dev_reward = 0.0;
  double final_dev_reward = 0.0;
  double best_dev_reward = 0.0;
  int best_step = 0;
  std::vector<StepMetrics> metrics;
};

/// Runs cfg.steps steps, evaluating on dev every eval_every steps and at the
/// end. `on_step` sees every record; `on_best` fires when dev reward improves.
TrainSummary run_training(MetaTunerModel& model, const TrainConfig& cfg, std::vector<Example> train,
                          std::vector<Example> dev, std::vector<ExpertPair> seed_pool = {},
                          const std::function<void(const StepMetrics&)>& on_step = {},
                          const std::function<void(const MetaTunerModel&, int)>& on_best = {});

}  // namespace metatuner
