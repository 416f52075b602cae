#include <algorithm>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

#include "metatuner/errors.hpp"
#include "metatuner/training.hpp"
#include "support.hpp"

using namespace metatuner;
using namespace metatuner::testing;

namespace {

struct Warm {
  TaskSuites suites;
  MicroLMWeights actor;
  MicroLMWeights generator;
  std::vector<ExpertPair> d_po;
  PipelineConfig pipeline;
};

PipelineConfig tiny_pipeline() {
  PipelineConfig pc;
  pc.split_depth = 1;
  pc.max_prompt_len = 3;
  pc.max_answer_len = 7;
  return pc;
}

std::vector<Example> seen_only(const std::vector<Example>& xs) {
  std::vector<Example> out;
  for (const auto& e : xs) {
    if (e.kind == TaskKind::Copy || e.kind == TaskKind::Rev || e.kind == TaskKind::Sort) out.push_back(e);
  }
  return out;
}

// Briefly warmed tiny actor and generator, built once per process.
const Warm& warm() {
  static const Warm w = [] {
    Warm out;
    SuiteConfig sc;
    sc.min_operand = 3;
    sc.max_operand = 4;
    sc.train = 2000;
    sc.dev = 60;
    sc.test = 60;
    out.suites = generate_dataset(sc, 11);
    out.pipeline = tiny_pipeline();
    out.actor = MicroLMWeights::init(tiny_actor_arch(), 21);
    WarmupConfig wc;
    wc.actor_epochs = 20;
    wc.generator_epochs = 3;
    wc.generator_lr = 3e-3;
    warmup_actor(out.actor, out.suites.pretrain_mix.train, out.pipeline.initial_prompt, wc, 1);
    auto model = MetaTunerModel::assemble(MicroLMWeights::init(tiny_generator_arch(), 22), out.actor, LoraConfig{},
                                          out.pipeline, 3);
    const ExpertOracle oracle = [](TaskKind k) { return expert_prompt_oracle(k); };
    out.d_po = warmup_generator(model, seen_only(out.suites.stress_suite.train), oracle, wc, 2).kept;
    out.generator = model.generator.clone();
    return out;
  }();
  return w;
}

MetaTunerModel warm_model(Ablation ablation = Ablation::none, std::uint64_t seed = 5) {
  const auto& w = warm();
  auto pc = w.pipeline;
  pc.independent_param_encoder = ablation == Ablation::wo_S;
  LoraConfig lc;
  lc.rank = 2;
  auto m = MetaTunerModel::assemble(w.generator, w.actor, lc, pc, seed);
  return m;
}

TrainConfig small_train(Schedule s, Ablation a = Ablation::none) {
  TrainConfig c;
  c.schedule = s;
  c.ablation = a;
  c.batch_size = 4;
  c.steps = 6;
  c.eval_every = 3;
  c.eval_limit = 20;
  c.lr = 3e-3;
  c.seed = 17;
  return c;
}

std::vector<PromptedExample> greedy_prompted(const MetaTunerModel& m, std::span<const Example> batch) {
  std::vector<PromptedExample> out;
  for (const auto& e : batch) out.push_back({e, generate_prompt(m, e.x, PromptMode::greedy()).prompt});
  return out;
}

std::vector<ExpertPair> oracle_pairs(std::span<const Example> batch) {
  std::vector<ExpertPair> out;
  for (const auto& e : batch) {
    ExpertPair p;
    p.query = e.x;
    p.prompt = expert_prompt_oracle(e.kind);
    p.kind = e.kind;
    out.push_back(p);
  }
  return out;
}

bool same(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) { return a == b; }

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.rollouts = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.snapshot_every = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(schedule_from_name("I") == Schedule::I);
  CHECK(ablation_from_name("wo_S") == Ablation::wo_S);
  CHECK_THROWS_AS(ablation_from_name("wo_X"), ConfigError);
}

TEST_CASE("joint loss composition") {
  auto m = tiny_model(1);
  randomize_up_projections(m, 2);
  const auto& data = warm().suites.stress_suite.train;
  const std::span<const Example> batch(data.data(), 4);
  const auto d1 = greedy_prompted(m, batch);
  const auto d2 = oracle_pairs(batch);

  const auto full = loss_joint(m, d1, d2, 0.5);
  CHECK(full.combined.item() == doctest::Approx(full.term1.item() + 0.5 * full.term2.item()).epsilon(1e-14));
  CHECK(loss_joint(m, d1, d2, 0.0).combined.item() == full.term1.item());
  CHECK(loss_joint(m, d1, d2, 0.5, Ablation::wo_F).combined.item() == 0.5 * full.term2.item());
  CHECK(loss_joint(m, d1, d2, 0.5, Ablation::wo_P).combined.item() == full.term1.item());

  const auto empty = loss_joint(m, d1, std::span<const ExpertPair>{}, 0.5);
  CHECK(empty.term2_empty);
  CHECK(empty.term2.item() == 0.0);
  CHECK(empty.combined.item() == empty.term1.item());
}

TEST_CASE("joint loss gradients on a micro configuration") {
  // G: 2 layers, h_G = 16, l = 16; actor: 2 layers, d = 16; r = 2
  auto m = tiny_model(3, 2, 1);
  randomize_up_projections(m, 4);
  const auto& data = warm().suites.stress_suite.train;
  const std::span<const Example> batch(data.data(), 2);
  const auto d1 = greedy_prompted(m, batch);
  const auto d2 = oracle_pairs(batch);

  std::vector<Tensord> all = m.shared_parameters();
  for (const auto& group : {m.prompt_private_parameters(), m.hyper_parameters()}) {
    all.insert(all.end(), group.begin(), group.end());
  }
  const auto report =
      finite_difference_check<double>([&] { return loss_joint(m, d1, d2, 0.5).combined; }, all);
  CHECK(report.max_relative_error < 1e-4);

  const auto max_grad = [](const std::vector<Tensord>& ps) {
    double g = 0.0;
    for (const auto& p : ps) g = std::max(g, p.grad().cwiseAbs().maxCoeff());
    return g;
  };
  for (const auto& p : m.trainable_parameters()) p.zero_grad();
  loss_joint(m, d1, d2, 0.5).term1.backward();
  CHECK(max_grad(m.prompt_private_parameters()) == 0.0);
  CHECK(max_grad(m.shared_parameters()) > 0.0);
  CHECK(max_grad(m.hyper_parameters()) > 0.0);

  for (const auto& p : m.trainable_parameters()) p.zero_grad();
  loss_joint(m, d1, d2, 0.5).term2.backward();
  CHECK(max_grad(m.hyper_parameters()) == 0.0);
  CHECK(max_grad(m.shared_parameters()) > 0.0);
  CHECK(max_grad(m.prompt_private_parameters()) > 0.0);
}

TEST_CASE("actor warm-up") {
  const auto& w = warm();
  const auto fresh = MicroLMWeights::init(tiny_actor_arch(), 21);
  SUBCASE("zero epochs is the identity") {
    const auto a = fresh.clone();
    WarmupConfig wc;
    wc.actor_epochs = 0;
    warmup_actor(a, w.suites.pretrain_mix.train, w.pipeline.initial_prompt, wc, 1);
    CHECK(a.values_equal(fresh));
  }
  SUBCASE("loss goes down and reward goes up") {
    const ActorPromptPolicy p = [&](const Example&) { return w.pipeline.initial_prompt; };
    const auto& dev = w.suites.pretrain_mix.dev;
    CHECK(actor_loss(w.actor, dev, p) < actor_loss(fresh, dev, p));
    CHECK(evaluate_actor(w.actor, dev, p) >= evaluate_actor(fresh, dev, p));
  }
}

TEST_CASE("generator warm-up keeps only solved oracle prompts") {
  const auto& w = warm();
  REQUIRE_FALSE(w.d_po.empty());
  const auto m = warm_model();
  for (const auto& p : w.d_po) {
    CHECK(p.provenance == Provenance::oracle_warmup);
    CHECK(p.prompt == expert_prompt_oracle(p.kind));
    const auto ans = answer_decode(m, p.query, p.prompt, generate_params(m, p.query)).tokens;
    CHECK(reward(p.kind, p.query, ans) == 1);
  }

  SUBCASE("an unsolvable query contributes nothing") {
    // 8 symbols cannot fit in a 7-token answer budget
    Example hard;
    hard.kind = TaskKind::Copy;
    hard.x = {cue_token(TaskKind::Copy), 4, 5, 6, 7, 8, 9, 10, 11};
    hard.y = gold(hard.kind, hard.operand());
    auto fresh = warm_model();
    WarmupConfig wc;
    wc.generator_epochs = 1;
    const ExpertOracle oracle = [](TaskKind k) { return expert_prompt_oracle(k); };
    CHECK_THROWS_AS(warmup_generator(fresh, std::vector<Example>{hard}, oracle, wc, 1), ConfigError);

    std::vector<Example> mix(w.suites.stress_suite.dev.begin(), w.suites.stress_suite.dev.begin() + 10);
    mix.push_back(hard);
    const auto r = warmup_generator(fresh, mix, oracle, wc, 1);
    CHECK(r.proposed == mix.size());
    CHECK(r.keep_rate == doctest::Approx(double(r.kept.size()) / mix.size()));
    for (const auto& p : r.kept) CHECK(p.query != hard.x);
  }
}

TEST_CASE("expert set construction") {
  const auto m = warm_model();
  const auto& dev = warm().suites.stress_suite.dev;
  const std::span<const Example> batch(dev.data(), 20);

  SUBCASE("n=1, t=0 keeps exactly the queries the greedy pipeline solves") {
    const auto a = build_expert_set(m, batch, 0.0, 1, 4), b = build_expert_set(m, batch, 0.0, 1, 99);
    std::size_t solved = 0;
    for (std::size_t q = 0; q < batch.size(); ++q) {
      const auto out = run_pipeline(m, batch[q].x);
      const bool ok = reward(batch[q].kind, batch[q].x, out.answer.tokens) == 1;
      solved += ok;
      CHECK(a.rollouts[q][0].prompt == out.prompt);
      CHECK(a.rollouts[q][0].reward == int(ok));
    }
    CHECK(a.pairs.size() == solved);
    REQUIRE(b.pairs.size() == a.pairs.size());
    for (std::size_t i = 0; i < a.pairs.size(); ++i) CHECK(a.pairs[i].prompt == b.pairs[i].prompt);
  }
  SUBCASE("every pair re-verifies and is the best rewarded rollout") {
    const auto es = build_expert_set(m, batch, 1.0, 4, 7);
    REQUIRE(es.rollouts.size() == batch.size());
    for (const auto& per_query : es.rollouts) {
      CHECK(per_query.size() == 4);
      for (const auto& r : per_query) {
        CHECK(r.reward == reward(r.kind, r.query, r.answer));
      }
    }
    for (const auto& p : es.pairs) {
      CHECK(p.provenance == Provenance::self_rollout);
      const auto ans = answer_decode(m, p.query, p.prompt, generate_params(m, p.query)).tokens;
      CHECK(reward(p.kind, p.query, ans) == 1);
      for (const auto& per_query : es.rollouts) {
        if (per_query[0].query != p.query) continue;
        for (const auto& r : per_query) {
          if (r.reward == 1) CHECK(r.actor_loglik <= p.actor_loglik);
        }
      }
    }
  }
}

TEST_CASE("evaluation") {
  const auto m = warm_model();
  const auto& dev = warm().suites.stress_suite.dev;
  CHECK_THROWS_AS(evaluate(m, std::vector<Example>{}), ValueError);
  const auto a = evaluate(m, dev), b = evaluate(m, dev);
  CHECK(a == b);
  CHECK(a.count == dev.size());
  int total = 0;
  for (const auto& [kind, ct] : a.per_task) total += ct.second;
  CHECK(total == static_cast<int>(dev.size()));

  std::vector<Example> solved;
  for (const auto& e : dev) {
    if (reward(e.kind, e.x, run_pipeline(m, e.x).answer.tokens)) solved.push_back(e);
  }
  REQUIRE_FALSE(solved.empty());
  CHECK(evaluate(m, solved).mean_reward == 1.0);
}

TEST_CASE("single steps touch the documented parameter sets") {
  const auto& w = warm();
  SUBCASE("J with alpha = 0 leaves phi_p unchanged") {
    auto m = warm_model();
    auto cfg = small_train(Schedule::J);
    cfg.alpha = 0.0;
    Trainer t(m, cfg, w.suites.stress_suite.train, w.suites.stress_suite.dev);
    const auto p0 = values_of(m.prompt_private_parameters()), q0 = values_of(m.hyper_parameters());
    t.step();
    CHECK(same(values_of(m.prompt_private_parameters()), p0));
    CHECK_FALSE(same(values_of(m.hyper_parameters()), q0));
  }
  SUBCASE("I: a term-1 step leaves phi_p, a term-2 step leaves phi_q") {
    auto m = warm_model();
    Trainer t(m, small_train(Schedule::I), w.suites.stress_suite.train, w.suites.stress_suite.dev, w.d_po);
    auto p0 = values_of(m.prompt_private_parameters()), q0 = values_of(m.hyper_parameters());
    auto s = t.step();
    CHECK(s.term1);
    CHECK_FALSE(s.term2);
    CHECK(same(values_of(m.prompt_private_parameters()), p0));
    CHECK_FALSE(same(values_of(m.hyper_parameters()), q0));
    p0 = values_of(m.prompt_private_parameters());
    q0 = values_of(m.hyper_parameters());
    s = t.step();
    CHECK(s.term2);
    CHECK_FALSE(s.term1);
    CHECK(same(values_of(m.hyper_parameters()), q0));
    CHECK_FALSE(same(values_of(m.prompt_private_parameters()), p0));
  }
  SUBCASE("the actor never moves") {
    auto m = warm_model();
    const auto before = m.actor.clone();
    Trainer t(m, small_train(Schedule::J), w.suites.stress_suite.train, w.suites.stress_suite.dev, w.d_po);
    for (int i = 0; i < 3; ++i) t.step();
    CHECK(m.actor.values_equal(before));
  }
}

TEST_CASE("partition discipline under the ablations") {
  const auto& w = warm();
  for (Schedule s : {Schedule::J, Schedule::I}) {
    CAPTURE(schedule_name(s));
    {
      auto m = warm_model(Ablation::wo_F);
      const auto q0 = values_of(m.hyper_parameters());
      Trainer t(m, small_train(s, Ablation::wo_F), w.suites.stress_suite.train, w.suites.stress_suite.dev, w.d_po);
      for (int i = 0; i < 4; ++i) t.step();
      CHECK(same(values_of(m.hyper_parameters()), q0));
    }
    {
      auto m = warm_model(Ablation::wo_P);
      const auto p0 = values_of(m.prompt_private_parameters());
      Trainer t(m, small_train(s, Ablation::wo_P), w.suites.stress_suite.train, w.suites.stress_suite.dev, w.d_po);
      for (int i = 0; i < 4; ++i) {
        const auto r = t.step();
        CHECK(r.phi_p_term1_grad == 0.0);
      }
      CHECK(same(values_of(m.prompt_private_parameters()), p0));
    }
    {
      auto m = warm_model(Ablation::wo_S);
      const auto enc0 = values_of(m.param_encoder_parameters());
      Trainer t(m, small_train(s, Ablation::wo_S), w.suites.stress_suite.train, w.suites.stress_suite.dev, w.d_po);
      for (int i = 0; i < 4; ++i) t.step();
      CHECK_FALSE(same(values_of(m.param_encoder_parameters()), enc0));
    }
  }
  auto shared = warm_model();
  CHECK_THROWS_AS(Trainer(shared, small_train(Schedule::J, Ablation::wo_S), w.suites.stress_suite.train,
                          w.suites.stress_suite.dev),
                  ConfigError);
}

TEST_CASE("with a fresh snapshot every step and t = 0, term-1 prompts are the live greedy prompts") {
  const auto& w = warm();
  auto m = warm_model();
  auto cfg = small_train(Schedule::J);
  cfg.snapshot_every = 1;
  cfg.temperature = 0.0;
  cfg.rollouts = 1;
  Trainer t(m, cfg, w.suites.stress_suite.train, w.suites.stress_suite.dev, w.d_po);
  for (int i = 0; i < 4; ++i) {
    const auto batch = t.next_batch();
    std::vector<std::vector<int>> greedy;
    for (const auto& e : batch) greedy.push_back(generate_prompt(m, e.x, PromptMode::greedy()).prompt);
    t.step_J(batch);
    REQUIRE(t.last_rollouts().size() == batch.size());
    for (std::size_t q = 0; q < batch.size(); ++q) CHECK(t.last_rollouts()[q].prompt == greedy[q]);
    CHECK(m.snapshot.values_equal(m.generator));
  }
}

TEST_CASE("empty expert batch warns and contributes zero") {
  auto m = tiny_model(5);  // untrained: solves nothing
  const auto& w = warm();
  auto cfg = small_train(Schedule::J);
  Trainer t(m, cfg, w.suites.stress_suite.train, w.suites.stress_suite.dev);
  std::vector<std::string> warnings;
  t.set_warning_sink([&](const std::string& msg) { warnings.push_back(msg); });
  const auto s = t.step();
  CHECK(s.term2_empty);
  CHECK(s.term2 == 0.0);
  CHECK(s.expert_pairs == 0);
  CHECK(warnings.size() == 1);
}

TEST_CASE("divergence guard") {
  const auto& w = warm();
  auto m = warm_model();
  m.actor.head.mutable_value() *= 1e4;
  Trainer t(m, small_train(Schedule::J), w.suites.stress_suite.train, w.suites.stress_suite.dev, w.d_po);
  CHECK_THROWS_AS(t.step(), DivergenceError);
}

TEST_CASE("metric records") {
  StepMetrics s;
  s.step = 3;
  s.schedule = Schedule::I;
  s.term1 = 0.25;
  s.alpha = 0.5;
  s.snapshot_age = 2;
  s.seed = 9;
  const auto j = nlohmann::ordered_json::parse(metrics_json(s));
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  REQUIRE(keys.size() >= 8);
  CHECK(std::vector<std::string>(keys.begin(), keys.begin() + 8) ==
        std::vector<std::string>{"step", "schedule", "term1", "term2", "alpha", "dev_reward", "snapshot_age", "seed"});
  CHECK(j["schedule"] == "I");
  CHECK(j["term2"].is_null());
  CHECK(metrics_json(s).find('\n') == std::string::npos);
}

TEST_CASE("training runs are reproducible") {
  const auto& w = warm();
  const auto run = [&] {
    auto m = warm_model();
    std::string stream;
    const auto summary = run_training(m, small_train(Schedule::J), w.suites.stress_suite.train,
                                      w.suites.stress_suite.dev, w.d_po,
                                      [&](const StepMetrics& s) { stream += metrics_json(s) + "\n"; });
    return std::make_pair(stream, summary.final_dev_reward);
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(std::count(a.first.begin(), a.first.end(), '\n') == 6);
}
