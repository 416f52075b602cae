#include "metatuner/commands.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "metatuner/checkpoint.hpp"
#include "metatuner/errors.hpp"
#include "metatuner/rng.hpp"

namespace metatuner {

using nlohmann::ordered_json;

namespace {

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string exact(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

ordered_json versions() {
  ordered_json j;
  j["format"] = kFormatVersion;
  j["vocab"] = vocab::kVersion;
  j["dataset"] = kDatasetHeader;
  j["checkpoint"] = kCheckpointVersion;
  return j;
}

// Begins a command in a fresh directory: config echo first, then the marker.
fs::path begin_run(const RunConfig& cfg) {
  const fs::path dir = make_run_dir(cfg);
  save_config(cfg, dir / "config.json");
  write_file(dir / "versions.json", versions().dump(2) + "\n");
  write_file(dir / kIncompleteMarker, "");
  return dir;
}

void end_run(const fs::path& dir) { fs::remove(dir / kIncompleteMarker); }

MetaTunerModel assemble_for(const RunConfig& cfg, const MicroLMWeights& generator, const MicroLMWeights& actor) {
  PipelineConfig pc = cfg.pipeline;
  pc.independent_param_encoder = cfg.train.ablation == Ablation::wo_S;
  LoraConfig lc = cfg.lora;
  return MetaTunerModel::assemble(generator, actor, lc, pc, derive_seed(cfg.train.seed, 0x9F));
}

std::vector<Example> seen_only(const std::vector<Example>& xs) {
  std::vector<Example> out;
  for (const auto& e : xs) {
    if (e.kind == TaskKind::Copy || e.kind == TaskKind::Rev || e.kind == TaskKind::Sort) out.push_back(e);
  }
  return out;
}

}  // namespace

fs::path make_run_dir(const RunConfig& cfg) {
  const fs::path dir = fs::path(cfg.runs_dir) / cfg.run_name;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw ConfigError("run directory " + dir.string() + " already exists; runs are never overwritten");
  }
  fs::create_directories(dir);
  return dir;
}

TaskSuites cmd_datagen(const RunConfig& cfg, const fs::path& out_dir) {
  TaskSuites s = generate_dataset(cfg.tasks, cfg.seed);
  write_split(s.pretrain_mix, out_dir / "pretrain");
  write_split(s.stress_suite, out_dir / "stress");
  for (const auto& loo : s.leave_one_out) write_split(loo, out_dir / loo.name);
  return s;
}

std::string format_expert_pairs(std::span<const ExpertPair> pairs) {
  std::string out = "#metatuner-expert-pairs v1\n";
  for (const auto& p : pairs) {
    out += vocab::encode_text(p.query) + "\t" + vocab::encode_text(p.prompt) + "\t" + vocab::encode_text(p.answer) +
           "\t" + std::string(task_name(p.kind)) + "\t" +
           (p.provenance == Provenance::oracle_warmup ? "oracle_warmup" : "self_rollout") + "\t" +
           exact(p.actor_loglik) + "\n";
  }
  return out;
}

std::vector<ExpertPair> parse_expert_pairs(std::string_view text) {
  std::vector<ExpertPair> out;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (header) {
      if (line != "#metatuner-expert-pairs v1") throw FormatError("expert pairs: missing header");
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      f.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    if (f.size() != 6) throw FormatError("expert pairs: expected 6 fields, got " + std::to_string(f.size()));
    ExpertPair p;
    p.query = vocab::decode_text(f[0]);
    p.prompt = vocab::decode_text(f[1]);
    p.answer = vocab::decode_text(f[2]);
    p.kind = task_from_name(f[3]);
    if (f[4] == "oracle_warmup") {
      p.provenance = Provenance::oracle_warmup;
    } else if (f[4] == "self_rollout") {
      p.provenance = Provenance::self_rollout;
    } else {
      throw FormatError("expert pairs: unknown provenance '" + std::string(f[4]) + "'");
    }
    const auto r = std::from_chars(f[5].data(), f[5].data() + f[5].size(), p.actor_loglik);
    if (r.ec != std::errc()) throw FormatError("expert pairs: bad log-likelihood '" + std::string(f[5]) + "'");
    out.push_back(std::move(p));
  }
  if (header) throw FormatError("expert pairs: missing header");
  return out;
}

ordered_json eval_json(const EvalReport& r) {
  ordered_json j;
  j["mean_reward"] = r.mean_reward;
  j["mean_answer_loss"] = r.mean_answer_loss;
  j["count"] = r.count;
  ordered_json per = ordered_json::object();
  for (const auto& [kind, rc] : r.per_task) {
    per[std::string(task_name(kind))] = {{"reward", r.task_reward(kind)}, {"correct", rc.first}, {"total", rc.second}};
  }
  j["per_task"] = per;
  return j;
}

std::string eval_table(const EvalReport& r) {
  std::ostringstream s;
  s << std::left << std::setw(8) << "task" << std::right << std::setw(9) << "correct" << std::setw(7) << "total"
    << std::setw(9) << "reward" << "\n";
  s << std::fixed << std::setprecision(4);
  for (const auto& [kind, rc] : r.per_task) {
    s << std::left << std::setw(8) << task_name(kind) << std::right << std::setw(9) << rc.first << std::setw(7)
      << rc.second << std::setw(9) << r.task_reward(kind) << "\n";
  }
  s << std::left << std::setw(8) << "all" << std::right << std::setw(9) << "" << std::setw(7) << r.count
    << std::setw(9) << r.mean_reward << "\n";
  s << "mean answer loss " << r.mean_answer_loss << "\n";
  return s.str();
}

WarmupOutcome cmd_warmup(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  WarmupOutcome out;
  out.dir = begin_run(cfg);
  const TaskSuites suites = cmd_datagen(cfg, out.dir / "data");

  MicroLMWeights actor = MicroLMWeights::init(cfg.actor, derive_seed(cfg.seed, 0xAC));
  log << "warmup: actor SFT on " << suites.pretrain_mix.train.size() << " examples, " << cfg.warmup.actor_epochs
      << " epochs\n";
  out.actor = warmup_actor(actor, suites.pretrain_mix.train, cfg.pipeline.initial_prompt, cfg.warmup,
                           derive_seed(cfg.seed, 0xAD));
  const std::vector<int> p_tilde = cfg.pipeline.initial_prompt;
  out.actor_seen_dev_reward = evaluate_actor(actor, suites.pretrain_mix.dev, [&](const Example&) { return p_tilde; },
                                             cfg.pipeline.max_answer_len);
  const auto stress_seen_dev = seen_only(suites.stress_suite.dev);
  const int filler = cfg.warmup.oracle_filler;
  out.oracle_seen_dev_reward = evaluate_actor(
      actor, stress_seen_dev, [&](const Example& e) { return expert_prompt_oracle(e.kind, filler); },
      cfg.pipeline.max_answer_len);
  log << "warmup: actor loss " << out.actor.loss_before << " -> " << out.actor.loss_after
      << ", pretrain dev reward " << out.actor_seen_dev_reward << ", oracle-prompt stress reward "
      << out.oracle_seen_dev_reward << "\n";

  MicroLMWeights generator = MicroLMWeights::init(cfg.generator, derive_seed(cfg.seed, 0x6E));
  RunConfig base = cfg;
  base.train.ablation = Ablation::none;
  MetaTunerModel model = assemble_for(base, generator, actor);
  const auto g = warmup_generator(
      model, suites.stress_suite.train, [&](TaskKind k) { return expert_prompt_oracle(k, filler); }, cfg.warmup,
      derive_seed(cfg.seed, 0x6F));
  out.expert_pairs = g.kept.size();
  out.keep_rate = g.keep_rate;
  {
    NoGradGuard no_grad;
    int match = 0;
    for (const auto& e : stress_seen_dev) {
      match += generate_prompt(model, e.x, PromptMode::greedy()).prompt == expert_prompt_oracle(e.kind, filler);
    }
    out.prompt_match = stress_seen_dev.empty() ? 0.0 : static_cast<double>(match) / stress_seen_dev.size();
  }
  log << "warmup: kept " << g.kept.size() << "/" << g.proposed << " oracle prompts, generator prompt match "
      << out.prompt_match << "\n";

  save_microlm(out.dir / "actor.ckpt", actor);
  save_microlm(out.dir / "generator.ckpt", model.generator);
  write_file(out.dir / "d_po.tsv", format_expert_pairs(g.kept));
  ordered_json report;
  report["actor_loss_before"] = out.actor.loss_before;
  report["actor_loss_after"] = out.actor.loss_after;
  report["actor_epoch_losses"] = out.actor.epoch_losses;
  report["actor_seen_dev_reward"] = out.actor_seen_dev_reward;
  report["oracle_seen_dev_reward"] = out.oracle_seen_dev_reward;
  report["proposed"] = g.proposed;
  report["kept"] = g.kept.size();
  report["keep_rate"] = g.keep_rate;
  report["generator_epoch_losses"] = g.epoch_losses;
  report["prompt_match"] = out.prompt_match;
  write_file(out.dir / "warmup.json", report.dump(2) + "\n");
  end_run(out.dir);
  return out;
}

TrainOutcome cmd_train(const RunConfig& cfg, const fs::path& warmup_dir, std::ostream& log) {
  cfg.validate();
  if (fs::exists(warmup_dir / kIncompleteMarker)) {
    throw ConfigError("warm-up directory " + warmup_dir.string() + " is incomplete");
  }
  const MicroLMWeights actor = load_microlm(warmup_dir / "actor.ckpt");
  const MicroLMWeights generator = load_microlm(warmup_dir / "generator.ckpt");
  if (!(actor.arch == cfg.actor) || !(generator.arch == cfg.generator)) {
    throw ConfigError("warm-up checkpoints in " + warmup_dir.string() + " do not match the configured architectures");
  }
  const DatasetSplit stress = read_split(warmup_dir / "data" / "stress");
  const auto d_po = parse_expert_pairs(read_file(warmup_dir / "d_po.tsv"));

  TrainOutcome out;
  out.dir = begin_run(cfg);
  {
    ordered_json src;
    src["warmup_dir"] = warmup_dir.string();
    src["stress_manifest_hash"] = stress.manifest_hash();
    src["expert_pairs"] = d_po.size();
    write_file(out.dir / "inputs.json", src.dump(2) + "\n");
  }

  MetaTunerModel model = assemble_for(cfg, generator, actor);
  out.test_initial = evaluate(model, stress.test);
  std::ofstream metrics(out.dir / "metrics.ndjson", std::ios::binary);
  log << "train: schedule " << schedule_name(cfg.train.schedule) << ", ablation " << ablation_name(cfg.train.ablation)
      << ", " << cfg.train.steps << " steps, step-0 test reward " << out.test_initial.mean_reward << "\n";
  const auto on_step = [&](const StepMetrics& m) {
    metrics << metrics_json(m) << '\n';
    metrics.flush();
    if (m.dev_reward) log << "train: step " << m.step << " dev reward " << *m.dev_reward << "\n";
  };
  const auto on_best = [&](const MetaTunerModel& mm, int) { save_metatuner(out.dir / "best.ckpt", mm); };
  out.summary = run_training(model, cfg.train, stress.train, stress.dev, d_po, on_step, on_best);
  metrics.close();
  save_metatuner(out.dir / "final.ckpt", model);
  out.test_final = evaluate(model, stress.test);
  const MetaTunerModel best = load_metatuner(out.dir / "best.ckpt");
  out.test_best = evaluate(best, stress.test);

  ordered_json summary;
  summary["schedule"] = schedule_name(cfg.train.schedule);
  summary["ablation"] = ablation_name(cfg.train.ablation);
  summary["seed"] = cfg.train.seed;
  summary["initial_dev_reward"] = out.summary.initial_dev_reward;
  summary["final_dev_reward"] = out.summary.final_dev_reward;
  summary["best_dev_reward"] = out.summary.best_dev_reward;
  summary["best_step"] = out.summary.best_step;
  summary["test_initial"] = eval_json(out.test_initial);
  summary["test_final"] = eval_json(out.test_final);
  summary["test_best"] = eval_json(out.test_best);
  write_file(out.dir / "summary.json", summary.dump(2) + "\n");
  log << "train: final dev " << out.summary.final_dev_reward << ", final test " << out.test_final.mean_reward << "\n";
  end_run(out.dir);
  return out;
}

EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& dataset, const std::string& split, std::ostream& out) {
  const MetaTunerModel model = load_metatuner(checkpoint);
  std::vector<Example> data;
  if (fs::is_directory(dataset)) {
    const DatasetSplit s = read_split(dataset);
    if (split == "train") {
      data = s.train;
    } else if (split == "dev") {
      data = s.dev;
    } else if (split == "test") {
      data = s.test;
    } else {
      throw ConfigError("eval: unknown split '" + split + "' (expected train, dev or test)");
    }
  } else {
    data = read_examples(dataset);
  }
  const EvalReport r = evaluate(model, data);
  out << eval_table(r);
  out << eval_json(r).dump() << '\n';
  return r;
}

void cmd_rollout(const fs::path& checkpoint, const fs::path& queries, double temperature, int n, std::uint64_t seed,
                 std::ostream& out) {
  if (n < 1) throw ConfigError("rollout: n must be >= 1");
  if (!(temperature >= 0.0)) throw ConfigError("rollout: temperature must be >= 0");
  const MetaTunerModel model = load_metatuner(checkpoint);
  const auto data = read_examples(queries);
  const ExpertSetResult es = build_expert_set(model, data, temperature, n, seed);
  NoGradGuard no_grad;
  for (std::size_t q = 0; q < data.size(); ++q) {
    const auto norms = factor_update_norms(generate_params(model, data[q].x));
    for (std::size_t r = 0; r < es.rollouts[q].size(); ++r) {
      const RolloutRecord& rec = es.rollouts[q][r];
      ordered_json j;
      j["query_index"] = q;
      j["rollout"] = r;
      j["task"] = task_name(rec.kind);
      j["query"] = vocab::encode_text(rec.query);
      j["prompt"] = vocab::encode_text(rec.prompt);
      j["factor_norms"] = norms;
      j["factors_hash"] = rec.factors_hash;
      j["answer"] = vocab::encode_text(rec.answer);
      j["gold"] = vocab::encode_text(data[q].y);
      j["reward"] = rec.reward;
      if (rec.reward == 1) j["actor_loglik"] = rec.actor_loglik;
      out << j.dump() << '\n';
    }
  }
}

std::pair<std::string, std::vector<std::string>> parse_grid_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
    throw ConfigError("grid axis '" + spec + "' must look like key=v1,v2,...");
  }
  std::pair<std::string, std::vector<std::string>> axis{spec.substr(0, eq), {}};
  std::stringstream ss(spec.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ',')) {
    if (v.empty()) throw ConfigError("grid axis '" + spec + "' has an empty value");
    axis.second.push_back(v);
  }
  return axis;
}

std::vector<SweepPoint> cmd_sweep(const RunConfig& cfg, const Grid& grid, const fs::path& warmup_dir,
                                  std::ostream& log) {
  if (grid.empty()) throw ConfigError("sweep: empty grid");
  // Resolve every point before running any, so a bad value fails fast.
  std::vector<SweepPoint> points(1);
  points[0].config = cfg;
  for (const auto& [key, values] : grid) {
    if (values.empty()) throw ConfigError("sweep: axis '" + key + "' has no values");
    std::vector<SweepPoint> next;
    for (const auto& p : points) {
      for (const auto& v : values) {
        SweepPoint q = p;
        set_config_value(q.config, key, v);
        q.name = (q.name.empty() ? "" : q.name + ",") + key + "=" + v;
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  const fs::path dir = make_run_dir(cfg);
  save_config(cfg, dir / "config.json");
  write_file(dir / kIncompleteMarker, "");
  std::string table = "point\tinitial_dev\tfinal_dev\tbest_dev\tfinal_test\n";
  for (auto& p : points) {
    p.config.runs_dir = dir.string();
    p.config.run_name = p.name;
    log << "sweep: " << p.name << "\n";
    p.outcome = cmd_train(p.config, warmup_dir, log);
    const auto& s = p.outcome.summary;
    table += p.name + "\t" + exact(s.initial_dev_reward) + "\t" + exact(s.final_dev_reward) + "\t" +
             exact(s.best_dev_reward) + "\t" + exact(p.outcome.test_final.mean_reward) + "\n";
  }
  write_file(dir / "summary.tsv", table);
  end_run(dir);
  return points;
}

}  // namespace metatuner
