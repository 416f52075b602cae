#pragma once

// Library form of the CLI commands. Each command owns a fresh run directory
// (runs_dir/run_name), echoes the resolved config into it before doing any
// work, keeps an INCOMPLETE marker until it finishes, and never reuses an
// existing non-empty directory.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "metatuner/config.hpp"
#include "metatuner/training.hpp"

namespace metatuner {

namespace fs = std::filesystem;

inline constexpr const char* kIncompleteMarker = "INCOMPLETE";

/// Creates runs_dir/run_name; throws ConfigError if it already holds files.
fs::path make_run_dir(const RunConfig& cfg);

/// Writes pretrain/, stress/ and loo_<kind>/ splits under `out_dir`.
TaskSuites cmd_datagen(const RunConfig& cfg, const fs::path& out_dir);

struct WarmupOutcome {
  fs::path dir;
  ActorWarmupReport actor;
  double actor_seen_dev_reward = 0.0;   // pretrain dev, p~ prompt
  double oracle_seen_dev_reward = 0.0;  // stress dev seen kinds, oracle prompt
  std::size_t expert_pairs = 0;
  double keep_rate = 0.0;
  double prompt_match = 0.0;  // generator greedy prompt == oracle, stress dev seen kinds
};

/// Warms the actor on the pretraining mixture and the generator on
/// rejection-sampled oracle prompts for the stress suite. Writes actor.ckpt,
/// generator.ckpt, d_po.tsv, warmup.json and data/.
WarmupOutcome cmd_warmup(const RunConfig& cfg, std::ostream& log);

struct TrainOutcome {
  fs::path dir;
  TrainSummary summary;
  EvalReport test_initial;
  EvalReport test_final;
  EvalReport test_best;
};

/// Joint training from a warm-up directory, with cfg.train.schedule and
/// cfg.train.ablation. Writes metrics.ndjson, final.ckpt, best.ckpt, summary.json.
TrainOutcome cmd_train(const RunConfig& cfg, const fs::path& warmup_dir, std::ostream& log);

/// Greedy evaluation of a metatuner checkpoint on a dataset file, or on a
/// split directory with split in {train, dev, test}. Writes a text table
/// followed by one JSON record.
EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& dataset, const std::string& split, std::ostream& out);

/// Samples n prompts per query from the snapshot branch and dumps prompts,
/// factor norms, answers and rewards as one JSON record per rollout.
void cmd_rollout(const fs::path& checkpoint, const fs::path& queries, double temperature, int n, std::uint64_t seed,
                 std::ostream& out);

using Grid = std::vector<std::pair<std::string, std::vector<std::string>>>;

/// Parses "key=v1,v2,..." into a grid axis.
std::pair<std::string, std::vector<std::string>> parse_grid_axis(const std::string& spec);

struct SweepPoint {
  std::string name;
  RunConfig config;
  TrainOutcome outcome;
};

/// Cartesian sweep over `grid`, one cmd_train run per point under
/// runs_dir/run_name/<point>; writes summary.tsv there.
std::vector<SweepPoint> cmd_sweep(const RunConfig& cfg, const Grid& grid, const fs::path& warmup_dir,
                                  std::ostream& log);

/// Expert pairs as text: query TAB prompt TAB answer TAB kind TAB provenance TAB loglik.
std::string format_expert_pairs(std::span<const ExpertPair> pairs);
std::vector<ExpertPair> parse_expert_pairs(std::string_view text);

nlohmann::ordered_json eval_json(const EvalReport& r);
std::string eval_table(const EvalReport& r);

}  // namespace metatuner
