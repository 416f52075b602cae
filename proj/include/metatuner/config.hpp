#pragma once

// Run configuration as JSON. Every field has a default; unknown keys are
// rejected. Sections:
//
//   seed, run_name, runs_dir
//   tasks      operand lengths and split sizes
//   generator  ArchConfig of G
//   actor      ArchConfig of M
//   lora       rank, lambda, shared_hypernetwork
//   pipeline   split_depth, max_prompt_len, max_answer_len, initial_prompt,
//              snapshot_includes_shared
//   warmup     actor/generator SFT settings
//   train      alpha, temperature, rollouts, snapshot_every, lr, ...

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "metatuner/adapters.hpp"
#include "metatuner/microlm.hpp"
#include "metatuner/pipeline.hpp"
#include "metatuner/tasks.hpp"
#include "metatuner/training.hpp"

namespace metatuner {

inline constexpr std::string_view kFormatVersion = "metatuner-run v1";

struct RunConfig {
  std::uint64_t seed = 0;
  std::string run_name = "run";
  std::string runs_dir = "runs";
  SuiteConfig tasks;
  ArchConfig generator{.context_len = 24, .d_model = 32, .n_layers = 4, .n_heads = 4, .d_ff = 64};
  ArchConfig actor{.context_len = 32, .d_model = 32, .n_layers = 2, .n_heads = 4, .d_ff = 128};
  LoraConfig lora;
  PipelineConfig pipeline;
  WarmupConfig warmup;
  TrainConfig train;

  /// Cross-section checks (context budgets, split depth, ...). Throws ConfigError.
  void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Starts from defaults and overlays `j`; throws ConfigError on unknown keys or bad types.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Sets a dotted key such as "train.alpha" from its text form.
void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

}  // namespace metatuner
