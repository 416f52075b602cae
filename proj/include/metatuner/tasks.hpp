#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metatuner/vocab.hpp"

namespace metatuner {

enum class TaskKind { Copy = 0, Rev = 1, Sort = 2, Inc = 3, Caesar = 4 };

inline constexpr std::array<TaskKind, 5> kAllTaskKinds = {TaskKind::Copy, TaskKind::Rev, TaskKind::Sort,
                                                          TaskKind::Inc, TaskKind::Caesar};
inline constexpr std::array<TaskKind, 3> kSeenTaskKinds = {TaskKind::Copy, TaskKind::Rev, TaskKind::Sort};

std::string_view task_name(TaskKind kind);
TaskKind task_from_name(std::string_view name);
int instruction_token(TaskKind kind);
int cue_token(TaskKind kind);

/// Maps an INSTR_* (not GENERIC) or CUE_* token back to its task.
TaskKind task_from_marker(int token);

/// One query: x = [marker, operand...], y = gold(operand).
struct Example {
  std::vector<int> x;
  std::vector<int> y;
  TaskKind kind = TaskKind::Copy;

  std::span<const int> operand() const { return std::span<const int>(x).subspan(1); }
  bool operator==(const Example&) const = default;
};

/// Exact symbol-sequence map for the task.
std::vector<int> gold(TaskKind kind, std::span<const int> operand);

/// 1 iff `decoded`, trimmed at the first EOS, equals gold(x's operand).
int reward(TaskKind kind, std::span<const int> x, std::span<const int> decoded);

/// Scripted expert: [INSTR_kind] followed by `filler` FILL tokens.
std::vector<int> expert_prompt_oracle(TaskKind kind, int filler = 0);
/// Overload for integer kinds; throws ValueError on an unknown kind.
std::vector<int> expert_prompt_oracle(int kind, int filler = 0);

struct DatasetSplit {
  std::string name;
  std::vector<Example> train, dev, test;
  std::uint64_t seed = 0;

  /// FNV-1a over the serialized train/dev/test files.
  std::uint64_t manifest_hash() const;
};

struct SuiteConfig {
  int min_operand = 3;
  int max_operand = 6;
  int train = 4000;
  int dev = 200;
  int test = 400;
};

struct TaskSuites {
  /// COPY/REV/SORT with the instruction token inline: x = [INSTR_k, operand].
  DatasetSplit pretrain_mix;
  /// All five kinds with only a latent cue: x = [CUE_k, operand].
  DatasetSplit stress_suite;
  /// For each kind: train/dev on the other four stress kinds, test on that kind.
  std::vector<DatasetSplit> leave_one_out;
};

TaskSuites generate_dataset(const SuiteConfig& cfg, std::uint64_t seed);

/// Longest x any suite emits for this config (marker + operand).
inline int max_query_length(const SuiteConfig& cfg) { return 1 + cfg.max_operand; }

// Line format: space-separated token names, TAB, space-separated token names.
inline constexpr std::string_view kDatasetHeader = "#metatuner-dataset v1";

std::string format_examples(std::span<const Example> examples);
std::vector<Example> parse_examples(std::string_view text);

void write_split(const DatasetSplit& split, const std::filesystem::path& dir);
DatasetSplit read_split(const std::filesystem::path& dir);
std::vector<Example> read_examples(const std::filesystem::path& file);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace metatuner
