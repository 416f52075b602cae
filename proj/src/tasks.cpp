#include "metatuner/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "metatuner/errors.hpp"
#include "metatuner/rng.hpp"

namespace metatuner {

namespace {

constexpr std::array<std::string_view, 5> kTaskNames = {"COPY", "REV", "SORT", "INC", "CAESAR"};

std::vector<int> alphabet_for(TaskKind kind) {
  std::vector<int> symbols;
  const bool digits = kind != TaskKind::Caesar;
  const bool letters = kind != TaskKind::Inc;
  if (digits) {
    for (int i = 0; i < 10; ++i) symbols.push_back(vocab::kDigit0 + i);
  }
  if (letters) {
    for (int i = 0; i < 10; ++i) symbols.push_back(vocab::kLetterA + i);
  }
  return symbols;
}

std::vector<int> draw_operand(Rng& rng, TaskKind kind, const SuiteConfig& cfg) {
  auto pool = alphabet_for(kind);
  const int span = cfg.max_operand - cfg.min_operand + 1;
  const int len = cfg.min_operand + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
  // Partial Fisher-Yates: distinct symbols.
  for (int i = 0; i < len; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  return {pool.begin(), pool.begin() + len};
}

template <std::size_t N>
std::vector<Example> draw_examples(Rng& rng, const std::array<TaskKind, N>& kinds, int count, bool inline_instruction,
                                   const SuiteConfig& cfg, std::set<std::vector<int>>& used) {
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const TaskKind kind = kinds[static_cast<std::size_t>(i) % N];
    std::vector<int> operand;
    int attempts = 0;
    do {
      if (++attempts > 100000) throw ConfigError("generate_dataset: operand space exhausted");
      operand = draw_operand(rng, kind, cfg);
    } while (!used.insert(operand).second);
    Example ex;
    ex.kind = kind;
    ex.x.push_back(inline_instruction ? instruction_token(kind) : cue_token(kind));
    ex.x.insert(ex.x.end(), operand.begin(), operand.end());
    ex.y = gold(kind, operand);
    out.push_back(std::move(ex));
  }
  return out;
}

template <std::size_t N>
DatasetSplit make_split(std::string name, const std::array<TaskKind, N>& kinds, bool inline_instruction,
                        const SuiteConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::set<std::vector<int>> used;
  DatasetSplit split;
  split.name = std::move(name);
  split.seed = seed;
  split.train = draw_examples(rng, kinds, cfg.train, inline_instruction, cfg, used);
  split.dev = draw_examples(rng, kinds, cfg.dev, inline_instruction, cfg, used);
  split.test = draw_examples(rng, kinds, cfg.test, inline_instruction, cfg, used);
  return split;
}

std::vector<Example> without_kind(const std::vector<Example>& xs, TaskKind kind, bool keep) {
  std::vector<Example> out;
  for (const auto& e : xs) {
    if ((e.kind == kind) == keep) out.push_back(e);
  }
  return out;
}

}  // namespace

std::string_view task_name(TaskKind kind) { return kTaskNames[static_cast<std::size_t>(kind)]; }

TaskKind task_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kTaskNames.size(); ++i) {
    if (kTaskNames[i] == name) return static_cast<TaskKind>(i);
  }
  throw ValueError("unknown task kind '" + std::string(name) + "'");
}

int instruction_token(TaskKind kind) { return vocab::kInstrCopy + static_cast<int>(kind); }
int cue_token(TaskKind kind) { return vocab::kCue1 + static_cast<int>(kind); }

TaskKind task_from_marker(int token) {
  if (token >= vocab::kInstrCopy && token <= vocab::kInstrCaesar) return static_cast<TaskKind>(token - vocab::kInstrCopy);
  if (vocab::is_cue(token)) return static_cast<TaskKind>(token - vocab::kCue1);
  throw ValueError("token " + std::to_string(token) + " does not identify a task");
}

std::vector<int> gold(TaskKind kind, std::span<const int> operand) {
  std::vector<int> out(operand.begin(), operand.end());
  switch (kind) {
    case TaskKind::Copy:
      break;
    case TaskKind::Rev:
      std::reverse(out.begin(), out.end());
      break;
    case TaskKind::Sort:
      std::sort(out.begin(), out.end());
      break;
    case TaskKind::Inc:
      for (int& t : out) {
        if (vocab::is_digit(t)) t = vocab::kDigit0 + (t - vocab::kDigit0 + 1) % 10;
      }
      break;
    case TaskKind::Caesar:
      for (int& t : out) {
        if (vocab::is_letter(t)) t = vocab::kLetterA + (t - vocab::kLetterA + 2) % 10;
      }
      break;
  }
  return out;
}

int reward(TaskKind kind, std::span<const int> x, std::span<const int> decoded) {
  if (x.empty()) return 0;
  auto end = std::find(decoded.begin(), decoded.end(), vocab::kEos);
  const auto expected = gold(kind, x.subspan(1));
  return std::equal(decoded.begin(), end, expected.begin(), expected.end()) ? 1 : 0;
}

std::vector<int> expert_prompt_oracle(TaskKind kind, int filler) {
  std::vector<int> prompt{instruction_token(kind)};
  for (int i = 0; i < filler; ++i) prompt.push_back(vocab::kFill0 + i % vocab::kNumFill);
  return prompt;
}

std::vector<int> expert_prompt_oracle(int kind, int filler) {
  if (kind < 0 || kind >= static_cast<int>(kAllTaskKinds.size())) {
    throw ValueError("expert_prompt_oracle: unknown task kind " + std::to_string(kind));
  }
  return expert_prompt_oracle(static_cast<TaskKind>(kind), filler);
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t DatasetSplit::manifest_hash() const {
  std::uint64_t h = fnv1a(format_examples(train));
  h = fnv1a(format_examples(dev), h);
  return fnv1a(format_examples(test), h);
}

TaskSuites generate_dataset(const SuiteConfig& cfg, std::uint64_t seed) {
  if (cfg.min_operand < 1 || cfg.max_operand < cfg.min_operand || cfg.max_operand > 10) {
    throw ConfigError("generate_dataset: operand length range must satisfy 1 <= min <= max <= 10");
  }
  if (cfg.train <= 0 || cfg.dev <= 0 || cfg.test <= 0) {
    throw ConfigError("generate_dataset: every split needs at least one example");
  }
  if (cfg.train < static_cast<int>(kAllTaskKinds.size()) || cfg.test < static_cast<int>(kAllTaskKinds.size())) {
    throw ConfigError("generate_dataset: train and test must hold at least one example per task kind");
  }

  TaskSuites suites;
  suites.pretrain_mix = make_split("pretrain_mix", kSeenTaskKinds, true, cfg, derive_seed(seed, 1));
  suites.stress_suite = make_split("stress_suite", kAllTaskKinds, false, cfg, derive_seed(seed, 2));
  for (TaskKind held : kAllTaskKinds) {
    DatasetSplit s;
    s.name = "leave_out_" + std::string(task_name(held));
    s.seed = suites.stress_suite.seed;
    s.train = without_kind(suites.stress_suite.train, held, false);
    s.dev = without_kind(suites.stress_suite.dev, held, false);
    s.test = without_kind(suites.stress_suite.test, held, true);
    suites.leave_one_out.push_back(std::move(s));
  }
  return suites;
}

std::string format_examples(std::span<const Example> examples) {
  std::string out(kDatasetHeader);
  out += '\n';
  for (const auto& e : examples) {
    out += vocab::encode_text(e.x);
    out += '\t';
    out += vocab::encode_text(e.y);
    out += '\n';
  }
  return out;
}

std::vector<Example> parse_examples(std::string_view text) {
  std::vector<Example> out;
  std::size_t pos = 0;
  bool header_seen = false;
  int line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!header_seen) {
      if (line != kDatasetHeader) throw FormatError("dataset: missing header '" + std::string(kDatasetHeader) + "'");
      header_seen = true;
      continue;
    }
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw FormatError("dataset line " + std::to_string(line_no) + ": no TAB");
    Example e;
    e.x = vocab::decode_text(line.substr(0, tab));
    e.y = vocab::decode_text(line.substr(tab + 1));
    if (e.x.empty()) throw FormatError("dataset line " + std::to_string(line_no) + ": empty query");
    e.kind = task_from_marker(e.x.front());
    out.push_back(std::move(e));
  }
  if (!header_seen) throw FormatError("dataset: empty file");
  return out;
}

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<Example> read_examples(const std::filesystem::path& file) { return parse_examples(read_text(file)); }

void write_split(const DatasetSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "train.tsv", format_examples(split.train));
  write_text(dir / "dev.tsv", format_examples(split.dev));
  write_text(dir / "test.tsv", format_examples(split.test));
  std::ostringstream m;
  m << "format=metatuner-dataset v1\n"
    << "vocab=" << vocab::kVersion << "\n"
    << "name=" << split.name << "\n"
    << "seed=" << split.seed << "\n"
    << "train=" << split.train.size() << "\n"
    << "dev=" << split.dev.size() << "\n"
    << "test=" << split.test.size() << "\n"
    << "hash=" << std::hex << split.manifest_hash() << "\n";
  write_text(dir / "manifest.txt", m.str());
}

DatasetSplit read_split(const std::filesystem::path& dir) {
  DatasetSplit s;
  s.train = read_examples(dir / "train.tsv");
  s.dev = read_examples(dir / "dev.tsv");
  s.test = read_examples(dir / "test.tsv");
  std::istringstream manifest(read_text(dir / "manifest.txt"));
  std::string line;
  std::string hash;
  while (std::getline(manifest, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "name") s.name = value;
    if (key == "seed") s.seed = std::stoull(value);
    if (key == "hash") hash = value;
  }
  std::ostringstream actual;
  actual << std::hex << s.manifest_hash();
  if (hash != actual.str()) throw FormatError("dataset " + dir.string() + ": manifest hash mismatch");
  return s;
}

}  // namespace metatuner
