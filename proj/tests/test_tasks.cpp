#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"

#include "metatuner/errors.hpp"
#include "metatuner/tasks.hpp"

using namespace metatuner;

namespace {

std::vector<int> toks(std::string_view text) { return vocab::decode_text(text); }

SuiteConfig small_suite() {
  SuiteConfig c;
  c.train = 300;
  c.dev = 50;
  c.test = 60;
  return c;
}

}  // namespace

TEST_CASE("vocabulary table") {
  CHECK(vocab::kSize == 48);
  CHECK(vocab::name(vocab::kPad) == "<pad>");
  CHECK(vocab::name(vocab::kDigit0 + 7) == "7");
  CHECK(vocab::name(vocab::kLetterA + 9) == "j");
  CHECK(vocab::name(vocab::kInstrGeneric) == "INSTR_GENERIC");
  CHECK(vocab::name(vocab::kCue1 + 4) == "CUE_5");
  std::set<std::string_view> seen;
  for (int id = 0; id < vocab::kSize; ++id) {
    CHECK(seen.insert(vocab::name(id)).second);
    CHECK(vocab::lookup(vocab::name(id)) == id);
  }
  std::vector<int> all(vocab::kSize);
  for (int i = 0; i < vocab::kSize; ++i) all[i] = i;
  CHECK(vocab::decode_text(vocab::encode_text(all)) == all);
  CHECK_THROWS_AS(vocab::decode_text("a b nope"), FormatError);
}

TEST_CASE("gold functions") {
  CHECK(gold(TaskKind::Rev, toks("a b c")) == toks("c b a"));
  CHECK(gold(TaskKind::Copy, toks("3 a 9")) == toks("3 a 9"));
  CHECK(gold(TaskKind::Sort, toks("c 3 a 0")) == toks("0 3 a c"));
  CHECK(gold(TaskKind::Inc, toks("0 8 9")) == toks("1 9 0"));
  CHECK(gold(TaskKind::Caesar, toks("a h i j")) == toks("c j a b"));
}

TEST_CASE("reward") {
  const auto x = toks("CUE_4 1 2 9");
  CHECK(reward(TaskKind::Inc, x, toks("2 3 0")) == 1);
  CHECK(reward(TaskKind::Inc, x, toks("2 3 0 <eos> 5 5")) == 1);
  CHECK(reward(TaskKind::Inc, x, toks("2 3 1")) == 0);  // off by one in the last digit
  CHECK(reward(TaskKind::Inc, x, toks("2 3")) == 0);
  CHECK(reward(TaskKind::Inc, x, toks("2 3 0 4")) == 0);
  CHECK(reward(TaskKind::Inc, x, {}) == 0);
}

TEST_CASE("every length-2 reversal query rewards its gold answer") {
  int cases = 0;
  for (int a = vocab::kDigit0; a < vocab::kLetterA + 10; ++a) {
    for (int b = vocab::kDigit0; b < vocab::kLetterA + 10; ++b) {
      const std::vector<int> x{vocab::kCue1 + 1, a, b};
      const std::vector<int> y{b, a};
      CHECK(gold(TaskKind::Rev, std::span(x).subspan(1)) == y);
      CHECK(reward(TaskKind::Rev, x, y) == 1);
      if (a != b) CHECK(reward(TaskKind::Rev, x, std::vector<int>{a, b}) == 0);
      ++cases;
    }
  }
  CHECK(cases == 400);
}

TEST_CASE("expert oracle") {
  CHECK(expert_prompt_oracle(TaskKind::Rev) == std::vector<int>{vocab::kInstrRev});
  CHECK(expert_prompt_oracle(TaskKind::Caesar, 2) ==
        std::vector<int>{vocab::kInstrCaesar, vocab::kFill0, vocab::kFill0 + 1});
  CHECK(expert_prompt_oracle(2) == expert_prompt_oracle(TaskKind::Sort));
  CHECK(expert_prompt_oracle(TaskKind::Inc, 3) == expert_prompt_oracle(TaskKind::Inc, 3));
  CHECK_THROWS_AS(expert_prompt_oracle(5), ValueError);
  CHECK_THROWS_AS(expert_prompt_oracle(-1), ValueError);
}

TEST_CASE("markers map to tasks") {
  for (TaskKind k : kAllTaskKinds) {
    CHECK(task_from_marker(instruction_token(k)) == k);
    CHECK(task_from_marker(cue_token(k)) == k);
    CHECK(task_from_name(task_name(k)) == k);
  }
  CHECK_THROWS_AS(task_from_marker(vocab::kInstrGeneric), ValueError);
  CHECK_THROWS_AS(task_from_name("ADD"), ValueError);
}

TEST_CASE("dataset generation") {
  const auto cfg = small_suite();
  const auto a = generate_dataset(cfg, 7), b = generate_dataset(cfg, 7), c = generate_dataset(cfg, 8);
  CHECK(a.pretrain_mix.manifest_hash() == b.pretrain_mix.manifest_hash());
  CHECK(a.stress_suite.manifest_hash() == b.stress_suite.manifest_hash());
  CHECK(a.stress_suite.manifest_hash() != c.stress_suite.manifest_hash());

  SUBCASE("pretraining carries instructions for seen kinds only") {
    for (const auto* part : {&a.pretrain_mix.train, &a.pretrain_mix.dev, &a.pretrain_mix.test}) {
      for (const auto& e : *part) {
        CHECK(e.x[0] == instruction_token(e.kind));
        CHECK(e.kind != TaskKind::Inc);
        CHECK(e.kind != TaskKind::Caesar);
      }
    }
  }
  SUBCASE("stress queries hold a cue and no instruction") {
    std::set<TaskKind> kinds;
    for (const auto* part : {&a.stress_suite.train, &a.stress_suite.dev, &a.stress_suite.test}) {
      for (const auto& e : *part) {
        CHECK(e.x[0] == cue_token(e.kind));
        for (int t : e.x) CHECK_FALSE(vocab::is_instruction(t));
        kinds.insert(e.kind);
      }
    }
    CHECK(kinds.size() == 5);
  }
  SUBCASE("gold answers and operand lengths") {
    for (const auto& e : a.stress_suite.train) {
      CHECK(e.y == gold(e.kind, e.operand()));
      CHECK(reward(e.kind, e.x, e.y) == 1);
      CHECK(e.operand().size() >= static_cast<std::size_t>(cfg.min_operand));
      CHECK(e.operand().size() <= static_cast<std::size_t>(cfg.max_operand));
    }
  }
  SUBCASE("splits are disjoint by operand") {
    for (const auto* s : {&a.pretrain_mix, &a.stress_suite}) {
      std::set<std::vector<int>> ops;
      std::size_t n = 0;
      for (const auto* part : {&s->train, &s->dev, &s->test}) {
        for (const auto& e : *part) {
          ops.emplace(e.operand().begin(), e.operand().end());
          ++n;
        }
      }
      CHECK(ops.size() == n);
    }
  }
  SUBCASE("leave-one-out variants") {
    REQUIRE(a.leave_one_out.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto held = kAllTaskKinds[i];
      const auto& s = a.leave_one_out[i];
      CHECK(s.name == "leave_out_" + std::string(task_name(held)));
      for (const auto& e : s.train) CHECK(e.kind != held);
      for (const auto& e : s.dev) CHECK(e.kind != held);
      CHECK_FALSE(s.test.empty());
      for (const auto& e : s.test) CHECK(e.kind == held);
    }
  }
}

TEST_CASE("dataset configuration errors") {
  SuiteConfig c = small_suite();
  c.dev = 0;
  CHECK_THROWS_AS(generate_dataset(c, 1), ConfigError);
  c = small_suite();
  c.min_operand = 5;
  c.max_operand = 4;
  CHECK_THROWS_AS(generate_dataset(c, 1), ConfigError);
  c = small_suite();
  c.min_operand = c.max_operand = 1;
  c.train = 100;  // only 20 one-symbol operands exist
  CHECK_THROWS_AS(generate_dataset(c, 1), ConfigError);
}

TEST_CASE("dataset text format") {
  const auto suites = generate_dataset(small_suite(), 3);
  const auto& xs = suites.stress_suite.dev;
  const std::string text = format_examples(xs);
  CHECK(text.rfind(std::string(kDatasetHeader), 0) == 0);
  CHECK(parse_examples(text) == xs);
  CHECK_THROWS_AS(parse_examples("CUE_1 1 2\t1 2\n"), FormatError);
  CHECK_THROWS_AS(parse_examples(std::string(kDatasetHeader) + "\nCUE_1 1 2 1 2\n"), FormatError);
  CHECK_THROWS_AS(parse_examples(""), FormatError);

  const auto dir = std::filesystem::temp_directory_path() / "metatuner_test_tasks_split";
  std::filesystem::remove_all(dir);
  write_split(suites.stress_suite, dir);
  const auto back = read_split(dir);
  CHECK(back.train == suites.stress_suite.train);
  CHECK(back.test == suites.stress_suite.test);
  CHECK(back.seed == suites.stress_suite.seed);
  CHECK(back.manifest_hash() == suites.stress_suite.manifest_hash());
  std::filesystem::remove_all(dir);
}
