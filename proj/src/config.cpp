#include "metatuner/config.hpp"

#include <fstream>
#include <sstream>

#include "metatuner/errors.hpp"

namespace metatuner {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ordered_json arch_json(const ArchConfig& a) {
  ordered_json j;
  j["vocab_size"] = a.vocab_size;
  j["context_len"] = a.context_len;
  j["d_model"] = a.d_model;
  j["n_layers"] = a.n_layers;
  j["n_heads"] = a.n_heads;
  j["d_ff"] = a.d_ff;
  return j;
}

ArchConfig arch_from(const json& j) {
  ArchConfig a;
  a.vocab_size = j.at("vocab_size").get<int>();
  a.context_len = j.at("context_len").get<int>();
  a.d_model = j.at("d_model").get<int>();
  a.n_layers = j.at("n_layers").get<int>();
  a.n_heads = j.at("n_heads").get<int>();
  a.d_ff = j.at("d_ff").get<int>();
  return a;
}

// Every key of `given` must exist in `known`, recursively through objects.
void check_keys(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) return;
  if (!known.is_object()) throw ConfigError("config: '" + path + "' is not a section");
  for (const auto& [key, value] : given.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + full + "'");
    if (known.at(key).is_object()) {
      if (!value.is_object()) throw ConfigError("config: '" + full + "' must be an object");
      check_keys(value, known.at(key), full);
    }
  }
}

}  // namespace

void RunConfig::validate() const {
  try {
    generator.validate();
    actor.validate();
    lora.validate();
    train.validate();
    warmup.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (generator.vocab_size != vocab::kSize || actor.vocab_size != vocab::kSize) {
    throw ConfigError("config: vocab_size must be " + std::to_string(vocab::kSize));
  }
  if (tasks.min_operand < 1 || tasks.max_operand < tasks.min_operand) {
    throw ConfigError("config: tasks operand range is empty");
  }
  if (pipeline.split_depth < 0 || pipeline.split_depth > generator.n_layers) {
    throw ConfigError("config: pipeline.split_depth must lie in [0, generator.n_layers]");
  }
  if (pipeline.max_prompt_len < 1 || pipeline.max_answer_len < tasks.max_operand + 1) {
    throw ConfigError("config: pipeline.max_answer_len must fit the longest answer plus EOS");
  }
  for (int t : pipeline.initial_prompt) {
    if (t < 0 || t >= vocab::kSize || vocab::is_special(t)) throw ConfigError("config: bad initial_prompt token");
  }
  const int query = max_query_length(tasks);
  const int gen_needed = 1 + static_cast<int>(pipeline.initial_prompt.size()) + 1 + query + pipeline.max_prompt_len + 1;
  if (gen_needed > generator.context_len) {
    throw ConfigError("config: generator.context_len " + std::to_string(generator.context_len) + " < " +
                      std::to_string(gen_needed) + " tokens needed for prefix, prompt and EOS");
  }
  const int prompt_len = std::max<int>(pipeline.max_prompt_len, static_cast<int>(pipeline.initial_prompt.size()));
  const int actor_needed = 1 + prompt_len + 1 + query + 1 + pipeline.max_answer_len;
  if (actor_needed > actor.context_len) {
    throw ConfigError("config: actor.context_len " + std::to_string(actor.context_len) + " < " +
                      std::to_string(actor_needed) + " tokens needed for prefix and answer");
  }
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["run_name"] = c.run_name;
  j["runs_dir"] = c.runs_dir;
  j["tasks"] = {{"min_operand", c.tasks.min_operand},
                {"max_operand", c.tasks.max_operand},
                {"train", c.tasks.train},
                {"dev", c.tasks.dev},
                {"test", c.tasks.test}};
  j["generator"] = arch_json(c.generator);
  j["actor"] = arch_json(c.actor);
  j["lora"] = {{"rank", c.lora.rank}, {"lambda", c.lora.lambda}, {"shared_hypernetwork", c.lora.shared_hypernetwork}};
  ordered_json prompt = ordered_json::array();
  for (int t : c.pipeline.initial_prompt) prompt.push_back(vocab::name(t));
  j["pipeline"] = {{"split_depth", c.pipeline.split_depth},
                   {"max_prompt_len", c.pipeline.max_prompt_len},
                   {"max_answer_len", c.pipeline.max_answer_len},
                   {"initial_prompt", prompt},
                   {"snapshot_includes_shared", c.pipeline.snapshot_includes_shared}};
  j["warmup"] = {{"actor_epochs", c.warmup.actor_epochs},
                 {"actor_lr", c.warmup.actor_lr},
                 {"prompt_slot_fraction", c.warmup.prompt_slot_fraction},
                 {"generator_epochs", c.warmup.generator_epochs},
                 {"generator_lr", c.warmup.generator_lr},
                 {"batch_size", c.warmup.batch_size},
                 {"oracle_filler", c.warmup.oracle_filler}};
  j["train"] = {{"alpha", c.train.alpha},
                {"temperature", c.train.temperature},
                {"rollouts", c.train.rollouts},
                {"snapshot_every", c.train.snapshot_every},
                {"lr", c.train.lr},
                {"hyper_lr", c.train.hyper_lr},
                {"batch_size", c.train.batch_size},
                {"steps", c.train.steps},
                {"eval_every", c.train.eval_every},
                {"eval_limit", c.train.eval_limit},
                {"grad_clip", c.train.grad_clip},
                {"schedule", schedule_name(c.train.schedule)},
                {"ablation", ablation_name(c.train.ablation)},
                {"seed", c.train.seed}};
  return j;
}

RunConfig config_from_json(const json& given) {
  if (!given.is_object()) throw ConfigError("config: top level must be an object");
  json merged = json(to_json(RunConfig{}));
  check_keys(given, merged, "");
  merged.merge_patch(given);
  RunConfig c;
  try {
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.run_name = merged.at("run_name").get<std::string>();
    c.runs_dir = merged.at("runs_dir").get<std::string>();
    const auto& t = merged.at("tasks");
    c.tasks.min_operand = t.at("min_operand").get<int>();
    c.tasks.max_operand = t.at("max_operand").get<int>();
    c.tasks.train = t.at("train").get<int>();
    c.tasks.dev = t.at("dev").get<int>();
    c.tasks.test = t.at("test").get<int>();
    c.generator = arch_from(merged.at("generator"));
    c.actor = arch_from(merged.at("actor"));
    const auto& l = merged.at("lora");
    c.lora.rank = l.at("rank").get<int>();
    c.lora.lambda = l.at("lambda").get<double>();
    c.lora.shared_hypernetwork = l.at("shared_hypernetwork").get<bool>();
    c.lora.d_model = c.actor.d_model;
    c.lora.n_layers = c.actor.n_layers;
    const auto& p = merged.at("pipeline");
    c.pipeline.split_depth = p.at("split_depth").get<int>();
    c.pipeline.max_prompt_len = p.at("max_prompt_len").get<int>();
    c.pipeline.max_answer_len = p.at("max_answer_len").get<int>();
    c.pipeline.initial_prompt.clear();
    for (const auto& name : p.at("initial_prompt")) {
      const auto id = vocab::lookup(name.get<std::string>());
      if (!id) throw ConfigError("config: unknown token '" + name.get<std::string>() + "' in pipeline.initial_prompt");
      c.pipeline.initial_prompt.push_back(*id);
    }
    c.pipeline.snapshot_includes_shared = p.at("snapshot_includes_shared").get<bool>();
    const auto& w = merged.at("warmup");
    c.warmup.actor_epochs = w.at("actor_epochs").get<int>();
    c.warmup.actor_lr = w.at("actor_lr").get<double>();
    c.warmup.prompt_slot_fraction = w.at("prompt_slot_fraction").get<double>();
    c.warmup.generator_epochs = w.at("generator_epochs").get<int>();
    c.warmup.generator_lr = w.at("generator_lr").get<double>();
    c.warmup.batch_size = w.at("batch_size").get<int>();
    c.warmup.oracle_filler = w.at("oracle_filler").get<int>();
    const auto& tr = merged.at("train");
    c.train.alpha = tr.at("alpha").get<double>();
    c.train.temperature = tr.at("temperature").get<double>();
    c.train.rollouts = tr.at("rollouts").get<int>();
    c.train.snapshot_every = tr.at("snapshot_every").get<int>();
    c.train.lr = tr.at("lr").get<double>();
    c.train.hyper_lr = tr.at("hyper_lr").get<double>();
    c.train.batch_size = tr.at("batch_size").get<int>();
    c.train.steps = tr.at("steps").get<int>();
    c.train.eval_every = tr.at("eval_every").get<int>();
    c.train.eval_limit = tr.at("eval_limit").get<int>();
    c.train.grad_clip = tr.at("grad_clip").get<double>();
    c.train.schedule = schedule_from_name(tr.at("schedule").get<std::string>());
    c.train.ablation = ablation_from_name(tr.at("ablation").get<std::string>());
    c.train.seed = tr.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("config: cannot write " + path.string());
  out << to_json(cfg).dump(2) << '\n';
}

void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
  json patch;
  json* node = &patch;
  std::stringstream ss(dotted_key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("config: empty key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;  // bare words are strings
  }
  (*node)[parts.back()] = parsed;
  json merged = json(to_json(cfg));
  check_keys(patch, merged, "");
  merged.merge_patch(patch);
  cfg = config_from_json(merged);
}

}  // namespace metatuner
