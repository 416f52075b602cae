#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "metatuner/commands.hpp"
#include "metatuner/errors.hpp"

using namespace metatuner;

namespace {

RunConfig resolve(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "error: " << kind << ": " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MetaTuner: joint prompt and LoRA generation for a frozen micro-LM"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON run config (defaults apply to missing keys)");
    cmd->add_option("--set", overrides, "override a config value, e.g. --set train.alpha=0.9")->take_all();
  };

  auto* datagen = app.add_subcommand("datagen", "write the task suites as dataset files");
  add_config(datagen);
  std::string out_dir = "data";
  datagen->add_option("-o,--out", out_dir, "output directory");

  auto* warmup = app.add_subcommand("warmup", "warm up the actor and generator into runs_dir/run_name");
  add_config(warmup);

  auto* train = app.add_subcommand("train", "joint training from a warm-up run");
  add_config(train);
  std::string warmup_dir, schedule, ablation;
  train->add_option("-w,--warmup-dir", warmup_dir, "directory written by `warmup`")->required();
  train->add_option("--schedule", schedule, "I (alternating) or J (joint)")->check(CLI::IsMember({"I", "J"}));
  train->add_option("--ablation", ablation, "none, wo_F, wo_P or wo_S")
      ->check(CLI::IsMember({"none", "wo_F", "wo_P", "wo_S"}));

  auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  std::string checkpoint, dataset, split = "test";
  eval->add_option("checkpoint", checkpoint, "metatuner checkpoint")->required();
  eval->add_option("dataset", dataset, "dataset file, or split directory")->required();
  eval->add_option("--split", split, "train, dev or test when dataset is a directory");

  auto* rollout = app.add_subcommand("rollout", "dump sampled prompts, factor norms, answers and rewards");
  std::string queries;
  double temperature = 0.7;
  int n = 4;
  std::uint64_t seed = 0;
  rollout->add_option("checkpoint", checkpoint, "metatuner checkpoint")->required();
  rollout->add_option("queries", queries, "dataset file with the queries")->required();
  rollout->add_option("-t,--temperature", temperature, "sampling temperature");
  rollout->add_option("-n,--rollouts", n, "prompts per query");
  rollout->add_option("--seed", seed, "sampling seed");

  auto* sweep = app.add_subcommand("sweep", "cartesian sweep of train runs");
  add_config(sweep);
  std::vector<std::string> grid_specs;
  sweep->add_option("-w,--warmup-dir", warmup_dir, "directory written by `warmup`")->required();
  sweep->add_option("--grid", grid_specs, "key=v1,v2,... (repeatable; dotted config keys)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*datagen) {
      cmd_datagen(resolve(config_path, overrides), out_dir);
    } else if (*warmup) {
      const auto out = cmd_warmup(resolve(config_path, overrides), std::cerr);
      std::cout << out.dir.string() << "\n";
    } else if (*train) {
      RunConfig cfg = resolve(config_path, overrides);
      if (!schedule.empty()) cfg.train.schedule = schedule_from_name(schedule);
      if (!ablation.empty()) cfg.train.ablation = ablation_from_name(ablation);
      const auto out = cmd_train(cfg, warmup_dir, std::cerr);
      std::cout << out.dir.string() << "\n";
    } else if (*eval) {
      cmd_eval(checkpoint, dataset, split, std::cout);
    } else if (*rollout) {
      cmd_rollout(checkpoint, queries, temperature, n, seed, std::cout);
    } else if (*sweep) {
      Grid grid;
      for (const auto& g : grid_specs) grid.push_back(parse_grid_axis(g));
      const auto points = cmd_sweep(resolve(config_path, overrides), grid, warmup_dir, std::cerr);
      for (const auto& p : points) {
        std::cout << p.name << "\t" << p.outcome.summary.final_dev_reward << "\n";
      }
    }
  } catch (const ConfigError& e) {
    return report("config", e, 2);
  } catch (const FormatError& e) {
    return report("format", e, 3);
  } catch (const DivergenceError& e) {
    return report("diverged", e, 4);
  } catch (const std::exception& e) {
    return report("failed", e, 1);
  }
  return 0;
}
