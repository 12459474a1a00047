// Command-line front end: train agents from a config file, evaluate saved
// snapshots, export DP oracle tables, run the composite-value bound sweep,
// and emit task files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "proxyplan/dp_oracle.hpp"
#include "proxyplan/gridworld.hpp"
#include "proxyplan/harness.hpp"

namespace {

using namespace proxyplan;

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  nlohmann::json j;
  in >> j;
  return j;
}

std::vector<MazeTask> load_tasks_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<MazeTask> tasks;
  for (const auto& f : files) tasks.push_back(read_json_file(f).get<MazeTask>());
  if (tasks.empty()) throw std::runtime_error("no task files in " + dir.string());
  return tasks;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed_override,
              const std::string& agent_override, const std::string& snapshot_out) {
  ExperimentConfig cfg;
  if (!config_path.empty()) {
    cfg = read_json_file(config_path).get<ExperimentConfig>();
  }
  if (seed_override) cfg.seeds = {*seed_override};
  if (!agent_override.empty()) cfg.agent = agent_kind_from_name(agent_override);
  cfg.validate();

  auto results = run_training(cfg);
  std::vector<RunRecord> records;
  for (auto& r : results) records.push_back(r.record);
  export_metrics(cfg, records, out_dir);
  if (!snapshot_out.empty()) {
    save_agent(results.front().agent, snapshot_out);
    std::cout << "snapshot: " << snapshot_out << " (seed " << cfg.seeds.front()
              << ")\n";
  }
  std::cout << "wrote " << out_dir << "/metrics.csv and metrics.json ("
            << records.size() << " seeds, "
            << (records.empty() ? 0 : records.front().points.size())
            << " eval points)\n";
  return 0;
}

int cmd_eval(const std::string& snapshot_path, const std::string& tasks_dir,
             int num_tasks, double difficulty, int width, int height,
             std::uint64_t task_seed, int episodes, double noise,
             std::uint64_t seed) {
  TrainedAgent agent = load_agent(snapshot_path);
  std::vector<MazeTask> tasks;
  if (!tasks_dir.empty()) {
    tasks = load_tasks_dir(tasks_dir);
  } else {
    for (int i = 0; i < num_tasks; ++i) {
      tasks.push_back(generate_task(width, height, difficulty,
                                    derive_seed(task_seed, std::uint64_t(i))));
    }
  }
  std::vector<int> ids;
  for (std::size_t i = 0; i < tasks.size(); ++i) ids.push_back(-(1 + int(i)));
  Rng rng(seed);
  double success = evaluate(agent, tasks, ids, episodes, noise, rng);
  std::printf("tasks %zu  episodes %d  noise %.3f  success %.4f\n", tasks.size(),
              episodes, noise, success);
  return 0;
}

int cmd_oracle(const std::string& task_path, const std::string& out_path) {
  MazeTask task = read_json_file(task_path).get<MazeTask>();
  OracleTables tables = compute_oracle(task);
  nlohmann::json j = tables;
  j["task"] = task;
  Coord spawn = eval_spawn(task);
  j["eval_spawn"] = {spawn.x, spawn.y};
  double d = tables.distance(task.index(spawn), task.index(task.goal));
  if (!out_path.empty()) {
    write_file(out_path, j.dump(2) + "\n");
    std::cout << "wrote " << out_path << "\n";
  } else {
    std::cout << j.dump(2) << "\n";
  }
  std::printf("spawn (%d,%d) -> goal (%d,%d): distance %s\n", spawn.x, spawn.y,
              task.goal.x, task.goal.y,
              std::isinf(d) ? "unreachable" : std::to_string(int(d)).c_str());
  return 0;
}

int cmd_bound_check(int fixtures, int width, int height, double difficulty,
                    std::uint64_t seed, double gamma, double slack, int stride,
                    int random_trials) {
  std::vector<MazeTask> tasks;
  for (int i = 0; i < fixtures; ++i) {
    tasks.push_back(
        generate_task(width, height, difficulty, derive_seed(seed, std::uint64_t(i))));
  }
  Rng rng(derive_seed(seed, 0xb0u));
  auto cases = theorem_bound_sweep(tasks, gamma, slack, stride, random_trials, rng);
  bool all_ok = true;
  for (const auto& c : cases) {
    std::printf("fixture %d  eps_v %.3f  eps_gamma %.3f  observed %.6g  bound %.6g  %s\n",
                c.fixture, c.eps_v, c.eps_gamma, c.observed_error, c.bound,
                c.ok ? "ok" : "VIOLATED");
    all_ok = all_ok && c.ok;
  }
  std::printf("%s (%zu cases)\n", all_ok ? "all bounds hold" : "bound violations found",
              cases.size());
  return all_ok ? 0 : 1;
}

int cmd_gen_tasks(int count, int width, int height, double difficulty,
                  std::uint64_t seed, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  for (int i = 0; i < count; ++i) {
    MazeTask task = generate_task(width, height, difficulty,
                                  derive_seed(seed, std::uint64_t(i)));
    char name[64];
    std::snprintf(name, sizeof(name), "task_%03d.json", i);
    nlohmann::json j = task;
    write_file(std::filesystem::path(out_dir) / name, j.dump(2) + "\n");
  }
  std::cout << "wrote " << count << " tasks to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Checkpoint-planning agents on procedural lava mazes"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "run a training experiment");
  std::string config_path, out_dir = "out", agent_override, snapshot_out;
  std::optional<std::uint64_t> seed_override;
  train->add_option("--config", config_path, "experiment config JSON");
  train->add_option("--out-dir", out_dir, "output directory");
  train->add_option("--seed", seed_override, "replace the seed list with one seed");
  train->add_option("--agent", agent_override,
                    "SkipperOnce|SkipperRegen|Modelfree|SkipperGoal");
  train->add_option("--snapshot-out", snapshot_out, "save first seed's agent here");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a saved agent snapshot");
  std::string snapshot_path, tasks_dir;
  int eval_num_tasks = 20, eval_w = 8, eval_h = 8, eval_episodes = 20;
  double eval_difficulty = 0.4, eval_noise = 0.0;
  std::uint64_t eval_task_seed = 7, eval_seed = 1;
  eval->add_option("--snapshot", snapshot_path, "agent snapshot JSON")->required();
  eval->add_option("--tasks-dir", tasks_dir, "directory of task JSON files");
  eval->add_option("--num-tasks", eval_num_tasks, "generated task count");
  eval->add_option("--width", eval_w, "generated task width");
  eval->add_option("--height", eval_h, "generated task height");
  eval->add_option("--difficulty", eval_difficulty, "generated task difficulty");
  eval->add_option("--task-seed", eval_task_seed, "generated task seed");
  eval->add_option("--episodes", eval_episodes, "evaluation episodes");
  eval->add_option("--noise", eval_noise, "action noise");
  eval->add_option("--seed", eval_seed, "evaluation rng seed");

  // oracle
  auto* oracle = app.add_subcommand("oracle", "dump DP oracle tables for a task");
  std::string oracle_task, oracle_out;
  oracle->add_option("--task", oracle_task, "task JSON file")->required();
  oracle->add_option("--out", oracle_out, "output JSON path (stdout if omitted)");

  // bound-check
  auto* bound = app.add_subcommand("bound-check", "composite-value bound sweep");
  int bc_fixtures = 5, bc_w = 8, bc_h = 8, bc_stride = 3, bc_trials = 32;
  double bc_difficulty = 0.35, bc_gamma = 0.99, bc_slack = 1.5;
  std::uint64_t bc_seed = 11;
  bound->add_option("--fixtures", bc_fixtures, "number of fixture tasks");
  bound->add_option("--width", bc_w, "fixture width");
  bound->add_option("--height", bc_h, "fixture height");
  bound->add_option("--difficulty", bc_difficulty, "fixture difficulty");
  bound->add_option("--seed", bc_seed, "fixture seed");
  bound->add_option("--gamma", bc_gamma, "discount");
  bound->add_option("--slack", bc_slack, "bound slack factor");
  bound->add_option("--stride", bc_stride, "waypoint stride along the path");
  bound->add_option("--random-trials", bc_trials, "random perturbations per case");

  // gen-tasks
  auto* gen = app.add_subcommand("gen-tasks", "emit task JSON files");
  int gt_count = 10, gt_w = 8, gt_h = 8;
  double gt_difficulty = 0.4;
  std::uint64_t gt_seed = 7;
  std::string gt_out = "tasks";
  gen->add_option("--count", gt_count, "number of tasks");
  gen->add_option("--width", gt_w, "task width");
  gen->add_option("--height", gt_h, "task height");
  gen->add_option("--difficulty", gt_difficulty, "lava density");
  gen->add_option("--seed", gt_seed, "base seed");
  gen->add_option("--out-dir", gt_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return cmd_train(config_path, out_dir, seed_override, agent_override,
                       snapshot_out);
    }
    if (eval->parsed()) {
      return cmd_eval(snapshot_path, tasks_dir, eval_num_tasks, eval_difficulty,
                      eval_w, eval_h, eval_task_seed, eval_episodes, eval_noise,
                      eval_seed);
    }
    if (oracle->parsed()) return cmd_oracle(oracle_task, oracle_out);
    if (bound->parsed()) {
      return cmd_bound_check(bc_fixtures, bc_w, bc_h, bc_difficulty, bc_seed, bc_gamma,
                             bc_slack, bc_stride, bc_trials);
    }
    if (gen->parsed()) {
      return cmd_gen_tasks(gt_count, gt_w, gt_h, gt_difficulty, gt_seed, gt_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
