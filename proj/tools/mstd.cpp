// mstd: data generation, staged training, evaluation, multi-seed comparison
// and routing statistics.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mstd/config.hpp"
#include "mstd/data.hpp"
#include "mstd/error.hpp"
#include "mstd/experiment.hpp"

namespace fs = std::filesystem;

namespace {

int env_threads() {
  const char* v = std::getenv("MSTD_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) mstd::fail(mstd::ErrorKind::kConfig, std::string("MSTD_THREADS must be a positive integer, got '") + v + "'");
  return static_cast<int>(n);
}

mstd::RunConfig config_from(const std::string& path) {
  mstd::RunConfig cfg = mstd::load_config(path);
  cfg.train.threads = env_threads();
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal distillation with specialized teachers and routing"};
  app.require_subcommand(1);

  std::string config_path, out_path, stage = "all", checkpoint, data_path, split_name = "test";
  std::string seeds_arg, methods_arg = "no_kd,kd_mm,kd_cm,mst", targets_arg, run_dir;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> eval_seed;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset in MSTD-DATA format");
  gen->add_option("--config", config_path, "Run config (JSON)")->required();
  gen->add_option("--out", out_path, "Output file")->required();
  gen->add_option("--seed", seed, "Run seed");

  auto* train = app.add_subcommand("train", "Run training stages into a run directory");
  train->add_option("--config", config_path, "Run config (JSON)")->required();
  train->add_option("--stage", stage, "all|s1|s2|s3")->check(CLI::IsMember({"all", "s1", "s2", "s3"}));
  train->add_option("--seed", seed, "Run seed");
  train->add_option("--out", out_path, "Run directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a saved model checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--data", data_path, "MSTD-DATA file")->required();
  eval->add_option("--split", split_name, "train|val|test")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--seed", eval_seed, "Split seed (default: from run.json)");

  auto* compare = app.add_subcommand("compare", "Multi-seed comparison of methods");
  compare->add_option("--config", config_path, "Run config (JSON)")->required();
  compare->add_option("--seeds", seeds_arg, "Comma-separated seeds (default: report.seeds)");
  compare->add_option("--methods", methods_arg, "Comma-separated subset of no_kd,kd_mm,kd_cm,mst");
  compare->add_option("--targets", targets_arg, "Comma-separated target modalities (default: plan.target)");
  compare->add_option("--out", out_path, "Report directory (default: report.out_dir)");

  auto* route = app.add_subcommand("route-stats", "Per-epoch mean routing probabilities of a run");
  route->add_option("--run-dir", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const mstd::RunConfig cfg = config_from(config_path);
      mstd::save_dataset(out_path, mstd::make_dataset(cfg, seed));
      std::cout << "wrote " << out_path << "\n";
    } else if (train->parsed()) {
      const mstd::RunConfig cfg = config_from(config_path);
      mstd::train_command(cfg, seed, out_path, mstd::parse_stage_select(stage));
      std::cout << "stage " << stage << " done: " << out_path << "\n";
    } else if (eval->parsed()) {
      const auto j = mstd::eval_command(checkpoint, data_path, mstd::parse_split(split_name), eval_seed);
      std::cout << j.dump(2) << "\n";
    } else if (compare->parsed()) {
      const mstd::RunConfig cfg = config_from(config_path);
      std::vector<std::uint64_t> seeds = cfg.report.seeds;
      if (!seeds_arg.empty()) {
        seeds.clear();
        for (const std::string& s : split_list(seeds_arg)) {
          try {
            seeds.push_back(std::stoull(s));
          } catch (const std::exception&) {
            mstd::fail(mstd::ErrorKind::kConfig, "bad seed '" + s + "'");
          }
        }
      }
      std::vector<int> targets;
      for (const std::string& t : split_list(targets_arg)) {
        try {
          targets.push_back(std::stoi(t));
        } catch (const std::exception&) {
          mstd::fail(mstd::ErrorKind::kConfig, "bad target '" + t + "'");
        }
      }
      const auto report = mstd::compare_command(cfg, seeds, split_list(methods_arg), targets);
      const fs::path dir = out_path.empty() ? cfg.report.out_dir : fs::path(out_path);
      fs::create_directories(dir);
      std::ofstream(dir / "report.json") << mstd::report_json(report).dump(2) << "\n";
      std::cout << mstd::report_table(report);
    } else if (route->parsed()) {
      std::cout << mstd::route_table(mstd::route_stats(run_dir));
    }
  } catch (const mstd::Error& e) {
    std::cerr << e.what() << "\n";
    return mstd::exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
