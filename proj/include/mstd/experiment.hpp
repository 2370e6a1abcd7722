#pragma once

// Whole-run drivers behind the CLI: staged training into a run directory,
// in-memory method runs for multi-seed comparison, evaluation of saved
// checkpoints and routing statistics.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mstd/config.hpp"
#include "mstd/pipeline.hpp"

namespace mstd {

/// A full MST run held in memory. Teachers point into `members`, so the
/// object is pinned.
struct PipelineRun {
  std::vector<ModalityModel> members;
  TeacherRegistry registry;
  /// Fresh student used when stage 1 is disabled.
  std::optional<ModalityModel> fresh_student;
  std::optional<GateNet> gate;
  ModalityModel* student = nullptr;
  StageResult distill_result;

  PipelineRun() = default;
  PipelineRun(const PipelineRun&) = delete;
  PipelineRun& operator=(const PipelineRun&) = delete;
};

/// Members for the run: stage 1 when enabled, otherwise independent pretraining.
void train_members(PipelineRun& run, const RunConfig& cfg, const RunData& data, std::uint64_t seed, MetricsLog& log);
/// Builds the registry (MaskNets only when stage 2 is enabled) over trained members.
void build_teachers(PipelineRun& run, const RunConfig& cfg, std::uint64_t seed);
void train_masks(PipelineRun& run, const RunConfig& cfg, const RunData& data, std::uint64_t seed, MetricsLog& log);
void train_student(PipelineRun& run, const RunConfig& cfg, const RunData& data, std::uint64_t seed, MetricsLog& log);

std::unique_ptr<PipelineRun> run_pipeline(const RunConfig& cfg, const RunData& data, std::uint64_t seed, MetricsLog& log);

/// Cross-modal KD teacher: the non-target unimodal member with the best
/// validation accuracy, lowest index on ties.
int cross_modal_teacher(std::vector<ModalityModel>& members, int target, const RunData& data);

enum class StageSelect { kAll, kS1, kS2, kS3 };
StageSelect parse_stage_select(const std::string& name);

/// Runs the selected stages, reading prerequisites from and writing
/// artifacts to `out`. Missing prerequisites are dependency errors naming
/// the expected path.
void train_command(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out, StageSelect select);

nlohmann::json metrics_json(const Metrics& m);

/// Evaluates a saved model checkpoint. Without a seed, the run.json found in
/// the checkpoint's directory or up to two levels above supplies it.
nlohmann::json eval_command(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                            SplitKind split, std::optional<std::uint64_t> seed);

struct CompareRow {
  std::string method;
  int target = 0;
  std::vector<double> per_seed;
  double mean = 0.0;
  double std = 0.0;
  double gain = 0.0;
};

struct CompareReport {
  std::vector<std::uint64_t> seeds;
  std::vector<CompareRow> rows;
};

/// Methods: no_kd, kd_mm, kd_cm, mst. Every method of a (seed, target) cell
/// shares data, split and shuffle streams.
CompareReport compare_command(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                              const std::vector<std::string>& methods, const std::vector<int>& targets);
nlohmann::json report_json(const CompareReport& report);
std::string report_table(const CompareReport& report);

struct RouteStats {
  std::vector<std::string> teacher_labels;
  std::vector<int> epochs;
  std::vector<std::vector<double>> rows;
};

RouteStats route_stats(const std::filesystem::path& run_dir);
std::string route_table(const RouteStats& stats);

}  // namespace mstd
