#pragma once

// Stage runners for collaborative initialization (S1), MaskNet adaptation
// (S2) and routed distillation (S3), plus the baselines and the independent
// pretraining used when S1 is switched off.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mstd/data.hpp"
#include "mstd/losses.hpp"
#include "mstd/models.hpp"
#include "mstd/optim.hpp"

namespace mstd {

struct StagePlan {
  bool s1 = true;
  bool s2 = true;
  bool s3 = true;
  int epochs_s1 = 50;
  int epochs_s2 = 30;
  int epochs_s3 = 50;
  int target = 1;
  int k = 1;
  float temperature = 2.0f;
  DecaySchedule lambda1 = DecaySchedule::halve_every(30);
  DecaySchedule lambda2 = DecaySchedule::multiply_every(0.9, 10);
  bool detach_align = false;
  LbVariant lb = LbVariant::kKl;
  bool weight_dkd_by_confidence = false;
  bool tau_squared = false;

  DistillOptions distill() const { return {temperature, tau_squared}; }
};

/// Stage toggles of ablation settings 'a'..'f' ('f' = all stages).
StagePlan ablation_plan(char setting, StagePlan base = {});

struct ModelSettings {
  std::vector<int> hidden{64, 32};
  std::vector<int> fusion_hidden{64, 32};
  /// taps[i] for member i; empty means default_taps for every member.
  std::vector<std::vector<int>> taps;
  int d_h = 12;
  int heads = 3;
  int gate_hidden_mult = 4;
};

struct TrainSettings {
  int batch_size = 64;
  OptimizerConfig optimizer;
  int threads = 1;
};

struct Metrics {
  double overall_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  double loss = 0.0;
  int samples = 0;
};

struct LogLine {
  std::string stage;
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double oa = 0.0;
  std::optional<double> lambda1;
  std::optional<double> lambda2;
  std::vector<double> routing_mean;
};

std::string to_json_line(const LogLine& line);
LogLine parse_log_line(const std::string& text);

/// JSON-lines metrics sink. Always keeps lines in memory; mirrors them to a
/// file when opened with a path.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::filesystem::path& path, bool append);

  void write(const LogLine& line);
  const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::ofstream out_;
  std::vector<std::string> lines_;
};

/// Rows of one split, materialised per modality.
struct SplitData {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  int size() const { return static_cast<int>(labels.size()); }
};

struct RunData {
  int classes = 0;
  std::vector<int> dims;
  SplitData train;
  SplitData val;
  SplitData test;

  const SplitData& of(SplitKind s) const;
};

RunData prepare(const DatasetBundle& bundle);

/// Members 0..M: fusion model from stream "init/m0", unimodal i from "init/m<i>".
std::vector<ModalityModel> build_members(const std::vector<int>& dims, int classes,
                                         const ModelSettings& settings, std::uint64_t seed);
ModalityModel build_member(int index, const std::vector<int>& dims, int classes,
                           const ModelSettings& settings, std::uint64_t seed);
std::vector<std::vector<int>> resolve_taps(const std::vector<ModalityModel>& members,
                                           const ModelSettings& settings);
MaskNetConfig masknet_config(const ModelSettings& settings);

/// Logits of `model` on every row of `split`, computed without gradient.
Tensor predict(ModalityModel& model, const SplitData& split);
Metrics score(const Tensor& logits, std::span<const int> labels, int classes);
Metrics evaluate(ModalityModel& model, const SplitData& split);

struct StageContext {
  const RunData& data;
  const StagePlan& plan;
  const TrainSettings& train;
  std::uint64_t seed = 0;
  MetricsLog& log;
};

struct StageResult {
  int best_epoch = -1;
  double best_score = 0.0;
};

/// Joint training of all members under the S1 objective; restores the epoch
/// with the best mean validation accuracy.
StageResult run_stage1(std::vector<ModalityModel>& members, const StageContext& ctx);

/// Each member trained on its own cross-entropy (S1 disabled). Best epoch
/// per member by its validation accuracy.
std::vector<StageResult> run_pretrain(std::vector<ModalityModel>& members, const StageContext& ctx);

/// Trains every MaskNet independently against the frozen student; restores
/// each teacher's best validation loss (the untrained mask included).
std::vector<StageResult> run_stage2(TeacherRegistry& registry, ModalityModel& student, const StageContext& ctx);

/// Distills into the student. With plan.s3, routed top-k distillation with
/// `gate`; otherwise the mean over all teachers and `gate` is unused.
StageResult run_stage3(ModalityModel& student, TeacherRegistry& registry, GateNet* gate, const StageContext& ctx);

enum class BaselineKind { kNoKd, kKdMultimodal, kKdCrossModal };
const char* to_string(BaselineKind kind);

/// no_kd trains with cross-entropy only; the KD variants add
/// lambda1 * KL(teacher || student) with the plan's temperature and schedule.
StageResult run_baseline(BaselineKind kind, ModalityModel& student, ModalityModel* teacher,
                         const StageContext& ctx);

/// Throws a numeric error naming the first parameter holding NaN or Inf.
void check_finite(std::span<Parameter* const> params, const std::string& where);

/// Runs fn(0..n-1) on up to `threads` workers; each index runs exactly once.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace mstd
