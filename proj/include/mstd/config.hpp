#pragma once

// Run configuration: a versioned JSON document with sections data, models,
// plan, train and report. Unknown keys are rejected.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "mstd/data.hpp"
#include "mstd/pipeline.hpp"

namespace mstd {

inline constexpr int kConfigVersion = 1;

struct DataSettings {
  /// Exactly one of synthetic / external is set.
  std::optional<SyntheticSpec> synthetic;
  /// Synthetic seed given explicitly; otherwise derived from the run seed.
  bool fixed_seed = false;
  std::filesystem::path external;
  std::array<double, 3> split{0.6, 0.2, 0.2};
};

struct ReportSettings {
  std::filesystem::path out_dir = "report";
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

struct RunConfig {
  nlohmann::json document;
  DataSettings data;
  ModelSettings models;
  StagePlan plan;
  TrainSettings train;
  ReportSettings report;
};

RunConfig parse_config(const nlohmann::json& doc);
/// Missing or unreadable files are configuration errors.
RunConfig load_config(const std::filesystem::path& path);

/// Generated or loaded data, split with the run seed.
DatasetBundle make_dataset(const RunConfig& cfg, std::uint64_t seed);

/// Number of teachers the plan builds for `modalities` modalities.
int teacher_count(const RunConfig& cfg, int modalities);

/// Checks target, taps and k against the modality count. Run before any
/// training.
void validate_plan(const RunConfig& cfg, int modalities);

}  // namespace mstd
