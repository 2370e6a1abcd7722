#include "mstd/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mstd/bytes.hpp"
#include "mstd/checkpoint.hpp"
#include "mstd/error.hpp"
#include "mstd/rng.hpp"

namespace mstd {

namespace fs = std::filesystem;
using nlohmann::json;

void train_members(PipelineRun& run, const RunConfig& cfg, const RunData& data, std::uint64_t seed, MetricsLog& log) {
  run.members = build_members(data.dims, data.classes, cfg.models, seed);
  const StageContext ctx{data, cfg.plan, cfg.train, seed, log};
  if (cfg.plan.s1) {
    run_stage1(run.members, ctx);
  } else {
    run_pretrain(run.members, ctx);
  }
}

void build_teachers(PipelineRun& run, const RunConfig& cfg, std::uint64_t seed) {
  const auto taps = resolve_taps(run.members, cfg.models);
  run.registry = build_registry(run.members, cfg.plan.target, taps, masknet_config(cfg.models), seed, cfg.plan.s2);
}

void train_masks(PipelineRun& run, const RunConfig& cfg, const RunData& data, std::uint64_t seed, MetricsLog& log) {
  if (!cfg.plan.s2) return;
  const StageContext ctx{data, cfg.plan, cfg.train, seed, log};
  run_stage2(run.registry, run.members.at(static_cast<std::size_t>(cfg.plan.target)), ctx);
}

namespace {

void prepare_student(PipelineRun& run, const RunConfig& cfg, const RunData& data, std::uint64_t seed) {
  const int t = cfg.plan.target;
  if (cfg.plan.s1) {
    run.student = &run.members.at(static_cast<std::size_t>(t));
  } else {
    run.fresh_student = build_member(t, data.dims, data.classes, cfg.models, seed);
    run.student = &*run.fresh_student;
  }
  if (cfg.plan.s3) {
    auto rng = make_stream(seed, "init/gatenet");
    run.gate.emplace(static_cast<std::size_t>(data.classes), run.registry.size(), cfg.models.gate_hidden_mult, rng);
  }
}

}  // namespace

void train_student(PipelineRun& run, const RunConfig& cfg, const RunData& data, std::uint64_t seed, MetricsLog& log) {
  prepare_student(run, cfg, data, seed);
  const StageContext ctx{data, cfg.plan, cfg.train, seed, log};
  run.distill_result = run_stage3(*run.student, run.registry, run.gate ? &*run.gate : nullptr, ctx);
}

std::unique_ptr<PipelineRun> run_pipeline(const RunConfig& cfg, const RunData& data, std::uint64_t seed,
                                          MetricsLog& log) {
  validate_plan(cfg, static_cast<int>(data.dims.size()));
  auto run = std::make_unique<PipelineRun>();
  train_members(*run, cfg, data, seed, log);
  build_teachers(*run, cfg, seed);
  train_masks(*run, cfg, data, seed, log);
  train_student(*run, cfg, data, seed, log);
  return run;
}

int cross_modal_teacher(std::vector<ModalityModel>& members, int target, const RunData& data) {
  int best = -1;
  double best_oa = -1.0;
  for (int i = 1; i < static_cast<int>(members.size()); ++i) {
    if (i == target) continue;
    const double oa = evaluate(members[static_cast<std::size_t>(i)], data.val).overall_accuracy;
    if (oa > best_oa) {
      best = i;
      best_oa = oa;
    }
  }
  if (best < 0) fail(ErrorKind::kConfig, "no cross-modal teacher besides the target");
  return best;
}

StageSelect parse_stage_select(const std::string& name) {
  if (name == "all") return StageSelect::kAll;
  if (name == "s1") return StageSelect::kS1;
  if (name == "s2") return StageSelect::kS2;
  if (name == "s3") return StageSelect::kS3;
  fail(ErrorKind::kUsage, "unknown stage '" + name + "' (all|s1|s2|s3)");
}

namespace {

fs::path members_dir(const fs::path& out, const RunConfig& cfg) { return out / (cfg.plan.s1 ? "s1" : "pretrain"); }

fs::path member_path(const fs::path& out, const RunConfig& cfg, int i) {
  return members_dir(out, cfg) / ("m" + std::to_string(i) + ".ckpt");
}

fs::path masknet_path(const fs::path& out, int j) { return out / "s2" / ("mn" + std::to_string(j) + ".ckpt"); }

void require_file(const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) fail(ErrorKind::kDependency, "expected " + path.string() + " (" + hint + ")");
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json read_json(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
}

void save_members(PipelineRun& run, const RunConfig& cfg, const fs::path& out) {
  for (std::size_t i = 0; i < run.members.size(); ++i) {
    save_checkpoint(member_path(out, cfg, static_cast<int>(i)), run.members[i].parameters());
  }
}

void load_members(PipelineRun& run, const RunConfig& cfg, const RunData& data, const fs::path& out) {
  run.members = build_members(data.dims, data.classes, cfg.models, 0);
  for (std::size_t i = 0; i < run.members.size(); ++i) {
    const fs::path p = member_path(out, cfg, static_cast<int>(i));
    require_file(p, "run --stage s1 first");
    load_checkpoint(p, run.members[i].parameters());
  }
}

void save_registry(const PipelineRun& run, const fs::path& out) {
  json teachers = json::array();
  for (const SpecializedTeacher& t : run.registry.teachers) {
    teachers.push_back({{"id", t.id},
                        {"source_modality", t.source_modality},
                        {"label", t.label()},
                        {"tap", t.tap},
                        {"tap_id", t.base->tap_id(t.tap)},
                        {"masked", t.masknet.has_value()}});
  }
  json doc{{"target", run.registry.target}, {"teachers", teachers}};
  write_text(out / "registry.json", doc.dump(2) + "\n");
}

}  // namespace

void train_command(const RunConfig& cfg, std::uint64_t seed, const fs::path& out, StageSelect select) {
  const bool fresh = select == StageSelect::kAll || select == StageSelect::kS1;
  if (select == StageSelect::kS2 && !cfg.plan.s2) fail(ErrorKind::kConfig, "plan disables stage s2");

  DatasetBundle bundle;
  const fs::path data_path = out / "data.mstd";
  if (fresh) {
    bundle = make_dataset(cfg, seed);
    fs::create_directories(out);
    write_text(out / "run.json", json{{"config", cfg.document}, {"seed", seed}}.dump(2) + "\n");
    save_dataset(data_path, bundle);
  } else {
    require_file(data_path, "run --stage s1 first");
    bundle = load_external(data_path);
    validate_plan(cfg, bundle.modality_count());
    split(bundle, cfg.data.split, seed);
  }
  const RunData data = prepare(bundle);
  MetricsLog log(out / "metrics.jsonl", !fresh);

  PipelineRun run;
  if (fresh) {
    train_members(run, cfg, data, seed, log);
    save_members(run, cfg, out);
    if (select == StageSelect::kS1) return;
  } else {
    load_members(run, cfg, data, out);
  }

  build_teachers(run, cfg, seed);
  save_registry(run, out);
  if (select == StageSelect::kAll || select == StageSelect::kS2) {
    train_masks(run, cfg, data, seed, log);
    for (SpecializedTeacher& t : run.registry.teachers) {
      if (t.masknet) save_checkpoint(masknet_path(out, t.id), t.masknet->parameters());
    }
    if (select == StageSelect::kS2) return;
  } else if (cfg.plan.s2) {
    for (SpecializedTeacher& t : run.registry.teachers) {
      const fs::path p = masknet_path(out, t.id);
      require_file(p, "run --stage s2 first");
      load_checkpoint(p, t.masknet->parameters());
    }
  }

  train_student(run, cfg, data, seed, log);
  save_checkpoint(out / "s3" / "student.ckpt", run.student->parameters());
  if (run.gate) save_checkpoint(out / "s3" / "gatenet.ckpt", run.gate->parameters());
}

json metrics_json(const Metrics& m) {
  json j;
  j["overall_accuracy"] = m.overall_accuracy;
  j["per_class_accuracy"] = m.per_class_accuracy;
  j["loss"] = m.loss;
  j["samples"] = m.samples;
  return j;
}

json eval_command(const fs::path& checkpoint, const fs::path& data, SplitKind which, std::optional<std::uint64_t> seed) {
  ModalityModel model = restore_model(read_checkpoint(checkpoint));
  DatasetBundle bundle = load_external(data);

  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  fs::path dir = fs::absolute(checkpoint).parent_path();
  for (int up = 0; up <= 2; ++up, dir = dir.parent_path()) {
    const fs::path run_json = dir / "run.json";
    if (!fs::exists(run_json)) continue;
    const json doc = read_json(run_json);
    if (!seed) {
      if (!doc.contains("seed") || !doc["seed"].is_number_unsigned()) fail(ErrorKind::kFormat, run_json.string() + " lacks a seed");
      seed = doc["seed"].get<std::uint64_t>();
    }
    if (doc.contains("config")) ratios = parse_config(doc["config"]).data.split;
    break;
  }
  if (!seed) fail(ErrorKind::kUsage, "no --seed given and no run.json near " + checkpoint.string());
  if (model.classes() != static_cast<std::size_t>(bundle.classes)) {
    fail(ErrorKind::kData, "checkpoint has " + std::to_string(model.classes()) + " classes, data has " +
                               std::to_string(bundle.classes));
  }
  split(bundle, ratios, *seed);
  const RunData rd = prepare(bundle);
  json j = metrics_json(evaluate(model, rd.of(which)));
  j["split"] = to_string(which);
  j["modality"] = model.modality_index;
  return j;
}

namespace {

const std::vector<std::string> kMethods{"no_kd", "kd_mm", "kd_cm", "mst"};

}  // namespace

CompareReport compare_command(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                              const std::vector<std::string>& methods, const std::vector<int>& targets_in) {
  if (seeds.size() < 2) fail(ErrorKind::kConfig, "compare needs at least 2 seeds");
  if (methods.empty()) fail(ErrorKind::kConfig, "compare needs at least one method");
  for (const std::string& m : methods) {
    if (std::find(kMethods.begin(), kMethods.end(), m) == kMethods.end()) {
      fail(ErrorKind::kConfig, "unknown method '" + m + "' (no_kd, kd_mm, kd_cm, mst)");
    }
  }
  const std::vector<int> targets = targets_in.empty() ? std::vector<int>{cfg.plan.target} : targets_in;
  std::vector<RunConfig> per_target;
  for (int t : targets) {
    RunConfig c = cfg;
    c.plan.target = t;
    if (c.data.synthetic) validate_plan(c, static_cast<int>(c.data.synthetic->dims.size()));
    per_target.push_back(std::move(c));
  }

  CompareReport report;
  report.seeds = seeds;
  for (int t : targets) {
    for (const std::string& m : methods) report.rows.push_back(CompareRow{m, t, {}, 0.0, 0.0, 0.0});
  }

  for (std::uint64_t seed : seeds) {
    const DatasetBundle bundle = make_dataset(cfg, seed);
    const RunData data = prepare(bundle);
    std::vector<ModalityModel> pretrained;
    std::size_t row = 0;
    for (const RunConfig& c : per_target) {
      validate_plan(c, static_cast<int>(data.dims.size()));
      const int t = c.plan.target;
      for (const std::string& m : methods) {
        MetricsLog log;
        const StageContext ctx{data, c.plan, c.train, seed, log};
        double oa = 0.0;
        if (m == "mst") {
          auto run = run_pipeline(c, data, seed, log);
          oa = evaluate(*run->student, data.test).overall_accuracy;
        } else {
          if (m != "no_kd" && pretrained.empty()) {
            pretrained = build_members(data.dims, data.classes, c.models, seed);
            MetricsLog pre_log;
            run_pretrain(pretrained, StageContext{data, c.plan, c.train, seed, pre_log});
          }
          ModalityModel student = build_member(t, data.dims, data.classes, c.models, seed);
          if (m == "no_kd") {
            run_baseline(BaselineKind::kNoKd, student, nullptr, ctx);
          } else if (m == "kd_mm") {
            run_baseline(BaselineKind::kKdMultimodal, student, &pretrained[0], ctx);
          } else {
            const int cm = cross_modal_teacher(pretrained, t, data);
            run_baseline(BaselineKind::kKdCrossModal, student, &pretrained[static_cast<std::size_t>(cm)], ctx);
          }
          oa = evaluate(student, data.test).overall_accuracy;
        }
        report.rows[row++].per_seed.push_back(oa);
      }
    }
  }

  for (CompareRow& r : report.rows) {
    double sum = 0.0;
    for (double v : r.per_seed) sum += v;
    r.mean = sum / static_cast<double>(r.per_seed.size());
    double var = 0.0;
    for (double v : r.per_seed) var += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(var / static_cast<double>(r.per_seed.size()));
  }
  for (CompareRow& r : report.rows) {
    for (const CompareRow& base : report.rows) {
      if (base.method == "no_kd" && base.target == r.target) r.gain = r.mean - base.mean;
    }
  }
  return report;
}

json report_json(const CompareReport& report) {
  json rows = json::array();
  const bool has_base = std::any_of(report.rows.begin(), report.rows.end(),
                                    [](const CompareRow& r) { return r.method == "no_kd"; });
  for (const CompareRow& r : report.rows) {
    json j{{"method", r.method}, {"target", r.target}, {"per_seed", r.per_seed}, {"mean", r.mean}, {"std", r.std}};
    j["gain_over_no_kd"] = has_base ? json(r.gain) : json(nullptr);
    rows.push_back(j);
  }
  return json{{"metric", "test overall accuracy"}, {"std", "population"}, {"seeds", report.seeds}, {"rows", rows}};
}

std::string report_table(const CompareReport& report) {
  std::ostringstream os;
  const bool has_base = std::any_of(report.rows.begin(), report.rows.end(),
                                    [](const CompareRow& r) { return r.method == "no_kd"; });
  os << "# test OA, mean +- population std over " << report.seeds.size() << " seeds\n";
  os << "target  method  mean     std      gain_vs_no_kd\n";
  char buf[160];
  for (const CompareRow& r : report.rows) {
    std::string gain = "-";
    if (has_base && r.method != "no_kd") {
      std::snprintf(buf, sizeof buf, "%+.2f pts%s", 100.0 * r.gain, r.gain > 0.0 ? " *" : "");
      gain = buf;
    }
    std::snprintf(buf, sizeof buf, "%-7d %-7s %.4f   %.4f   %s\n", r.target, r.method.c_str(), r.mean, r.std,
                  gain.c_str());
    os << buf;
  }
  return os.str();
}

RouteStats route_stats(const fs::path& run_dir) {
  const fs::path reg_path = run_dir / "registry.json";
  const fs::path log_path = run_dir / "metrics.jsonl";
  if (!fs::exists(reg_path)) fail(ErrorKind::kIo, "missing " + reg_path.string());
  if (!fs::exists(log_path)) fail(ErrorKind::kIo, "missing " + log_path.string());

  RouteStats stats;
  const json reg = read_json(reg_path);
  try {
    for (const json& t : reg.at("teachers")) {
      stats.teacher_labels.push_back(std::to_string(t.at("id").get<int>()) + ":" + t.at("label").get<std::string>() +
                                     "@" + t.at("tap_id").get<std::string>());
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, reg_path.string() + ": " + e.what());
  }

  std::ifstream in(log_path);
  std::string text;
  while (std::getline(in, text)) {
    if (text.empty()) continue;
    const LogLine line = parse_log_line(text);
    if (line.stage != "s3" || line.split != "train" || line.routing_mean.empty()) continue;
    if (line.routing_mean.size() != stats.teacher_labels.size()) {
      fail(ErrorKind::kFormat, "routing row of epoch " + std::to_string(line.epoch) + " has " +
                                   std::to_string(line.routing_mean.size()) + " entries for " +
                                   std::to_string(stats.teacher_labels.size()) + " teachers");
    }
    stats.epochs.push_back(line.epoch);
    stats.rows.push_back(line.routing_mean);
  }
  if (stats.rows.empty()) fail(ErrorKind::kData, "no stage-3 routing data in " + log_path.string());
  return stats;
}

std::string route_table(const RouteStats& stats) {
  std::ostringstream os;
  os << "epoch";
  for (const std::string& l : stats.teacher_labels) os << '\t' << l;
  os << '\n';
  char buf[32];
  for (std::size_t r = 0; r < stats.rows.size(); ++r) {
    os << stats.epochs[r];
    for (double v : stats.rows[r]) {
      std::snprintf(buf, sizeof buf, "\t%.6f", v);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace mstd
