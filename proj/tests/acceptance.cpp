// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mstd/bytes.hpp"
#include "mstd/checkpoint.hpp"
#include "mstd/config.hpp"
#include "mstd/error.hpp"
#include "mstd/experiment.hpp"
#include "mstd/losses.hpp"
#include "mstd/models.hpp"
#include "mstd/rng.hpp"
#include "oracles.hpp"

using namespace mstd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

const fs::path kConfigs = fs::path(MSTD_SOURCE_DIR) / "configs";

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

float scalar(Graph& g, Var v) { return g.value(v).data.at(0); }

Tensor row(std::vector<float> v) {
  const std::size_t n = v.size();
  return Tensor({1, n}, std::move(v));
}

using Bytes = std::vector<std::uint8_t>;

Bytes bytes_of(std::span<Parameter* const> params) { return encode_checkpoint(params); }

Outcome gradients() {
  const auto t0 = Clock::now();
  const auto results = oracle::gradient_suite(10, 20240601);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_layer;
  bool all = true;
  for (const auto& r : results) {
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_layer = r.layer;
    }
    all = all && r.instances == 10 && r.max_rel_error < 1e-4;
  }
  const std::set<std::string> layers = [&] {
    std::set<std::string> s;
    for (const auto& r : results) s.insert(r.layer);
    return s;
  }();
  all = all && layers.size() == 7;
  return {all && secs < 30.0, std::to_string(layers.size()) + " layer types x 10, max rel error " +
                                  fmt("%.2e", worst) + " (" + worst_layer + "), " + fmt("%.1f s", secs)};
}

Outcome loss_math() {
  std::vector<std::string> bad;
  {
    std::mt19937_64 rng(2);
    std::normal_distribution<float> d(0.0f, 3.0f);
    Tensor logits({8, 7});
    for (float& v : logits.data) v = d(rng);
    Graph g;
    SoftDist p = soften(g.input(logits), 2.0f);
    if (!(std::fabs(scalar(g, kl_divergence(p, p))) <= 1e-9)) bad.push_back("KL(p,p)");
  }
  {
    Graph g;
    Var ce = cross_entropy(g.input(Tensor({5, 10}, -1.5f)), std::vector<int>{0, 9, 4, 4, 2});
    if (!(std::fabs(scalar(g, ce) - std::log(10.0)) <= 1e-6)) bad.push_back("CE uniform");
  }
  for (int n = 2; n <= 8; ++n) {
    Graph g0;
    const float base = scalar(g0, lb_loss(g0.input(row(std::vector<float>(static_cast<std::size_t>(n), 1.0f / static_cast<float>(n)))), LbVariant::kKl));
    if (!(std::fabs(base) <= 1e-9)) bad.push_back("lb uniform n=" + std::to_string(n));
    for (int from = 0; from < n; ++from) {
      for (int to = 0; to < n; ++to) {
        if (from == to) continue;
        for (double step : {0.01, -0.01}) {
          std::vector<double> c(static_cast<std::size_t>(n), 1.0 / n);
          c[static_cast<std::size_t>(from)] -= step;
          c[static_cast<std::size_t>(to)] += step;
          Graph g;
          const float v = scalar(g, lb_loss(g.input(row(std::vector<float>(c.begin(), c.end()))), LbVariant::kKl));
          if (!(v > base)) bad.push_back("lb increase n=" + std::to_string(n));
        }
      }
    }
  }
  {
    Graph g;
    const float cv = scalar(g, lb_loss(g.input(row({0.5f, 0.5f, 0.0f, 0.0f})), LbVariant::kCv));
    if (!(std::fabs(cv - 1.0) <= 1e-6)) bad.push_back("cv");
  }
  std::string detail = "KL self, CE ln10, lb uniform and +-0.01 perturbations (n=2..8), cv";
  if (!bad.empty()) detail = "failed: " + bad.front() + " (" + std::to_string(bad.size()) + " checks)";
  return {bad.empty(), detail};
}

Outcome schedules() {
  const RunConfig cfg = load_config(kConfigs / "reference.json");
  const int e1[] = {0, 29, 30, 59, 60};
  const float v1[] = {1.0f, 1.0f, 0.5f, 0.5f, 0.25f};
  const int e2[] = {0, 9, 10, 20};
  const float v2[] = {1.0f, 1.0f, 0.9f, static_cast<float>(0.9 * 0.9)};
  std::ostringstream got;
  bool ok = true;
  got << "l1";
  for (int i = 0; i < 5; ++i) {
    const float v = cfg.plan.lambda1.value_at(e1[i]);
    ok = ok && v == v1[i];
    got << ' ' << v;
  }
  got << "; l2";
  for (int i = 0; i < 4; ++i) {
    const float v = cfg.plan.lambda2.value_at(e2[i]);
    ok = ok && v == v2[i];
    got << ' ' << v;
  }
  return {ok, got.str()};
}

Outcome routing_oracles() {
  std::mt19937_64 rng(4);
  int configs = 0, checks = 0, mismatches = 0;
  for (int rep = 0; rep < 100; ++rep, ++configs) {
    const int m = 2 + rep % 2;
    std::uniform_int_distribution<int> taps(1, 4), tgt(1, m), level(0, 3);
    const int target = tgt(rng);
    std::vector<int> counts(static_cast<std::size_t>(m + 1));
    for (int i = 0; i <= m; ++i) counts[static_cast<std::size_t>(i)] = i == target ? 0 : taps(rng);
    int n = 0;
    for (int c : counts) n += c;
    for (int j = 1; j <= n; ++j, ++checks) mismatches += delta(j, counts, target) != oracle::delta_bruteforce(j, counts, target);
    // confidences on a coarse grid so ties occur
    std::vector<float> conf(static_cast<std::size_t>(n));
    for (float& v : conf) v = 0.25f * static_cast<float>(level(rng));
    for (int k = 1; k <= n; ++k, ++checks) mismatches += topk_select(conf, k) != oracle::topk_sort(conf, k);
  }
  return {mismatches == 0, std::to_string(configs) + " registries, " + std::to_string(checks) + " checks, " +
                               std::to_string(mismatches) + " mismatches"};
}

std::vector<Bytes> member_bytes(std::vector<ModalityModel>& members) {
  std::vector<Bytes> out;
  for (auto& m : members) out.push_back(bytes_of(m.parameters()));
  return out;
}

std::vector<Bytes> mask_bytes(TeacherRegistry& reg) {
  std::vector<Bytes> out;
  for (auto& t : reg.teachers) out.push_back(bytes_of(t.masknet->parameters()));
  return out;
}

Outcome stage_isolation() {
  const RunConfig cfg = load_config(kConfigs / "tiny.json");
  const std::uint64_t seed = 1;
  const RunData data = prepare(make_dataset(cfg, seed));
  const auto t = static_cast<std::size_t>(cfg.plan.target);
  MetricsLog log;
  PipelineRun run;
  std::vector<std::string> bad;

  auto fresh = build_members(data.dims, data.classes, cfg.models, seed);
  const auto init = member_bytes(fresh);
  train_members(run, cfg, data, seed, log);
  const auto after_s1 = member_bytes(run.members);
  for (std::size_t i = 0; i < init.size(); ++i) {
    if (after_s1[i] == init[i]) bad.push_back("S1 left m" + std::to_string(i) + " unchanged");
  }

  build_teachers(run, cfg, seed);
  const auto masks_init = mask_bytes(run.registry);
  train_masks(run, cfg, data, seed, log);
  const auto after_s2 = member_bytes(run.members);
  const auto masks_s2 = mask_bytes(run.registry);
  if (after_s2 != after_s1) bad.push_back("S2 changed a member");
  int masks_changed = 0;
  for (std::size_t j = 0; j < masks_s2.size(); ++j) masks_changed += masks_s2[j] != masks_init[j];
  // a mask whose best validation loss is the untrained one is restored as is
  if (masks_changed == 0) bad.push_back("S2 changed no MaskNet");

  train_student(run, cfg, data, seed, log);
  const auto after_s3 = member_bytes(run.members);
  for (std::size_t i = 0; i < after_s3.size(); ++i) {
    const bool changed = after_s3[i] != after_s2[i];
    if (changed != (i == t)) bad.push_back("S3 member m" + std::to_string(i) + (changed ? " changed" : " unchanged"));
  }
  if (mask_bytes(run.registry) != masks_s2) bad.push_back("S3 changed a MaskNet");
  auto rng = make_stream(seed, "init/gatenet");
  GateNet gate0(static_cast<std::size_t>(data.classes), run.registry.size(), cfg.models.gate_hidden_mult, rng);
  if (!run.gate || bytes_of(run.gate->parameters()) == bytes_of(gate0.parameters())) bad.push_back("S3 left GateNet unchanged");

  std::string detail = "S1 changed " + std::to_string(init.size()) + "/" + std::to_string(init.size()) +
                       " members; S2 changed " + std::to_string(masks_changed) + "/" +
                       std::to_string(masks_s2.size()) + " MaskNets and nothing else; S3 changed student m" +
                       std::to_string(t) + " and GateNet only";
  if (!bad.empty()) detail = bad.front() + " (" + std::to_string(bad.size()) + " violations)";
  return {bad.empty(), detail};
}

Outcome masknet_half() {
  std::mt19937_64 rng(6);
  MaskNet net("mn", MaskNetConfig{16, 12, 3}, rng);
  net.zero_output_layer();
  std::size_t checked = 0, off = 0;
  for (float scale : {1e-6f, 1e-2f, 1.0f, 100.0f, 1e4f}) {
    Tensor z({32, 16});
    std::normal_distribution<float> d(0.0f, scale);
    for (float& v : z.data) v = d(rng);
    z.data[0] = 0.0f;
    z.data[1] = -0.0f;
    z.data[2] = std::numeric_limits<float>::denorm_min();
    z.data[3] = -std::numeric_limits<float>::min();
    Graph g;
    const Tensor out = g.value(net.forward(g, g.constant(z)));
    for (std::size_t i = 0; i < z.numel(); ++i, ++checked) {
      const float want = 0.5f * z.data[i];
      off += std::memcmp(&out.data[i], &want, sizeof want) != 0;
    }
  }
  return {off == 0, std::to_string(checked) + " entries over scales 1e-6..1e4, " + std::to_string(off) + " not bit-exact"};
}

double kl_from_uniform(const std::vector<double>& c) {
  return oracle::kl(oracle::Vec(c.size(), 1.0 / static_cast<double>(c.size())), c);
}

Outcome routing_pressure() {
  const auto t0 = Clock::now();
  auto doc = load_config(kConfigs / "reference.json").document;
  doc["plan"]["lambda1"] = {{"rule", "constant"}, {"initial", 0.0}};
  doc["plan"]["lambda2"] = {{"rule", "constant"}, {"initial", 1.0}};
  const RunConfig cfg = parse_config(doc);
  const std::uint64_t seed = 1;
  const RunData data = prepare(make_dataset(cfg, seed));
  MetricsLog log;
  run_pipeline(cfg, data, seed, log);
  std::vector<std::vector<double>> routing;
  for (const auto& text : log.lines()) {
    const LogLine l = parse_log_line(text);
    if (l.stage == "s3" && l.split == "train") routing.push_back(l.routing_mean);
  }
  const double secs = seconds_since(t0);
  if (routing.size() != static_cast<std::size_t>(cfg.plan.epochs_s3)) return {false, "missing routing lines"};
  const double first = kl_from_uniform(routing.front()), last = kl_from_uniform(routing.back());
  return {last < first && secs < 120.0,
          "KL(U||mean C) epoch 0 " + fmt("%.4g", first) + " -> final " + fmt("%.4g", last) + ", " + fmt("%.1f s", secs)};
}

Outcome distillation_gain() {
  const auto t0 = Clock::now();
  const RunConfig cfg = load_config(kConfigs / "reference.json");
  const auto report = compare_command(cfg, cfg.report.seeds, {"no_kd", "kd_mm", "kd_cm", "mst"}, {});
  const double secs = seconds_since(t0);
  auto mean_of = [&](const std::string& m) {
    for (const auto& r : report.rows) {
      if (r.method == m) return r.mean;
    }
    return std::nan("");
  };
  const double no_kd = mean_of("no_kd"), kd_mm = mean_of("kd_mm"), kd_cm = mean_of("kd_cm"), mst = mean_of("mst");
  const bool gain = mst - no_kd >= 0.02;
  const bool vs_kd = mst >= std::max(kd_mm, kd_cm) - 0.01;
  std::string detail = "mean test OA over " + std::to_string(report.seeds.size()) + " seeds: no_kd " +
                       fmt("%.4f", no_kd) + ", kd_mm " + fmt("%.4f", kd_mm) + ", kd_cm " + fmt("%.4f", kd_cm) +
                       ", mst " + fmt("%.4f", mst) + "; gain " + fmt("%+.4f", mst - no_kd) + " (need >= 0.02: " +
                       (gain ? "met" : "not met") + "), vs best KD " + fmt("%+.4f", mst - std::max(kd_mm, kd_cm)) +
                       " (need >= -0.01: " + (vs_kd ? "met" : "not met") + "), " + fmt("%.0f s", secs);
  return {gain && vs_kd && secs < 900.0, detail};
}

std::string joined(const MetricsLog& log) {
  std::string s;
  for (const auto& l : log.lines()) s += l + "\n";
  return s;
}

Outcome ablation() {
  const auto tiny = load_config(kConfigs / "tiny.json").document;
  const std::uint64_t seed = 2;
  std::vector<std::string> logs;
  std::vector<std::string> bad;
  for (char a = 'a'; a <= 'f'; ++a) {
    auto doc = tiny;
    doc["plan"]["ablation"] = std::string(1, a);
    const RunConfig cfg = parse_config(doc);
    const RunData data = prepare(make_dataset(cfg, seed));
    MetricsLog log;
    run_pipeline(cfg, data, seed, log);
    logs.push_back(joined(log));
  }
  const std::set<std::string> distinct(logs.begin(), logs.end());
  if (distinct.size() != 6) bad.push_back("only " + std::to_string(distinct.size()) + " distinct logs");

  // lambda1 = lambda2 = 0 with fresh students against no_kd
  int identical = 0;
  for (char a : {'b', 'd'}) {
    auto doc = tiny;
    doc["plan"]["ablation"] = std::string(1, a);
    doc["plan"]["lambda1"] = {{"rule", "constant"}, {"initial", 0.0}};
    doc["plan"]["lambda2"] = {{"rule", "constant"}, {"initial", 0.0}};
    const RunConfig cfg = parse_config(doc);
    const RunData data = prepare(make_dataset(cfg, seed));
    MetricsLog log, base_log;
    auto run = run_pipeline(cfg, data, seed, log);
    ModalityModel base = build_member(cfg.plan.target, data.dims, data.classes, cfg.models, seed);
    run_baseline(BaselineKind::kNoKd, base, nullptr, StageContext{data, cfg.plan, cfg.train, seed, base_log});
    std::vector<std::pair<double, double>> ours, theirs;
    for (const auto& l : log.lines()) {
      const LogLine p = parse_log_line(l);
      if (p.stage == "s3") ours.emplace_back(p.loss, p.oa);
    }
    for (const auto& l : base_log.lines()) {
      const LogLine p = parse_log_line(l);
      theirs.emplace_back(p.loss, p.oa);
    }
    const bool same_bytes = bytes_of(run->student->parameters()) == bytes_of(base.parameters());
    const auto te = evaluate(*run->student, data.test), tb = evaluate(base, data.test);
    const bool same_metrics = ours == theirs && te.overall_accuracy == tb.overall_accuracy && te.loss == tb.loss;
    if (same_bytes && same_metrics) {
      ++identical;
    } else {
      bad.push_back(std::string("setting ") + a + " with zero lambdas differs from no_kd");
    }
  }
  std::string detail = std::to_string(distinct.size()) + "/6 distinct logs for a..f; zero-lambda (b, d) bit-identical to no_kd: " +
                       std::to_string(identical) + "/2";
  return {bad.empty(), bad.empty() ? detail : detail + "; " + bad.front()};
}

Outcome determinism() {
  const RunConfig cfg = load_config(kConfigs / "tiny.json");
  const fs::path root = fs::temp_directory_path() / "mstd_acceptance_det";
  fs::remove_all(root);
  std::vector<std::string> bad;
  train_command(cfg, 5, root / "a", StageSelect::kAll);
  train_command(cfg, 5, root / "b", StageSelect::kAll);
  const Bytes la = read_file(root / "a" / "metrics.jsonl"), lb = read_file(root / "b" / "metrics.jsonl");
  if (la != lb || la.empty()) bad.push_back("metrics logs differ");
  if (read_file(root / "a" / "s3" / "student.ckpt") != read_file(root / "b" / "s3" / "student.ckpt")) {
    bad.push_back("student checkpoints differ");
  }

  // logged test metrics came from the in-memory student
  std::optional<LogLine> logged;
  {
    std::istringstream in(std::string(la.begin(), la.end()));
    std::string line;
    while (std::getline(in, line)) {
      const LogLine l = parse_log_line(line);
      if (l.stage == "s3" && l.split == "test") logged = l;
    }
  }
  const auto j = eval_command(root / "a" / "s3" / "student.ckpt", root / "a" / "data.mstd", SplitKind::kTest, std::nullopt);
  if (!logged || j["overall_accuracy"].get<double>() != logged->oa || j["loss"].get<double>() != logged->loss) {
    bad.push_back("reloaded checkpoint evaluates differently");
  }

  const DatasetBundle gen = generate(*load_config(kConfigs / "reference.json").data.synthetic);
  save_dataset(root / "ref.mstd", gen);
  const DatasetBundle back = load_external(root / "ref.mstd");
  bool same = back.labels == gen.labels && back.classes == gen.classes && back.modalities.size() == gen.modalities.size();
  for (std::size_t m = 0; same && m < gen.modalities.size(); ++m) {
    same = back.modalities[m].shape == gen.modalities[m].shape &&
           std::memcmp(back.modalities[m].data.data(), gen.modalities[m].data.data(), gen.modalities[m].numel() * 4) == 0;
  }
  if (!same) bad.push_back("MSTD-DATA round trip differs");
  fs::remove_all(root);
  std::string detail = "two runs: " + std::to_string(la.size()) + "-byte logs identical; reload eval OA " +
                       fmt("%.4f", logged ? logged->oa : -1.0) + " matches; MSTD-DATA round trip bit-identical";
  return {bad.empty(), bad.empty() ? detail : bad.front()};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "gradient correctness", gradients},
      {2, "loss math", loss_math},
      {3, "schedule exactness", schedules},
      {4, "delta and topk oracles", routing_oracles},
      {5, "stage isolation", stage_isolation},
      {6, "MaskNet zeroed output", masknet_half},
      {7, "routing pressure", routing_pressure},
      {8, "synthetic distillation gain", distillation_gain},
      {9, "ablation expressibility", ablation},
      {10, "determinism and round trip", determinism},
  };
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const Criterion& c : all) {
    if (!pick.empty() && pick.count(c.id) == 0) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s: %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
