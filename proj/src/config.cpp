#include "mstd/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "mstd/error.hpp"
#include "mstd/models.hpp"
#include "mstd/rng.hpp"

namespace mstd {

using nlohmann::json;

namespace {

class Section {
 public:
  Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) fail(ErrorKind::kConfig, where() + " must be an object");
  }

  void allow(std::initializer_list<const char*> keys) const {
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& item : obj_.items()) {
      if (allowed.count(item.key()) == 0) fail(ErrorKind::kConfig, "unknown key '" + key_path(item.key()) + "'");
    }
  }

  bool has(const char* key) const { return obj_.contains(key); }
  const json& raw(const char* key) const { return obj_.at(key); }
  Section sub(const char* key) const { return Section(obj_.at(key), key_path(key)); }
  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  T get(const char* key, T fallback) const {
    if (!obj_.contains(key)) return fallback;
    return as<T>(obj_.at(key), key_path(key));
  }

  template <typename T>
  T need(const char* key) const {
    if (!obj_.contains(key)) fail(ErrorKind::kConfig, "missing key '" + key_path(key) + "'");
    return as<T>(obj_.at(key), key_path(key));
  }

  template <typename T>
  static T as(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(ErrorKind::kConfig, path + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(ErrorKind::kConfig, path + " must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
          fail(ErrorKind::kConfig, path + " must be non-negative");
        }
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(ErrorKind::kConfig, path + " must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(ErrorKind::kConfig, path + " must be a string");
    } else {
      if (!v.is_array()) fail(ErrorKind::kConfig, path + " must be an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(as<typename T::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
    return v.get<T>();
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const json& obj_;
  std::string path_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) fail(ErrorKind::kConfig, msg);
}

DecaySchedule parse_schedule(const Section& s, DecaySchedule fallback) {
  s.allow({"initial", "rule", "period", "factor"});
  const double initial = s.get<double>("initial", fallback.initial);
  const std::string rule = s.get<std::string>("rule", fallback.factor == 0.5 ? "halve_every"
                                                       : fallback.factor == 1.0 ? "constant"
                                                                                : "multiply_every");
  require(initial >= 0.0, s.key_path("initial") + " must be non-negative");
  if (rule == "constant") {
    require(!s.has("period") && !s.has("factor"), s.key_path("rule") + " constant takes no period or factor");
    return DecaySchedule::constant(initial);
  }
  const int period = s.get<int>("period", fallback.period);
  require(period > 0, s.key_path("period") + " must be positive");
  if (rule == "halve_every") {
    require(!s.has("factor"), s.key_path("factor") + " is fixed at 0.5 for halve_every");
    return DecaySchedule::halve_every(period, initial);
  }
  if (rule == "multiply_every") {
    const double factor = s.get<double>("factor", fallback.factor);
    require(factor > 0.0 && factor <= 1.0, s.key_path("factor") + " must lie in (0,1]");
    return DecaySchedule::multiply_every(factor, period, initial);
  }
  fail(ErrorKind::kConfig, "unknown schedule rule '" + rule + "' at " + s.key_path("rule"));
}

void parse_data(const Section& s, DataSettings& out) {
  s.allow({"synthetic", "external", "split"});
  require(s.has("synthetic") != s.has("external"), "data needs exactly one of 'synthetic' or 'external'");
  if (s.has("external")) {
    out.external = s.need<std::string>("external");
  } else {
    const Section syn = s.sub("synthetic");
    syn.allow({"classes", "samples", "dims", "informativeness", "shared_factor", "noise_sigma", "latent_dim",
               "prototype_scale", "shared_jitter", "private_jitter", "seed"});
    SyntheticSpec spec;
    spec.classes = syn.get<int>("classes", spec.classes);
    spec.samples = syn.get<int>("samples", spec.samples);
    spec.dims = syn.get<std::vector<int>>("dims", spec.dims);
    spec.informativeness = syn.get<std::vector<float>>("informativeness", spec.informativeness);
    spec.shared_factor = syn.get<float>("shared_factor", spec.shared_factor);
    spec.noise_sigma = syn.get<float>("noise_sigma", spec.noise_sigma);
    spec.latent_dim = syn.get<int>("latent_dim", spec.latent_dim);
    spec.prototype_scale = syn.get<float>("prototype_scale", spec.prototype_scale);
    spec.shared_jitter = syn.get<float>("shared_jitter", spec.shared_jitter);
    spec.private_jitter = syn.get<float>("private_jitter", spec.private_jitter);
    out.fixed_seed = syn.has("seed");
    spec.seed = syn.get<std::uint64_t>("seed", 0);
    spec.validate();
    out.synthetic = spec;
  }
  if (s.has("split")) {
    const auto r = s.get<std::vector<double>>("split", {});
    require(r.size() == 3, "data.split needs 3 ratios");
    for (double v : r) require(v > 0.0, "data.split ratios must be positive");
    require(std::abs(r[0] + r[1] + r[2] - 1.0) < 1e-9, "data.split ratios must sum to 1");
    out.split = {r[0], r[1], r[2]};
  }
}

void parse_models(const Section& s, ModelSettings& out) {
  s.allow({"hidden", "fusion_hidden", "taps", "masknet", "gatenet"});
  out.hidden = s.get<std::vector<int>>("hidden", out.hidden);
  out.fusion_hidden = s.get<std::vector<int>>("fusion_hidden", out.fusion_hidden);
  require(!out.hidden.empty() && !out.fusion_hidden.empty(), "models need at least one hidden layer");
  for (int h : out.hidden) require(h > 0, "models.hidden widths must be positive");
  for (int h : out.fusion_hidden) require(h > 0, "models.fusion_hidden widths must be positive");
  out.taps = s.get<std::vector<std::vector<int>>>("taps", {});
  if (s.has("masknet")) {
    const Section mn = s.sub("masknet");
    mn.allow({"d_h", "heads"});
    out.d_h = mn.get<int>("d_h", out.d_h);
    out.heads = mn.get<int>("heads", out.heads);
  }
  require(out.d_h > 0 && out.heads > 0, "masknet d_h and heads must be positive");
  require(out.d_h % out.heads == 0, "masknet d_h " + std::to_string(out.d_h) + " not divisible by " +
                                        std::to_string(out.heads) + " heads");
  if (s.has("gatenet")) {
    const Section gn = s.sub("gatenet");
    gn.allow({"hidden_mult"});
    out.gate_hidden_mult = gn.get<int>("hidden_mult", out.gate_hidden_mult);
  }
  require(out.gate_hidden_mult > 0, "gatenet hidden_mult must be positive");
}

void parse_plan(const Section& s, StagePlan& out) {
  s.allow({"stages", "epochs", "target", "k", "tau", "lambda1", "lambda2", "detach_align", "lb_variant",
           "weight_dkd_by_confidence", "tau_squared", "ablation"});
  require(!(s.has("stages") && s.has("ablation")), "plan takes 'stages' or 'ablation', not both");
  if (s.has("stages")) {
    out.s1 = out.s2 = out.s3 = false;
    for (const std::string& st : s.get<std::vector<std::string>>("stages", {})) {
      if (st == "s1") out.s1 = true;
      else if (st == "s2") out.s2 = true;
      else if (st == "s3") out.s3 = true;
      else fail(ErrorKind::kConfig, "unknown stage '" + st + "' in plan.stages");
    }
  }
  if (s.has("ablation")) {
    const std::string a = s.need<std::string>("ablation");
    require(a.size() == 1, "plan.ablation must be one of a..f");
    out = ablation_plan(a[0], out);
  }
  if (s.has("epochs")) {
    const Section e = s.sub("epochs");
    e.allow({"s1", "s2", "s3"});
    out.epochs_s1 = e.get<int>("s1", out.epochs_s1);
    out.epochs_s2 = e.get<int>("s2", out.epochs_s2);
    out.epochs_s3 = e.get<int>("s3", out.epochs_s3);
  }
  require(out.epochs_s1 > 0 && out.epochs_s2 > 0 && out.epochs_s3 > 0, "plan.epochs must be positive");
  out.target = s.get<int>("target", out.target);
  require(out.target >= 1, "plan.target must be a unimodal index >= 1");
  out.k = s.get<int>("k", out.k);
  require(out.k >= 1, "plan.k must be >= 1");
  out.temperature = s.get<float>("tau", out.temperature);
  require(out.temperature > 0.0f, "plan.tau must be positive");
  if (s.has("lambda1")) out.lambda1 = parse_schedule(s.sub("lambda1"), out.lambda1);
  if (s.has("lambda2")) out.lambda2 = parse_schedule(s.sub("lambda2"), out.lambda2);
  out.detach_align = s.get<bool>("detach_align", out.detach_align);
  if (s.has("lb_variant")) out.lb = parse_lb_variant(s.need<std::string>("lb_variant"));
  out.weight_dkd_by_confidence = s.get<bool>("weight_dkd_by_confidence", out.weight_dkd_by_confidence);
  out.tau_squared = s.get<bool>("tau_squared", out.tau_squared);
}

void parse_train(const Section& s, TrainSettings& out) {
  s.allow({"batch_size", "lr", "optimizer"});
  out.batch_size = s.get<int>("batch_size", out.batch_size);
  require(out.batch_size > 0, "train.batch_size must be positive");
  out.optimizer.lr = s.get<float>("lr", out.optimizer.lr);
  require(out.optimizer.lr > 0.0f, "train.lr must be positive");
  if (s.has("optimizer")) out.optimizer.kind = parse_optimizer(s.need<std::string>("optimizer"));
}

void parse_report(const Section& s, ReportSettings& out) {
  s.allow({"out_dir", "seeds"});
  out.out_dir = s.get<std::string>("out_dir", out.out_dir.string());
  out.seeds = s.get<std::vector<std::uint64_t>>("seeds", out.seeds);
  require(!out.seeds.empty(), "report.seeds must not be empty");
}

int depth_of(const RunConfig& cfg, int member) {
  return static_cast<int>(member == 0 ? cfg.models.fusion_hidden.size() : cfg.models.hidden.size());
}

std::vector<int> taps_of(const RunConfig& cfg, int member) {
  if (!cfg.models.taps.empty()) return cfg.models.taps.at(static_cast<std::size_t>(member));
  const int n = depth_of(cfg, member);
  std::vector<int> taps{(n - 1) / 2, n - 1};
  taps.erase(std::unique(taps.begin(), taps.end()), taps.end());
  return taps;
}

}  // namespace

RunConfig parse_config(const json& doc) {
  const Section root(doc, "");
  root.allow({"version", "data", "models", "plan", "train", "report"});
  const int version = root.need<int>("version");
  require(version == kConfigVersion, "unsupported config version " + std::to_string(version));
  RunConfig cfg;
  cfg.document = doc;
  require(root.has("data"), "missing key 'data'");
  parse_data(root.sub("data"), cfg.data);
  if (root.has("models")) parse_models(root.sub("models"), cfg.models);
  if (root.has("plan")) parse_plan(root.sub("plan"), cfg.plan);
  if (root.has("train")) parse_train(root.sub("train"), cfg.train);
  if (root.has("report")) parse_report(root.sub("report"), cfg.report);
  if (cfg.data.synthetic) validate_plan(cfg, static_cast<int>(cfg.data.synthetic->dims.size()));
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kConfig, "cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
  return parse_config(doc);
}

DatasetBundle make_dataset(const RunConfig& cfg, std::uint64_t seed) {
  DatasetBundle bundle;
  if (cfg.data.synthetic) {
    SyntheticSpec spec = *cfg.data.synthetic;
    if (!cfg.data.fixed_seed) spec.seed = stream_seed(seed, "data");
    bundle = generate(spec);
  } else {
    bundle = load_external(cfg.data.external);
  }
  validate_plan(cfg, bundle.modality_count());
  split(bundle, cfg.data.split, seed);
  return bundle;
}

int teacher_count(const RunConfig& cfg, int modalities) {
  if (!cfg.plan.s2) return modalities;
  int n = 0;
  for (int i = 0; i <= modalities; ++i) {
    if (i != cfg.plan.target) n += static_cast<int>(taps_of(cfg, i).size());
  }
  return n;
}

void validate_plan(const RunConfig& cfg, int modalities) {
  const StagePlan& plan = cfg.plan;
  require(plan.target >= 1 && plan.target <= modalities,
          "plan.target " + std::to_string(plan.target) + " outside 1.." + std::to_string(modalities));
  if (!cfg.models.taps.empty()) {
    require(cfg.models.taps.size() == static_cast<std::size_t>(modalities + 1),
            "models.taps needs one list per member (" + std::to_string(modalities + 1) + ")");
  }
  for (int i = 0; i <= modalities; ++i) {
    if (i == plan.target) continue;
    const std::vector<int> taps = taps_of(cfg, i);
    if (plan.s2) require(!taps.empty(), "member " + std::to_string(i) + " has no taps");
    for (int tap : taps) {
      require(tap >= 0 && tap < depth_of(cfg, i), "models.taps: member " + std::to_string(i) + " has no tap " +
                                                      std::to_string(tap) + " (taps 0.." +
                                                      std::to_string(depth_of(cfg, i) - 1) + ")");
    }
  }
  const int n = teacher_count(cfg, modalities);
  require(plan.k <= n, "plan.k=" + std::to_string(plan.k) + " exceeds N=" + std::to_string(n) + " teachers");
  if (plan.s3) require(n >= 2, "routing needs at least 2 teachers, plan builds " + std::to_string(n));
}

}  // namespace mstd
