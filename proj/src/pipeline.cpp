#include "mstd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <thread>

#include <json.hpp>

#include "mstd/checkpoint.hpp"
#include "mstd/error.hpp"
#include "mstd/rng.hpp"

namespace mstd {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kEvalChunk = 256;

std::vector<std::vector<int>> epoch_orders(int n, int epochs, std::uint64_t seed, const std::string& stream) {
  auto rng = make_stream(seed, stream);
  std::vector<std::vector<int>> orders;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    orders.push_back(order);
  }
  return orders;
}

template <typename Fn>
void for_each_batch(const std::vector<int>& order, int batch_size, Fn&& fn) {
  if (batch_size <= 0) fail(ErrorKind::kConfig, "batch size must be positive");
  const std::size_t b = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < order.size(); start += b) {
    const std::size_t end = std::min(order.size(), start + b);
    fn(std::span<const int>(order.data() + start, end - start));
  }
}

std::vector<Var> batch_inputs(Graph& g, const SplitData& split, std::span<const int> idx) {
  std::vector<Var> inputs;
  inputs.reserve(split.inputs.size());
  for (const Tensor& t : split.inputs) inputs.push_back(g.constant(gather_rows(t, idx)));
  return inputs;
}

std::vector<int> chunk_range(int start, int end) {
  std::vector<int> idx(static_cast<std::size_t>(end - start));
  std::iota(idx.begin(), idx.end(), start);
  return idx;
}

int argmax_row(const Tensor& t, std::size_t r) {
  const std::size_t n = t.cols();
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c) {
    if (t.data[r * n + c] > t.data[r * n + best]) best = c;
  }
  return static_cast<int>(best);
}

int count_correct(const Tensor& logits, std::span<const int> labels) {
  int correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) correct += argmax_row(logits, r) == labels[r] ? 1 : 0;
  return correct;
}

/// Runs `fn` over the split in fixed chunks and stacks the [rows, width] outputs.
Tensor stack_chunks(int rows, const std::function<Tensor(std::span<const int>)>& fn) {
  if (rows <= 0) fail(ErrorKind::kConfig, "evaluation split is empty");
  Tensor out;
  for (int start = 0; start < rows; start += kEvalChunk) {
    const std::vector<int> idx = chunk_range(start, std::min(rows, start + kEvalChunk));
    Tensor part = fn(idx);
    if (out.shape.empty()) out = Tensor({static_cast<std::size_t>(rows), part.cols()});
    std::copy(part.data.begin(), part.data.end(),
              out.data.begin() + static_cast<long>(static_cast<std::size_t>(start) * part.cols()));
  }
  return out;
}

Tensor softened(const Tensor& logits, float temperature) {
  Graph g;
  return ops::softmax(g.constant(logits), temperature).value();
}

Tensor tap_features(ModalityModel& model, int tap, const SplitData& split) {
  return stack_chunks(split.size(), [&](std::span<const int> idx) {
    Graph g;
    std::vector<Var> inputs = batch_inputs(g, split, idx);
    return model.forward_until(g, inputs, tap).value();
  });
}

Tensor teacher_logits(SpecializedTeacher& teacher, const SplitData& split) {
  return stack_chunks(split.size(), [&](std::span<const int> idx) {
    Graph g;
    std::vector<Var> inputs = batch_inputs(g, split, idx);
    return teacher.forward(g, inputs).value();
  });
}

void guard_loss(float loss, std::span<Parameter* const> params, const std::string& where) {
  if (std::isfinite(loss)) return;
  check_finite(params, where);
  fail(ErrorKind::kNumeric, where + ": loss is " + std::to_string(loss));
}

std::string epoch_where(const std::string& stage, int epoch) {
  return stage + " epoch " + std::to_string(epoch);
}

std::vector<Parameter*> all_parameters(std::vector<ModalityModel>& members) {
  std::vector<Parameter*> params;
  for (ModalityModel& m : members) {
    for (Parameter* p : m.parameters()) params.push_back(p);
  }
  return params;
}

struct EpochStats {
  double loss = 0.0;
  double oa = 0.0;
};

}  // namespace

StagePlan ablation_plan(char setting, StagePlan base) {
  switch (setting) {
    case 'a': base.s1 = false; base.s2 = false; base.s3 = false; break;
    case 'b': base.s1 = false; base.s2 = false; base.s3 = true; break;
    case 'c': base.s1 = true; base.s2 = false; base.s3 = true; break;
    case 'd': base.s1 = false; base.s2 = true; base.s3 = true; break;
    case 'e': base.s1 = true; base.s2 = true; base.s3 = false; break;
    case 'f': base.s1 = true; base.s2 = true; base.s3 = true; break;
    default: fail(ErrorKind::kConfig, std::string("unknown ablation setting '") + setting + "'");
  }
  return base;
}

std::string to_json_line(const LogLine& line) {
  ordered_json j;
  j["stage"] = line.stage;
  j["epoch"] = line.epoch;
  j["split"] = line.split;
  j["loss"] = line.loss;
  j["oa"] = line.oa;
  j["lambda1"] = line.lambda1 ? ordered_json(*line.lambda1) : ordered_json(nullptr);
  j["lambda2"] = line.lambda2 ? ordered_json(*line.lambda2) : ordered_json(nullptr);
  if (!line.routing_mean.empty()) j["routing_mean"] = line.routing_mean;
  return j.dump();
}

LogLine parse_log_line(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("bad metrics line: ") + e.what());
  }
  LogLine line;
  try {
    line.stage = j.at("stage").get<std::string>();
    line.epoch = j.at("epoch").get<int>();
    line.split = j.at("split").get<std::string>();
    line.loss = j.at("loss").get<double>();
    line.oa = j.at("oa").get<double>();
    if (j.contains("lambda1") && !j["lambda1"].is_null()) line.lambda1 = j["lambda1"].get<double>();
    if (j.contains("lambda2") && !j["lambda2"].is_null()) line.lambda2 = j["lambda2"].get<double>();
    if (j.contains("routing_mean")) line.routing_mean = j["routing_mean"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("bad metrics line: ") + e.what());
  }
  return line;
}

MetricsLog::MetricsLog(const std::filesystem::path& path, bool append) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) fail(ErrorKind::kIo, "cannot open metrics log " + path.string());
}

void MetricsLog::write(const LogLine& line) {
  lines_.push_back(to_json_line(line));
  if (out_.is_open()) {
    out_ << lines_.back() << '\n';
    out_.flush();
    if (!out_) fail(ErrorKind::kIo, "write to metrics log failed");
  }
}

const SplitData& RunData::of(SplitKind s) const {
  switch (s) {
    case SplitKind::kTrain: return train;
    case SplitKind::kVal: return val;
    case SplitKind::kTest: return test;
  }
  return train;
}

RunData prepare(const DatasetBundle& bundle) {
  RunData rd;
  rd.classes = bundle.classes;
  rd.dims = bundle.dims();
  for (SplitKind s : {SplitKind::kTrain, SplitKind::kVal, SplitKind::kTest}) {
    const std::vector<int>& idx = bundle.split.of(s);
    if (idx.empty()) fail(ErrorKind::kConfig, std::string("split '") + to_string(s) + "' is empty");
    SplitData& sd = s == SplitKind::kTrain ? rd.train : s == SplitKind::kVal ? rd.val : rd.test;
    for (const Tensor& t : bundle.modalities) sd.inputs.push_back(gather_rows(t, idx));
    sd.labels = gather_labels(bundle.labels, idx);
  }
  return rd;
}

ModalityModel build_member(int index, const std::vector<int>& dims, int classes, const ModelSettings& settings,
                           std::uint64_t seed) {
  if (index < 0 || index > static_cast<int>(dims.size())) {
    fail(ErrorKind::kConfig, "no modality " + std::to_string(index));
  }
  auto rng = make_stream(seed, "init/m" + std::to_string(index));
  const auto c = static_cast<std::size_t>(classes);
  if (index == 0) return build_fusion_model(dims, settings.hidden, settings.fusion_hidden, c, rng);
  return build_unimodal(index, static_cast<std::size_t>(dims[static_cast<std::size_t>(index - 1)]),
                        settings.hidden, c, rng);
}

std::vector<ModalityModel> build_members(const std::vector<int>& dims, int classes, const ModelSettings& settings,
                                         std::uint64_t seed) {
  std::vector<ModalityModel> members;
  members.reserve(dims.size() + 1);
  for (int i = 0; i <= static_cast<int>(dims.size()); ++i) members.push_back(build_member(i, dims, classes, settings, seed));
  return members;
}

std::vector<std::vector<int>> resolve_taps(const std::vector<ModalityModel>& members, const ModelSettings& settings) {
  std::vector<std::vector<int>> taps;
  if (settings.taps.empty()) {
    for (const ModalityModel& m : members) taps.push_back(default_taps(m));
    return taps;
  }
  if (settings.taps.size() != members.size()) {
    fail(ErrorKind::kConfig, "taps lists " + std::to_string(settings.taps.size()) + " members, models have " +
                                 std::to_string(members.size()));
  }
  for (std::size_t i = 0; i < members.size(); ++i) {
    for (int tap : settings.taps[i]) (void)members[i].tap_dim(tap);
  }
  return settings.taps;
}

MaskNetConfig masknet_config(const ModelSettings& settings) { return MaskNetConfig{0, settings.d_h, settings.heads}; }

Tensor predict(ModalityModel& model, const SplitData& split) {
  return stack_chunks(split.size(), [&](std::span<const int> idx) {
    Graph g;
    std::vector<Var> inputs = batch_inputs(g, split, idx);
    return model.forward(g, inputs).value();
  });
}

Metrics score(const Tensor& logits, std::span<const int> labels, int classes) {
  if (labels.empty()) fail(ErrorKind::kConfig, "evaluation split is empty");
  const std::size_t n = logits.cols();
  Metrics m;
  m.samples = static_cast<int>(labels.size());
  std::vector<int> hits(static_cast<std::size_t>(classes), 0), totals(static_cast<std::size_t>(classes), 0);
  double loss = 0.0;
  int correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const float* row = logits.data.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    const int y = labels[r];
    loss += -(static_cast<double>(row[y]) - mx - std::log(z));
    const bool hit = argmax_row(logits, r) == y;
    correct += hit ? 1 : 0;
    hits[static_cast<std::size_t>(y)] += hit ? 1 : 0;
    totals[static_cast<std::size_t>(y)] += 1;
  }
  m.loss = loss / static_cast<double>(labels.size());
  m.overall_accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  for (std::size_t c = 0; c < hits.size(); ++c) {
    m.per_class_accuracy.push_back(totals[c] == 0 ? 0.0 : static_cast<double>(hits[c]) / totals[c]);
  }
  return m;
}

Metrics evaluate(ModalityModel& model, const SplitData& split) {
  if (split.size() == 0) fail(ErrorKind::kConfig, "evaluation split is empty");
  return score(predict(model, split), split.labels, static_cast<int>(model.classes()));
}

void check_finite(std::span<Parameter* const> params, const std::string& where) {
  for (const Parameter* p : params) {
    if (!p->value.all_finite()) fail(ErrorKind::kNumeric, where + ": parameter " + p->name + " is not finite");
  }
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

StageResult run_stage1(std::vector<ModalityModel>& members, const StageContext& ctx) {
  const StagePlan& plan = ctx.plan;
  const SplitData& train = ctx.data.train;
  for (ModalityModel& m : members) m.set_frozen(false);
  std::vector<Parameter*> params = all_parameters(members);
  Optimizer opt(params, ctx.train.optimizer);
  const auto orders = epoch_orders(train.size(), plan.epochs_s1, ctx.seed, "shuffle/s1");
  const double count = static_cast<double>(members.size());

  StageResult best;
  std::vector<Tensor> best_values = snapshot(params);
  for (int epoch = 0; epoch < plan.epochs_s1; ++epoch) {
    const std::string where = epoch_where("s1", epoch);
    double loss_sum = 0.0, correct = 0.0;
    for_each_batch(orders[static_cast<std::size_t>(epoch)], ctx.train.batch_size, [&](std::span<const int> idx) {
      Graph g;
      std::vector<Var> inputs = batch_inputs(g, train, idx);
      std::vector<Var> logits;
      for (ModalityModel& m : members) logits.push_back(m.forward(g, inputs));
      const std::vector<int> labels = gather_labels(train.labels, idx);
      Stage1Terms terms = stage1_loss(logits, labels, plan.distill(), plan.detach_align);
      const float loss = terms.total.value().data[0];
      guard_loss(loss, params, where);
      g.backward(terms.total);
      opt.step();
      loss_sum += static_cast<double>(loss) * static_cast<double>(idx.size());
      for (Var l : logits) correct += count_correct(l.value(), labels);
    });
    check_finite(params, where);
    const double n = train.size();
    ctx.log.write({"s1", epoch, "train", loss_sum / n, correct / (n * count), std::nullopt, std::nullopt, {}});

    double val_loss = 0.0, val_oa = 0.0;
    for (ModalityModel& m : members) {
      const Metrics mv = evaluate(m, ctx.data.val);
      val_loss += mv.loss;
      val_oa += mv.overall_accuracy;
    }
    val_loss /= count;
    val_oa /= count;
    ctx.log.write({"s1", epoch, "val", val_loss, val_oa, std::nullopt, std::nullopt, {}});
    if (best.best_epoch < 0 || val_oa > best.best_score) {
      best = {epoch, val_oa};
      best_values = snapshot(params);
    }
  }
  restore(params, best_values);
  return best;
}

std::vector<StageResult> run_pretrain(std::vector<ModalityModel>& members, const StageContext& ctx) {
  const StagePlan& plan = ctx.plan;
  const SplitData& train = ctx.data.train;
  for (ModalityModel& m : members) m.set_frozen(false);
  std::vector<Parameter*> params = all_parameters(members);
  Optimizer opt(params, ctx.train.optimizer);
  const auto orders = epoch_orders(train.size(), plan.epochs_s1, ctx.seed, "shuffle/s1");
  const double count = static_cast<double>(members.size());

  std::vector<StageResult> best(members.size());
  std::vector<std::vector<Tensor>> best_values;
  for (ModalityModel& m : members) best_values.push_back(snapshot(m.parameters()));
  for (int epoch = 0; epoch < plan.epochs_s1; ++epoch) {
    const std::string where = epoch_where("pretrain", epoch);
    double loss_sum = 0.0, correct = 0.0;
    for_each_batch(orders[static_cast<std::size_t>(epoch)], ctx.train.batch_size, [&](std::span<const int> idx) {
      Graph g;
      std::vector<Var> inputs = batch_inputs(g, train, idx);
      const std::vector<int> labels = gather_labels(train.labels, idx);
      Var total;
      for (std::size_t i = 0; i < members.size(); ++i) {
        Var logits = members[i].forward(g, inputs);
        Var ce = cross_entropy(logits, labels);
        total = i == 0 ? ce : ops::add(total, ce);
        correct += count_correct(logits.value(), labels);
      }
      const float loss = total.value().data[0];
      guard_loss(loss, params, where);
      g.backward(total);
      opt.step();
      loss_sum += static_cast<double>(loss) * static_cast<double>(idx.size());
    });
    check_finite(params, where);
    const double n = train.size();
    ctx.log.write({"pretrain", epoch, "train", loss_sum / n, correct / (n * count), std::nullopt, std::nullopt, {}});

    double val_loss = 0.0, val_oa = 0.0;
    for (std::size_t i = 0; i < members.size(); ++i) {
      const Metrics mv = evaluate(members[i], ctx.data.val);
      val_loss += mv.loss;
      val_oa += mv.overall_accuracy;
      if (best[i].best_epoch < 0 || mv.overall_accuracy > best[i].best_score) {
        best[i] = {epoch, mv.overall_accuracy};
        best_values[i] = snapshot(members[i].parameters());
      }
    }
    ctx.log.write({"pretrain", epoch, "val", val_loss / count, val_oa / count, std::nullopt, std::nullopt, {}});
  }
  for (std::size_t i = 0; i < members.size(); ++i) restore(members[i].parameters(), best_values[i]);
  return best;
}

namespace {

struct MaskedEval {
  double loss = 0.0;
  double oa = 0.0;
};

/// Stage-2 loss and accuracy of one teacher over cached features.
MaskedEval eval_masked(SpecializedTeacher& t, const Tensor& features, const Tensor& student_probs,
                       std::span<const int> labels, const StagePlan& plan) {
  const int rows = static_cast<int>(labels.size());
  double loss = 0.0;
  int correct = 0;
  for (int start = 0; start < rows; start += kEvalChunk) {
    const std::vector<int> idx = chunk_range(start, std::min(rows, start + kEvalChunk));
    Graph g;
    Var z = g.constant(gather_rows(features, idx));
    Var logits = t.base->forward_from(g, t.masknet->forward(g, z), t.tap);
    SoftDist student = constant_dist(g, gather_rows(student_probs, idx), plan.temperature);
    Var per_row = ops::kl_rows(student.probs, soften(logits, plan.temperature).probs, kKlFloor);
    for (float v : per_row.value().data) loss += v;
    correct += count_correct(logits.value(), labels.subspan(static_cast<std::size_t>(start), idx.size()));
  }
  if (plan.tau_squared) loss *= static_cast<double>(plan.temperature) * plan.temperature;
  return {loss / rows, static_cast<double>(correct) / rows};
}

}  // namespace

std::vector<StageResult> run_stage2(TeacherRegistry& registry, ModalityModel& student, const StageContext& ctx) {
  const StagePlan& plan = ctx.plan;
  const int n_teachers = registry.size();
  if (n_teachers == 0) fail(ErrorKind::kConfig, "teacher registry is empty");
  for (const SpecializedTeacher& t : registry.teachers) {
    if (!t.masknet) fail(ErrorKind::kConfig, "stage 2 needs MaskNet teachers");
    t.base->set_frozen(true);
  }
  student.set_frozen(true);

  const SplitData& train = ctx.data.train;
  const SplitData& val = ctx.data.val;
  const Tensor sp_train = softened(predict(student, train), plan.temperature);
  const Tensor sp_val = softened(predict(student, val), plan.temperature);
  const auto orders = epoch_orders(train.size(), plan.epochs_s2, ctx.seed, "shuffle/s2");

  const auto epochs = static_cast<std::size_t>(plan.epochs_s2);
  std::vector<std::vector<EpochStats>> train_stats(static_cast<std::size_t>(n_teachers), std::vector<EpochStats>(epochs));
  std::vector<std::vector<EpochStats>> val_stats = train_stats;
  std::vector<StageResult> results(static_cast<std::size_t>(n_teachers));

  parallel_for(n_teachers, ctx.train.threads, [&](int jj) {
    const auto j = static_cast<std::size_t>(jj);
    SpecializedTeacher& t = registry.teachers[j];
    const Tensor z_train = tap_features(*t.base, t.tap, train);
    const Tensor z_val = tap_features(*t.base, t.tap, val);
    std::vector<Parameter*> params = t.masknet->parameters();
    for (Parameter* p : params) p->frozen = false;
    Optimizer opt(params, ctx.train.optimizer);

    StageResult best{-1, eval_masked(t, z_val, sp_val, val.labels, plan).loss};
    std::vector<Tensor> best_values = snapshot(params);
    for (int epoch = 0; epoch < plan.epochs_s2; ++epoch) {
      const std::string where = epoch_where("s2 teacher " + std::to_string(t.id), epoch);
      double loss_sum = 0.0;
      int correct = 0;
      for_each_batch(orders[static_cast<std::size_t>(epoch)], ctx.train.batch_size, [&](std::span<const int> idx) {
        Graph g;
        Var z = g.constant(gather_rows(z_train, idx));
        Var logits = t.base->forward_from(g, t.masknet->forward(g, z), t.tap);
        SoftDist s = constant_dist(g, gather_rows(sp_train, idx), plan.temperature);
        Var loss = stage2_loss(s, soften(logits, plan.temperature), plan.distill());
        const float value = loss.value().data[0];
        guard_loss(value, params, where);
        g.backward(loss);
        opt.step();
        loss_sum += static_cast<double>(value) * static_cast<double>(idx.size());
        correct += count_correct(logits.value(), gather_labels(train.labels, idx));
      });
      check_finite(params, where);
      const auto e = static_cast<std::size_t>(epoch);
      train_stats[j][e] = {loss_sum / train.size(), static_cast<double>(correct) / train.size()};
      const MaskedEval mv = eval_masked(t, z_val, sp_val, val.labels, plan);
      val_stats[j][e] = {mv.loss, mv.oa};
      if (mv.loss < best.best_score) {
        best = {epoch, mv.loss};
        best_values = snapshot(params);
      }
    }
    restore(params, best_values);
    for (Parameter* p : params) p->frozen = true;
    results[j] = best;
  });

  for (std::size_t e = 0; e < epochs; ++e) {
    EpochStats tr, va;
    for (std::size_t j = 0; j < static_cast<std::size_t>(n_teachers); ++j) {
      tr.loss += train_stats[j][e].loss;
      tr.oa += train_stats[j][e].oa;
      va.loss += val_stats[j][e].loss;
      va.oa += val_stats[j][e].oa;
    }
    const double n = n_teachers;
    const int epoch = static_cast<int>(e);
    ctx.log.write({"s2", epoch, "train", tr.loss / n, tr.oa / n, std::nullopt, std::nullopt, {}});
    ctx.log.write({"s2", epoch, "val", va.loss / n, va.oa / n, std::nullopt, std::nullopt, {}});
  }
  return results;
}

namespace {

enum class DistillMode { kNone, kMean, kRouted };

struct DistillJob {
  DistillMode mode = DistillMode::kNone;
  std::string label;
  /// Softened teacher outputs on the train split, one table per teacher.
  std::vector<Tensor> teacher_probs;
  GateNet* gate = nullptr;
};

StageResult distill(ModalityModel& student, const DistillJob& job, const StageContext& ctx) {
  const StagePlan& plan = ctx.plan;
  const SplitData& train = ctx.data.train;
  const float tau = plan.temperature;
  const bool routed = job.mode == DistillMode::kRouted;
  const std::size_t n_teachers = job.teacher_probs.size();
  if (job.mode != DistillMode::kNone && n_teachers == 0) fail(ErrorKind::kConfig, "distillation without teachers");
  if (routed && job.gate == nullptr) fail(ErrorKind::kConfig, "routed distillation needs a GateNet");
  if (routed && job.gate->teachers() != static_cast<int>(n_teachers)) {
    fail(ErrorKind::kConfig, "GateNet routes over " + std::to_string(job.gate->teachers()) + " teachers, registry has " +
                                 std::to_string(n_teachers));
  }
  if (routed && (plan.k < 1 || plan.k > static_cast<int>(n_teachers))) {
    fail(ErrorKind::kConfig, "k=" + std::to_string(plan.k) + " exceeds the " + std::to_string(n_teachers) + " teachers");
  }

  student.set_frozen(false);
  std::vector<Parameter*> params = student.parameters();
  if (routed) {
    for (Parameter* p : job.gate->parameters()) {
      p->frozen = false;
      params.push_back(p);
    }
  }
  Optimizer opt(params, ctx.train.optimizer);
  const auto orders = epoch_orders(train.size(), plan.epochs_s3, ctx.seed, "shuffle/s3");
  const std::size_t classes = static_cast<std::size_t>(ctx.data.classes);

  StageResult best;
  std::vector<Tensor> best_values = snapshot(params);
  std::optional<double> best_l1, best_l2;
  for (int epoch = 0; epoch < plan.epochs_s3; ++epoch) {
    const std::string where = epoch_where(job.label, epoch);
    const float l1 = plan.lambda1.value_at(epoch);
    const float l2 = plan.lambda2.value_at(epoch);
    std::optional<double> log_l1, log_l2;
    if (job.mode != DistillMode::kNone) log_l1 = l1;
    if (routed) log_l2 = l2;

    double loss_sum = 0.0;
    int correct = 0;
    std::vector<double> routing(n_teachers, 0.0);
    for_each_batch(orders[static_cast<std::size_t>(epoch)], ctx.train.batch_size, [&](std::span<const int> idx) {
      Graph g;
      std::vector<Var> inputs = batch_inputs(g, train, idx);
      const std::vector<int> labels = gather_labels(train.labels, idx);
      Var logits = student.forward(g, inputs);
      Var loss = cross_entropy(logits, labels);
      if (job.mode == DistillMode::kMean) {
        std::vector<SoftDist> all;
        for (const Tensor& probs : job.teacher_probs) all.push_back(constant_dist(g, gather_rows(probs, idx), tau));
        Var dkd = dkd_loss(all, soften(logits, tau), {}, plan.distill());
        if (n_teachers > 1) dkd = ops::scale(dkd, 1.0f / static_cast<float>(n_teachers));
        loss = ops::add(loss, ops::scale(dkd, l1));
      } else if (routed) {
        Var conf = job.gate->forward(g, ops::detach(logits));
        const Tensor& cv = conf.value();
        const std::size_t rows = idx.size();
        const auto k = static_cast<std::size_t>(plan.k);
        std::vector<Tensor> picked(k, Tensor({rows, classes}));
        std::vector<std::vector<int>> choice(k, std::vector<int>(rows));
        for (std::size_t r = 0; r < rows; ++r) {
          const std::span<const float> row(cv.data.data() + r * n_teachers, n_teachers);
          for (std::size_t t = 0; t < n_teachers; ++t) routing[t] += row[t];
          const std::vector<int> top = topk_select(row, plan.k);
          for (std::size_t q = 0; q < k; ++q) {
            choice[q][r] = top[q];
            const Tensor& src = job.teacher_probs[static_cast<std::size_t>(top[q])];
            std::copy_n(src.data.begin() + static_cast<long>(static_cast<std::size_t>(idx[r]) * classes), classes,
                        picked[q].data.begin() + static_cast<long>(r * classes));
          }
        }
        std::vector<SoftDist> selected;
        std::vector<Var> weights;
        for (std::size_t q = 0; q < k; ++q) {
          selected.push_back(constant_dist(g, std::move(picked[q]), tau));
          if (plan.weight_dkd_by_confidence) weights.push_back(ops::gather_cols(conf, choice[q]));
        }
        Var dkd = dkd_loss(selected, soften(logits, tau), weights, plan.distill());
        Var lb = lb_loss(ops::mean_rows(conf), plan.lb);
        loss = stage3_loss(loss, dkd, lb, l1, l2);
      }
      const float value = loss.value().data[0];
      guard_loss(value, params, where);
      g.backward(loss);
      opt.step();
      loss_sum += static_cast<double>(value) * static_cast<double>(idx.size());
      correct += count_correct(logits.value(), labels);
    });
    check_finite(params, where);
    const double n = train.size();
    LogLine tl{job.label, epoch, "train", loss_sum / n, correct / n, log_l1, log_l2, {}};
    if (routed) {
      for (double& v : routing) v /= n;
      tl.routing_mean = routing;
    }
    ctx.log.write(tl);

    const Metrics mv = evaluate(student, ctx.data.val);
    ctx.log.write({job.label, epoch, "val", mv.loss, mv.overall_accuracy, log_l1, log_l2, {}});
    if (best.best_epoch < 0 || mv.overall_accuracy > best.best_score) {
      best = {epoch, mv.overall_accuracy};
      best_values = snapshot(params);
      best_l1 = log_l1;
      best_l2 = log_l2;
    }
  }
  restore(params, best_values);
  const Metrics mv = evaluate(student, ctx.data.val);
  ctx.log.write({job.label, best.best_epoch, "val", mv.loss, mv.overall_accuracy, best_l1, best_l2, {}});
  const Metrics mt = evaluate(student, ctx.data.test);
  ctx.log.write({job.label, best.best_epoch, "test", mt.loss, mt.overall_accuracy, best_l1, best_l2, {}});
  return best;
}

}  // namespace

StageResult run_stage3(ModalityModel& student, TeacherRegistry& registry, GateNet* gate, const StageContext& ctx) {
  if (student.modality_index != ctx.plan.target) {
    fail(ErrorKind::kConfig, "student is modality " + std::to_string(student.modality_index) + ", target is " +
                                 std::to_string(ctx.plan.target));
  }
  if (registry.size() == 0) fail(ErrorKind::kConfig, "teacher registry is empty");
  DistillJob job;
  job.mode = ctx.plan.s3 ? DistillMode::kRouted : DistillMode::kMean;
  job.label = ctx.plan.s3 ? "s3" : "distill";
  job.gate = gate;
  for (SpecializedTeacher& t : registry.teachers) {
    t.base->set_frozen(true);
    if (t.masknet) {
      for (Parameter* p : t.masknet->parameters()) p->frozen = true;
    }
    job.teacher_probs.push_back(softened(teacher_logits(t, ctx.data.train), ctx.plan.temperature));
  }
  return distill(student, job, ctx);
}

const char* to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kNoKd: return "no_kd";
    case BaselineKind::kKdMultimodal: return "kd_mm";
    case BaselineKind::kKdCrossModal: return "kd_cm";
  }
  return "?";
}

StageResult run_baseline(BaselineKind kind, ModalityModel& student, ModalityModel* teacher, const StageContext& ctx) {
  DistillJob job;
  job.label = to_string(kind);
  if (kind == BaselineKind::kNoKd) {
    job.mode = DistillMode::kNone;
  } else {
    if (teacher == nullptr) fail(ErrorKind::kDependency, std::string(job.label) + " needs a trained teacher");
    if (kind == BaselineKind::kKdMultimodal && !teacher->is_multimodal()) {
      fail(ErrorKind::kConfig, "kd_mm needs the multimodal teacher");
    }
    if (kind == BaselineKind::kKdCrossModal && (teacher->is_multimodal() || teacher->modality_index == ctx.plan.target)) {
      fail(ErrorKind::kConfig, "kd_cm needs a unimodal teacher of another modality");
    }
    teacher->set_frozen(true);
    job.mode = DistillMode::kMean;
    job.teacher_probs.push_back(softened(predict(*teacher, ctx.data.train), ctx.plan.temperature));
  }
  return distill(student, job, ctx);
}

}  // namespace mstd
