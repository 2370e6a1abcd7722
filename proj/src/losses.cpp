#include "mstd/losses.hpp"

#include <cmath>
#include <string>

#include "mstd/error.hpp"

namespace mstd {

SoftDist soften(Var logits, float temperature) {
  return SoftDist{ops::softmax(logits, temperature), temperature};
}

SoftDist constant_dist(Graph& g, Tensor probs, float temperature) {
  return SoftDist{g.constant(std::move(probs)), temperature};
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  return ops::cross_entropy(logits, labels);
}

Var kl_divergence(const SoftDist& p, const SoftDist& q) {
  if (p.temperature != q.temperature) {
    fail(ErrorKind::kConfig, "KL between distributions softened at temperatures " +
                                 std::to_string(p.temperature) + " and " + std::to_string(q.temperature));
  }
  return ops::mean(ops::kl_rows(p.probs, q.probs, kKlFloor));
}

namespace {

Var rescale(Var kl, const DistillOptions& opts) {
  if (!opts.tau_squared) return kl;
  return ops::scale(kl, opts.temperature * opts.temperature);
}

}  // namespace

Stage1Terms stage1_loss(std::span<const Var> logits_all, std::span<const int> labels,
                        const DistillOptions& opts, bool detach_align) {
  if (logits_all.size() < 2) {
    fail(ErrorKind::kConfig, "collaborative initialization needs at least 2 models, got " +
                                 std::to_string(logits_all.size()));
  }
  Stage1Terms terms;
  std::vector<SoftDist> soft;
  soft.reserve(logits_all.size());
  terms.task = cross_entropy(logits_all[0], labels);
  for (std::size_t i = 1; i < logits_all.size(); ++i) {
    terms.task = ops::add(terms.task, cross_entropy(logits_all[i], labels));
  }
  for (Var l : logits_all) soft.push_back(soften(l, opts.temperature));

  auto reference = [&](std::size_t i) {
    return detach_align ? SoftDist{ops::detach(soft[i].probs), soft[i].temperature} : soft[i];
  };
  bool first = true;
  for (std::size_t i = 0; i < soft.size(); ++i) {
    for (std::size_t j = i + 1; j < soft.size(); ++j) {
      Var forward = kl_divergence(reference(i), soft[j]);
      Var reverse = kl_divergence(reference(j), soft[i]);
      Var pair = ops::add(forward, reverse);
      terms.align = first ? pair : ops::add(terms.align, pair);
      first = false;
      terms.kl_terms += 2;
    }
  }
  terms.align = rescale(terms.align, opts);
  terms.total = ops::add(terms.task, terms.align);
  return terms;
}

Var stage2_loss(const SoftDist& student, const SoftDist& teacher, const DistillOptions& opts) {
  SoftDist fixed{ops::detach(student.probs), student.temperature};
  return rescale(kl_divergence(fixed, teacher), opts);
}

Var dkd_loss(std::span<const SoftDist> selected, const SoftDist& student,
             std::span<const Var> weights, const DistillOptions& opts) {
  if (selected.empty()) fail(ErrorKind::kConfig, "dynamic distillation with an empty teacher selection");
  if (!weights.empty() && weights.size() != selected.size()) {
    fail(ErrorKind::kDimension, "dkd weights: " + std::to_string(weights.size()) + " for " +
                                    std::to_string(selected.size()) + " selections");
  }
  Var per_sample;
  for (std::size_t r = 0; r < selected.size(); ++r) {
    if (selected[r].temperature != student.temperature) {
      fail(ErrorKind::kConfig, "teacher and student softened at different temperatures");
    }
    Var rows = ops::kl_rows(ops::detach(selected[r].probs), student.probs, kKlFloor);
    if (!weights.empty()) rows = ops::mul(rows, weights[r]);
    per_sample = r == 0 ? rows : ops::add(per_sample, rows);
  }
  return rescale(ops::mean(per_sample), opts);
}

LbVariant parse_lb_variant(std::string_view name) {
  if (name == "kl") return LbVariant::kKl;
  if (name == "cv") return LbVariant::kCv;
  fail(ErrorKind::kConfig, "unknown load-balancing variant '" + std::string(name) + "'");
}

const char* to_string(LbVariant v) { return v == LbVariant::kKl ? "kl" : "cv"; }

Var lb_loss(Var mean_conf, LbVariant variant) {
  const Tensor& c = mean_conf.value();
  double total = 0.0;
  for (float v : c.data) total += v;
  if (std::abs(total - 1.0) > 1e-4) {
    fail(ErrorKind::kInvariant, "routing distribution sums to " + std::to_string(total));
  }
  const std::size_t n = c.numel();
  if (variant == LbVariant::kCv) return ops::cv_squared(mean_conf);

  Graph& g = *mean_conf.graph;
  Var row = ops::reshape(mean_conf, {1, n});
  Var uniform = g.constant(Tensor({1, n}, 1.0f / static_cast<float>(n)));
  return ops::sum(ops::kl_rows(uniform, row, kKlFloor));
}

Var stage3_loss(Var ce, Var dkd, Var lb, float lambda1, float lambda2) {
  if (lambda1 < 0.0f || lambda2 < 0.0f) fail(ErrorKind::kConfig, "loss weights must be non-negative");
  return ops::add(ops::add(ce, ops::scale(dkd, lambda1)), ops::scale(lb, lambda2));
}

float DecaySchedule::value_at(int epoch) const {
  if (epoch < 0) fail(ErrorKind::kUsage, "negative epoch " + std::to_string(epoch));
  if (period <= 0) fail(ErrorKind::kConfig, "decay period must be positive");
  const int boundaries = epoch / period;
  double v = initial;
  for (int i = 0; i < boundaries; ++i) v *= factor;
  return static_cast<float>(v);
}

float schedule_value(const DecaySchedule& s, int epoch) { return s.value_at(epoch); }

}  // namespace mstd
