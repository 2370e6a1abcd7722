#pragma once

// Distillation objectives for the three training stages and the decay
// schedules of their weights. Every loss returns a scalar Var averaged over
// the batch.

#include <span>
#include <string_view>
#include <vector>

#include "mstd/autodiff.hpp"

namespace mstd {

inline constexpr float kKlFloor = 1e-9f;

/// Temperature-softened class distribution, rows sum to one.
struct SoftDist {
  Var probs;
  float temperature = 1.0f;
};

SoftDist soften(Var logits, float temperature);
/// Wraps a fixed probability table as a constant distribution.
SoftDist constant_dist(Graph& g, Tensor probs, float temperature);

Var cross_entropy(Var logits, std::span<const int> labels);

/// Batch mean of KL(p || q). Both arguments may carry gradient.
Var kl_divergence(const SoftDist& p, const SoftDist& q);

struct DistillOptions {
  float temperature = 2.0f;
  /// Multiply every softened KL term by temperature^2 (classic KD rescaling).
  bool tau_squared = false;
};

struct Stage1Terms {
  Var total;
  Var task;
  Var align;
  int kl_terms = 0;
};

/// Task CE of every member plus bidirectional KL over all unordered pairs.
/// With detach_align, the first argument of each KL is a constant, so each
/// member only learns from terms where it is the second argument.
Stage1Terms stage1_loss(std::span<const Var> logits_all, std::span<const int> labels,
                        const DistillOptions& opts, bool detach_align);

/// KL(student || teacher) with the student held constant.
Var stage2_loss(const SoftDist& student, const SoftDist& teacher, const DistillOptions& opts = {});

/// Sum over the k selected teacher tables of KL(teacher_r || student), batch
/// mean. selected[r] holds, per sample, the distribution of its r-th choice.
/// Optional weights[r] (shape [batch]) scale each term per sample.
Var dkd_loss(std::span<const SoftDist> selected, const SoftDist& student,
             std::span<const Var> weights = {}, const DistillOptions& opts = {});

enum class LbVariant { kKl, kCv };
LbVariant parse_lb_variant(std::string_view name);
const char* to_string(LbVariant v);

/// Load-balancing penalty on the batch-mean routing distribution.
/// kKl: KL(U || mean_conf); kCv: squared coefficient of variation.
Var lb_loss(Var mean_conf, LbVariant variant);

/// ce + lambda1 * dkd + lambda2 * lb
Var stage3_loss(Var ce, Var dkd, Var lb, float lambda1, float lambda2);

/// Step decay: value_at(e) = initial * factor^floor(e / period).
struct DecaySchedule {
  double initial = 1.0;
  double factor = 1.0;
  int period = 1;

  static DecaySchedule halve_every(int n, double initial = 1.0) { return {initial, 0.5, n}; }
  static DecaySchedule multiply_every(double factor, int n, double initial = 1.0) {
    return {initial, factor, n};
  }
  static DecaySchedule constant(double value) { return {value, 1.0, 1}; }

  float value_at(int epoch) const;
};

float schedule_value(const DecaySchedule& s, int epoch);

}  // namespace mstd
