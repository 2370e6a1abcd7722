#pragma once

#include <string_view>
#include <vector>

#include "mstd/autodiff.hpp"

namespace mstd {

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Updates the unfrozen parameters that received gradient since the last
/// step, then zeroes their gradients. Adam keeps per-parameter moments.
class Optimizer {
 public:
  Optimizer(std::vector<Parameter*> params, OptimizerConfig cfg);

  /// Throws a usage error when no parameter has a gradient (step before
  /// backward).
  void step();
  void zero_grad();

  const OptimizerConfig& config() const { return cfg_; }
  long steps_taken() const { return t_; }

 private:
  struct Slot {
    Parameter* param;
    std::vector<float> m;
    std::vector<float> v;
  };
  std::vector<Slot> slots_;
  OptimizerConfig cfg_;
  long t_ = 0;
};

}  // namespace mstd
