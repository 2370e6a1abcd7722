#include "mstd/optim.hpp"

#include <cmath>
#include <string>

#include "mstd/error.hpp"
#include "mstd/kernels.hpp"

namespace mstd {

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd") return OptimizerKind::kSgd;
  fail(ErrorKind::kConfig, "unknown optimizer '" + std::string(name) + "'");
}

Optimizer::Optimizer(std::vector<Parameter*> params, OptimizerConfig cfg) : cfg_(cfg) {
  if (!(cfg.lr > 0.0f)) fail(ErrorKind::kConfig, "learning rate must be positive");
  slots_.reserve(params.size());
  for (Parameter* p : params) slots_.push_back(Slot{p, {}, {}});
}

void Optimizer::step() {
  bool any = false;
  for (const Slot& s : slots_) any = any || (!s.param->frozen && s.param->has_grad);
  if (!any) fail(ErrorKind::kUsage, "optimizer step before backward: no parameter has a gradient");

  ++t_;
  const auto& ker = kernels::active();
  const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
  for (Slot& s : slots_) {
    Parameter& p = *s.param;
    if (p.frozen || !p.has_grad) continue;
    const std::size_t n = p.value.numel();
    if (cfg_.kind == OptimizerKind::kSgd) {
      ker.axpy(n, -cfg_.lr, p.grad.data(), p.value.data.data());
    } else {
      if (s.m.empty()) {
        s.m.assign(n, 0.0f);
        s.v.assign(n, 0.0f);
      }
      ker.adam(n, p.value.data.data(), p.grad.data(), s.m.data(), s.v.data(), cfg_.lr, cfg_.beta1,
               cfg_.beta2, cfg_.eps, bc1, bc2);
    }
    p.zero_grad();
  }
}

void Optimizer::zero_grad() {
  for (Slot& s : slots_) s.param->zero_grad();
}

}  // namespace mstd
