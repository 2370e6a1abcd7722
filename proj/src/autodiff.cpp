#include "mstd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <limits>

#include "mstd/error.hpp"
#include "mstd/kernels.hpp"

namespace mstd {

void Parameter::zero_grad() {
  std::fill(grad.begin(), grad.end(), 0.0f);
  has_grad = false;
}

const Tensor& Var::value() const { return graph->value(*this); }
bool Var::requires_grad() const { return graph->requires_grad(*this); }

const Graph::Node& Graph::node(Var v) const {
  if (v.graph != this || v.id >= nodes_.size()) fail(ErrorKind::kUsage, "variable from another graph");
  return nodes_[v.id];
}

Graph::Node& Graph::node(Var v) {
  if (v.graph != this || v.id >= nodes_.size()) fail(ErrorKind::kUsage, "variable from another graph");
  return nodes_[v.id];
}

Var Graph::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Graph::input(Tensor value, bool requires_grad) {
  Var v = record(std::move(value), false, nullptr);
  nodes_.back().requires_grad = requires_grad;
  return v;
}

Var Graph::param(Parameter& p) {
  if (backward_done_) fail(ErrorKind::kUsage, "graph already consumed by backward");
  Node n;
  n.external = &p.value;
  n.requires_grad = !p.frozen;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::record(Tensor value, bool requires_grad, BackwardFn fn) {
  if (backward_done_) fail(ErrorKind::kUsage, "graph already consumed by backward");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::vector<float>& Graph::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad.assign(n.value_ref().numel(), 0.0f);
  return n.grad;
}

std::vector<float> Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) return std::vector<float>(n.value_ref().numel(), 0.0f);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (backward_done_) fail(ErrorKind::kUsage, "backward called twice on the same graph");
  Node& root = node(loss);
  if (root.value_ref().numel() != 1) {
    fail(ErrorKind::kUsage, "backward requires a scalar loss, got shape " +
                                shape_str(root.value_ref().shape));
  }
  backward_done_ = true;
  visit_order_.clear();
  if (!root.requires_grad) return;
  grad_buffer(loss)[0] = 1.0f;

  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.backward) {
      visit_order_.push_back(id);
      n.backward(*this, Var{this, id});
    } else if (n.param != nullptr && !n.param->frozen) {
      visit_order_.push_back(id);
      Parameter& p = *n.param;
      if (p.grad.size() != n.grad.size()) p.grad.assign(n.grad.size(), 0.0f);
      for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
      p.has_grad = true;
    }
  }
}

namespace ops {
namespace {

const kernels::KernelTable& K() { return kernels::active(); }

Graph& graph_of(Var a) { return *a.graph; }

void require_same_graph(Var a, Var b) {
  if (a.graph != b.graph) fail(ErrorKind::kUsage, "operands live on different graphs");
}

void require_same_shape(const char* op, Var a, Var b) {
  require_same_graph(a, b);
  if (a.shape() != b.shape()) {
    fail(ErrorKind::kDimension, std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()) + " differ");
  }
}

bool any_grad(std::initializer_list<Var> vars) {
  for (Var v : vars) {
    if (v.requires_grad()) return true;
  }
  return false;
}

// colsum over rows of g [rows, n] into out[n]
void add_colsum(const float* g, std::size_t rows, std::size_t n, float* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[j] += g[r * n + j];
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    fail(ErrorKind::kDimension,
         "matmul: incompatible shapes " + shape_str(av.shape) + " and " + shape_str(bv.shape));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  K().gemm_nn(m, n, k, av.data.data(), k, bv.data.data(), n, out.data.data(), n, false);
  return graph_of(a).record(std::move(out), any_grad({a, b}), [a, b, m, n, k](Graph& g, Var self) {
    const float* gy = g.grad_buffer(self).data();
    if (a.requires_grad()) {
      K().gemm_nt(m, k, n, gy, n, b.value().data.data(), n, g.grad_buffer(a).data(), k, true);
    }
    if (b.requires_grad()) {
      K().gemm_tn(k, n, m, a.value().data.data(), k, gy, n, g.grad_buffer(b).data(), n, true);
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  require_same_graph(x, weight);
  require_same_graph(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0) || bv.numel() != wv.dim(1)) {
    fail(ErrorKind::kDimension, "linear: input " + shape_str(xv.shape) + " vs weight " +
                                    shape_str(wv.shape) + " and bias " + shape_str(bv.shape));
  }
  const std::size_t rows = xv.rows(), in = wv.dim(0), outd = wv.dim(1);
  Shape out_shape = xv.shape;
  out_shape.back() = outd;
  Tensor out(out_shape);
  float* y = out.data.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(bv.data.begin(), bv.data.end(), y + r * outd);
  K().gemm_nn(rows, outd, in, xv.data.data(), in, wv.data.data(), outd, y, outd, true);
  return graph_of(x).record(
      std::move(out), any_grad({x, weight, bias}), [x, weight, bias, rows, in, outd](Graph& g, Var self) {
        const float* gy = g.grad_buffer(self).data();
        if (x.requires_grad()) {
          K().gemm_nt(rows, in, outd, gy, outd, weight.value().data.data(), outd,
                      g.grad_buffer(x).data(), in, true);
        }
        if (weight.requires_grad()) {
          K().gemm_tn(in, outd, rows, x.value().data.data(), in, gy, outd,
                      g.grad_buffer(weight).data(), outd, true);
        }
        if (bias.requires_grad()) add_colsum(gy, rows, outd, g.grad_buffer(bias).data());
      });
}

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) out.data[i] = xv.data[i] > 0.0f ? xv.data[i] : 0.0f;
  return graph_of(x).record(std::move(out), x.requires_grad(), [x](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    const auto& xd = x.value().data;
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xd[i] > 0.0f) gx[i] += gy[i];
    }
  });
}

Var sigmoid(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    out.data[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(xv.data[i]))));
  }
  return graph_of(x).record(std::move(out), x.requires_grad(), [x](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    const auto& y = self.value().data;
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * y[i] * (1.0f - y[i]);
  });
}

namespace {

// Stable row softmax of in/temperature; rows x n.
void softmax_rows(const float* in, float* out, std::size_t rows, std::size_t n, float temperature) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = in + r * n;
    float* y = out + r * n;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j] / temperature);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] / temperature - mx);
      total += y[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
  }
}

// gx += (y * (gy - <gy, y>)) * factor, row-wise
void softmax_rows_backward(const float* y, const float* gy, float* gx, std::size_t rows,
                           std::size_t n, float factor) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* yr = y + r * n;
    const float* gr = gy + r * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(gr[j]) * yr[j];
    const float d = static_cast<float>(dot);
    for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - d) * factor;
  }
}

}  // namespace

Var softmax(Var x, float temperature) {
  if (!(temperature > 0.0f)) {
    fail(ErrorKind::kConfig, "softmax temperature must be positive, got " + std::to_string(temperature));
  }
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  const std::size_t rows = xv.rows(), n = xv.cols();
  softmax_rows(xv.data.data(), out.data.data(), rows, n, temperature);
  return graph_of(x).record(std::move(out), x.requires_grad(), [x, rows, n, temperature](Graph& g, Var self) {
    softmax_rows_backward(self.value().data.data(), g.grad_buffer(self).data(),
                          g.grad_buffer(x).data(), rows, n, 1.0f / temperature);
  });
}

// src is a [tokens, hd] slab with row stride ld; dst is [hd, tokens].
static void transpose_head(const float* src, std::size_t ld, std::size_t tokens, std::size_t hd, float* dst) {
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t p = 0; p < hd; ++p) dst[p * tokens + t] = src[t * ld + p];
  }
}

static void untranspose_head(const float* src, std::size_t tokens, std::size_t hd, float* dst, std::size_t ld,
                      bool accumulate) {
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t p = 0; p < hd; ++p) {
      const float v = src[p * tokens + t];
      dst[t * ld + p] = accumulate ? dst[t * ld + p] + v : v;
    }
  }
}

Var multi_head_self_attention(Var x, int heads, Var wq, Var bq, Var wk, Var bk, Var wv, Var bv,
                              Var wo, Var bo) {
  for (Var p : {wq, bq, wk, bk, wv, bv, wo, bo}) require_same_graph(x, p);
  const Tensor& xv = x.value();
  if (xv.rank() != 3) {
    fail(ErrorKind::kDimension, "attention expects [batch, tokens, dim], got " + shape_str(xv.shape));
  }
  const std::size_t batch = xv.dim(0), tokens = xv.dim(1), dim = xv.dim(2);
  if (heads <= 0 || dim % static_cast<std::size_t>(heads) != 0) {
    fail(ErrorKind::kConfig, "attention dim " + std::to_string(dim) + " not divisible by " +
                                 std::to_string(heads) + " heads");
  }
  for (Var w : {wq, wk, wv, wo}) {
    if (w.shape() != Shape{dim, dim}) {
      fail(ErrorKind::kDimension, "attention weight " + shape_str(w.shape()) + " expected " +
                                      shape_str({dim, dim}));
    }
  }
  for (Var b : {bq, bk, bv, bo}) {
    if (b.value().numel() != dim) {
      fail(ErrorKind::kDimension, "attention bias " + shape_str(b.shape()) + " expected [" +
                                      std::to_string(dim) + "]");
    }
  }

  Graph& g = graph_of(x);
  const std::size_t hd = dim / static_cast<std::size_t>(heads);
  const std::size_t rows = batch * tokens;
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(hd));
  const auto& ker = K();

  auto project = [&](Var w, Var b) {
    Tensor t({rows, dim});
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(b.value().data.begin(), b.value().data.end(), t.data.begin() + r * dim);
    }
    ker.gemm_nn(rows, dim, dim, xv.data.data(), dim, w.value().data.data(), dim, t.data.data(), dim, true);
    return t;
  };
  // Saved activations for backward.
  struct Saved {
    Tensor q, k, v, attn, concat;
  };
  auto saved = std::make_shared<Saved>();
  saved->q = project(wq, bq);
  saved->k = project(wk, bk);
  saved->v = project(wv, bv);
  saved->attn = Tensor({batch, static_cast<std::size_t>(heads), tokens, tokens});
  saved->concat = Tensor({rows, dim});

  // Per-head work runs on [hd, tokens] transposes so the vector lanes span
  // tokens rather than the (tiny) head dimension.
  std::vector<float> scores(tokens * tokens), qt(hd * tokens), kt_(hd * tokens), vt(hd * tokens),
      ot(hd * tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
      const std::size_t off = b * tokens * dim + h * hd;
      float* attn = saved->attn.data.data() + (b * heads + h) * tokens * tokens;
      transpose_head(saved->q.data.data() + off, dim, tokens, hd, qt.data());
      transpose_head(saved->k.data.data() + off, dim, tokens, hd, kt_.data());
      transpose_head(saved->v.data.data() + off, dim, tokens, hd, vt.data());
      ker.gemm_tn(tokens, tokens, hd, qt.data(), tokens, kt_.data(), tokens, scores.data(), tokens, false);
      for (float& s : scores) s *= scale_factor;
      softmax_rows(scores.data(), attn, tokens, tokens, 1.0f);
      ker.gemm_nt(hd, tokens, tokens, vt.data(), tokens, attn, tokens, ot.data(), tokens, false);
      untranspose_head(ot.data(), tokens, hd, saved->concat.data.data() + off, dim, false);
    }
  }

  Tensor out({batch, tokens, dim});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(bo.value().data.begin(), bo.value().data.end(), out.data.begin() + r * dim);
  }
  ker.gemm_nn(rows, dim, dim, saved->concat.data.data(), dim, wo.value().data.data(), dim,
              out.data.data(), dim, true);

  const bool rg = any_grad({x, wq, bq, wk, bk, wv, bv, wo, bo});
  return g.record(std::move(out), rg, [=](Graph& gr, Var self) {
    const auto& kt = K();
    const float* gy = gr.grad_buffer(self).data();
    if (wo.requires_grad()) {
      kt.gemm_tn(dim, dim, rows, saved->concat.data.data(), dim, gy, dim, gr.grad_buffer(wo).data(), dim, true);
    }
    if (bo.requires_grad()) add_colsum(gy, rows, dim, gr.grad_buffer(bo).data());

    const bool need_inner = any_grad({x, wq, bq, wk, bk, wv, bv});
    if (!need_inner) return;

    std::vector<float> gconcat(rows * dim, 0.0f);
    kt.gemm_nt(rows, dim, dim, gy, dim, wo.value().data.data(), dim, gconcat.data(), dim, false);

    std::vector<float> gq(rows * dim, 0.0f), gk(rows * dim, 0.0f), gv(rows * dim, 0.0f);
    std::vector<float> gattn(tokens * tokens), gscore(tokens * tokens);
    std::vector<float> qt(hd * tokens), kt_(hd * tokens), vt(hd * tokens), gct(hd * tokens), tmp(hd * tokens);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
        const std::size_t off = b * tokens * dim + h * hd;
        const float* attn = saved->attn.data.data() + (b * heads + h) * tokens * tokens;
        transpose_head(saved->q.data.data() + off, dim, tokens, hd, qt.data());
        transpose_head(saved->k.data.data() + off, dim, tokens, hd, kt_.data());
        transpose_head(saved->v.data.data() + off, dim, tokens, hd, vt.data());
        transpose_head(gconcat.data() + off, dim, tokens, hd, gct.data());
        kt.gemm_tn(tokens, tokens, hd, gct.data(), tokens, vt.data(), tokens, gattn.data(), tokens, false);
        kt.gemm_nn(hd, tokens, tokens, gct.data(), tokens, attn, tokens, tmp.data(), tokens, false);
        untranspose_head(tmp.data(), tokens, hd, gv.data() + off, dim, true);
        std::fill(gscore.begin(), gscore.end(), 0.0f);
        softmax_rows_backward(attn, gattn.data(), gscore.data(), tokens, tokens, scale_factor);
        kt.gemm_nt(hd, tokens, tokens, kt_.data(), tokens, gscore.data(), tokens, tmp.data(), tokens, false);
        untranspose_head(tmp.data(), tokens, hd, gq.data() + off, dim, true);
        kt.gemm_nn(hd, tokens, tokens, qt.data(), tokens, gscore.data(), tokens, tmp.data(), tokens, false);
        untranspose_head(tmp.data(), tokens, hd, gk.data() + off, dim, true);
      }
    }

    const float* xd = x.value().data.data();
    auto back_proj = [&](const std::vector<float>& gp, Var w, Var bias) {
      if (x.requires_grad()) {
        kt.gemm_nt(rows, dim, dim, gp.data(), dim, w.value().data.data(), dim, gr.grad_buffer(x).data(), dim, true);
      }
      if (w.requires_grad()) kt.gemm_tn(dim, dim, rows, xd, dim, gp.data(), dim, gr.grad_buffer(w).data(), dim, true);
      if (bias.requires_grad()) add_colsum(gp.data(), rows, dim, gr.grad_buffer(bias).data());
    };
    back_proj(gq, wq, bq);
    back_proj(gk, wk, bk);
    back_proj(gv, wv, bv);
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  return graph_of(a).record(std::move(out), any_grad({a, b}), [a, b](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    if (a.requires_grad()) K().axpy(gy.size(), 1.0f, gy.data(), g.grad_buffer(a).data());
    if (b.requires_grad()) K().axpy(gy.size(), 1.0f, gy.data(), g.grad_buffer(b).data());
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  return graph_of(a).record(std::move(out), any_grad({a, b}), [a, b](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    if (a.requires_grad()) K().axpy(gy.size(), 1.0f, gy.data(), g.grad_buffer(a).data());
    if (b.requires_grad()) K().axpy(gy.size(), -1.0f, gy.data(), g.grad_buffer(b).data());
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  K().mul(out.numel(), a.value().data.data(), b.value().data.data(), out.data.data());
  return graph_of(a).record(std::move(out), any_grad({a, b}), [a, b](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    const std::size_t n = gy.size();
    std::vector<float> tmp(n);
    if (a.requires_grad()) {
      K().mul(n, gy.data(), b.value().data.data(), tmp.data());
      K().axpy(n, 1.0f, tmp.data(), g.grad_buffer(a).data());
    }
    if (b.requires_grad()) {
      K().mul(n, gy.data(), a.value().data.data(), tmp.data());
      K().axpy(n, 1.0f, tmp.data(), g.grad_buffer(b).data());
    }
  });
}

Var scale(Var a, float s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] * s;
  return graph_of(a).record(std::move(out), a.requires_grad(), [a, s](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    K().axpy(gy.size(), s, gy.data(), g.grad_buffer(a).data());
  });
}

Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a.value().numel()) {
    fail(ErrorKind::kDimension, "reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.value().data);
  return graph_of(a).record(std::move(out), a.requires_grad(), [a](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    K().axpy(gy.size(), 1.0f, gy.data(), g.grad_buffer(a).data());
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::kUsage, "concat of zero tensors");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  bool rg = false;
  for (Var p : parts) {
    require_same_graph(parts[0], p);
    if (p.value().rank() != 2 || p.value().rows() != rows) {
      fail(ErrorKind::kDimension, "concat: part " + shape_str(p.shape()) + " vs first part " +
                                      shape_str(parts[0].shape()));
    }
    total += p.value().cols();
    rg = rg || p.requires_grad();
  }
  Tensor out({rows, total});
  std::size_t col = 0;
  for (Var p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.value().data.begin() + r * w, w, out.data.begin() + r * total + col);
    }
    col += w;
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return graph_of(parts[0]).record(std::move(out), rg, [saved, rows, total](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    std::size_t c = 0;
    for (Var p : saved) {
      const std::size_t w = p.value().cols();
      if (p.requires_grad()) {
        auto& gp = g.grad_buffer(p);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += gy[r * total + c + j];
        }
      }
      c += w;
    }
  });
}

Var detach(Var a) { return graph_of(a).constant(a.value()); }

Var sum(Var a) {
  double total = 0.0;
  for (float v : a.value().data) total += v;
  Tensor out({1}, static_cast<float>(total));
  return graph_of(a).record(std::move(out), a.requires_grad(), [a](Graph& g, Var self) {
    const float gy = g.grad_buffer(self)[0];
    for (float& v : g.grad_buffer(a)) v += gy;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().numel();
  double total = 0.0;
  for (float v : a.value().data) total += v;
  Tensor out({1}, static_cast<float>(total / static_cast<double>(n)));
  return graph_of(a).record(std::move(out), a.requires_grad(), [a, n](Graph& g, Var self) {
    const float gy = g.grad_buffer(self)[0] / static_cast<float>(n);
    for (float& v : g.grad_buffer(a)) v += gy;
  });
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), n = av.cols();
  std::vector<double> acc(n, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) acc[j] += av.data[r * n + j];
  }
  Tensor out({1, n});
  for (std::size_t j = 0; j < n; ++j) out.data[j] = static_cast<float>(acc[j] / static_cast<double>(rows));
  return graph_of(a).record(std::move(out), a.requires_grad(), [a, rows, n](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    auto& ga = g.grad_buffer(a);
    const float inv = 1.0f / static_cast<float>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += gy[j] * inv;
    }
  });
}

Var gather_cols(Var a, std::span<const int> index) {
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), n = av.cols();
  if (index.size() != rows) {
    fail(ErrorKind::kDimension, "gather: " + std::to_string(index.size()) + " indices for " +
                                    std::to_string(rows) + " rows");
  }
  Tensor out({rows});
  std::vector<int> idx(index.begin(), index.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n) {
      fail(ErrorKind::kUsage, "gather index " + std::to_string(idx[r]) + " out of range at row " +
                                  std::to_string(r));
    }
    out.data[r] = av.data[r * n + idx[r]];
  }
  return graph_of(a).record(std::move(out), a.requires_grad(), [a, idx, n](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    auto& ga = g.grad_buffer(a);
    for (std::size_t r = 0; r < idx.size(); ++r) ga[r * n + idx[r]] += gy[r];
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  const std::size_t rows = lv.rows(), n = lv.cols();
  if (labels.size() != rows) {
    fail(ErrorKind::kDimension, "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(rows) + " rows");
  }
  std::vector<int> y(labels.begin(), labels.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (y[r] < 0 || static_cast<std::size_t>(y[r]) >= n) {
      fail(ErrorKind::kData, "label " + std::to_string(y[r]) + " out of range [0," + std::to_string(n) +
                                 ") at sample " + std::to_string(r));
    }
  }
  auto probs = std::make_shared<std::vector<float>>(rows * n);
  softmax_rows(lv.data.data(), probs->data(), rows, n, 1.0f);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = lv.data.data() + r * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(x[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(static_cast<double>(x[j]) - mx);
    total += (mx + std::log(s)) - x[y[r]];
  }
  Tensor out({1}, static_cast<float>(total / static_cast<double>(rows)));
  return graph_of(logits).record(std::move(out), logits.requires_grad(), [logits, y, probs, rows, n](Graph& g, Var self) {
    const float gy = g.grad_buffer(self)[0] / static_cast<float>(rows);
    auto& gl = g.grad_buffer(logits);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < n; ++j) {
        const float target = static_cast<int>(j) == y[r] ? 1.0f : 0.0f;
        gl[r * n + j] += gy * ((*probs)[r * n + j] - target);
      }
    }
  });
}

Var kl_rows(Var p, Var q, float floor) {
  require_same_shape("kl_divergence", p, q);
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  const std::size_t rows = pv.rows(), n = pv.cols();
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double pj = pv.data[r * n + j], qj = qv.data[r * n + j];
      acc += pj * (std::log(pj + floor) - std::log(qj + floor));
    }
    out.data[r] = static_cast<float>(acc);
  }
  return graph_of(p).record(std::move(out), any_grad({p, q}), [p, q, rows, n, floor](Graph& g, Var self) {
    const auto& gy = g.grad_buffer(self);
    const auto& pd = p.value().data;
    const auto& qd = q.value().data;
    if (p.requires_grad()) {
      auto& gp = g.grad_buffer(p);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
          const double pj = pd[r * n + j], qj = qd[r * n + j];
          const double d = std::log(pj + floor) - std::log(qj + floor) + pj / (pj + floor);
          gp[r * n + j] += static_cast<float>(gy[r] * d);
        }
      }
    }
    if (q.requires_grad()) {
      auto& gq = g.grad_buffer(q);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
          const double pj = pd[r * n + j], qj = qd[r * n + j];
          gq[r * n + j] += static_cast<float>(-gy[r] * pj / (qj + floor));
        }
      }
    }
  });
}

Var cv_squared(Var a) {
  const auto& d = a.value().data;
  const double n = static_cast<double>(d.size());
  double mu = 0.0;
  for (float v : d) mu += v;
  mu /= n;
  double var = 0.0;
  for (float v : d) var += (v - mu) * (v - mu);
  var /= n;
  if (mu == 0.0) fail(ErrorKind::kInvariant, "coefficient of variation of a zero-mean vector");
  Tensor out({1}, static_cast<float>(var / (mu * mu)));
  return graph_of(a).record(std::move(out), a.requires_grad(), [a, mu, var, n](Graph& g, Var self) {
    const double gy = g.grad_buffer(self)[0];
    const auto& ad = a.value().data;
    auto& ga = g.grad_buffer(a);
    const double c = 2.0 / (n * mu * mu);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga[i] += static_cast<float>(gy * c * ((ad[i] - mu) - var / mu));
    }
  });
}

}  // namespace ops
}  // namespace mstd
