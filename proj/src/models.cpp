#include "mstd/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mstd/error.hpp"
#include "mstd/rng.hpp"

namespace mstd {

namespace {

Tensor uniform_tensor(Shape shape, float bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (float& v : t.data) v = dist(rng);
  return t;
}

}  // namespace

Linear::Linear(const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  weight = Parameter(prefix + "/weight", uniform_tensor({in, out}, bound, rng));
  bias = Parameter(prefix + "/bias", uniform_tensor({out}, bound, rng));
}

Var Linear::forward(Graph& g, Var x) { return ops::linear(x, g.param(weight), g.param(bias)); }

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Encoder build_encoder(const std::string& prefix, std::size_t in_dim, const std::vector<int>& hidden,
                      std::mt19937_64& rng) {
  if (hidden.empty()) fail(ErrorKind::kConfig, "encoder needs at least one hidden layer");
  Encoder enc;
  std::size_t in = in_dim;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    if (hidden[l] <= 0) fail(ErrorKind::kConfig, "hidden width must be positive");
    enc.layers.emplace_back(prefix + "/fc" + std::to_string(l), in, static_cast<std::size_t>(hidden[l]), rng);
    in = static_cast<std::size_t>(hidden[l]);
  }
  return enc;
}

void ModalityModel::check_tap(int tap) const {
  if (tap < 0 || static_cast<std::size_t>(tap) >= layers.size()) {
    fail(ErrorKind::kConfig, "model m" + std::to_string(modality_index) + " has no tap " +
                                 std::to_string(tap) + " (taps 0.." + std::to_string(layers.size() - 1) + ")");
  }
}

std::size_t ModalityModel::tap_dim(int tap) const {
  check_tap(tap);
  return layers[static_cast<std::size_t>(tap)].out_dim();
}

std::string ModalityModel::tap_id(int tap) const {
  check_tap(tap);
  return "m" + std::to_string(modality_index) + "/fc" + std::to_string(tap);
}

Var ModalityModel::forward_until(Graph& g, std::span<const Var> inputs, int tap) {
  check_tap(tap);
  Var h;
  if (is_multimodal()) {
    if (inputs.size() != branches.size()) {
      fail(ErrorKind::kDimension, "fusion model expects " + std::to_string(branches.size()) +
                                      " modality inputs, got " + std::to_string(inputs.size()));
    }
    std::vector<Var> encoded;
    encoded.reserve(branches.size());
    for (std::size_t m = 0; m < branches.size(); ++m) {
      Var e = inputs[m];
      for (Linear& layer : branches[m].layers) e = ops::relu(layer.forward(g, e));
      encoded.push_back(e);
    }
    h = ops::concat_cols(encoded);
  } else {
    const std::size_t slot = static_cast<std::size_t>(modality_index - 1);
    if (slot >= inputs.size()) {
      fail(ErrorKind::kDimension, "missing input for modality " + std::to_string(modality_index));
    }
    h = inputs[slot];
  }
  for (int l = 0; l <= tap; ++l) h = ops::relu(layers[static_cast<std::size_t>(l)].forward(g, h));
  return h;
}

Var ModalityModel::forward_from(Graph& g, Var feature, int tap) {
  check_tap(tap);
  Var h = feature;
  for (std::size_t l = static_cast<std::size_t>(tap) + 1; l < layers.size(); ++l) {
    h = ops::relu(layers[l].forward(g, h));
  }
  return head.front().forward(g, h);
}

Var ModalityModel::forward(Graph& g, std::span<const Var> inputs) {
  const int last = static_cast<int>(layers.size()) - 1;
  return forward_from(g, forward_until(g, inputs, last), last);
}

std::vector<Parameter*> ModalityModel::parameters() {
  std::vector<Parameter*> out;
  for (Encoder& e : branches) {
    for (Linear& l : e.layers) l.collect(out);
  }
  for (Linear& l : layers) l.collect(out);
  head.front().collect(out);
  return out;
}

void ModalityModel::set_frozen(bool frozen) {
  for (Parameter* p : parameters()) p->frozen = frozen;
}

ModalityModel build_unimodal(int modality_index, std::size_t modality_dim, const std::vector<int>& hidden,
                             std::size_t classes, std::mt19937_64& rng) {
  if (modality_index < 1) fail(ErrorKind::kConfig, "unimodal models use modality index >= 1");
  const std::string prefix = "m" + std::to_string(modality_index);
  ModalityModel model;
  model.modality_index = modality_index;
  model.layers = build_encoder(prefix, modality_dim, hidden, rng).layers;
  model.head.emplace_back(prefix + "/head", model.layers.back().out_dim(), classes, rng);
  return model;
}

ModalityModel build_multimodal(std::vector<Encoder> encoders, const std::vector<int>& fusion_hidden,
                               std::size_t classes, std::mt19937_64& rng) {
  if (encoders.size() < 2) fail(ErrorKind::kConfig, "fusion model needs at least 2 modality encoders");
  ModalityModel model;
  model.modality_index = 0;
  std::size_t width = 0;
  for (const Encoder& e : encoders) width += e.out_dim();
  model.branches = std::move(encoders);
  model.layers = build_encoder("m0/fusion", width, fusion_hidden, rng).layers;
  model.head.emplace_back("m0/head", model.layers.back().out_dim(), classes, rng);
  return model;
}

ModalityModel build_fusion_model(const std::vector<int>& modality_dims, const std::vector<int>& hidden,
                                 const std::vector<int>& fusion_hidden, std::size_t classes,
                                 std::mt19937_64& rng) {
  std::vector<Encoder> encoders;
  for (std::size_t m = 0; m < modality_dims.size(); ++m) {
    encoders.push_back(build_encoder("m0/enc" + std::to_string(m + 1),
                                     static_cast<std::size_t>(modality_dims[m]), hidden, rng));
  }
  return build_multimodal(std::move(encoders), fusion_hidden, classes, rng);
}

std::vector<int> default_taps(const ModalityModel& model) {
  const int n = static_cast<int>(model.tap_count());
  std::vector<int> taps{(n - 1) / 2, n - 1};
  taps.erase(std::unique(taps.begin(), taps.end()), taps.end());
  return taps;
}

MultiHeadAttention::MultiHeadAttention(const std::string& prefix, std::size_t dim, int heads_,
                                       std::mt19937_64& rng)
    : q(prefix + "/q", dim, dim, rng),
      k(prefix + "/k", dim, dim, rng),
      v(prefix + "/v", dim, dim, rng),
      o(prefix + "/o", dim, dim, rng),
      heads(heads_) {
  if (heads <= 0 || dim % static_cast<std::size_t>(heads) != 0) {
    fail(ErrorKind::kConfig, "attention dim " + std::to_string(dim) + " not divisible by " +
                                 std::to_string(heads) + " heads");
  }
}

Var MultiHeadAttention::forward(Graph& g, Var x) {
  return ops::multi_head_self_attention(x, heads, g.param(q.weight), g.param(q.bias), g.param(k.weight),
                                        g.param(k.bias), g.param(v.weight), g.param(v.bias),
                                        g.param(o.weight), g.param(o.bias));
}

void MultiHeadAttention::collect(std::vector<Parameter*>& out) {
  q.collect(out);
  k.collect(out);
  v.collect(out);
  o.collect(out);
}

MaskNet::MaskNet(const std::string& prefix, MaskNetConfig cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (cfg.d_m <= 0 || cfg.d_h <= 0) fail(ErrorKind::kConfig, "MaskNet dimensions must be positive");
  if (cfg.heads <= 0 || cfg.d_h % cfg.heads != 0) {
    fail(ErrorKind::kConfig, "MaskNet hidden dim " + std::to_string(cfg.d_h) + " not divisible by " +
                                 std::to_string(cfg.heads) + " heads");
  }
  const auto dm = static_cast<std::size_t>(cfg.d_m);
  const auto dh = static_cast<std::size_t>(cfg.d_h);
  projector_ = Linear(prefix + "/proj", dm, dm * dh, rng);
  attention_ = MultiHeadAttention(prefix + "/attn", dh, cfg.heads, rng);
  output_ = Linear(prefix + "/out", dh, 1, rng);
}

Var MaskNet::mask(Graph& g, Var z) {
  const Tensor& zv = z.value();
  const auto dm = static_cast<std::size_t>(cfg_.d_m);
  const auto dh = static_cast<std::size_t>(cfg_.d_h);
  if (zv.rank() != 2 || zv.cols() != dm) {
    fail(ErrorKind::kConfig, "MaskNet built for d_m=" + std::to_string(dm) + " got feature " +
                                 shape_str(zv.shape));
  }
  const std::size_t batch = zv.rows();
  Var tokens = ops::reshape(projector_.forward(g, z), {batch, dm, dh});
  Var attended = ops::reshape(attention_.forward(g, tokens), {batch * dm, dh});
  Var logits = ops::reshape(output_.forward(g, attended), {batch, dm});
  return ops::sigmoid(logits);
}

Var MaskNet::forward(Graph& g, Var z) { return ops::mul(z, mask(g, z)); }

std::vector<Parameter*> MaskNet::parameters() {
  std::vector<Parameter*> out;
  projector_.collect(out);
  attention_.collect(out);
  output_.collect(out);
  return out;
}

void MaskNet::zero_output_layer() {
  std::fill(output_.weight.value.data.begin(), output_.weight.value.data.end(), 0.0f);
  std::fill(output_.bias.value.data.begin(), output_.bias.value.data.end(), 0.0f);
}

GateNet::GateNet(std::size_t classes, int teachers, int hidden_mult, std::mt19937_64& rng)
    : teachers_(teachers) {
  if (teachers < 2) fail(ErrorKind::kConfig, "routing needs at least 2 teachers, got " + std::to_string(teachers));
  if (hidden_mult <= 0) fail(ErrorKind::kConfig, "GateNet hidden multiplier must be positive");
  const auto width = static_cast<std::size_t>(hidden_mult * teachers);
  hidden_ = Linear("gate/fc0", classes, width, rng);
  output_ = Linear("gate/fc1", width, static_cast<std::size_t>(teachers), rng);
}

Var GateNet::forward(Graph& g, Var logits) {
  return ops::softmax(output_.forward(g, ops::relu(hidden_.forward(g, logits))), 1.0f);
}

std::vector<Parameter*> GateNet::parameters() {
  std::vector<Parameter*> out;
  hidden_.collect(out);
  output_.collect(out);
  return out;
}

Var SpecializedTeacher::forward(Graph& g, std::span<const Var> inputs) {
  if (!masknet) return base->forward(g, inputs);
  Var z = base->forward_until(g, inputs, tap);
  return base->forward_from(g, masknet->forward(g, z), tap);
}

Var SpecializedTeacher::forward_with_mask(Graph& g, std::span<const Var> inputs, Var mask) {
  Var z = base->forward_until(g, inputs, tap);
  return base->forward_from(g, ops::mul(z, mask), tap);
}

std::string SpecializedTeacher::label() const { return source_modality == 0 ? "MM" : "CM"; }

SpecializedTeacher specialize(ModalityModel& base, int tap, MaskNetConfig cfg, int teacher_id,
                              std::mt19937_64& rng) {
  cfg.d_m = static_cast<int>(base.tap_dim(tap));
  SpecializedTeacher t;
  t.id = teacher_id;
  t.source_modality = base.modality_index;
  t.base = &base;
  t.tap = tap;
  t.masknet.emplace("mn" + std::to_string(teacher_id), cfg, rng);
  base.set_frozen(true);
  return t;
}

int delta(int j, std::span<const int> tap_counts, int target) {
  int cumulative = 0;
  for (std::size_t i = 0; i < tap_counts.size(); ++i) {
    if (static_cast<int>(i) == target) continue;
    cumulative += tap_counts[i];
    if (j >= 1 && j <= cumulative) return static_cast<int>(i);
  }
  fail(ErrorKind::kUsage, "teacher index " + std::to_string(j) + " outside 1.." + std::to_string(cumulative));
}

TeacherRegistry build_registry(std::vector<ModalityModel>& members, int target,
                               const std::vector<std::vector<int>>& taps, const MaskNetConfig& mask_cfg,
                               std::uint64_t seed, bool with_masks) {
  const int last = static_cast<int>(members.size()) - 1;
  if (target < 1 || target > last) {
    fail(ErrorKind::kConfig, "target modality must be in 1.." + std::to_string(last) + ", got " +
                                 std::to_string(target));
  }
  if (with_masks && taps.size() != members.size()) {
    fail(ErrorKind::kConfig, "tap lists for " + std::to_string(taps.size()) + " of " +
                                 std::to_string(members.size()) + " members");
  }
  TeacherRegistry reg;
  reg.target = target;
  reg.tap_counts.assign(members.size(), 0);
  int next_id = 1;
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (static_cast<int>(i) == target) continue;
    ModalityModel& base = members[i];
    base.set_frozen(true);
    if (!with_masks) {
      SpecializedTeacher t;
      t.id = next_id++;
      t.source_modality = base.modality_index;
      t.base = &base;
      t.tap = static_cast<int>(base.tap_count()) - 1;
      reg.teachers.push_back(std::move(t));
      reg.tap_counts[i] = 1;
      continue;
    }
    for (int tap : taps[i]) {
      auto rng = make_stream(seed, "init/masknet/" + std::to_string(next_id));
      reg.teachers.push_back(specialize(base, tap, mask_cfg, next_id, rng));
      ++next_id;
    }
    reg.tap_counts[i] = static_cast<int>(taps[i].size());
  }
  if (reg.teachers.empty()) fail(ErrorKind::kConfig, "teacher registry is empty");
  return reg;
}

std::vector<int> topk_select(std::span<const float> confidence, int k) {
  const int n = static_cast<int>(confidence.size());
  if (k < 1 || k > n) {
    fail(ErrorKind::kConfig, "top-k with k=" + std::to_string(k) + " over " + std::to_string(n) + " teachers");
  }
  std::vector<int> idx(confidence.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return confidence[static_cast<std::size_t>(a)] > confidence[static_cast<std::size_t>(b)]; });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

}  // namespace mstd
