#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mstd/autodiff.hpp"

namespace mstd {

/// y = xW + b, W uniform in +-1/sqrt(fan_in).
struct Linear {
  Parameter weight;
  Parameter bias;

  Linear() = default;
  Linear(const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng);

  std::size_t in_dim() const { return weight.value.dim(0); }
  std::size_t out_dim() const { return weight.value.dim(1); }
  Var forward(Graph& g, Var x);
  void collect(std::vector<Parameter*>& out);
};

/// Headless ReLU MLP used as a modality branch of the fusion model.
struct Encoder {
  std::vector<Linear> layers;
  std::size_t out_dim() const { return layers.back().out_dim(); }
};

Encoder build_encoder(const std::string& prefix, std::size_t in_dim, const std::vector<int>& hidden,
                      std::mt19937_64& rng);

/// Network for modality index i (0 = fusion model over all modalities).
///
/// Unimodal: input -> [Linear+ReLU]* -> head.
/// Multimodal: per-modality encoders -> concat -> [Linear+ReLU]* -> head.
/// Tap l is the post-ReLU output of layers[l]; for the fusion model only
/// post-fusion layers are tappable.
class ModalityModel {
 public:
  int modality_index = 0;
  std::vector<Encoder> branches;
  std::vector<Linear> layers;
  std::vector<Linear> head;  // exactly one element; vector keeps the address stable

  std::size_t classes() const { return head.front().out_dim(); }
  std::size_t tap_count() const { return layers.size(); }
  std::size_t tap_dim(int tap) const;
  std::string tap_id(int tap) const;
  bool is_multimodal() const { return modality_index == 0; }

  /// `inputs[m - 1]` is the batch of modality m, for all modalities.
  Var forward(Graph& g, std::span<const Var> inputs);
  Var forward_until(Graph& g, std::span<const Var> inputs, int tap);
  Var forward_from(Graph& g, Var feature, int tap);

  std::vector<Parameter*> parameters();
  void set_frozen(bool frozen);

 private:
  void check_tap(int tap) const;
};

ModalityModel build_unimodal(int modality_index, std::size_t modality_dim, const std::vector<int>& hidden,
                             std::size_t classes, std::mt19937_64& rng);
ModalityModel build_multimodal(std::vector<Encoder> encoders, const std::vector<int>& fusion_hidden,
                               std::size_t classes, std::mt19937_64& rng);

/// Fusion model with one encoder per modality, named m0/enc<m>.
ModalityModel build_fusion_model(const std::vector<int>& modality_dims, const std::vector<int>& hidden,
                                 const std::vector<int>& fusion_hidden, std::size_t classes,
                                 std::mt19937_64& rng);

/// Middle and penultimate hidden layers, deduplicated.
std::vector<int> default_taps(const ModalityModel& model);

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& prefix, std::size_t dim, int heads, std::mt19937_64& rng);
  Var forward(Graph& g, Var x);
  void collect(std::vector<Parameter*>& out);
};

struct MaskNetConfig {
  int d_m = 0;
  int d_h = 12;
  int heads = 3;
};

/// Soft feature mask: sigmoid(Linear(MHSA(Projector(Z)))) applied to Z by
/// Hadamard product. The projector lifts each of the d_m features to a
/// d_h-dim token; attention runs across the d_m tokens.
class MaskNet {
 public:
  MaskNet() = default;
  MaskNet(const std::string& prefix, MaskNetConfig cfg, std::mt19937_64& rng);

  const MaskNetConfig& config() const { return cfg_; }
  Var mask(Graph& g, Var z);
  Var forward(Graph& g, Var z);
  std::vector<Parameter*> parameters();
  /// Zeroes the final token->scalar layer, making the mask exactly 0.5.
  void zero_output_layer();

 private:
  MaskNetConfig cfg_;
  Linear projector_;
  MultiHeadAttention attention_;
  Linear output_;
};

/// Router: ReLU MLP over student logits, softmax over N teachers.
class GateNet {
 public:
  GateNet() = default;
  GateNet(std::size_t classes, int teachers, int hidden_mult, std::mt19937_64& rng);

  int teachers() const { return teachers_; }
  Var forward(Graph& g, Var logits);
  std::vector<Parameter*> parameters();

 private:
  int teachers_ = 0;
  Linear hidden_;
  Linear output_;
};

/// A frozen base teacher with its own MaskNet at one tap. Without a MaskNet
/// the teacher is the plain base model.
struct SpecializedTeacher {
  int id = 0;  // 1-based
  int source_modality = 0;
  ModalityModel* base = nullptr;
  int tap = 0;
  std::optional<MaskNet> masknet;

  Var forward(Graph& g, std::span<const Var> inputs);
  /// Base forward with `mask` multiplied into the tapped feature.
  Var forward_with_mask(Graph& g, std::span<const Var> inputs, Var mask);
  /// "MM" for the fusion model, "CM" otherwise.
  std::string label() const;
};

SpecializedTeacher specialize(ModalityModel& base, int tap, MaskNetConfig cfg, int teacher_id,
                              std::mt19937_64& rng);

/// Source modality of teacher j (1-based): teachers are laid out in
/// contiguous blocks by ascending modality, skipping the target.
int delta(int j, std::span<const int> tap_counts, int target);

struct TeacherRegistry {
  int target = 1;
  /// Teachers per modality index 0..M; the target entry is 0.
  std::vector<int> tap_counts;
  std::vector<SpecializedTeacher> teachers;

  int size() const { return static_cast<int>(teachers.size()); }
  int delta(int j) const { return mstd::delta(j, tap_counts, target); }
  SpecializedTeacher& teacher(int j) { return teachers.at(static_cast<std::size_t>(j - 1)); }
};

/// One teacher per (non-target member, tap), in delta order. `taps[i]` lists
/// the taps of member i. With `with_masks` false, one unmasked teacher per
/// non-target member instead.
TeacherRegistry build_registry(std::vector<ModalityModel>& members, int target,
                               const std::vector<std::vector<int>>& taps, const MaskNetConfig& mask_cfg,
                               std::uint64_t seed, bool with_masks);

/// Indices of the k largest entries, descending, ties to the lower index.
std::vector<int> topk_select(std::span<const float> confidence, int k);

}  // namespace mstd
