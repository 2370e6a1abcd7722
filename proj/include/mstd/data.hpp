#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mstd/tensor.hpp"

namespace mstd {

/// Paired-modality Gaussian prototype data.
///
/// Each class owns a shared latent prototype and, per modality, a private
/// one. A sample draws a latent offset eta shared by all of its modalities,
/// N(0, (shared_jitter * noise_sigma)^2), and a private offset xi_i per
/// modality, N(0, (private_jitter * noise_sigma)^2). Modality i sees
///   informativeness[i] * (shared_factor * A_i (mu_y + eta)
///                         + (1 - shared_factor) * B_i (nu_iy + xi_i))
///   + noise_sigma * eps_i
/// with fixed random projections A_i, B_i. Both jitters default to 0.
struct SyntheticSpec {
  int classes = 4;
  int samples = 2000;
  std::vector<int> dims{32, 32};
  std::vector<float> informativeness{1.0f, 0.3f};
  float shared_factor = 0.7f;
  float noise_sigma = 0.5f;
  int latent_dim = 8;
  float prototype_scale = 1.0f;
  float shared_jitter = 0.0f;
  float private_jitter = 0.0f;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class SplitKind { kTrain, kVal, kTest };
SplitKind parse_split(const std::string& name);
const char* to_string(SplitKind s);

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;

  const std::vector<int>& of(SplitKind s) const;
};

struct DatasetBundle {
  int classes = 0;
  /// modalities[i] holds modality i+1 as [samples, dim_i].
  std::vector<Tensor> modalities;
  std::vector<int> labels;
  SplitIndices split;

  int modality_count() const { return static_cast<int>(modalities.size()); }
  int samples() const { return static_cast<int>(labels.size()); }
  std::vector<int> dims() const;
};

DatasetBundle generate(const SyntheticSpec& spec);

/// Stratified split; every class lands in every part. Totals match
/// round(ratio * samples) up to the one-per-class minimum.
void split(DatasetBundle& bundle, std::array<double, 3> ratios, std::uint64_t seed);
inline void split(DatasetBundle& bundle, std::uint64_t seed) { split(bundle, {0.6, 0.2, 0.2}, seed); }

/// MSTD-DATA: "MSTDDATA", u16 version, u8 M, u16 classes, u32 samples,
/// u32 dims[M], u16 labels[samples], f32 payload per modality. Little endian.
std::vector<std::uint8_t> encode_dataset(const DatasetBundle& bundle);
DatasetBundle decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const std::filesystem::path& path, const DatasetBundle& bundle);
DatasetBundle load_external(const std::filesystem::path& path);

/// Rows `index` of a [rows, cols] tensor.
Tensor gather_rows(const Tensor& t, std::span<const int> index);
std::vector<int> gather_labels(const std::vector<int>& labels, std::span<const int> index);

}  // namespace mstd
