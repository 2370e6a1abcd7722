#include "mstd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "mstd/bytes.hpp"
#include "mstd/error.hpp"
#include "mstd/rng.hpp"

namespace mstd {

namespace {
constexpr char kDataMagic[8] = {'M', 'S', 'T', 'D', 'D', 'A', 'T', 'A'};
constexpr std::uint16_t kDataVersion = 1;
}  // namespace

void SyntheticSpec::validate() const {
  const auto m = dims.size();
  if (m < 2) fail(ErrorKind::kConfig, "synthetic data needs at least 2 modalities");
  if (informativeness.size() != m) {
    fail(ErrorKind::kConfig, "informativeness has " + std::to_string(informativeness.size()) +
                                 " entries for " + std::to_string(m) + " modalities");
  }
  if (classes < 2) fail(ErrorKind::kConfig, "need at least 2 classes");
  if (classes > 65535) fail(ErrorKind::kConfig, "too many classes");
  if (samples < classes) fail(ErrorKind::kConfig, "fewer samples than classes");
  for (int d : dims) {
    if (d <= 0) fail(ErrorKind::kConfig, "modality dims must be positive");
  }
  for (float v : informativeness) {
    if (!(v >= 0.0f && v <= 1.0f)) fail(ErrorKind::kConfig, "informativeness must lie in [0,1]");
  }
  if (!(shared_factor >= 0.0f && shared_factor <= 1.0f)) fail(ErrorKind::kConfig, "shared_factor must lie in [0,1]");
  if (!(noise_sigma >= 0.0f)) fail(ErrorKind::kConfig, "noise_sigma must be non-negative");
  if (latent_dim <= 0) fail(ErrorKind::kConfig, "latent_dim must be positive");
  if (!(prototype_scale > 0.0f)) fail(ErrorKind::kConfig, "prototype_scale must be positive");
  if (!(shared_jitter >= 0.0f && private_jitter >= 0.0f)) fail(ErrorKind::kConfig, "latent jitter must be non-negative");
}

SplitKind parse_split(const std::string& name) {
  if (name == "train") return SplitKind::kTrain;
  if (name == "val") return SplitKind::kVal;
  if (name == "test") return SplitKind::kTest;
  fail(ErrorKind::kConfig, "unknown split '" + name + "'");
}

const char* to_string(SplitKind s) {
  switch (s) {
    case SplitKind::kTrain: return "train";
    case SplitKind::kVal: return "val";
    case SplitKind::kTest: return "test";
  }
  return "?";
}

const std::vector<int>& SplitIndices::of(SplitKind s) const {
  switch (s) {
    case SplitKind::kTrain: return train;
    case SplitKind::kVal: return val;
    case SplitKind::kTest: return test;
  }
  return train;
}

std::vector<int> DatasetBundle::dims() const {
  std::vector<int> d;
  for (const Tensor& t : modalities) d.push_back(static_cast<int>(t.cols()));
  return d;
}

DatasetBundle generate(const SyntheticSpec& spec) {
  spec.validate();
  const int m = static_cast<int>(spec.dims.size());
  const int latent = spec.latent_dim;
  auto proto_rng = make_stream(spec.seed, "data/prototypes");
  std::normal_distribution<float> normal(0.0f, 1.0f);

  auto draw = [&](std::mt19937_64& rng, std::size_t n, float s) {
    std::vector<float> v(n);
    for (float& x : v) x = s * normal(rng);
    return v;
  };
  const auto c = static_cast<std::size_t>(spec.classes);
  const auto l = static_cast<std::size_t>(latent);
  const std::vector<float> shared_proto = draw(proto_rng, c * l, spec.prototype_scale);
  std::vector<std::vector<float>> private_proto, shared_proj, private_proj;
  const float proj_scale = 1.0f / std::sqrt(static_cast<float>(latent));
  for (int i = 0; i < m; ++i) {
    const auto d = static_cast<std::size_t>(spec.dims[static_cast<std::size_t>(i)]);
    private_proto.push_back(draw(proto_rng, c * l, spec.prototype_scale));
    shared_proj.push_back(draw(proto_rng, d * l, proj_scale));
    private_proj.push_back(draw(proto_rng, d * l, proj_scale));
  }

  DatasetBundle bundle;
  bundle.classes = spec.classes;
  const auto n = static_cast<std::size_t>(spec.samples);
  bundle.labels.resize(n);
  for (std::size_t s = 0; s < n; ++s) bundle.labels[s] = static_cast<int>(s % c);
  auto label_rng = make_stream(spec.seed, "data/labels");
  std::shuffle(bundle.labels.begin(), bundle.labels.end(), label_rng);

  for (int i = 0; i < m; ++i) {
    bundle.modalities.emplace_back(Shape{n, static_cast<std::size_t>(spec.dims[static_cast<std::size_t>(i)])});
  }
  auto sample_rng = make_stream(spec.seed, "data/samples");
  const float sf = spec.shared_factor;
  const float shared_sigma = spec.shared_jitter * spec.noise_sigma;
  const float private_sigma = spec.private_jitter * spec.noise_sigma;
  std::vector<float> shared_latent(l), private_latent(l);
  for (std::size_t s = 0; s < n; ++s) {
    const auto y = static_cast<std::size_t>(bundle.labels[s]);
    for (std::size_t k = 0; k < l; ++k) {
      shared_latent[k] = shared_proto[y * l + k] + shared_sigma * normal(sample_rng);
    }
    for (int i = 0; i < m; ++i) {
      const auto ii = static_cast<std::size_t>(i);
      for (std::size_t k = 0; k < l; ++k) {
        private_latent[k] = private_proto[ii][y * l + k] + private_sigma * normal(sample_rng);
      }
      Tensor& x = bundle.modalities[ii];
      const std::size_t d = x.cols();
      const float inf = spec.informativeness[ii];
      for (std::size_t j = 0; j < d; ++j) {
        float a = 0.0f, b = 0.0f;
        for (std::size_t k = 0; k < l; ++k) {
          a += shared_proj[ii][j * l + k] * shared_latent[k];
          b += private_proj[ii][j * l + k] * private_latent[k];
        }
        x.data[s * d + j] = inf * (sf * a + (1.0f - sf) * b) + spec.noise_sigma * normal(sample_rng);
      }
    }
  }
  return bundle;
}

void split(DatasetBundle& bundle, std::array<double, 3> ratios, std::uint64_t seed) {
  const double total_ratio = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total_ratio - 1.0) > 1e-6) fail(ErrorKind::kConfig, "split ratios must sum to 1");
  for (double r : ratios) {
    if (!(r > 0.0)) fail(ErrorKind::kConfig, "split ratios must be positive");
  }
  const int classes = bundle.classes;
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(classes));
  for (int s = 0; s < bundle.samples(); ++s) by_class[static_cast<std::size_t>(bundle.labels[static_cast<std::size_t>(s)])].push_back(s);
  for (int k = 0; k < classes; ++k) {
    if (by_class[static_cast<std::size_t>(k)].size() < 3) {
      fail(ErrorKind::kConfig, "class " + std::to_string(k) + " has " +
                                   std::to_string(by_class[static_cast<std::size_t>(k)].size()) +
                                   " samples; need at least 3 to split");
    }
  }

  // Per-class val/test quotas: floor of the proportional share, then the
  // remaining units go to the largest fractional remainders.
  auto allocate = [&](double ratio) {
    std::vector<int> quota(static_cast<std::size_t>(classes));
    std::vector<std::pair<double, int>> remainders;
    int assigned = 0;
    for (int k = 0; k < classes; ++k) {
      const double exact = ratio * static_cast<double>(by_class[static_cast<std::size_t>(k)].size());
      quota[static_cast<std::size_t>(k)] = static_cast<int>(std::floor(exact));
      assigned += quota[static_cast<std::size_t>(k)];
      remainders.emplace_back(exact - std::floor(exact), k);
    }
    const int target = static_cast<int>(std::lround(ratio * bundle.samples()));
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; r < remainders.size() && assigned < target; ++r, ++assigned) {
      ++quota[static_cast<std::size_t>(remainders[r].second)];
    }
    for (int& q : quota) q = std::max(q, 1);
    return quota;
  };
  const std::vector<int> val_quota = allocate(ratios[1]);
  const std::vector<int> test_quota = allocate(ratios[2]);

  auto rng = make_stream(seed, "split");
  SplitIndices out;
  for (int k = 0; k < classes; ++k) {
    std::vector<int>& idx = by_class[static_cast<std::size_t>(k)];
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto nv = static_cast<std::size_t>(val_quota[static_cast<std::size_t>(k)]);
    const auto nt = static_cast<std::size_t>(test_quota[static_cast<std::size_t>(k)]);
    if (nv + nt >= idx.size()) fail(ErrorKind::kConfig, "class " + std::to_string(k) + " too small to split");
    out.val.insert(out.val.end(), idx.begin(), idx.begin() + static_cast<long>(nv));
    out.test.insert(out.test.end(), idx.begin() + static_cast<long>(nv), idx.begin() + static_cast<long>(nv + nt));
    out.train.insert(out.train.end(), idx.begin() + static_cast<long>(nv + nt), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  bundle.split = std::move(out);
}

std::vector<std::uint8_t> encode_dataset(const DatasetBundle& bundle) {
  const int m = bundle.modality_count();
  if (m < 1 || m > 255) fail(ErrorKind::kFormat, "modality count must fit in u8");
  ByteWriter w;
  w.raw(kDataMagic, sizeof kDataMagic);
  w.u16(kDataVersion);
  w.u8(static_cast<std::uint8_t>(m));
  w.u16(static_cast<std::uint16_t>(bundle.classes));
  w.u32(static_cast<std::uint32_t>(bundle.samples()));
  for (const Tensor& t : bundle.modalities) w.u32(static_cast<std::uint32_t>(t.cols()));
  for (int y : bundle.labels) w.u16(static_cast<std::uint16_t>(y));
  for (const Tensor& t : bundle.modalities) {
    for (float v : t.data) w.f32(v);
  }
  return w.take();
}

DatasetBundle decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kDataMagic, sizeof magic) != 0) {
    fail(ErrorKind::kFormat, "bad magic at byte offset 0 (expected MSTDDATA)");
  }
  const std::size_t version_at = r.offset();
  const std::uint16_t version = r.u16();
  if (version != kDataVersion) {
    fail(ErrorKind::kFormat, "unsupported version " + std::to_string(version) + " at byte offset " +
                                 std::to_string(version_at));
  }
  const int m = r.u8();
  const int classes = r.u16();
  const std::uint32_t samples = r.u32();
  if (m < 1) fail(ErrorKind::kFormat, "zero modalities at byte offset 10");
  std::vector<std::uint32_t> dims(static_cast<std::size_t>(m));
  for (auto& d : dims) {
    const std::size_t at = r.offset();
    d = r.u32();
    if (d == 0) fail(ErrorKind::kFormat, "zero modality dim at byte offset " + std::to_string(at));
  }
  std::uint64_t payload = 2ULL * samples;
  for (auto d : dims) payload += 4ULL * samples * d;
  if (r.remaining() < payload) {
    fail(ErrorKind::kFormat, "truncated payload: header at byte offset " + std::to_string(r.offset()) +
                                 " declares " + std::to_string(payload) + " bytes, " +
                                 std::to_string(r.remaining()) + " present");
  }
  DatasetBundle bundle;
  bundle.classes = classes;
  bundle.labels.resize(samples);
  for (std::uint32_t s = 0; s < samples; ++s) {
    const std::size_t at = r.offset();
    const int y = r.u16();
    if (y >= classes) {
      fail(ErrorKind::kFormat, "label " + std::to_string(y) + " >= classes " + std::to_string(classes) +
                                   " at sample " + std::to_string(s) + " (byte offset " + std::to_string(at) + ")");
    }
    bundle.labels[s] = y;
  }
  for (auto d : dims) {
    Tensor t(Shape{samples, d});
    for (float& v : t.data) v = r.f32();
    bundle.modalities.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    fail(ErrorKind::kFormat, "trailing bytes after payload at byte offset " + std::to_string(r.offset()));
  }
  return bundle;
}

void save_dataset(const std::filesystem::path& path, const DatasetBundle& bundle) {
  write_file(path, encode_dataset(bundle));
}

DatasetBundle load_external(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

Tensor gather_rows(const Tensor& t, std::span<const int> index) {
  const std::size_t w = t.cols();
  Tensor out(Shape{index.size(), w});
  for (std::size_t r = 0; r < index.size(); ++r) {
    std::copy_n(t.data.begin() + static_cast<long>(static_cast<std::size_t>(index[r]) * w), w,
                out.data.begin() + static_cast<long>(r * w));
  }
  return out;
}

std::vector<int> gather_labels(const std::vector<int>& labels, std::span<const int> index) {
  std::vector<int> out(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) out[r] = labels[static_cast<std::size_t>(index[r])];
  return out;
}

}  // namespace mstd
