#include "mstd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <regex>

#include "mstd/bytes.hpp"
#include "mstd/error.hpp"

namespace mstd {

namespace {
constexpr char kMagic[4] = {'M', 'S', 'T', 'D'};
constexpr std::uint16_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::kIo, "read failed for " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) fail(ErrorKind::kIo, "cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

std::vector<std::uint8_t> encode_checkpoint(std::span<Parameter* const> params) {
  ByteWriter w;
  w.raw(kMagic, sizeof kMagic);
  w.u16(kVersion);
  for (const Parameter* p : params) {
    if (p->name.size() > 0xffff) fail(ErrorKind::kFormat, "parameter name too long: " + p->name);
    if (p->value.rank() > 255) fail(ErrorKind::kFormat, "rank too large for " + p->name);
    w.u16(static_cast<std::uint16_t>(p->name.size()));
    w.raw(p->name.data(), p->name.size());
    w.u8(static_cast<std::uint8_t>(p->value.rank()));
    for (std::size_t d : p->value.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : p->value.data) w.f32(v);
  }
  return w.take();
}

std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) fail(ErrorKind::kFormat, "bad checkpoint magic at byte offset 0");
  const std::uint16_t version = r.u16();
  if (version != kVersion) {
    fail(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  }
  std::vector<NamedTensor> out;
  while (!r.done()) {
    NamedTensor nt;
    const std::uint16_t len = r.u16();
    nt.name.resize(len);
    r.raw(nt.name.data(), len);
    const std::size_t rank_at = r.offset();
    const std::uint8_t rank = r.u8();
    if (rank == 0) fail(ErrorKind::kFormat, "zero rank for " + nt.name + " at byte offset " + std::to_string(rank_at));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      const std::size_t at = r.offset();
      d = r.u32();
      if (d == 0) fail(ErrorKind::kFormat, "zero dimension for " + nt.name + " at byte offset " + std::to_string(at));
      count *= d;
    }
    if (r.remaining() < count * 4) {
      fail(ErrorKind::kFormat, "truncated payload for " + nt.name + " at byte offset " + std::to_string(r.offset()));
    }
    std::vector<float> values(count);
    for (float& v : values) v = r.f32();
    nt.tensor = Tensor(std::move(shape), std::move(values));
    out.push_back(std::move(nt));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params) {
  write_file(path, encode_checkpoint(params));
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

void assign_tensors(const std::vector<NamedTensor>& tensors, std::span<Parameter* const> params,
                    const std::string& source) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& nt : tensors) by_name[nt.name] = &nt.tensor;
  for (Parameter* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) fail(ErrorKind::kFormat, source + " lacks parameter " + p->name);
    if (it->second->shape != p->value.shape) {
      fail(ErrorKind::kFormat, source + ": parameter " + p->name + " has shape " +
                                   shape_str(it->second->shape) + ", expected " + shape_str(p->value.shape));
    }
    p->value = *it->second;
  }
}

void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params) {
  assign_tensors(read_checkpoint(path), params, path.string());
}

namespace {

Linear linear_from(const std::map<std::string, const Tensor*>& by_name, const std::string& prefix) {
  auto w = by_name.find(prefix + "/weight");
  auto b = by_name.find(prefix + "/bias");
  if (w == by_name.end() || b == by_name.end()) fail(ErrorKind::kFormat, "checkpoint lacks layer " + prefix);
  if (w->second->rank() != 2 || b->second->numel() != w->second->dim(1)) {
    fail(ErrorKind::kFormat, "inconsistent shapes for layer " + prefix);
  }
  Linear l;
  l.weight = Parameter(prefix + "/weight", *w->second);
  l.bias = Parameter(prefix + "/bias", *b->second);
  return l;
}

std::vector<Linear> layer_stack(const std::map<std::string, const Tensor*>& by_name, const std::string& prefix) {
  std::vector<Linear> layers;
  for (int l = 0; by_name.count(prefix + "/fc" + std::to_string(l) + "/weight") != 0; ++l) {
    layers.push_back(linear_from(by_name, prefix + "/fc" + std::to_string(l)));
    if (layers.size() > 1 && layers[layers.size() - 2].out_dim() != layers.back().in_dim()) {
      fail(ErrorKind::kFormat, "layer widths do not chain under " + prefix);
    }
  }
  return layers;
}

}  // namespace

ModalityModel restore_model(const std::vector<NamedTensor>& tensors) {
  if (tensors.empty()) fail(ErrorKind::kFormat, "empty checkpoint");
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& nt : tensors) by_name[nt.name] = &nt.tensor;

  static const std::regex model_name(R"(^m(\d+)/.*)");
  std::smatch match;
  if (!std::regex_match(tensors.front().name, match, model_name)) {
    fail(ErrorKind::kFormat, "checkpoint does not hold a modality model (first parameter " + tensors.front().name + ")");
  }
  const int index = std::stoi(match[1].str());
  const std::string prefix = "m" + std::to_string(index);

  ModalityModel model;
  model.modality_index = index;
  if (index == 0) {
    for (int m = 1; by_name.count(prefix + "/enc" + std::to_string(m) + "/fc0/weight") != 0; ++m) {
      model.branches.push_back(Encoder{layer_stack(by_name, prefix + "/enc" + std::to_string(m))});
    }
    if (model.branches.size() < 2) fail(ErrorKind::kFormat, "fusion checkpoint has fewer than 2 branches");
    model.layers = layer_stack(by_name, prefix + "/fusion");
  } else {
    model.layers = layer_stack(by_name, prefix);
  }
  if (model.layers.empty()) fail(ErrorKind::kFormat, "checkpoint has no hidden layers under " + prefix);
  model.head.push_back(linear_from(by_name, prefix + "/head"));
  if (model.head.front().in_dim() != model.layers.back().out_dim()) {
    fail(ErrorKind::kFormat, "head width does not match last hidden layer");
  }
  if (model.parameters().size() != tensors.size()) {
    fail(ErrorKind::kFormat, "checkpoint holds parameters outside model " + prefix);
  }
  return model;
}

std::vector<Tensor> snapshot(std::span<Parameter* const> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

void restore(std::span<Parameter* const> params, const std::vector<Tensor>& values) {
  if (values.size() != params.size()) fail(ErrorKind::kInvariant, "snapshot size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

}  // namespace mstd
