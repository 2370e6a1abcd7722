#pragma once

// Checkpoint files: "MSTD", u16 version, then per parameter
//   u16 name length, name bytes, u8 rank, u32 dims[rank], f32 payload
// all little endian, read to end of file.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mstd/autodiff.hpp"
#include "mstd/models.hpp"

namespace mstd {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::vector<std::uint8_t> encode_checkpoint(std::span<Parameter* const> params);
std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

/// Copies tensors into `params` by name. Every parameter must be present
/// with a matching shape.
void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params);
void assign_tensors(const std::vector<NamedTensor>& tensors, std::span<Parameter* const> params,
                    const std::string& source);

/// Rebuilds a ModalityModel (architecture and weights) from its saved
/// parameters.
ModalityModel restore_model(const std::vector<NamedTensor>& tensors);

/// Value snapshot of a parameter set, for best-epoch bookkeeping.
std::vector<Tensor> snapshot(std::span<Parameter* const> params);
void restore(std::span<Parameter* const> params, const std::vector<Tensor>& values);

}  // namespace mstd
