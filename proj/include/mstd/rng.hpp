#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mstd {

/// Seed of the named sub-stream `name` under the run seed. Every random
/// draw in a run comes from one of these streams.
std::uint64_t stream_seed(std::uint64_t seed, std::string_view name);

inline std::mt19937_64 make_stream(std::uint64_t seed, std::string_view name) {
  return std::mt19937_64(stream_seed(seed, name));
}

}  // namespace mstd
