#pragma once

#include <cstdint>
#include <random>

namespace hetfed {

using Rng = std::mt19937_64;

/// Named purposes for independent random streams derived from a master seed.
enum class StreamPurpose : std::uint32_t {
  init = 1,
  partition = 2,
  selection = 3,
  client = 4,
  evaluation = 5,
};

/// Derives an independent stream from (master seed, purpose, a, b). Streams for
/// different tuples never share state, so changing how one consumer draws does
/// not perturb any other.
inline Rng derive_stream(std::uint64_t master_seed, StreamPurpose purpose,
                         std::uint64_t a = 0, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed),
                    static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(purpose),
                    static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32)};
  return Rng(seq);
}

/// Uniform double in [0, 1) built from the top 53 bits of one draw.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace hetfed
