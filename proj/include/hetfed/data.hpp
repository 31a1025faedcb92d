#pragma once

#include "hetfed/rng.hpp"
#include "hetfed/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hetfed {

/// Base class of every dataset ingestion failure.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public DataError {
 public:
  using DataError::DataError;
};
class TruncatedFileError : public DataError {
 public:
  using DataError::DataError;
};
class CountMismatchError : public DataError {
 public:
  using DataError::DataError;
};

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

/// Raw contents of an MNIST image/label IDX pair.
struct RawMnist {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major
  std::vector<std::uint8_t> labels;  // count

  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * rows * cols, rows * cols};
  }
};

/// Parses big-endian IDX files. Throws BadMagicError, TruncatedFileError,
/// CountMismatchError, or DataError (unreadable file, label > 9).
RawMnist load_mnist_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path);

/// Scales a 28x28 byte image to [0, 1] and zero-pads it by two pixels on every
/// side, giving [1, 32, 32].
TensorF preprocess(std::span<const std::uint8_t> raw28x28);

struct Dataset {
  TensorF images;           // [M, 1, 32, 32]
  std::vector<int> labels;  // M entries in 0..9

  std::size_t size() const { return labels.size(); }
  /// Copies the samples at `indices` (in that order).
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Preprocesses the first `limit` samples (all when absent).
Dataset to_dataset(const RawMnist& raw, std::optional<std::size_t> limit = std::nullopt);

/// Loads train-images-idx3-ubyte/train-labels-idx1-ubyte (or the t10k pair)
/// from `dir`.
RawMnist load_mnist_split(const std::filesystem::path& dir, bool train);

struct Partition {
  std::vector<std::vector<std::size_t>> shards;  // per client, ascending sample ids
  std::optional<double> alpha;                   // absent for IID

  std::size_t clients() const { return shards.size(); }
};

/// Random permutation split into contiguous shards whose sizes differ by at
/// most one.
Partition partition_iid(std::size_t n_samples, std::size_t n_clients, Rng& rng);

/// Per class, draws client proportions from Dir(alpha, ..., alpha) and hands
/// the class's (shuffled) samples out by cumulative proportion. The whole draw
/// is repeated when any client ends up empty; after `max_attempts` draws a
/// DataError is thrown.
Partition partition_dirichlet(std::span<const int> labels, std::size_t n_clients,
                              double alpha, Rng& rng, int max_attempts = 100);

/// Throws std::logic_error unless shards are non-empty, pairwise disjoint and
/// cover exactly 0..n_samples-1.
void check_partition(const Partition& partition, std::size_t n_samples);

}  // namespace hetfed
