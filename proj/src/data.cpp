#include "hetfed/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace hetfed {
namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& bytes, std::size_t off,
                   const std::filesystem::path& path) {
  if (bytes.size() < off + 4) {
    throw TruncatedFileError(path.string() + ": header truncated");
  }
  return (static_cast<std::uint32_t>(bytes[off]) << 24) |
         (static_cast<std::uint32_t>(bytes[off + 1]) << 16) |
         (static_cast<std::uint32_t>(bytes[off + 2]) << 8) |
         static_cast<std::uint32_t>(bytes[off + 3]);
}

}  // namespace

RawMnist load_mnist_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  if (const auto magic = be32(img, 0, images_path); magic != kIdxImageMagic) {
    throw BadMagicError(images_path.string() + ": magic " + std::to_string(magic) +
                        ", expected 2051");
  }
  if (const auto magic = be32(lab, 0, labels_path); magic != kIdxLabelMagic) {
    throw BadMagicError(labels_path.string() + ": magic " + std::to_string(magic) +
                        ", expected 2049");
  }

  RawMnist raw;
  raw.count = be32(img, 4, images_path);
  raw.rows = be32(img, 8, images_path);
  raw.cols = be32(img, 12, images_path);
  const std::size_t label_count = be32(lab, 4, labels_path);
  if (label_count != raw.count) {
    throw CountMismatchError("image file holds " + std::to_string(raw.count) +
                             " items, label file " + std::to_string(label_count));
  }
  const std::size_t pixel_bytes = raw.count * raw.rows * raw.cols;
  if (img.size() < 16 + pixel_bytes) {
    throw TruncatedFileError(images_path.string() + ": pixel data truncated");
  }
  if (lab.size() < 8 + raw.count) {
    throw TruncatedFileError(labels_path.string() + ": label data truncated");
  }
  raw.pixels.assign(img.begin() + 16, img.begin() + 16 + static_cast<std::ptrdiff_t>(pixel_bytes));
  raw.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(raw.count));
  for (std::size_t i = 0; i < raw.labels.size(); ++i) {
    if (raw.labels[i] > 9) {
      throw DataError(labels_path.string() + ": label " + std::to_string(raw.labels[i]) +
                      " at index " + std::to_string(i) + " outside 0..9");
    }
  }
  return raw;
}

RawMnist load_mnist_split(const std::filesystem::path& dir, bool train) {
  const std::string prefix = train ? "train" : "t10k";
  return load_mnist_idx(dir / (prefix + "-images-idx3-ubyte"),
                        dir / (prefix + "-labels-idx1-ubyte"));
}

TensorF preprocess(std::span<const std::uint8_t> raw) {
  constexpr Index kSide = 28;
  constexpr Index kPad = 2;
  if (raw.size() != static_cast<std::size_t>(kSide * kSide)) {
    throw ShapeError("preprocess: expected 784 bytes, got " + std::to_string(raw.size()));
  }
  TensorF out({1, kSide + 2 * kPad, kSide + 2 * kPad});
  for (Index y = 0; y < kSide; ++y) {
    for (Index x = 0; x < kSide; ++x) {
      out.at(0, y + kPad, x + kPad) =
          static_cast<float>(raw[static_cast<std::size_t>(y * kSide + x)]) / 255.0f;
    }
  }
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  const Index frame = images.size() / std::max<Index>(1, images.dim(0));
  Shape shape = images.shape();
  shape[0] = static_cast<Index>(indices.size());
  Dataset out{TensorF(shape), {}};
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = static_cast<Index>(indices[i]);
    out.images.values().segment(static_cast<Index>(i) * frame, frame) =
        images.values().segment(src * frame, frame);
    out.labels.push_back(labels.at(indices[i]));
  }
  return out;
}

Dataset to_dataset(const RawMnist& raw, std::optional<std::size_t> limit) {
  const std::size_t m = std::min(raw.count, limit.value_or(raw.count));
  Dataset ds{TensorF({static_cast<Index>(m), 1, 32, 32}), {}};
  ds.labels.reserve(m);
  const Index frame = 32 * 32;
  for (std::size_t i = 0; i < m; ++i) {
    ds.images.values().segment(static_cast<Index>(i) * frame, frame) =
        preprocess(raw.image(i)).values();
    ds.labels.push_back(raw.labels[i]);
  }
  return ds;
}

Partition partition_iid(std::size_t n_samples, std::size_t n_clients, Rng& rng) {
  if (n_clients == 0) throw std::invalid_argument("partition_iid: n_clients must be > 0");
  if (n_samples < n_clients) {
    throw std::invalid_argument("partition_iid: fewer samples than clients");
  }
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  Partition p;
  p.shards.resize(n_clients);
  const std::size_t base = n_samples / n_clients;
  const std::size_t extra = n_samples % n_clients;
  auto it = order.begin();
  for (std::size_t k = 0; k < n_clients; ++k) {
    const auto len = static_cast<std::ptrdiff_t>(base + (k < extra ? 1 : 0));
    p.shards[k].assign(it, it + len);
    std::sort(p.shards[k].begin(), p.shards[k].end());
    it += len;
  }
  return p;
}

Partition partition_dirichlet(std::span<const int> labels, std::size_t n_clients, double alpha,
                              Rng& rng, int max_attempts) {
  if (!(alpha > 0) || !std::isfinite(alpha)) {
    throw std::invalid_argument("partition_dirichlet: alpha must be positive and finite");
  }
  if (n_clients == 0) throw std::invalid_argument("partition_dirichlet: n_clients must be > 0");

  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("partition_dirichlet: negative label");
    max_label = std::max(max_label, l);
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }

  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> share(n_clients);
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Partition p;
    p.alpha = alpha;
    p.shards.resize(n_clients);
    for (auto members : by_class) {
      if (members.empty()) continue;
      std::shuffle(members.begin(), members.end(), rng);
      double total = 0.0;
      do {  // all-zero draws are possible in floating point for tiny alpha
        total = 0.0;
        for (auto& s : share) total += (s = gamma(rng));
      } while (!(total > 0.0));

      // Cumulative proportions -> cut points; the last cut is exactly the class size.
      const double n = static_cast<double>(members.size());
      double cumulative = 0.0;
      std::size_t begin = 0;
      for (std::size_t k = 0; k < n_clients; ++k) {
        cumulative += share[k] / total;
        const std::size_t end =
            k + 1 == n_clients ? members.size()
                               : std::min(members.size(),
                                          static_cast<std::size_t>(std::llround(cumulative * n)));
        if (end > begin) {
          p.shards[k].insert(p.shards[k].end(), members.begin() + static_cast<std::ptrdiff_t>(begin),
                             members.begin() + static_cast<std::ptrdiff_t>(end));
          begin = end;
        }
      }
    }
    const bool any_empty = std::any_of(p.shards.begin(), p.shards.end(),
                                       [](const auto& s) { return s.empty(); });
    if (!any_empty) {
      for (auto& s : p.shards) std::sort(s.begin(), s.end());
      return p;
    }
  }
  throw DataError("partition_dirichlet: a client stayed empty after " +
                  std::to_string(max_attempts) + " draws (alpha=" + std::to_string(alpha) +
                  ", clients=" + std::to_string(n_clients) + ")");
}

void check_partition(const Partition& partition, std::size_t n_samples) {
  std::vector<char> seen(n_samples, 0);
  std::size_t total = 0;
  for (std::size_t k = 0; k < partition.shards.size(); ++k) {
    const auto& shard = partition.shards[k];
    if (shard.empty()) throw std::logic_error("partition: shard " + std::to_string(k) + " is empty");
    for (std::size_t idx : shard) {
      if (idx >= n_samples) throw std::logic_error("partition: index out of range");
      if (seen[idx]) throw std::logic_error("partition: sample assigned twice");
      seen[idx] = 1;
      ++total;
    }
  }
  if (total != n_samples) throw std::logic_error("partition: samples left unassigned");
}

}  // namespace hetfed
