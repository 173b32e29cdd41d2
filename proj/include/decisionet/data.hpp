#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "decisionet/tensor.hpp"

namespace dnet {

enum class Split { Train, Test };

/// Images in [N, C, H, W] order with integer class labels.
struct LabeledImageSet {
  std::vector<float> images;
  std::vector<int> labels;
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t num_classes = 10;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const {
    return {images.data() + i * image_size(), image_size()};
  }
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
    return counts;
  }
};

namespace detail {

// Reads a whole file through zlib, which passes uncompressed data through.
inline std::vector<unsigned char> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw DataError("read error in " + path.string());
  return out;
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                               const std::string& what) {
  if (offset + 4 > bytes.size()) throw DataError(what + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline std::filesystem::path find_file(const std::filesystem::path& dir,
                                       std::initializer_list<const char*> names) {
  for (const char* name : names) {
    for (const char* suffix : {"", ".gz"}) {
      auto p = dir / (std::string(name) + suffix);
      if (std::filesystem::exists(p)) return p;
    }
  }
  throw DataError("missing file " + std::string(*names.begin()) + " in " + dir.string());
}

}  // namespace detail

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<unsigned char> pixels;
};

/// Big-endian IDX image file (magic 2051).
inline IdxImages parse_idx_images(const std::vector<unsigned char>& bytes, const std::string& what) {
  const auto magic = detail::read_be32(bytes, 0, what);
  if (magic != 2051) throw DataError(what + ": bad magic " + std::to_string(magic) + " (expected 2051)");
  IdxImages out;
  out.count = detail::read_be32(bytes, 4, what);
  out.rows = detail::read_be32(bytes, 8, what);
  out.cols = detail::read_be32(bytes, 12, what);
  const std::size_t expected = out.count * out.rows * out.cols;
  if (bytes.size() - 16 < expected) throw DataError(what + ": truncated pixel data");
  if (bytes.size() - 16 > expected) throw DataError(what + ": trailing bytes after pixel data");
  out.pixels.assign(bytes.begin() + 16, bytes.end());
  return out;
}

/// Big-endian IDX label file (magic 2049).
inline std::vector<int> parse_idx_labels(const std::vector<unsigned char>& bytes, const std::string& what) {
  const auto magic = detail::read_be32(bytes, 0, what);
  if (magic != 2049) throw DataError(what + ": bad magic " + std::to_string(magic) + " (expected 2049)");
  const std::size_t count = detail::read_be32(bytes, 4, what);
  if (bytes.size() - 8 != count) throw DataError(what + ": label count does not match header");
  return std::vector<int>(bytes.begin() + 8, bytes.end());
}

inline LabeledImageSet load_idx_pair(const std::filesystem::path& images_path,
                                     const std::filesystem::path& labels_path, Split split) {
  auto images = parse_idx_images(detail::read_maybe_gzip(images_path), images_path.filename().string());
  auto labels = parse_idx_labels(detail::read_maybe_gzip(labels_path), labels_path.filename().string());
  if (images.count != labels.size()) {
    throw DataError("image count " + std::to_string(images.count) + " != label count " +
                    std::to_string(labels.size()));
  }
  LabeledImageSet set;
  set.channels = 1;
  set.height = images.rows;
  set.width = images.cols;
  set.split = split;
  set.images.resize(images.pixels.size());
  std::transform(images.pixels.begin(), images.pixels.end(), set.images.begin(),
                 [](unsigned char p) { return static_cast<float>(p) / 255.0f; });
  for (int y : labels)
    if (y < 0 || y >= 10) throw DataError("label " + std::to_string(y) + " outside 0..9");
  set.labels = std::move(labels);
  return set;
}

struct TrainTest {
  LabeledImageSet train;
  LabeledImageSet test;
};

/// The four standard FashionMNIST IDX files, optionally gzip-compressed.
inline TrainTest load_fashion_mnist(const std::filesystem::path& dir) {
  TrainTest out;
  out.train = load_idx_pair(detail::find_file(dir, {"train-images-idx3-ubyte"}),
                            detail::find_file(dir, {"train-labels-idx1-ubyte"}), Split::Train);
  out.test = load_idx_pair(detail::find_file(dir, {"t10k-images-idx3-ubyte"}),
                           detail::find_file(dir, {"t10k-labels-idx1-ubyte"}), Split::Test);
  return out;
}

/// CIFAR binary batches: records of 1 label byte + 3072 pixels (R, G, B planes).
inline void append_cifar_batch(const std::filesystem::path& path, LabeledImageSet& set) {
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  const auto bytes = detail::read_maybe_gzip(path);
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw DataError(path.filename().string() + ": size " + std::to_string(bytes.size()) +
                    " is not a multiple of 3073");
  }
  const std::size_t n = bytes.size() / kRecord;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kRecord;
    if (rec[0] >= 10) throw DataError(path.filename().string() + ": label byte out of range");
    set.labels.push_back(rec[0]);
    for (std::size_t k = 1; k < kRecord; ++k) set.images.push_back(static_cast<float>(rec[k]) / 255.0f);
  }
}

inline TrainTest load_cifar10(const std::filesystem::path& dir) {
  TrainTest out;
  for (auto* set : {&out.train, &out.test}) {
    set->channels = 3;
    set->height = 32;
    set->width = 32;
  }
  out.train.split = Split::Train;
  out.test.split = Split::Test;
  for (int b = 1; b <= 5; ++b) {
    const auto name = "data_batch_" + std::to_string(b) + ".bin";
    append_cifar_batch(detail::find_file(dir, {name.c_str()}), out.train);
  }
  append_cifar_batch(detail::find_file(dir, {"test_batch.bin"}), out.test);
  return out;
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Per-channel mean and population standard deviation.
inline ChannelStats channel_stats(const LabeledImageSet& set) {
  ChannelStats s;
  s.mean.assign(set.channels, 0.0);
  s.stddev.assign(set.channels, 0.0);
  const std::size_t plane = set.height * set.width;
  const double count = static_cast<double>(set.size() * plane);
  for (std::size_t c = 0; c < set.channels; ++c) {
    double acc = 0.0;
    for (std::size_t n = 0; n < set.size(); ++n) {
      const float* p = set.images.data() + (n * set.channels + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) acc += p[k];
    }
    s.mean[c] = acc / count;
    double var = 0.0;
    for (std::size_t n = 0; n < set.size(); ++n) {
      const float* p = set.images.data() + (n * set.channels + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) var += (p[k] - s.mean[c]) * (p[k] - s.mean[c]);
    }
    s.stddev[c] = std::sqrt(var / count);
  }
  return s;
}

/// (x - mean_c) / std_c per channel.
inline LabeledImageSet normalize(LabeledImageSet set, const ChannelStats& stats) {
  if (stats.mean.size() != set.channels || stats.stddev.size() != set.channels) {
    throw std::invalid_argument("normalize: statistics do not match channel count");
  }
  for (std::size_t c = 0; c < set.channels; ++c) {
    if (!(stats.stddev[c] > 0.0)) {
      throw DataError("normalize: channel " + std::to_string(c) + " has zero standard deviation");
    }
  }
  const std::size_t plane = set.height * set.width;
  for (std::size_t n = 0; n < set.size(); ++n) {
    for (std::size_t c = 0; c < set.channels; ++c) {
      float* p = set.images.data() + (n * set.channels + c) * plane;
      const double m = stats.mean[c], s = stats.stddev[c];
      for (std::size_t k = 0; k < plane; ++k) p[k] = static_cast<float>((p[k] - m) / s);
    }
  }
  return set;
}

inline LabeledImageSet subset(const LabeledImageSet& set, std::span<const std::size_t> indices) {
  LabeledImageSet out;
  out.channels = set.channels;
  out.height = set.height;
  out.width = set.width;
  out.num_classes = set.num_classes;
  out.split = set.split;
  out.images.reserve(indices.size() * set.image_size());
  for (auto i : indices) {
    auto img = set.image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(set.labels.at(i));
  }
  return out;
}

/// Exactly `per_class` indices of every class, drawn without replacement and
/// returned in ascending order.
template <typename Rng>
std::vector<std::size_t> balanced_subset(std::span<const int> labels, std::size_t num_classes,
                                         std::size_t per_class, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& pool = by_class[c];
    if (pool.size() < per_class) {
      throw DataError("balanced subset: class " + std::to_string(c) + " has " +
                      std::to_string(pool.size()) + " samples, need " + std::to_string(per_class));
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// One augmentation draw: horizontal flip, then a crop of the 4-pixel
/// zero-padded image at offset (dy, dx) in [0, 8].
struct AugmentDraw {
  bool flip = false;
  std::size_t dy = 4;
  std::size_t dx = 4;
};

constexpr std::size_t kAugmentPad = 4;

template <typename V>
void augment_image(std::span<const V> src, std::span<V> dst, std::size_t channels,
                   std::size_t height, std::size_t width, const AugmentDraw& d) {
  const auto pad = static_cast<std::ptrdiff_t>(kAugmentPad);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        const auto si = static_cast<std::ptrdiff_t>(i + d.dy) - pad;
        auto sj = static_cast<std::ptrdiff_t>(j + d.dx) - pad;
        V v{0};
        if (si >= 0 && si < static_cast<std::ptrdiff_t>(height) && sj >= 0 &&
            sj < static_cast<std::ptrdiff_t>(width)) {
          if (d.flip) sj = static_cast<std::ptrdiff_t>(width) - 1 - sj;
          v = src[(c * height + static_cast<std::size_t>(si)) * width + static_cast<std::size_t>(sj)];
        }
        dst[(c * height + i) * width + j] = v;
      }
    }
  }
}

template <typename Rng>
AugmentDraw draw_augmentation(Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * kAugmentPad);
  AugmentDraw d;
  d.flip = coin(rng);
  d.dy = offset(rng);
  d.dx = offset(rng);
  return d;
}

/// Random flip and padded crop applied independently to every image of a
/// [N, C, H, W] batch.
template <typename V, typename Rng>
std::vector<V> augment(std::span<const V> batch, std::size_t n, std::size_t channels,
                       std::size_t height, std::size_t width, Rng& rng) {
  const std::size_t sz = channels * height * width;
  std::vector<V> out(batch.size());
  for (std::size_t i = 0; i < n; ++i) {
    augment_image<V>(batch.subspan(i * sz, sz), std::span<V>(out).subspan(i * sz, sz), channels,
                  height, width, draw_augmentation(rng));
  }
  return out;
}

/// Gathers `indices` into a [N, C, H, W] tensor.
template <typename T>
Tensor<T> make_batch(const LabeledImageSet& set, std::span<const std::size_t> indices,
                     std::vector<int>* labels = nullptr) {
  std::vector<T> values;
  values.reserve(indices.size() * set.image_size());
  if (labels) labels->clear();
  for (auto i : indices) {
    auto img = set.image(i);
    values.insert(values.end(), img.begin(), img.end());
    if (labels) labels->push_back(set.labels[i]);
  }
  return Tensor<T>(Shape{indices.size(), set.channels, set.height, set.width}, std::move(values));
}

}  // namespace dnet
