#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "kflo/errors.hpp"
#include "kflo/random.hpp"
#include "kflo/tensor.hpp"

namespace kflo {

// Normalized images [n, ch, H, W] with integer labels in [0, num_classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  // Samples `indices` in order as one batch.
  Tensor gather(std::span<const std::size_t> indices) const {
    const std::size_t per = images.size() / std::max<std::size_t>(size(), 1);
    Shape shape = images.shape();
    shape[0] = indices.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(images.ptr() + indices[i] * per, per, out.ptr() + i * per);
    }
    return out;
  }

  std::vector<int> gather_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels[i]);
    return out;
  }

  // Samples [offset, offset + count) as a new dataset.
  Dataset slice(std::size_t offset, std::size_t count) const {
    if (offset + count > size()) {
      throw DataError("requested samples [" + std::to_string(offset) + ", " +
                      std::to_string(offset + count) + ") but " + split + " has " +
                      std::to_string(size()));
    }
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = offset + i;
    return {gather(idx), gather_labels(idx), num_classes, split};
  }
};

inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;
inline constexpr std::array<double, 3> kCifarMean{0.4914, 0.4822, 0.4465};
inline constexpr std::array<double, 3> kCifarStd{0.2470, 0.2435, 0.2616};
inline constexpr std::size_t kCifarRecordBytes = 3073;

namespace detail {

inline std::vector<std::uint8_t> read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::string& path) {
  if (at + 4 > b.size()) throw DataError(path + ": truncated IDX header");
  return static_cast<std::uint32_t>(b[at]) << 24 | static_cast<std::uint32_t>(b[at + 1]) << 16 |
         static_cast<std::uint32_t>(b[at + 2]) << 8 | static_cast<std::uint32_t>(b[at + 3]);
}

}  // namespace detail

// MNIST IDX pair: images magic 0x00000803 [n, rows, cols] and labels magic
// 0x00000801 [n]. Pixels are scaled to [0, 1] and normalized with the fixed
// MNIST mean/std.
inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                              const std::string& split = "train") {
  const auto img = detail::read_binary(images_path);
  const auto lab = detail::read_binary(labels_path);
  const std::uint32_t img_magic = detail::be32(img, 0, images_path);
  if (img_magic != 0x00000803u) {
    throw DataError(images_path + ": bad IDX image magic " + std::to_string(img_magic));
  }
  const std::uint32_t lab_magic = detail::be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801u) {
    throw DataError(labels_path + ": bad IDX label magic " + std::to_string(lab_magic));
  }
  const std::size_t n = detail::be32(img, 4, images_path);
  const std::size_t rows = detail::be32(img, 8, images_path);
  const std::size_t cols = detail::be32(img, 12, images_path);
  const std::size_t n_labels = detail::be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw DataError("image count " + std::to_string(n) + " does not match label count " +
                    std::to_string(n_labels));
  }
  if (n == 0) throw DataError(images_path + ": no samples");
  if (img.size() != 16 + n * rows * cols) throw DataError(images_path + ": truncated payload");
  if (lab.size() != 8 + n) throw DataError(labels_path + ": truncated payload");

  Dataset ds{Tensor({n, 1, rows, cols}), std::vector<int>(n), 10, split};
  for (std::size_t i = 0; i < n * rows * cols; ++i) {
    ds.images[i] = static_cast<float>((img[16 + i] / 255.0 - kMnistMean) / kMnistStd);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[8 + i] >= 10) throw DataError(labels_path + ": label above 9");
    ds.labels[i] = lab[8 + i];
  }
  return ds;
}

// CIFAR-10 binary batches (3073-byte records: label byte then 3072 pixels,
// channel-planar R, G, B). With fraction < 1, exactly
// floor(fraction * class_count) records per class are drawn uniformly under
// `seed` and returned in file order.
inline Dataset load_cifar10_bin(const std::vector<std::string>& paths, double fraction,
                                std::uint64_t seed, const std::string& split = "train") {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data fraction must be in (0, 1]");
  std::vector<std::uint8_t> records;
  for (const auto& path : paths) {
    const auto bytes = detail::read_binary(path);
    if (bytes.size() % kCifarRecordBytes != 0) {
      throw DataError(path + ": length " + std::to_string(bytes.size()) +
                      " is not a multiple of 3073");
    }
    records.insert(records.end(), bytes.begin(), bytes.end());
  }
  const std::size_t total = records.size() / kCifarRecordBytes;
  if (total == 0) throw DataError("no CIFAR-10 records found");

  std::vector<std::vector<std::size_t>> by_class(10);
  for (std::size_t r = 0; r < total; ++r) {
    const std::uint8_t label = records[r * kCifarRecordBytes];
    if (label >= 10) {
      throw DataError("record " + std::to_string(r) + " has label " + std::to_string(label));
    }
    by_class[label].push_back(r);
  }

  std::vector<std::size_t> chosen;
  if (fraction == 1.0) {
    chosen.resize(total);
    for (std::size_t r = 0; r < total; ++r) chosen[r] = r;
  } else {
    Rng rng(seed);
    for (auto& members : by_class) {
      const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(members.size())));
      shuffle(members, rng);
      chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep));
    }
    std::sort(chosen.begin(), chosen.end());
  }

  constexpr std::size_t plane = 32 * 32;
  Dataset ds{Tensor({chosen.size(), 3, 32, 32}), std::vector<int>(chosen.size()), 10, split};
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const std::uint8_t* rec = records.data() + chosen[i] * kCifarRecordBytes;
    ds.labels[i] = rec[0];
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        ds.images[(i * 3 + c) * plane + p] =
            static_cast<float>((rec[1 + c * plane + p] / 255.0 - kCifarMean[c]) / kCifarStd[c]);
      }
    }
  }
  return ds;
}

}  // namespace kflo
