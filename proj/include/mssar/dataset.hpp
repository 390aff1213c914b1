#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssar/random.hpp"

namespace mssar {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageBytes = 3 * kImageSide * kImageSide;

enum class DataFormat { cifar10, cifar100_coarse, cifar100_fine };

inline const char* to_string(DataFormat f) {
  switch (f) {
    case DataFormat::cifar10: return "cifar10";
    case DataFormat::cifar100_coarse: return "cifar100_coarse";
    case DataFormat::cifar100_fine: return "cifar100_fine";
  }
  return "?";
}

inline std::size_t label_bytes(DataFormat f) { return f == DataFormat::cifar10 ? 1 : 2; }
inline std::size_t record_bytes(DataFormat f) { return label_bytes(f) + kImageBytes; }
inline std::size_t format_classes(DataFormat f) {
  switch (f) {
    case DataFormat::cifar10: return 10;
    case DataFormat::cifar100_coarse: return 20;
    case DataFormat::cifar100_fine: return 100;
  }
  return 0;
}

enum class Split { train, test };

/// Labelled 3x32x32 byte images, planes stored R, G, B row-major.
struct Dataset {
  Split split = Split::train;
  std::size_t classes = 0;
  std::vector<int> labels;
  std::vector<std::uint8_t> pixels;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * kImageBytes, kImageBytes};
  }
  void push(int label, std::span<const std::uint8_t> img) {
    labels.push_back(label);
    pixels.insert(pixels.end(), img.begin(), img.end());
  }
  /// One past the largest label present (0 when empty).
  std::size_t label_span() const {
    int m = -1;
    for (int l : labels) m = std::max(m, l);
    return static_cast<std::size_t>(m + 1);
  }
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(classes, 0);
    for (int l : labels) ++c[static_cast<std::size_t>(l)];
    return c;
  }
};

/// Desk-scale subset selection. Selected classes are relabelled to their
/// position in `classes`; an empty list keeps every class and label.
struct DataFilter {
  std::vector<int> classes;
  std::size_t per_class = 0;  // 0 = no limit; otherwise first N of each class in file order
};

inline Dataset parse_records(std::span<const std::uint8_t> bytes, Split split, DataFormat format,
                             const DataFilter& filter = {}, const std::string& source = "<memory>") {
  const std::size_t rec = record_bytes(format);
  const std::size_t lb = label_bytes(format);
  const std::size_t fc = format_classes(format);
  if (bytes.size() % rec != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % rec;
    throw std::runtime_error(source + ": truncated record at byte offset " + std::to_string(offset) +
                             " (" + std::to_string(bytes.size() % rec) + " of " +
                             std::to_string(rec) + " bytes)");
  }
  for (int c : filter.classes)
    if (c < 0 || static_cast<std::size_t>(c) >= fc)
      throw std::invalid_argument(source + ": filter class " + std::to_string(c) +
                                  " out of range for " + to_string(format));

  Dataset ds;
  ds.split = split;
  ds.classes = filter.classes.empty() ? fc : filter.classes.size();
  std::vector<std::size_t> taken(fc, 0);
  for (std::size_t off = 0; off < bytes.size(); off += rec) {
    const std::size_t label_at = format == DataFormat::cifar100_fine ? off + 1 : off;
    const int raw = bytes[label_at];
    if (static_cast<std::size_t>(raw) >= fc) {
      throw std::runtime_error(source + ": label " + std::to_string(raw) + " at byte offset " +
                               std::to_string(label_at) + " out of range for " +
                               std::to_string(fc) + " classes");
    }
    int label = raw;
    if (!filter.classes.empty()) {
      auto it = std::find(filter.classes.begin(), filter.classes.end(), raw);
      if (it == filter.classes.end()) continue;
      label = static_cast<int>(it - filter.classes.begin());
    }
    if (filter.per_class > 0 && taken[static_cast<std::size_t>(raw)] >= filter.per_class) continue;
    ++taken[static_cast<std::size_t>(raw)];
    ds.push(label, bytes.subspan(off + lb, kImageBytes));
  }
  return ds;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Reads one or more CIFAR binary files (concatenated in order).
inline Dataset load_records(const std::vector<std::string>& paths, Split split, DataFormat format,
                            const DataFilter& filter = {}) {
  if (paths.empty()) throw std::invalid_argument("load_records: no input files");
  std::vector<std::uint8_t> all;
  for (const auto& p : paths) {
    auto bytes = read_file(p);
    if (bytes.size() % record_bytes(format) != 0) {
      // Diagnose against the offending file rather than the concatenation.
      parse_records(bytes, split, format, {}, p);
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  return parse_records(all, split, format, filter, paths.size() == 1 ? paths.front() : "dataset");
}

inline Dataset load_records(const std::string& path, Split split, DataFormat format,
                            const DataFilter& filter = {}) {
  return load_records(std::vector<std::string>{path}, split, format, filter);
}

/// Serializes in the CIFAR-10 layout (or CIFAR-100 with coarse label 0).
inline std::vector<std::uint8_t> encode_records(const Dataset& ds, DataFormat format) {
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * record_bytes(format));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto label = static_cast<std::uint8_t>(ds.labels[i]);
    if (format == DataFormat::cifar10) {
      out.push_back(label);
    } else if (format == DataFormat::cifar100_coarse) {
      out.push_back(label);
      out.push_back(0);
    } else {
      out.push_back(0);
      out.push_back(label);
    }
    auto img = ds.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

inline void write_records(const std::string& path, const Dataset& ds,
                          DataFormat format = DataFormat::cifar10) {
  const auto bytes = encode_records(ds, format);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

/// Per-channel mean/std of pixel values scaled to [0,1].
struct Normalizer {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  static Normalizer fit(const Dataset& ds) {
    Normalizer n;
    if (ds.size() == 0) return n;
    const std::size_t plane = kImageSide * kImageSide;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double s = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::uint8_t* p = ds.pixels.data() + i * kImageBytes + ch * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          const double v = p[j] / 255.0;
          s += v;
          sq += v * v;
        }
      }
      const double count = static_cast<double>(ds.size() * plane);
      n.mean[ch] = s / count;
      const double var = std::max(sq / count - n.mean[ch] * n.mean[ch], 0.0);
      n.stddev[ch] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return n;
  }

  template <typename T>
  void apply(std::span<const std::uint8_t> img, T* out) const {
    const std::size_t plane = kImageSide * kImageSide;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t j = 0; j < plane; ++j)
        out[ch * plane + j] =
            static_cast<T>((img[ch * plane + j] / 255.0 - mean[ch]) / stddev[ch]);
  }
};

/// Zero-pads by 4 pixels, takes the 32x32 crop at offset (ox, oy) in
/// [0, 8], optionally mirrors horizontally. Offset (4, 4) without flip is
/// the identity.
template <typename T>
void augment_with(std::span<const T> img, std::size_t ox, std::size_t oy, bool flip, std::span<T> out) {
  constexpr std::size_t S = kImageSide;
  constexpr std::size_t pad = 4;
  if (img.size() != 3 * S * S || out.size() != 3 * S * S)
    throw std::invalid_argument("augment: expected a 3x32x32 image");
  if (ox > 2 * pad || oy > 2 * pad) throw std::invalid_argument("augment: crop offset out of range");
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const std::size_t xs = flip ? S - 1 - x : x;
        // position in the padded 40x40 image
        const std::ptrdiff_t py = static_cast<std::ptrdiff_t>(y + oy) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t px = static_cast<std::ptrdiff_t>(xs + ox) - static_cast<std::ptrdiff_t>(pad);
        T v{0};
        if (py >= 0 && px >= 0 && py < static_cast<std::ptrdiff_t>(S) && px < static_cast<std::ptrdiff_t>(S))
          v = img[ch * S * S + static_cast<std::size_t>(py) * S + static_cast<std::size_t>(px)];
        out[ch * S * S + y * S + x] = v;
      }
}

template <typename T>
std::vector<T> augment_with(std::span<const T> img, std::size_t ox, std::size_t oy, bool flip) {
  std::vector<T> out(img.size());
  augment_with<T>(img, ox, oy, flip, out);
  return out;
}

/// Random pad-crop-flip; draws ox, oy, flip from `rng` in that order.
template <typename T>
std::vector<T> augment(std::span<const T> img, Rng& rng) {
  const std::size_t ox = rng.below(9);
  const std::size_t oy = rng.below(9);
  const bool flip = rng.coin();
  return augment_with<T>(img, ox, oy, flip);
}

}  // namespace mssar
