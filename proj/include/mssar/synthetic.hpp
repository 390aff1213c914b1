#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mssar/dataset.hpp"
#include "mssar/random.hpp"

namespace mssar {

/// Seeded stand-in for CIFAR when the real batches are unavailable. Class c
/// is a sinusoidal grating at orientation c*pi/classes with random
/// frequency, phase and tint (orientation jittered by up to `jitter` of
/// the class spacing), plus a randomly placed dark square and uniform pixel
/// noise of width `noise`. Images are stored exactly like CIFAR records.
inline Dataset make_synthetic(std::size_t per_class, std::size_t classes, std::uint64_t seed,
                              Split split = Split::train, double noise = 160.0,
                              double amplitude = 30.0, double jitter = 0.3) {
  if (classes == 0 || classes > 255) throw std::invalid_argument("make_synthetic: classes must be in [1, 255]");
  Rng rng(seed);
  Dataset ds;
  ds.split = split;
  ds.classes = classes;
  constexpr std::size_t S = kImageSide;
  constexpr double pi = 3.14159265358979323846;
  std::vector<std::uint8_t> img(kImageBytes);
  for (std::size_t i = 0; i < per_class * classes; ++i) {
    const auto label = static_cast<int>(i % classes);
    const double theta = pi * (static_cast<double>(label) + rng.uniform(-jitter, jitter)) /
                         static_cast<double>(classes);
    const double freq = rng.uniform(2.0, 4.0) * 2.0 * pi / static_cast<double>(S);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double tint[3] = {rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)};
    const double base = rng.uniform(60.0, 120.0);
    const std::size_t sq = 6 + rng.below(6);
    const std::size_t sx = rng.below(S - sq), sy = rng.below(S - sq);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const double u = ct * static_cast<double>(x) + st * static_cast<double>(y);
          double v = base + amplitude * tint[ch] * std::sin(freq * u + phase);
          if (x >= sx && x < sx + sq && y >= sy && y < sy + sq) v *= 0.3;
          v += noise * (rng.uniform() - 0.5);
          img[ch * S * S + y * S + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    ds.push(label, img);
  }
  return ds;
}

}  // namespace mssar
