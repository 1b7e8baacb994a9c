#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "segkit/data.hpp"

namespace segkit {

/// Small shapes dataset: class 0 background, 1 disc, 2 axis-aligned square.
struct SyntheticOptions {
  std::size_t count = 8;
  std::size_t size = 64;
  std::uint64_t seed = 7;
  double noise = 0.04;
};

inline Sample make_synthetic_sample(std::size_t index, const SyntheticOptions& opts) {
  std::mt19937_64 rng(mix_seed(opts.seed, index));
  const std::size_t n = opts.size;
  const double sz = static_cast<double>(n);
  Sample s{Image(3, n, n), LabelMap(n, n, 0)};
  // Disc and square in opposite halves so they never overlap.
  const bool disc_left = uniform01(rng) < 0.5;
  const double r = uniform(rng, 0.16, 0.22) * sz;
  const double cx = (disc_left ? 0.25 : 0.75) * sz + uniform(rng, -0.04, 0.04) * sz;
  const double cy = uniform(rng, 0.3, 0.7) * sz;
  const double side = uniform(rng, 0.28, 0.4) * sz;
  const double sx = (disc_left ? 0.75 : 0.25) * sz - side / 2 + uniform(rng, -0.04, 0.04) * sz;
  const double sy = uniform(rng, 0.1, 0.9 - side / sz) * sz;
  const float palette[3][3] = {{0.25f, 0.3f, 0.35f}, {0.85f, 0.3f, 0.25f}, {0.3f, 0.8f, 0.35f}};
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      std::int32_t cls = 0;
      if ((px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r) cls = 1;
      else if (px >= sx && px < sx + side && py >= sy && py < sy + side) cls = 2;
      s.label.at(y, x) = cls;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = palette[cls][c] + uniform(rng, -opts.noise, opts.noise);
        s.image.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return s;
}

/// Writes images/, labels/, and a train.txt list into `dir`; returns the list
/// path.
inline std::string write_synthetic_dataset(const std::string& dir, const SyntheticOptions& opts = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "labels");
  const std::string list = (fs::path(dir) / "train.txt").string();
  std::ofstream out(list);
  if (!out) throw EnvironmentError("cannot write " + list);
  for (std::size_t i = 0; i < opts.count; ++i) {
    const Sample s = make_synthetic_sample(i, opts);
    char name[32];
    std::snprintf(name, sizeof name, "%03zu.png", i);
    write_image_png((fs::path(dir) / "images" / name).string(), s.image);
    write_label_png((fs::path(dir) / "labels" / name).string(), s.label);
    out << "images/" << name << " labels/" << name << '\n';
  }
  return list;
}

}  // namespace segkit
