#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "protoseg/image.hpp"
#include "protoseg/rng.hpp"

namespace protoseg {

struct SlicConfig {
  std::size_t superpixels = 64;
  double compactness = 10.0;
  std::size_t iterations = 10;
};

// Label per pixel, 0..count-1, each label one 4-connected region.
struct Superpixels {
  std::vector<std::size_t> labels;
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

// SLIC on a gray image. Intensities are scaled to [0, 100] so the
// compactness has its usual meaning. Seeds sit on a regular grid.
inline Superpixels slic(const Image& img, const SlicConfig& cfg = {}) {
  const std::size_t h = img.height(), w = img.width();
  const std::size_t n = h * w;
  if (cfg.superpixels == 0) throw std::invalid_argument("slic: need at least one superpixel");
  const double step = std::sqrt(static_cast<double>(n) / static_cast<double>(cfg.superpixels));
  const std::size_t gy = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(h) / step)));
  const std::size_t gx = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) / step)));

  struct Center {
    double y, x, v;
  };
  std::vector<Center> centers;
  for (std::size_t i = 0; i < gy; ++i)
    for (std::size_t j = 0; j < gx; ++j) {
      const double cy = (static_cast<double>(i) + 0.5) * static_cast<double>(h) / static_cast<double>(gy);
      const double cx = (static_cast<double>(j) + 0.5) * static_cast<double>(w) / static_cast<double>(gx);
      const auto py = std::min(h - 1, static_cast<std::size_t>(cy));
      const auto px = std::min(w - 1, static_cast<std::size_t>(cx));
      centers.push_back({cy, cx, 100.0 * img.at(py, px)});
    }

  const double sy = static_cast<double>(h) / static_cast<double>(gy);
  const double sx = static_cast<double>(w) / static_cast<double>(gx);
  const double s = std::max(sy, sx);
  const double spatial = (cfg.compactness / s) * (cfg.compactness / s);
  std::vector<std::size_t> label(n, 0);
  std::vector<double> best(n);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const Center& c = centers[k];
      const auto y0 = static_cast<std::ptrdiff_t>(std::floor(c.y - 2.0 * s));
      const auto y1 = static_cast<std::ptrdiff_t>(std::ceil(c.y + 2.0 * s));
      const auto x0 = static_cast<std::ptrdiff_t>(std::floor(c.x - 2.0 * s));
      const auto x1 = static_cast<std::ptrdiff_t>(std::ceil(c.x + 2.0 * s));
      for (auto y = std::max<std::ptrdiff_t>(y0, 0); y < std::min<std::ptrdiff_t>(y1, static_cast<std::ptrdiff_t>(h)); ++y)
        for (auto x = std::max<std::ptrdiff_t>(x0, 0); x < std::min<std::ptrdiff_t>(x1, static_cast<std::ptrdiff_t>(w)); ++x) {
          const auto uy = static_cast<std::size_t>(y), ux = static_cast<std::size_t>(x);
          const double dv = 100.0 * img.at(uy, ux) - c.v;
          const double dy = static_cast<double>(y) + 0.5 - c.y, dx = static_cast<double>(x) + 0.5 - c.x;
          const double d = dv * dv + (dy * dy + dx * dx) * spatial;
          if (d < best[uy * w + ux]) {
            best[uy * w + ux] = d;
            label[uy * w + ux] = k;
          }
        }
    }
    std::vector<Center> acc(centers.size(), {0.0, 0.0, 0.0});
    std::vector<std::size_t> count(centers.size(), 0);
    for (std::size_t p = 0; p < n; ++p) {
      Center& a = acc[label[p]];
      a.y += static_cast<double>(p / w) + 0.5;
      a.x += static_cast<double>(p % w) + 0.5;
      a.v += 100.0 * img.at(p / w, p % w);
      ++count[label[p]];
    }
    for (std::size_t k = 0; k < centers.size(); ++k)
      if (count[k]) {
        const double inv = 1.0 / static_cast<double>(count[k]);
        centers[k] = {acc[k].y * inv, acc[k].x * inv, acc[k].v * inv};
      }
  }

  // Relabel into 4-connected components; components smaller than a quarter
  // cell join the previously labelled neighbour.
  const std::size_t min_size = std::max<std::size_t>(1, static_cast<std::size_t>(sy * sx / 4.0));
  constexpr std::size_t kUnset = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> out(n, kUnset);
  std::size_t next = 0;
  std::vector<std::size_t> stack, members;
  const int off_y[4] = {-1, 0, 1, 0}, off_x[4] = {0, -1, 0, 1};
  for (std::size_t start = 0; start < n; ++start) {
    if (out[start] != kUnset) continue;
    std::size_t adjacent = kUnset;
    for (int d = 0; d < 4; ++d) {
      const auto y = static_cast<std::ptrdiff_t>(start / w) + off_y[d];
      const auto x = static_cast<std::ptrdiff_t>(start % w) + off_x[d];
      if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) continue;
      const std::size_t q = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
      if (out[q] != kUnset) adjacent = out[q];
    }
    members.clear();
    stack.assign(1, start);
    out[start] = next;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      members.push_back(p);
      for (int d = 0; d < 4; ++d) {
        const auto y = static_cast<std::ptrdiff_t>(p / w) + off_y[d];
        const auto x = static_cast<std::ptrdiff_t>(p % w) + off_x[d];
        if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) continue;
        const std::size_t q = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
        if (out[q] == kUnset && label[q] == label[start]) {
          out[q] = next;
          stack.push_back(q);
        }
      }
    }
    if (members.size() < min_size && adjacent != kUnset) {
      for (std::size_t p : members) out[p] = adjacent;
    } else {
      ++next;
    }
  }
  return {std::move(out), next, h, w};
}

// Offline pseudo-label: one superpixel drawn uniformly at random.
inline Mask pseudo_label(const Superpixels& sp, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t pick = rng.index(sp.count);
  Mask m(sp.height, sp.width);
  for (std::size_t p = 0; p < sp.labels.size(); ++p)
    if (sp.labels[p] == pick) m.at(p / sp.width, p % sp.width) = 1.0;
  return m;
}

inline Mask pseudo_labels(const Image& img, std::uint64_t seed, const SlicConfig& cfg = {}) {
  return pseudo_label(slic(img, cfg), seed);
}

}  // namespace protoseg
