#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "protoseg/tensor.hpp"

namespace protoseg {

// Floor applied to every vector norm used as a divisor.
inline constexpr double kNormFloor = 1e-8;

inline std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("softmax of an empty vector");
  const double top = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - top);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

struct Cosine {
  double value = 0.0;
  // Set when either input had a norm below kNormFloor; value is then 0.
  bool degenerate = false;
};

inline double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

inline double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

inline Cosine cosine(std::span<const double> u, std::span<const double> v) {
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu < kNormFloor || nv < kNormFloor) return {0.0, true};
  return {std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0), false};
}

// Non-overlapping window mean over an H x W map. The window must tile the map.
inline Tensor avg_pool2d(const Tensor& map, std::size_t win_h, std::size_t win_w) {
  if (map.rank() != 2) throw std::invalid_argument("avg_pool2d expects an H x W map");
  const std::size_t h = map.rows(), w = map.cols();
  if (win_h == 0 || win_w == 0) throw std::invalid_argument("avg_pool2d: empty window");
  if (win_h > h || win_w > w) throw std::invalid_argument("avg_pool2d: window larger than map");
  if (h % win_h || w % win_w) throw std::invalid_argument("avg_pool2d: window does not divide the map");
  const std::size_t oh = h / win_h, ow = w / win_w;
  Tensor out({oh, ow});
  const double count = static_cast<double>(win_h * win_w);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double s = 0.0;
      for (std::size_t y = 0; y < win_h; ++y)
        for (std::size_t x = 0; x < win_w; ++x) s += map.at(oy * win_h + y, ox * win_w + x);
      out.at(oy, ox) = s / count;
    }
  return out;
}

}  // namespace protoseg
