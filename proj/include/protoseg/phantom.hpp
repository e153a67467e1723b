#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "protoseg/image.hpp"
#include "protoseg/rng.hpp"

namespace protoseg {

struct PhantomConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  int num_classes = 6;
  double min_area = 0.02;  // blob area bounds as image fractions
  double max_area = 0.20;
  double noise = 0.04;
};

// Synthetic slice with 2-4 disjoint textured blobs, each of a distinct class.
struct Phantom {
  Image image;
  std::vector<int> classes;  // class id of each blob, ascending
  std::vector<Mask> masks;   // binary, parallel to `classes`
  std::uint64_t seed = 0;
  std::uint64_t id = 0;

  bool has_class(int c) const { return std::find(classes.begin(), classes.end(), c) != classes.end(); }
  const Mask& mask_of(int c) const {
    auto it = std::find(classes.begin(), classes.end(), c);
    if (it == classes.end()) throw std::out_of_range("phantom has no class " + std::to_string(c));
    return masks[static_cast<std::size_t>(it - classes.begin())];
  }
};

// Texture of class c (1-based): oriented grating with class-specific
// orientation, period and mean level.
struct ClassTexture {
  double mean;
  double amplitude;
  double angle;
  double period;
};

inline ClassTexture class_texture(int c, int num_classes) {
  const double t = static_cast<double>(c - 1) / static_cast<double>(std::max(num_classes, 1));
  return {0.42 + 0.16 * std::sin(2.0 * std::numbers::pi * t * 1.7), 0.16,
          std::numbers::pi * t, 3.5 + 3.0 * std::fmod(t * 2.3, 1.0)};
}

namespace detail {

struct Blob {
  double cy, cx, ry, rx, rot;
  double wobble_amp, wobble_phase;
  int wobble_freq;

  // Normalized radial coordinate: < 1 inside.
  double radius(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = (dx * std::cos(rot) + dy * std::sin(rot)) / rx;
    const double v = (-dx * std::sin(rot) + dy * std::cos(rot)) / ry;
    const double theta = std::atan2(v, u);
    return std::sqrt(u * u + v * v) / (1.0 + wobble_amp * std::sin(wobble_freq * theta + wobble_phase));
  }
};

}  // namespace detail

inline Phantom generate_phantom(std::uint64_t seed, std::uint64_t id, const PhantomConfig& cfg = {}) {
  const std::size_t h = cfg.height, w = cfg.width;
  if (h < 32 || w < 32 || h % 4 || w % 4)
    throw std::invalid_argument("phantom extents must be multiples of 4 and at least 32");
  if (cfg.num_classes < 4) throw std::invalid_argument("phantoms need at least 4 classes");
  const double total = static_cast<double>(h * w);

  Rng style = Rng::derive(seed, 0x5EED);  // shared by every slice of a seed
  const double bg_mean = style.uniform(0.4, 0.6);
  const double bg_angle = style.uniform(0.0, std::numbers::pi);
  const double bg_period = style.uniform(10.0, 16.0);
  const double bg_amp = style.uniform(0.05, 0.09);

  Rng rng = Rng::derive(seed, id);
  Phantom ph;
  ph.seed = seed;
  ph.id = id;
  const std::size_t count = 2 + rng.index(3);
  std::vector<int> pool(static_cast<std::size_t>(cfg.num_classes));
  for (int c = 0; c < cfg.num_classes; ++c) pool[static_cast<std::size_t>(c)] = c + 1;
  for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
  std::vector<int> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(chosen.begin(), chosen.end());

  std::vector<int> owner(h * w, 0);  // 0 = background, else 1 + blob index
  std::vector<double> alpha(h * w, 0.0);
  std::vector<detail::Blob> blobs;
  const double lo = std::max(cfg.min_area, 0.03), hi = std::min(cfg.max_area, 0.10);
  for (std::size_t b = 0; b < count; ++b) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 2000) throw std::runtime_error("phantom generator could not place blobs");
      const double area = rng.uniform(lo, hi) * total;
      const double aspect = rng.uniform(0.6, 1.6);
      detail::Blob blob{};
      blob.ry = std::sqrt(area / std::numbers::pi * aspect);
      blob.rx = std::sqrt(area / std::numbers::pi / aspect);
      const double reach = std::max(blob.ry, blob.rx) * 1.15;
      if (2.0 * reach + 2.0 >= static_cast<double>(std::min(h, w))) continue;
      blob.cy = rng.uniform(reach + 1.0, static_cast<double>(h) - reach - 1.0);
      blob.cx = rng.uniform(reach + 1.0, static_cast<double>(w) - reach - 1.0);
      blob.rot = rng.uniform(0.0, std::numbers::pi);
      blob.wobble_amp = rng.uniform(0.0, 0.12);
      blob.wobble_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      blob.wobble_freq = 2 + static_cast<int>(rng.index(3));

      std::vector<std::size_t> inside;
      bool clash = false;
      for (std::size_t y = 0; y < h && !clash; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double r = blob.radius(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5);
          if (r < 1.25 && owner[y * w + x] != 0) {
            clash = true;
            break;
          }
          if (r < 1.0) inside.push_back(y * w + x);
        }
      const double frac = static_cast<double>(inside.size()) / total;
      if (clash || frac < cfg.min_area || frac > cfg.max_area) continue;
      for (std::size_t p : inside) owner[p] = static_cast<int>(b) + 1;
      blobs.push_back(blob);
      break;
    }
  }

  // Soft edge: alpha falls from 1 to 0 over a thin band around each blob.
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      if (owner[p]) {
        alpha[p] = 1.0;
        continue;
      }
      for (std::size_t b = 0; b < blobs.size(); ++b) {
        const double r = blobs[b].radius(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5);
        if (r < 1.12) {
          alpha[p] = 0.5 * (1.12 - r) / 0.12;
          owner[p] = -static_cast<int>(b) - 1;
        }
      }
    }

  Tensor pix({h, w});
  std::vector<double> phase(count);
  for (auto& ph_b : phase) ph_b = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double bg_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      double v = bg_mean + bg_amp * std::sin(2.0 * std::numbers::pi *
                                                 (fx * std::cos(bg_angle) + fy * std::sin(bg_angle)) / bg_period +
                                             bg_phase);
      if (owner[p] != 0) {
        const std::size_t b = static_cast<std::size_t>(std::abs(owner[p]) - 1);
        const ClassTexture tex = class_texture(chosen[b], cfg.num_classes);
        const double fg = tex.mean + tex.amplitude * std::sin(2.0 * std::numbers::pi *
                                                                  (fx * std::cos(tex.angle) + fy * std::sin(tex.angle)) /
                                                                  tex.period +
                                                              phase[b]);
        v = alpha[p] * fg + (1.0 - alpha[p]) * v;
      }
      v += cfg.noise * rng.normal();
      pix.at(y, x) = std::clamp(v, 0.0, 1.0);
    }
  ph.image = Image(std::move(pix));

  for (std::size_t b = 0; b < count; ++b) {
    Mask m(h, w);
    for (std::size_t p = 0; p < h * w; ++p)
      if (owner[p] == static_cast<int>(b) + 1) m.at(p / w, p % w) = 1.0;
    ph.classes.push_back(chosen[b]);
    ph.masks.push_back(std::move(m));
  }
  return ph;
}

}  // namespace protoseg
