#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "protoseg/encoder.hpp"
#include "protoseg/image.hpp"
#include "protoseg/numerics.hpp"
#include "protoseg/rng.hpp"
#include "protoseg/tape.hpp"

namespace protoseg {

// Neighbour-channel band (w1, w2, w3) and the regulation strength beta.
struct SparsePattern {
  double w1 = 0.3;
  double w2 = 0.6;
  double w3 = 0.3;
  double beta = 0.2;
};

struct BcmaConfig {
  SparsePattern pattern;
  std::array<std::size_t, 2> pool_window{4, 4};
  double bg_threshold = 0.5;
  bool freeze_a = false;
  bool no_adjust = false;
  bool random_init = false;
};

inline const std::string kAttentionParam = "bcma.attention";

inline void validate_pattern(const SparsePattern& p) {
  for (double w : {p.w1, p.w2, p.w3})
    if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("bcma: band weights must lie in [0, 1]");
  if (!(p.w1 == p.w3 && p.w2 > p.w1))
    throw std::invalid_argument("bcma: band must satisfy w2 > w1 = w3");
  if (!(p.beta >= 0.0)) throw std::invalid_argument("bcma: beta must be non-negative");
}

// Row j: w2 at j, w1 at j-1, w3 at j+1; entries that would fall outside
// [0, D) are dropped.
inline Tensor init_attention_bank(const SparsePattern& pattern, std::size_t channels) {
  validate_pattern(pattern);
  if (channels == 0) throw std::invalid_argument("bcma: zero channels");
  Tensor a({channels, channels}, 0.0);
  for (std::size_t j = 0; j < channels; ++j) {
    if (j > 0) a.at(j, j - 1) = pattern.w1;
    a.at(j, j) = pattern.w2;
    if (j + 1 < channels) a.at(j, j + 1) = pattern.w3;
  }
  return a;
}

// m_w per head: 1 where the head's band is nonzero.
inline Tensor band_mask(const SparsePattern& pattern, std::size_t channels) {
  Tensor m = init_attention_bank(pattern, channels);
  for (double& v : m.values()) v = v != 0.0 ? 1.0 : 0.0;
  return m;
}

// Bank with no channel prior, uniform in +-sqrt(1/D).
inline Tensor random_attention_bank(std::size_t channels, std::uint64_t seed) {
  Tensor a({channels, channels});
  Rng rng = Rng::derive(seed, 0xBC3A);
  const double bound = std::sqrt(1.0 / static_cast<double>(channels));
  for (double& v : a.values()) v = rng.uniform(-bound, bound);
  return a;
}

// Grid-pooled raw prototypes. Stored as Q_n (D x G): row j is the j-th
// channel slice; column k is the raw prototype P_n^k.
struct RawPrototypeGrid {
  Var q_n;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t cells() const { return grid_h * grid_w; }
};

inline void check_window(std::size_t h, std::size_t w, std::array<std::size_t, 2> win) {
  if (win[0] == 0 || win[1] == 0 || win[0] > h || win[1] > w || h % win[0] || w % win[1])
    throw std::invalid_argument("bcma: pool window " + std::to_string(win[0]) + "x" + std::to_string(win[1]) +
                                " does not tile a " + std::to_string(h) + "x" + std::to_string(w) + " map");
}

inline RawPrototypeGrid raw_background_prototypes(const FeatureMap& fhat, std::array<std::size_t, 2> window) {
  check_window(fhat.height, fhat.width, window);
  const std::size_t gh = fhat.height / window[0], gw = fhat.width / window[1];
  Tensor pool({fhat.pixels(), gh * gw}, 0.0);
  const double inv = 1.0 / static_cast<double>(window[0] * window[1]);
  for (std::size_t y = 0; y < fhat.height; ++y)
    for (std::size_t x = 0; x < fhat.width; ++x)
      pool.at(y * fhat.width + x, (y / window[0]) * gw + x / window[1]) = inv;
  return {matmul(fhat.values, fhat.values.tape().constant(std::move(pool))), gh, gw};
}

// M_r: per-cell mean of the support mask.
inline Mask pooled_mask(const Mask& mask, std::array<std::size_t, 2> window) {
  check_window(mask.height(), mask.width(), window);
  return Mask(avg_pool2d(mask.values(), window[0], window[1]));
}

// w_c for head j: softmax over i of cosine(Q_n^i, Q_n^j).
inline std::vector<double> channel_similarity(const Tensor& q_n, std::size_t j) {
  if (q_n.rank() != 2 || j >= q_n.rows()) throw std::invalid_argument("channel_similarity: bad head index");
  const std::size_t g = q_n.cols();
  std::vector<double> cos(q_n.rows());
  const auto row_j = q_n.values().subspan(j * g, g);
  for (std::size_t i = 0; i < q_n.rows(); ++i) cos[i] = cosine(q_n.values().subspan(i * g, g), row_j).value;
  return softmax(cos);
}

// r = 1 + beta * (w_c .* m_w)
inline std::vector<double> regulate(std::span<const double> w_c, std::span<const double> m_w, double beta) {
  if (w_c.size() != m_w.size()) throw std::invalid_argument("regulate: length mismatch");
  std::vector<double> r(w_c.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = 1.0 + beta * (w_c[i] * m_w[i]);
  return r;
}

// Refined prototypes, stored D x G like Q_n: entry (j, k) is
// P_n^k . (r_j .* a_j). `similarity_source` supplies the Q_n used for the
// channel similarities; refine() passes the grid itself.
inline Var refine_with(const Var& q_n, const Var& attention, const Var& similarity_source, const Tensor& band,
                       double beta) {
  const std::size_t d = q_n.value().rows();
  if (attention.shape() != Shape{d, d} || band.shape() != Shape{d, d} ||
      similarity_source.value().rows() != d)
    throw std::invalid_argument("bcma: attention bank must be D x D with D = " + std::to_string(d));
  Tape& tape = q_n.tape();
  Var unit_rows = normalize_cols(transpose(similarity_source));  // G x D, unit channel columns
  Var channel_cos = matmul(transpose(unit_rows), unit_rows);     // D x D
  Var w_c = softmax_rows(channel_cos);
  Var r = add_scalar(scale(mul(w_c, tape.constant(band)), beta), 1.0);
  return matmul(mul(r, attention), q_n);
}

inline Var refine(const RawPrototypeGrid& grid, const Var& attention, const Tensor& band, double beta) {
  return refine_with(grid.q_n, attention, grid.q_n, band, beta);
}

// Keeps the columns whose pooled-mask cell is below the threshold.
inline std::vector<std::size_t> background_cells(const Mask& pooled, double threshold) {
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < pooled.size(); ++k)
    if (pooled[k] < threshold) keep.push_back(k);
  if (keep.empty()) throw std::invalid_argument("no background support");
  return keep;
}

inline Var select_background(const Var& refined, const Mask& pooled, double threshold) {
  if (refined.value().cols() != pooled.size())
    throw std::invalid_argument("bcma: pooled mask cells do not match prototype count");
  return gather_cols(refined, background_cells(pooled, threshold));
}

}  // namespace protoseg
