#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "protoseg/encoder.hpp"
#include "protoseg/image.hpp"
#include "protoseg/rng.hpp"
#include "protoseg/tape.hpp"

namespace protoseg {

struct FspaConfig {
  std::size_t num_clusters = 5;
  std::size_t kmeans_max_iters = 50;
  std::uint64_t seed = 11;
};

struct KMeansResult {
  std::vector<std::size_t> labels;  // one per point
  Tensor centers;                   // k x dim
  std::vector<double> wcss_trace;   // within-cluster sum of squares after each update
  std::size_t iterations = 0;
  bool reduced = false;             // k was cut down to the number of points
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double wcss(const Tensor& points, const Tensor& centers, const std::vector<std::size_t>& labels) {
  const std::size_t dim = points.cols();
  double s = 0.0;
  for (std::size_t p = 0; p < points.rows(); ++p)
    s += sq_dist(&points.values()[p * dim], &centers.values()[labels[p] * dim], dim);
  return s;
}

inline Tensor cluster_means(const Tensor& points, const std::vector<std::size_t>& labels, std::size_t k) {
  const std::size_t dim = points.cols();
  Tensor centers({k, dim}, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t p = 0; p < points.rows(); ++p) {
    ++counts[labels[p]];
    for (std::size_t i = 0; i < dim; ++i) centers.at(labels[p], i) += points.at(p, i);
  }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < dim; ++i) centers.at(c, i) /= static_cast<double>(counts[c]);
  return centers;
}

}  // namespace detail

// Lloyd's k-means over the rows of `points` (n x dim). Seeding: one point
// drawn from `seed`, then repeatedly the point farthest from its nearest
// chosen center. Empty clusters take the point farthest from its centroid.
inline KMeansResult kmeans(const Tensor& points, std::size_t k, std::size_t max_iters, std::uint64_t seed,
                           double tolerance = 1e-6) {
  if (points.rank() != 2) throw std::invalid_argument("kmeans expects an n x dim point matrix");
  if (k == 0) throw std::invalid_argument("kmeans needs at least one cluster");
  const std::size_t n = points.rows(), dim = points.cols();
  KMeansResult res;
  if (k > n) {
    k = n;
    res.reduced = true;
  }
  const double* pts = points.values().data();

  std::vector<std::size_t> chosen;
  Rng rng(seed);
  chosen.push_back(rng.index(n));
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < k) {
    const std::size_t last = chosen.back();
    std::size_t far = 0;
    for (std::size_t p = 0; p < n; ++p) {
      nearest[p] = std::min(nearest[p], detail::sq_dist(pts + p * dim, pts + last * dim, dim));
      if (nearest[p] > nearest[far]) far = p;
    }
    chosen.push_back(far);
  }
  res.centers = Tensor({k, dim});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < dim; ++i) res.centers.at(c, i) = points.at(chosen[c], i);

  res.labels.assign(n, 0);
  for (std::size_t it = 0; it < std::max<std::size_t>(max_iters, 1); ++it) {
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t p = 0; p < n; ++p) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = detail::sq_dist(pts + p * dim, &res.centers.values()[c * dim], dim);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      res.labels[p] = best;
      ++counts[best];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t p = 0; p < n; ++p) {
        if (counts[res.labels[p]] < 2) continue;
        const double d = detail::sq_dist(pts + p * dim, &res.centers.values()[res.labels[p] * dim], dim);
        if (d > far_d) {
          far_d = d;
          far = p;
        }
      }
      --counts[res.labels[far]];
      res.labels[far] = c;
      counts[c] = 1;
    }
    Tensor updated = detail::cluster_means(points, res.labels, k);
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c)
      shift = std::max(shift, std::sqrt(detail::sq_dist(&updated.values()[c * dim], &res.centers.values()[c * dim], dim)));
    res.centers = std::move(updated);
    res.wcss_trace.push_back(detail::wcss(points, res.centers, res.labels));
    res.iterations = it + 1;
    if (shift < tolerance) break;
  }
  return res;
}

// P_c as a D x N_s matrix on the tape. Each column is the mean of the
// foreground pixels assigned to it; assignments are constants.
struct ClusterPrototypes {
  Var values;
  std::vector<std::size_t> pixels;  // foreground pixel indices
  std::vector<std::size_t> labels;  // cluster of each foreground pixel
  std::size_t count = 0;
  bool reduced = false;
  std::vector<double> wcss_trace;
};

inline std::vector<std::size_t> foreground_pixels(const Mask& feature_mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < feature_mask.size(); ++i)
    if (feature_mask[i] > 0.0) out.push_back(i);
  return out;
}

// Builds P_c from given assignments of foreground pixels.
inline ClusterPrototypes prototypes_from_labels(const FeatureMap& fhat, std::vector<std::size_t> pixels,
                                                std::vector<std::size_t> labels, std::size_t k) {
  if (pixels.size() != labels.size()) throw std::invalid_argument("one label per foreground pixel required");
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t l : labels) {
    if (l >= k) throw std::invalid_argument("cluster label out of range");
    ++counts[l];
  }
  Tensor weights({fhat.pixels(), k}, 0.0);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    weights.at(pixels[i], labels[i]) = 1.0 / static_cast<double>(counts[labels[i]]);
  ClusterPrototypes out;
  out.values = matmul(fhat.values, fhat.values.tape().constant(std::move(weights)));
  out.pixels = std::move(pixels);
  out.labels = std::move(labels);
  out.count = k;
  return out;
}

// Clusters the foreground feature vectors of F_hat. `feature_mask` is the
// support mask at feature resolution; pixels with positive weight count as
// foreground.
inline ClusterPrototypes cluster_prototypes(const FeatureMap& fhat, const Mask& feature_mask, const FspaConfig& cfg) {
  if (feature_mask.height() != fhat.height || feature_mask.width() != fhat.width)
    throw std::invalid_argument("fspa: mask resolution differs from feature resolution");
  if (cfg.num_clusters == 0) throw std::invalid_argument("fspa: num_clusters must be positive");
  std::vector<std::size_t> pixels = foreground_pixels(feature_mask);
  if (pixels.empty()) throw std::invalid_argument("no foreground support");
  const Tensor& f = fhat.values.value();
  const std::size_t d = f.rows();
  Tensor points({pixels.size(), d});
  for (std::size_t i = 0; i < pixels.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) points.at(i, c) = f.at(c, pixels[i]);
  KMeansResult km = kmeans(points, cfg.num_clusters, cfg.kmeans_max_iters, cfg.seed);
  const std::size_t k = km.centers.rows();
  ClusterPrototypes out = prototypes_from_labels(fhat, std::move(pixels), std::move(km.labels), k);
  out.reduced = km.reduced;
  out.wcss_trace = std::move(km.wcss_trace);
  return out;
}

// S_s: (H*W) x N_s cosine between every pixel feature and every prototype.
inline Var similarity_maps(const FeatureMap& fhat, const Var& prototypes) {
  if (prototypes.value().rows() != fhat.channels())
    throw std::invalid_argument("fspa: prototype dimension differs from feature channels");
  return matmul(transpose(normalize_cols(fhat.values)), normalize_cols(prototypes));
}

// F_bar (D x H*W): softmax over the prototype axis per pixel, then channel i
// of every pixel is the 1-D convolution of those weights with K_i, the i-th
// channel slice of P_c.
inline FeatureMap fuse_channelwise(const Var& similarity, const Var& prototypes, std::size_t height, std::size_t width) {
  if (similarity.value().cols() != prototypes.value().cols())
    throw std::invalid_argument("fspa: similarity stack and prototype count disagree");
  if (similarity.value().rows() != height * width) throw std::invalid_argument("fspa: similarity stack size mismatch");
  Var weights = softmax_rows(similarity);
  return {matmul(prototypes, transpose(weights)), height, width};
}

// Masked average pooling with fractional weights (D x 1).
inline Var foreground_prototype(const FeatureMap& fused, const Mask& feature_mask) {
  if (feature_mask.height() != fused.height || feature_mask.width() != fused.width)
    throw std::invalid_argument("fspa: mask resolution differs from fused map");
  const double total = feature_mask.total();
  if (!(total > 0.0)) throw std::invalid_argument("no foreground support");
  Tensor w({fused.pixels(), 1});
  for (std::size_t i = 0; i < fused.pixels(); ++i) w[i] = feature_mask[i] / total;
  return matmul(fused.values, fused.values.tape().constant(std::move(w)));
}

}  // namespace protoseg
