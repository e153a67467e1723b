#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "protoseg/encoder.hpp"
#include "protoseg/image.hpp"
#include "protoseg/tape.hpp"

namespace protoseg {

enum class BackgroundAggregation { Max, Mean };

struct SegConfig {
  double temperature = 20.0;
  BackgroundAggregation aggregation = BackgroundAggregation::Max;
};

inline constexpr double kProbabilityFloor = 1e-12;

struct PredictionBundle {
  Var feature_probs;  // 2 x (h*w): row 0 background, row 1 foreground
  Var image_probs;    // 2 x (H*W), bilinear copy at image resolution
  Mask mask;          // H x W argmax of image_probs
  Tensor fg_similarity;  // 1 x (h*w)
  Tensor bg_similarity;  // 1 x (h*w), aggregated over background prototypes
  std::vector<std::size_t> bg_argmax;
  std::size_t height = 0;
  std::size_t width = 0;
};

// Bilinear resize of each row of `rows` (C x h*w) to C x H*W.
inline Var upsample_rows(const Var& rows, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w) {
  Tape& tape = rows.tape();
  const std::size_t c = rows.value().rows();
  Tensor uw_t = [&] {
    Tensor u = linear_upsample_matrix(w, out_w);
    Tensor t({w, out_w});
    for (std::size_t i = 0; i < out_w; ++i)
      for (std::size_t j = 0; j < w; ++j) t.at(j, i) = u.at(i, j);
    return t;
  }();
  Tensor uh_block({c * out_h, c * h}, 0.0);
  const Tensor uh = linear_upsample_matrix(h, out_h);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < h; ++j) uh_block.at(k * out_h + i, k * h + j) = uh.at(i, j);
  Var wide = matmul(reshape(rows, {c * h, w}), tape.constant(std::move(uw_t)));
  Var tall = matmul(tape.constant(std::move(uh_block)), wide);
  return reshape(tall, {c, out_h * out_w});
}

// Cosine-similarity head. P_f is D x 1, P_b is D x B. Probabilities are the
// per-pixel softmax of temperature-scaled (background, foreground) scores.
inline PredictionBundle segment(const FeatureMap& query, const Var& fg_proto, const Var& bg_protos,
                                std::size_t image_h, std::size_t image_w, const SegConfig& cfg,
                                const std::vector<std::size_t>* forced_argmax = nullptr) {
  const std::size_t d = query.channels();
  if (fg_proto.shape() != Shape{d, 1}) throw std::invalid_argument("segment: foreground prototype must be D x 1");
  if (bg_protos.value().rank() != 2 || bg_protos.value().rows() != d)
    throw std::invalid_argument("segment: background prototypes must be D x B");
  Var q_unit = normalize_cols(query.values);
  Var s_f = matmul(transpose(normalize_cols(fg_proto)), q_unit);  // 1 x N
  Var s_all = matmul(transpose(q_unit), normalize_cols(bg_protos));  // N x B
  PredictionBundle out;
  Var s_b = cfg.aggregation == BackgroundAggregation::Max ? row_max(s_all, &out.bg_argmax, forced_argmax)
                                                          : row_mean(s_all);
  s_b = transpose(s_b);
  Var logits = concat_rows(scale(s_b, cfg.temperature), scale(s_f, cfg.temperature));
  out.feature_probs = transpose(softmax_rows(transpose(logits)));
  out.image_probs = upsample_rows(out.feature_probs, query.height, query.width, image_h, image_w);
  out.fg_similarity = s_f.value();
  out.bg_similarity = s_b.value();
  out.height = image_h;
  out.width = image_w;
  out.mask = Mask(image_h, image_w);
  const Tensor& p = out.image_probs.value();
  const std::size_t n = image_h * image_w;
  for (std::size_t i = 0; i < n; ++i) out.mask.at(i / image_w, i % image_w) = p[n + i] > p[i] ? 1.0 : 0.0;
  return out;
}

// Mean pixelwise cross-entropy against a binary mask. `clamped` reports
// whether any probability fell to the log floor.
inline Var seg_loss(const Var& image_probs, const Mask& target, bool* clamped = nullptr) {
  const std::size_t n = target.size();
  if (image_probs.shape() != Shape{2, n})
    throw std::invalid_argument("seg_loss: probabilities " + shape_str(image_probs.shape()) + " do not match mask size");
  Tensor t({2, n});
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = 1.0 - target[i];
    t[n + i] = target[i];
  }
  if (clamped) {
    *clamped = false;
    for (double v : image_probs.value().values()) *clamped = *clamped || !(v > kProbabilityFloor);
  }
  Var ll = mul(image_probs.tape().constant(std::move(t)), log_floor(image_probs, kProbabilityFloor));
  return scale(sum(ll), -1.0 / static_cast<double>(n));
}

// Overlap score in [0, 100]; two empty masks score 100.
inline double dice(const Mask& pred, const Mask& truth) {
  if (pred.height() != truth.height() || pred.width() != truth.width())
    throw std::invalid_argument("dice: mask shapes differ");
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > 0.5, t = truth[i] > 0.5;
    inter += p && t;
    a += p;
    b += t;
  }
  if (a + b == 0) return 100.0;
  return 200.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

}  // namespace protoseg
