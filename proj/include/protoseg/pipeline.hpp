#pragma once

#include <optional>

#include "protoseg/bcma.hpp"
#include "protoseg/encoder.hpp"
#include "protoseg/fspa.hpp"
#include "protoseg/ran.hpp"
#include "protoseg/segmenter.hpp"

namespace protoseg {

struct PipelineConfig {
  FspaConfig fspa;
  BcmaConfig bcma;
  SegConfig seg;
  bool use_ran = true;
  bool use_fspa = true;
  bool use_bcma = true;
};

// One support image + mask and one query image + mask of the same class.
struct Episode {
  Image support_image;
  Mask support_mask;
  Image query_image;
  Mask query_mask;
  int class_id = 0;
};

// Non-differentiable decisions of one prediction direction. Once recorded
// they are replayed, so repeated evaluations (finite differences) see the
// same piecewise-smooth function.
struct DirectionChoices {
  bool recorded = false;
  std::vector<std::size_t> cluster_labels;
  std::vector<std::size_t> bg_argmax;
};

struct EpisodeChoices {
  DirectionChoices forward;
  DirectionChoices swapped;
  EncoderGates support_gates;
  EncoderGates query_gates;
};

struct Prototypes {
  Var fg;  // D x 1
  Var bg;  // D x B
  FeatureMap fused_support;
  std::optional<ClusterPrototypes> clusters;
  Mask feature_mask;
  Mask pooled;
};

inline Prototypes build_prototypes(const FeatureMap& support, const FeatureMap& query, const Mask& support_mask,
                                   const ParamStore& params, const PipelineConfig& cfg, DirectionChoices& choices,
                                   bool trainable = true) {
  Prototypes out;
  out.fused_support = cfg.use_ran ? fuse(support, query) : support;
  const FeatureMap& fhat = out.fused_support;
  out.feature_mask = downsample_mask(support_mask, fhat.height, fhat.width);

  if (cfg.use_fspa) {
    if (choices.recorded) {
      const auto pixels = foreground_pixels(out.feature_mask);
      std::size_t k = 0;
      for (std::size_t l : choices.cluster_labels) k = std::max(k, l + 1);
      out.clusters = prototypes_from_labels(fhat, pixels, choices.cluster_labels, k);
    } else {
      out.clusters = cluster_prototypes(fhat, out.feature_mask, cfg.fspa);
      choices.cluster_labels = out.clusters->labels;
    }
    Var sim = similarity_maps(fhat, out.clusters->values);
    FeatureMap fused = fuse_channelwise(sim, out.clusters->values, fhat.height, fhat.width);
    out.fg = foreground_prototype(fused, out.feature_mask);
  } else {
    out.fg = foreground_prototype(fhat, out.feature_mask);
  }

  RawPrototypeGrid grid = raw_background_prototypes(fhat, cfg.bcma.pool_window);
  out.pooled = pooled_mask(out.feature_mask, cfg.bcma.pool_window);
  Var refined = grid.q_n;
  if (cfg.use_bcma) {
    Tape& tape = support.values.tape();
    Var attention = tape.parameter(params, kAttentionParam, trainable && !cfg.bcma.freeze_a);
    const double beta = cfg.bcma.no_adjust ? 0.0 : cfg.bcma.pattern.beta;
    refined = refine(grid, attention, band_mask(cfg.bcma.pattern, fhat.channels()), beta);
  }
  out.bg = select_background(refined, out.pooled, cfg.bcma.bg_threshold);
  return out;
}

struct DirectionResult {
  Prototypes prototypes;
  PredictionBundle prediction;
};

// Support features + mask -> prediction on the query features.
inline DirectionResult predict_direction(const FeatureMap& support, const FeatureMap& query, const Mask& support_mask,
                                         std::size_t query_h, std::size_t query_w, const ParamStore& params,
                                         const PipelineConfig& cfg, DirectionChoices& choices, bool trainable = true) {
  DirectionResult out{build_prototypes(support, query, support_mask, params, cfg, choices, trainable), {}};
  out.prediction = segment(query, out.prototypes.fg, out.prototypes.bg, query_h, query_w, cfg.seg,
                           choices.recorded ? &choices.bg_argmax : nullptr);
  if (!choices.recorded) {
    choices.bg_argmax = out.prediction.bg_argmax;
    choices.recorded = true;
  }
  return out;
}

struct EpisodeLoss {
  Var seg;
  Var reg;
  Var total;
  PredictionBundle prediction;  // query prediction of the unswapped direction
  bool clamped = false;
};

// L_seg on the query, L_reg with the roles swapped, L = L_seg + L_reg.
inline EpisodeLoss episode_loss(const FeatureMap& support, const FeatureMap& query, const Episode& ep,
                                const ParamStore& params, const PipelineConfig& cfg, EpisodeChoices& choices,
                                bool trainable = true) {
  EpisodeLoss out;
  DirectionResult fwd = predict_direction(support, query, ep.support_mask, ep.query_mask.height(),
                                          ep.query_mask.width(), params, cfg, choices.forward, trainable);
  DirectionResult back = predict_direction(query, support, ep.query_mask, ep.support_mask.height(),
                                           ep.support_mask.width(), params, cfg, choices.swapped, trainable);
  bool c1 = false, c2 = false;
  out.seg = seg_loss(fwd.prediction.image_probs, ep.query_mask, &c1);
  out.reg = seg_loss(back.prediction.image_probs, ep.support_mask, &c2);
  out.total = add(out.seg, out.reg);
  out.prediction = std::move(fwd.prediction);
  out.clamped = c1 || c2;
  return out;
}

inline EpisodeLoss run_episode(Tape& tape, const Episode& ep, const ParamStore& params, const PipelineConfig& cfg,
                               EpisodeChoices& choices, bool trainable = true) {
  FeatureMap fs = encode(tape, ep.support_image, params, trainable, &choices.support_gates);
  FeatureMap fq = encode(tape, ep.query_image, params, trainable, &choices.query_gates);
  return episode_loss(fs, fq, ep, params, cfg, choices, trainable);
}

// Inference: segment the query image given an annotated support image.
inline PredictionBundle predict(Tape& tape, const Image& support, const Mask& support_mask, const Image& query,
                                const ParamStore& params, const PipelineConfig& cfg) {
  FeatureMap fs = encode(tape, support, params, false);
  FeatureMap fq = encode(tape, query, params, false);
  DirectionChoices choices;
  return predict_direction(fs, fq, support_mask, query.height(), query.width(), params, cfg, choices, false).prediction;
}

inline void init_params(ParamStore& store, const EncoderConfig& enc, const BcmaConfig& bcma) {
  init_encoder(store, enc);
  store.set(kAttentionParam, bcma.random_init ? random_attention_bank(enc.channels, enc.seed)
                                              : init_attention_bank(bcma.pattern, enc.channels));
}

}  // namespace protoseg
