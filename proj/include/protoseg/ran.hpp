#pragma once

#include "protoseg/encoder.hpp"
#include "protoseg/tape.hpp"

namespace protoseg {

// Weight of every support position in the resemblance context (N x 1, sums
// to 1): both feature sets are column-normalized, the cosine affinity is
// softmaxed over support positions for each query position, and the result
// is averaged over query positions.
inline Var resemblance_weights(const FeatureMap& support, const FeatureMap& query) {
  if (support.values.shape() != query.values.shape() || support.height != query.height || support.width != query.width)
    throw std::invalid_argument("ran: support " + shape_str(support.values.shape()) + " and query " +
                                shape_str(query.values.shape()) + " feature maps differ in shape");
  Var s_norm = normalize_cols(support.values);
  Var q_norm = normalize_cols(query.values);
  Var affinity = matmul(transpose(q_norm), s_norm);  // query x support
  Var attention = softmax_rows(affinity);
  return row_mean(transpose(attention));
}

// F_hat = A_s + (A_s w) 1^T with w from resemblance_weights.
inline FeatureMap fuse(const FeatureMap& support, const FeatureMap& query) {
  Var w = resemblance_weights(support, query);
  Tape& tape = support.values.tape();
  Var context = matmul(support.values, w);
  Var spread = matmul(context, tape.constant(Tensor({1, support.pixels()}, 1.0)));
  return {add(spread, support.values), support.height, support.width};
}

}  // namespace protoseg
