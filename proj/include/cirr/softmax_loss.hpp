// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>

#include "cirr/tensor.hpp"

namespace cirr {

/// Cross-entropy of softmax(w * scores) against class 0 (the target), plus the
/// derivatives the trainer needs.
struct SoftmaxTerms {
  double loss = 0.0;
  double dloss_dw = 0.0;  // sum_c (p_c - y_c) s_c
  Vector dloss_ds;        // w (p_c - y_c)
};

inline SoftmaxTerms softmax_ce(std::span<const double> scores, double w) {
  SoftmaxTerms t;
  Vector logits(scores.size());
  for (std::size_t c = 0; c < scores.size(); ++c) logits[c] = w * scores[c];
  const Vector p = softmax(logits);
  // log-sum-exp form keeps precision when the target probability is near 1
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  double se = 0.0;
  for (double x : logits) se += std::exp(x - mx);
  t.loss = mx + std::log(se) - logits[0];
  t.dloss_ds.resize(scores.size());
  for (std::size_t c = 0; c < scores.size(); ++c) {
    const double r = p[c] - (c == 0 ? 1.0 : 0.0);
    t.dloss_dw += r * scores[c];
    t.dloss_ds[c] = w * r;
  }
  return t;
}

/// Per-example w-derivative of the loss at w = 1 and its gradient with
/// respect to the scores. The penalty only sees the model through the scores,
/// so this closed form is all the second-order information it needs:
///   g = sum_c (p_c - y_c) s_c
///   dg/ds_k = p_k - y_k + p_k (s_k - sum_c p_c s_c)
struct IrmTerms {
  double g = 0.0;
  Vector dg_ds;
};

inline IrmTerms irm_terms(std::span<const double> scores) {
  IrmTerms t;
  const Vector p = softmax(scores);
  double mean_s = 0.0;
  for (std::size_t c = 0; c < scores.size(); ++c) mean_s += p[c] * scores[c];
  t.dg_ds.resize(scores.size());
  for (std::size_t c = 0; c < scores.size(); ++c) {
    const double r = p[c] - (c == 0 ? 1.0 : 0.0);
    t.g += r * scores[c];
    t.dg_ds[c] = r + p[c] * (scores[c] - mean_s);
  }
  return t;
}

}  // namespace cirr
