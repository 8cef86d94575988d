// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cirr/encoder.hpp"
#include "cirr/retriever.hpp"
#include "cirr/types.hpp"

namespace cirr {

struct RankOutput {
  double score = 0.0;
  Vector attention;            // over retrieved evidence, rank order
  Vector aggregated_evidence;  // z_D, length d
};

/// Forward state kept for rank_backward.
struct RankTape {
  Vector z;
  ItemId item = 0;
  std::vector<const Vector*> evidence;  // retrieved embeddings, rank order
  Vector x_query;                       // [z ; e_item]
  Vector query;                         // Q x_query
  Vector query_keys;                    // K^T q
  Vector attention;
  Vector evidence_mean;                 // sum_j a_j e_j
  Vector z_d;                           // V evidence_mean
  Vector mlp_in;                        // [z ; e_item ; z_D]
  Vector hidden;                        // tanh(W1 mlp_in + b1)
};

/// score = (z + z_D).e_item + w2 . tanh(W1 [z ; e_item ; z_D] + b1) + b2, where z_D is
/// single-head attention over the retrieved evidence with query
/// Q [z ; e_item], keys K e_j and values V e_j, scaled by 1/sqrt(d).
/// No evidence gives z_D = 0.
inline RankOutput rank_score(const ModelParams& params, std::span<const double> z, ItemId item,
                             const RetrievalResult& retrieved, const EvidencePool& pool,
                             RankTape* tape = nullptr) {
  const std::size_t d = params.dim();
  const auto& rk = params.ranker;
  if (z.size() != d || rk.query_proj.rows() != d || rk.query_proj.cols() != 2 * d ||
      rk.mlp_w1.cols() != 3 * d)
    throw Error("shape-mismatch");
  if (item >= params.num_items()) throw Error("item-out-of-range", std::to_string(item));
  const auto e_item = params.item_embeddings.row(item);

  RankTape local;
  RankTape& t = tape ? *tape : local;
  t.z.assign(z.begin(), z.end());
  t.item = item;
  t.evidence.clear();
  for (EvidenceId id : retrieved.evidence_ids) {
    const auto& e = pool.at(id).embedding;
    if (e.size() != d) throw Error("shape-mismatch", "evidence " + std::to_string(id));
    t.evidence.push_back(&e);
  }

  t.x_query.assign(2 * d, 0.0);
  std::copy(z.begin(), z.end(), t.x_query.begin());
  std::copy(e_item.begin(), e_item.end(), t.x_query.begin() + static_cast<std::ptrdiff_t>(d));
  t.query.assign(d, 0.0);
  matvec(rk.query_proj, t.x_query, t.query);

  Vector z_d(d, 0.0);
  t.evidence_mean.assign(d, 0.0);
  t.attention.clear();
  if (!t.evidence.empty()) {
    t.query_keys.assign(d, 0.0);
    matvec_t(rk.key_proj, t.query, t.query_keys);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Vector logits(t.evidence.size());
    for (std::size_t j = 0; j < logits.size(); ++j) logits[j] = scale * dot(t.query_keys, *t.evidence[j]);
    t.attention = softmax(logits);
    for (std::size_t j = 0; j < logits.size(); ++j) axpy(t.attention[j], *t.evidence[j], t.evidence_mean);
    matvec(rk.value_proj, t.evidence_mean, z_d);
  }

  t.mlp_in.assign(3 * d, 0.0);
  std::copy(t.x_query.begin(), t.x_query.end(), t.mlp_in.begin());
  std::copy(z_d.begin(), z_d.end(), t.mlp_in.begin() + static_cast<std::ptrdiff_t>(2 * d));
  t.hidden.assign(d, 0.0);
  matvec(rk.mlp_w1, t.mlp_in, t.hidden);
  for (std::size_t r = 0; r < d; ++r) t.hidden[r] = std::tanh(t.hidden[r] + rk.mlp_b1[r]);

  RankOutput out;
  t.z_d = z_d;
  out.score = dot(z, e_item) + dot(z_d, e_item) + dot(rk.mlp_w2, t.hidden) + rk.mlp_b2;
  out.attention = t.attention;
  out.aggregated_evidence = std::move(z_d);
  if (!std::isfinite(out.score)) throw Error("numerical-overflow");
  return out;
}

/// Backpropagates dL/dscore and, optionally, dL/dattention. Ranker and item
/// gradients accumulate into `grads`; the gradient with respect to z is added
/// to `dz` for the caller to push through the encoder.
inline void rank_backward(const ModelParams& params, const RankTape& t, double dscore,
                          std::span<const double> dattention, ModelParams& grads,
                          std::span<double> dz) {
  const std::size_t d = params.dim();
  const auto& rk = params.ranker;
  auto& g = grads.ranker;
  const auto e_item = params.item_embeddings.row(t.item);
  auto de_item = grads.item_embeddings.row(t.item);

  // residual dot products
  axpy(dscore, e_item, dz);
  axpy(dscore, t.z, de_item);
  axpy(dscore, t.z_d, de_item);

  // MLP head
  axpy(dscore, t.hidden, g.mlp_w2);
  g.mlp_b2 += dscore;
  Vector dpre(d);
  for (std::size_t r = 0; r < d; ++r)
    dpre[r] = dscore * rk.mlp_w2[r] * (1.0 - t.hidden[r] * t.hidden[r]);
  add_outer(1.0, dpre, t.mlp_in, g.mlp_w1);
  axpy(1.0, dpre, g.mlp_b1);
  Vector dx(3 * d);
  matvec_t(rk.mlp_w1, dpre, dx);
  Vector dx_query(dx.begin(), dx.begin() + static_cast<std::ptrdiff_t>(2 * d));

  if (!t.evidence.empty()) {
    Vector dz_d(dx.begin() + static_cast<std::ptrdiff_t>(2 * d), dx.end());
    axpy(dscore, e_item, dz_d);
    add_outer(1.0, dz_d, t.evidence_mean, g.value_proj);
    Vector dmean(d);
    matvec_t(rk.value_proj, dz_d, dmean);

    const std::size_t n = t.evidence.size();
    Vector da(n);
    double avg = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      da[j] = dot(dmean, *t.evidence[j]) + (dattention.empty() ? 0.0 : dattention[j]);
      avg += t.attention[j] * da[j];
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Vector dqk(d, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      axpy(scale * t.attention[j] * (da[j] - avg), *t.evidence[j], dqk);
    add_outer(1.0, t.query, dqk, g.key_proj);
    Vector dq(d);
    matvec(rk.key_proj, dqk, dq);
    add_outer(1.0, dq, t.x_query, g.query_proj);
    Vector dxq(2 * d);
    matvec_t(rk.query_proj, dq, dxq);
    axpy(1.0, dxq, dx_query);
  }

  axpy(1.0, std::span<const double>(dx_query).first(d), dz);
  axpy(1.0, std::span<const double>(dx_query).subspan(d), de_item);
}

/// 1-based rank of the evidence with the largest attention; lowest rank on ties.
inline std::size_t select_key_evidence(const RankOutput& out) {
  if (out.attention.empty()) throw Error("no-evidence");
  std::size_t best = 0;
  for (std::size_t j = 1; j < out.attention.size(); ++j)
    if (out.attention[j] > out.attention[best]) best = j;
  return best + 1;
}

struct CounterfactualResult {
  LossGrad loss;       // ranker and item-embedding gradients
  Vector dz;           // gradient with respect to the preference vector
  double score_drop = 0.0;
  std::size_t key_rank = 0;
};

/// max(0, gamma - (r(D) - r(D \ {d*}))) where d* is the most-attended
/// evidence. The choice of d* is held fixed; gradients flow through both
/// scores.
inline CounterfactualResult counterfactual_loss(const ModelParams& params,
                                                std::span<const double> z, ItemId item,
                                                const RetrievalResult& retrieved,
                                                const EvidencePool& pool, double gamma) {
  if (retrieved.empty()) throw Error("no-evidence");
  CounterfactualResult r;
  r.loss.grads = ModelParams::zeros_like(params);
  r.dz.assign(params.dim(), 0.0);
  RankTape full_tape, drop_tape;
  const auto full = rank_score(params, z, item, retrieved, pool, &full_tape);
  r.key_rank = select_key_evidence(full);
  const auto dropped = rank_score(params, z, item, retrieved.without_rank(r.key_rank), pool, &drop_tape);
  r.score_drop = full.score - dropped.score;
  const double hinge = gamma - r.score_drop;
  r.loss.value = std::max(0.0, hinge);
  if (hinge > 0.0) {
    rank_backward(params, full_tape, -1.0, {}, r.loss.grads, r.dz);
    rank_backward(params, drop_tape, 1.0, {}, r.loss.grads, r.dz);
  }
  return r;
}

namespace detail {

inline std::string format_rating(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", r);
  return buf;
}

inline std::string clause_for(const EvidenceItem& ev, std::size_t rank) {
  const std::string marker = "[E" + std::to_string(rank) + ": ";
  if (const auto* h = std::get_if<HistoryPayload>(&ev.payload))
    return "your interaction with item " + std::to_string(h->item_id) + " rated " +
           format_rating(h->rating) + " " + marker + "user_history]";
  if (const auto* a = std::get_if<AttributePayload>(&ev.payload))
    return "your preference for items with " + a->name + "=" + a->value + " " + marker +
           "attribute_pattern]";
  const auto& k = std::get<KgPayload>(ev.payload);
  return "item " + std::to_string(k.head) + " being " + k.relation + " item " +
         std::to_string(k.tail) + " " + marker + "knowledge_graph: " + k.relation + "]";
}

}  // namespace detail

/// Cites every retrieved evidence with attention >= tau_cite, most attended
/// first (rank order on ties); falls back to the single most attended one.
inline Explanation generate_explanation(const RetrievalResult& retrieved, const RankOutput& out,
                                        const EvidencePool& pool, double tau_cite) {
  if (retrieved.empty() || out.attention.size() != retrieved.size()) throw Error("no-evidence");
  Explanation ex;
  for (std::size_t j = 0; j < out.attention.size(); ++j)
    if (out.attention[j] >= tau_cite) ex.citations.push_back(j + 1);
  if (ex.citations.empty()) ex.citations.push_back(select_key_evidence(out));
  std::stable_sort(ex.citations.begin(), ex.citations.end(), [&](std::size_t a, std::size_t b) {
    return out.attention[a - 1] > out.attention[b - 1];
  });

  std::string text = "Based on ";
  for (std::size_t c = 0; c < ex.citations.size(); ++c) {
    const std::size_t rank = ex.citations[c];
    ex.per_citation_weight.push_back(out.attention[rank - 1]);
    if (c > 0) text += c + 1 == ex.citations.size() ? " and " : ", ";
    text += detail::clause_for(pool.at(retrieved.pool_id_at_rank(rank)), rank);
  }
  text += ", we recommend this item.";
  ex.text = std::move(text);
  return ex;
}

/// Sidecar record: one "rank<TAB>pool id<TAB>weight" line per citation.
inline std::string citation_sidecar(const Explanation& ex, const RetrievalResult& retrieved) {
  std::string out;
  char buf[96];
  for (std::size_t c = 0; c < ex.citations.size(); ++c) {
    std::snprintf(buf, sizeof buf, "%zu\t%u\t%.9f\n", ex.citations[c],
                  retrieved.pool_id_at_rank(ex.citations[c]), ex.per_citation_weight[c]);
    out += buf;
  }
  return out;
}

/// Numbers n from well-formed "[E<n>]" or "[E<n>: ...]" markers with
/// 1 <= n <= K. Anything else is ignored.
inline std::set<std::size_t> extract_evidence_ids(std::string_view text, std::size_t K) {
  std::set<std::size_t> ids;
  std::size_t pos = 0;
  while ((pos = text.find("[E", pos)) != std::string_view::npos) {
    std::size_t i = pos + 2;
    std::size_t n = 0;
    std::size_t digits = 0;
    while (i < text.size() && text[i] >= '0' && text[i] <= '9') {
      if (n <= 1'000'000'000) n = n * 10 + static_cast<std::size_t>(text[i] - '0');
      ++i;
      ++digits;
    }
    pos += 2;
    if (digits == 0 || i >= text.size() || (text[i] != ']' && text[i] != ':')) continue;
    const auto close = text.find(']', i);
    const auto reopen = text.find('[', i);
    if (close == std::string_view::npos || (reopen != std::string_view::npos && reopen < close))
      continue;
    if (n >= 1 && n <= K) ids.insert(n);
    pos = close + 1;
  }
  return ids;
}

/// 1 - |citations within 1..K| / K.
inline double coverage_loss(const std::set<std::size_t>& citations, std::size_t K) {
  if (K == 0) throw Error("invalid-k");
  std::size_t hits = 0;
  for (auto c : citations)
    if (c >= 1 && c <= K) ++hits;
  return 1.0 - static_cast<double>(hits) / static_cast<double>(K);
}

struct CoverageSurrogate {
  double value = 0.0;
  Vector dattention;
};

/// 1 - mean_j sigmoid((a_j - tau) / temp): a smooth stand-in for the
/// citation-count loss, differentiable in the attention weights.
inline CoverageSurrogate coverage_surrogate(const RankOutput& out, double tau_cite,
                                            double temp_cite) {
  if (out.attention.empty()) throw Error("no-evidence");
  CoverageSurrogate s;
  const double k = static_cast<double>(out.attention.size());
  s.value = 1.0;
  s.dattention.resize(out.attention.size());
  for (std::size_t j = 0; j < out.attention.size(); ++j) {
    const double sig = 1.0 / (1.0 + std::exp(-(out.attention[j] - tau_cite) / temp_cite));
    s.value -= sig / k;
    s.dattention[j] = -sig * (1.0 - sig) / (temp_cite * k);
  }
  return s;
}

inline double consistency_loss(double l_cov, double l_cf, double beta) { return l_cov + beta * l_cf; }

}  // namespace cirr
