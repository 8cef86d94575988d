// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cirr/encoder.hpp"
#include "cirr/error.hpp"
#include "cirr/types.hpp"

namespace cirr {

/// Top-K evidence in rank order. Rank r (1-based) is evidence_ids[r - 1].
struct RetrievalResult {
  std::vector<EvidenceId> evidence_ids;
  std::vector<double> scores;

  std::size_t size() const { return evidence_ids.size(); }
  bool empty() const { return evidence_ids.empty(); }
  EvidenceId pool_id_at_rank(std::size_t rank) const { return evidence_ids.at(rank - 1); }

  /// Copy without the evidence at 1-based `rank`.
  RetrievalResult without_rank(std::size_t rank) const {
    RetrievalResult r = *this;
    r.evidence_ids.erase(r.evidence_ids.begin() + static_cast<std::ptrdiff_t>(rank - 1));
    r.scores.erase(r.scores.begin() + static_cast<std::ptrdiff_t>(rank - 1));
    return r;
  }

  /// One line per rank: rank, pool id, score (9 decimals), source tag.
  std::string serialize(const EvidencePool& pool) const {
    std::string out;
    char buf[96];
    for (std::size_t r = 0; r < evidence_ids.size(); ++r) {
      std::snprintf(buf, sizeof buf, "%zu\t%u\t%.9f\t%s\n", r + 1, evidence_ids[r], scores[r],
                    source_name(pool.at(evidence_ids[r]).source()));
      out += buf;
    }
    return out;
  }

  bool operator==(const RetrievalResult&) const = default;
};

/// Evidence embeddings from the current item embeddings, unit-normalized:
/// history -> the item; attribute -> mean over items carrying the same
/// (name, value); kg triplet -> mean of head and tail.
inline EvidencePool embed_evidence(EvidencePool pool, const ModelParams& params) {
  const std::size_t d = params.dim();
  const auto item_row = [&](ItemId i) {
    if (i >= params.num_items()) throw Error("item-out-of-range", std::to_string(i));
    return params.item_embeddings.row(i);
  };

  std::map<std::pair<std::string, std::string>, std::vector<ItemId>> carriers;
  for (const auto& ev : pool.items())
    if (const auto* a = std::get_if<AttributePayload>(&ev.payload))
      if (a->item_id < params.num_items()) carriers[{a->name, a->value}].push_back(a->item_id);
  std::map<std::pair<std::string, std::string>, Vector> attr_mean;
  for (auto& [key, items] : carriers) {
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    Vector m(d, 0.0);
    for (ItemId i : items) axpy(1.0 / static_cast<double>(items.size()), item_row(i), m);
    attr_mean.emplace(key, std::move(m));
  }

  for (auto& ev : pool.mutable_items()) {
    Vector e(d, 0.0);
    if (const auto* h = std::get_if<HistoryPayload>(&ev.payload)) {
      axpy(1.0, item_row(h->item_id), e);
    } else if (const auto* a = std::get_if<AttributePayload>(&ev.payload)) {
      auto it = attr_mean.find({a->name, a->value});
      if (it == attr_mean.end())
        throw Error("dangling-attribute", a->name + "=" + a->value);
      e = it->second;
    } else {
      const auto& k = std::get<KgPayload>(ev.payload);
      axpy(0.5, item_row(k.head), e);
      axpy(0.5, item_row(k.tail), e);
    }
    const double n = norm(e);
    if (!(n > 1e-12)) throw Error("degenerate-embedding", "evidence " + std::to_string(ev.id));
    for (auto& x : e) x /= n;
    ev.embedding = std::move(e);
  }
  return pool;
}

/// Cosine similarity between evidence and preference.
inline double semantic_score(std::span<const double> e_d, std::span<const double> z) {
  if (e_d.size() != z.size()) throw Error("shape-mismatch");
  const double nz = norm(z);
  if (!(nz > 0.0)) throw Error("zero-preference-vector");
  const double ne = norm(e_d);
  if (!(ne > 0.0)) throw Error("degenerate-embedding");
  return std::clamp(dot(e_d, z) / (ne * nz), -1.0, 1.0);
}

/// Two-pass population variance.
inline double population_variance(std::span<const double> xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - mean) * (x - mean);
  return v / static_cast<double>(xs.size());
}

/// -Var_e[cos(e_d, z_e)] over per-environment encodings of one user.
inline double invariance_score(std::span<const double> e_d,
                               std::span<const PreferenceVector> env_encodings) {
  if (env_encodings.size() < 2) throw Error("insufficient-environments");
  Vector sims;
  sims.reserve(env_encodings.size());
  for (const auto& z : env_encodings) sims.push_back(semantic_score(e_d, z));
  return -population_variance(sims);
}

/// Per-evidence stability statistic: mean over sampled users (those with at
/// least two non-empty environment subsequences among `envs`) of the variance
/// of cos(e_d, encode_env(u, e)). Inference only ever reads the stored value.
inline EvidencePool precompute_stability(EvidencePool pool, const InteractionDataset& data,
                                         const ModelParams& params,
                                         std::span<const EnvId> envs, std::uint64_t seed,
                                         std::size_t max_users = 200) {
  if (!pool.embedded()) pool = embed_evidence(std::move(pool), params);

  std::vector<UserId> eligible;
  for (UserId u = 0; u < data.num_users(); ++u) {
    std::size_t present = 0;
    for (EnvId e : envs) {
      for (const auto& x : data.user_slice(u))
        if (x.env_id == e) {
          ++present;
          break;
        }
    }
    if (present >= 2) eligible.push_back(u);
  }
  if (eligible.empty()) throw Error("no-multi-env-users");
  Rng rng(derive_seed(seed, 0x57ab));
  rng.shuffle(eligible);
  eligible.resize(std::min(max_users, eligible.size()));
  std::sort(eligible.begin(), eligible.end());

  std::vector<double> acc(pool.size(), 0.0);
  std::size_t used = 0;
  std::vector<Vector> unit;
  Vector sims;
  for (UserId u : eligible) {
    unit.clear();
    for (EnvId e : envs) {
      auto z = encode_env(params, data.user_slice(u), e);
      if (!z) continue;
      const double n = norm(*z);
      if (!(n > 0.0)) continue;
      for (auto& x : *z) x /= n;
      unit.push_back(std::move(*z));
    }
    if (unit.size() < 2) continue;
    ++used;
    sims.resize(unit.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
      const auto& e_d = pool.at(static_cast<EvidenceId>(i)).embedding;
      for (std::size_t k = 0; k < unit.size(); ++k) sims[k] = std::clamp(dot(e_d, unit[k]), -1.0, 1.0);
      acc[i] += population_variance(sims);
    }
  }
  if (used == 0) throw Error("no-multi-env-users");
  for (std::size_t i = 0; i < pool.size(); ++i)
    pool.mutable_items()[i].stability_var = acc[i] / static_cast<double>(used);
  return pool;
}

inline double combined_score(double s_sem, double stability_var, double alpha) {
  return alpha * s_sem + (1.0 - alpha) * (-stability_var);
}

namespace detail {

struct Scored {
  double score;
  EvidenceId id;
};

inline bool rank_before(const Scored& a, const Scored& b) {
  return a.score != b.score ? a.score > b.score : a.id < b.id;
}

inline RetrievalResult to_result(std::span<const Scored> xs) {
  RetrievalResult r;
  r.evidence_ids.reserve(xs.size());
  r.scores.reserve(xs.size());
  for (const auto& s : xs) {
    r.evidence_ids.push_back(s.id);
    r.scores.push_back(s.score);
  }
  return r;
}

}  // namespace detail

/// Scores each candidate with combined_score and keeps the best K by
/// (score desc, pool id asc). With fewer than K candidates all are returned.
inline RetrievalResult retrieve_topk(std::span<const double> z, const EvidencePool& pool,
                                     std::span<const EvidenceId> candidates,
                                     const HyperParams& hp) {
  if (candidates.empty()) throw Error("no-candidates");
  if (hp.K == 0) return {};
  std::vector<detail::Scored> scored;
  scored.reserve(candidates.size());
  for (EvidenceId id : candidates) {
    const auto& ev = pool.at(id);
    scored.push_back({combined_score(semantic_score(ev.embedding, z), ev.stability_var, hp.alpha), id});
  }
  const std::size_t k = std::min(hp.K, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                    detail::rank_before);
  return detail::to_result(std::span(scored).first(k));
}

/// Evidence visible to a query whose context is `context` (time `before`):
/// the user's latest history record of each context item, plus attribute and
/// kg evidence of the context items. Sorted, unique.
inline std::vector<EvidenceId> context_candidates(const EvidencePool& pool, UserId user,
                                                  std::span<const ItemId> context,
                                                  std::int64_t before) {
  std::vector<EvidenceId> out;
  for (ItemId i : context) {
    const auto hist = pool.history_of(user, i, before);
    if (!hist.empty()) out.push_back(hist.front());
    const auto ev = pool.item_evidence(i);
    out.insert(out.end(), ev.begin(), ev.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Candidate set for scoring `item`: context candidates plus the item's own
/// attribute and kg evidence.
inline std::vector<EvidenceId> query_candidates(const EvidencePool& pool, UserId user,
                                                std::span<const ItemId> context,
                                                std::int64_t before, ItemId item) {
  auto out = context_candidates(pool, user, context, before);
  const auto ev = pool.item_evidence(item);
  out.insert(out.end(), ev.begin(), ev.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Retrieval for one query and many scored items. The context candidates are
/// scored once; each item only adds its own evidence. Equivalent to
/// retrieve_topk(z, pool, query_candidates(...), hp) for every item.
class QueryRetriever {
 public:
  /// `exclude` removes one evidence from every candidate set.
  QueryRetriever(const EvidencePool& pool, std::span<const double> z, const HyperParams& hp,
                 std::vector<EvidenceId> context_ids,
                 std::optional<EvidenceId> exclude = std::nullopt)
      : pool_(&pool), z_(z.begin(), z.end()), hp_(hp), base_ids_(std::move(context_ids)),
        exclude_(exclude) {
    if (hp_.K == 0) return;
    if (exclude_) std::erase(base_ids_, *exclude_);
    std::sort(base_ids_.begin(), base_ids_.end());
    base_.reserve(base_ids_.size());
    for (EvidenceId id : base_ids_) base_.push_back(score(id));
    std::sort(base_.begin(), base_.end(), detail::rank_before);
  }

  RetrievalResult for_item(ItemId item) const {
    if (hp_.K == 0) return {};
    std::vector<detail::Scored> extra;
    for (EvidenceId id : pool_->item_evidence(item))
      if (id != exclude_ && !std::binary_search(base_ids_.begin(), base_ids_.end(), id))
        extra.push_back(score(id));
    if (base_.empty() && extra.empty()) throw Error("no-candidates");
    std::sort(extra.begin(), extra.end(), detail::rank_before);
    std::vector<detail::Scored> merged;
    merged.reserve(hp_.K);
    std::size_t a = 0, b = 0;
    while (merged.size() < hp_.K && (a < base_.size() || b < extra.size())) {
      if (b == extra.size() || (a < base_.size() && detail::rank_before(base_[a], extra[b])))
        merged.push_back(base_[a++]);
      else
        merged.push_back(extra[b++]);
    }
    return detail::to_result(merged);
  }

 private:
  detail::Scored score(EvidenceId id) const {
    const auto& ev = pool_->at(id);
    return {combined_score(semantic_score(ev.embedding, z_), ev.stability_var, hp_.alpha), id};
  }

  const EvidencePool* pool_;
  Vector z_;
  HyperParams hp_;
  std::vector<EvidenceId> base_ids_;
  std::vector<detail::Scored> base_;
  std::optional<EvidenceId> exclude_;
};

}  // namespace cirr
