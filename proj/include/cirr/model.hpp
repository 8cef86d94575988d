// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "cirr/encoder.hpp"
#include "cirr/ranker.hpp"
#include "cirr/retriever.hpp"
#include "cirr/split.hpp"
#include "cirr/types.hpp"

namespace cirr {

/// Inference-time pipeline: encode -> retrieve -> rank. Holds references;
/// the pool must already be prepared (embedded, stability computed).
class CirrModel {
 public:
  CirrModel(const ModelParams& params, const EvidencePool& pool, const HyperParams& hp)
      : params_(&params), pool_(&pool), hp_(hp) {}

  const ModelParams& params() const { return *params_; }
  const EvidencePool& pool() const { return *pool_; }
  const HyperParams& hyper() const { return hp_; }
  std::size_t K() const { return hp_.K; }

  /// Per-query state: the preference vector and context-scored retrieval.
  class Query {
   public:
    Query(const CirrModel& m, UserId user, std::span<const ItemId> context, std::int64_t before,
          std::optional<EvidenceId> exclude = std::nullopt)
        : model_(&m),
          z_(encode(m.params(), context)),
          retriever_(m.pool(), z_, m.hp_,
                     m.hp_.K == 0 ? std::vector<EvidenceId>{}
                                  : context_candidates(m.pool(), user, context, before),
                     exclude) {}

    const PreferenceVector& z() const { return z_; }

    RetrievalResult retrieve(ItemId item) const {
      if (model_->hp_.K == 0) return {};
      return retriever_.for_item(item);
    }

    RankOutput rank(ItemId item, const RetrievalResult& retrieved) const {
      return rank_score(model_->params(), z_, item, retrieved, model_->pool());
    }

    double score(ItemId item) const { return rank(item, retrieve(item)).score; }

   private:
    const CirrModel* model_;
    PreferenceVector z_;
    QueryRetriever retriever_;
  };

  Vector score(const EvalCase& c, std::span<const ItemId> items,
               std::optional<EvidenceId> exclude = std::nullopt) const {
    Query q(*this, c.user_id, c.context, c.timestamp, exclude);
    Vector s;
    s.reserve(items.size());
    for (ItemId i : items) s.push_back(q.score(i));
    return s;
  }

 private:
  const ModelParams* params_;
  const EvidencePool* pool_;
  HyperParams hp_;
};

}  // namespace cirr
