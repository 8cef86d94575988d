// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cirr/error.hpp"
#include "cirr/random.hpp"
#include "cirr/tensor.hpp"

namespace cirr {

using UserId = std::uint32_t;
using ItemId = std::uint32_t;
using EnvId = std::uint32_t;
using EvidenceId = std::uint32_t;

struct Interaction {
  UserId user_id = 0;
  ItemId item_id = 0;
  double rating = 0.0;
  std::int64_t timestamp = 0;
  EnvId env_id = 0;

  bool operator==(const Interaction&) const = default;
};

/// Interactions sorted by (user_id, timestamp). Each user's stream is a
/// contiguous slice; `user_slice` finds it.
class InteractionDataset {
 public:
  InteractionDataset() = default;
  InteractionDataset(std::vector<Interaction> interactions, std::size_t num_users,
                     std::size_t num_items, std::size_t num_envs)
      : interactions_(std::move(interactions)),
        num_users_(num_users),
        num_items_(num_items),
        num_envs_(num_envs) {
    std::stable_sort(interactions_.begin(), interactions_.end(),
                     [](const Interaction& a, const Interaction& b) {
                       return a.user_id != b.user_id ? a.user_id < b.user_id
                                                     : a.timestamp < b.timestamp;
                     });
    offsets_.assign(num_users_ + 1, 0);
    for (const auto& x : interactions_) {
      if (x.user_id >= num_users_) throw Error("user-out-of-range", std::to_string(x.user_id));
      ++offsets_[x.user_id + 1];
    }
    for (std::size_t u = 0; u < num_users_; ++u) offsets_[u + 1] += offsets_[u];
  }

  const std::vector<Interaction>& interactions() const { return interactions_; }
  std::size_t num_users() const { return num_users_; }
  std::size_t num_items() const { return num_items_; }
  std::size_t num_envs() const { return num_envs_; }

  std::span<const Interaction> user_slice(UserId u) const {
    return {interactions_.data() + offsets_[u], offsets_[u + 1] - offsets_[u]};
  }

  /// Throws on the first violated file-level invariant.
  void validate() const {
    if (interactions_.empty()) throw Error("empty-dataset");
    std::set<EnvId> envs;
    for (const auto& x : interactions_) {
      if (x.item_id >= num_items_) throw Error("item-out-of-range", std::to_string(x.item_id));
      if (x.env_id >= num_envs_) throw Error("env-out-of-range", std::to_string(x.env_id));
      if (!(x.rating >= 1.0 && x.rating <= 5.0))
        throw Error("rating-out-of-range", std::to_string(x.rating));
      envs.insert(x.env_id);
    }
    for (UserId u = 0; u < num_users_; ++u) {
      const auto n = user_slice(u).size();
      if (n == 1) throw Error("short-user-stream", "user " + std::to_string(u));
    }
    if (envs.size() < 2) throw Error("single-environment");
  }

  bool operator==(const InteractionDataset& o) const {
    return interactions_ == o.interactions_ && num_users_ == o.num_users_ &&
           num_items_ == o.num_items_ && num_envs_ == o.num_envs_;
  }

 private:
  std::vector<Interaction> interactions_;
  std::size_t num_users_ = 0;
  std::size_t num_items_ = 0;
  std::size_t num_envs_ = 0;
  std::vector<std::size_t> offsets_{0};
};

struct TrainingExample {
  UserId user_id = 0;
  std::vector<ItemId> context;  // most recent last
  ItemId target = 0;
  EnvId env_id = 0;
  std::int64_t timestamp = 0;   // of the target interaction
  std::vector<ItemId> negatives;
};

enum class EvidenceSource { history, attribute, kg_triplet };

inline const char* source_name(EvidenceSource s) {
  switch (s) {
    case EvidenceSource::history: return "history";
    case EvidenceSource::attribute: return "attribute";
    case EvidenceSource::kg_triplet: return "kg_triplet";
  }
  return "?";
}

/// Tag used inside explanation citations.
inline const char* citation_tag(EvidenceSource s) {
  switch (s) {
    case EvidenceSource::history: return "user_history";
    case EvidenceSource::attribute: return "attribute_pattern";
    case EvidenceSource::kg_triplet: return "knowledge_graph";
  }
  return "?";
}

struct HistoryPayload {
  UserId user_id = 0;
  ItemId item_id = 0;
  double rating = 0.0;
  std::int64_t timestamp = 0;
  bool operator==(const HistoryPayload&) const = default;
};

struct AttributePayload {
  std::string name;
  std::string value;
  ItemId item_id = 0;
  bool operator==(const AttributePayload&) const = default;
};

struct KgPayload {
  ItemId head = 0;
  std::string relation;
  ItemId tail = 0;
  bool operator==(const KgPayload&) const = default;
};

using EvidencePayload = std::variant<HistoryPayload, AttributePayload, KgPayload>;

struct EvidenceItem {
  EvidenceId id = 0;
  EvidencePayload payload;
  Vector embedding;  // empty until embed_evidence
  double stability_var = 0.0;

  EvidenceSource source() const { return static_cast<EvidenceSource>(payload.index()); }
  bool operator==(const EvidenceItem&) const = default;
};

/// Evidence indexed by dense id, with a per-user candidate index and a
/// per-item index (attributes and kg triplets touching an item).
class EvidencePool {
 public:
  EvidencePool() = default;

  /// Items must carry ids 0..n-1 in order.
  explicit EvidencePool(std::vector<EvidenceItem> items) : items_(std::move(items)) {
    for (std::size_t i = 0; i < items_.size(); ++i)
      if (items_[i].id != i) throw Error("non-dense-evidence-ids", std::to_string(items_[i].id));
    rebuild_index();
  }

  const std::vector<EvidenceItem>& items() const { return items_; }
  std::vector<EvidenceItem>& mutable_items() { return items_; }
  const EvidenceItem& at(EvidenceId id) const { return items_.at(id); }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  bool embedded() const { return !items_.empty() && !items_.front().embedding.empty(); }

  /// The indexes are derived from the items.
  bool operator==(const EvidencePool& o) const { return items_ == o.items_; }

  /// History evidence of the user, then attribute/kg evidence of the items in
  /// their history; sorted, no duplicates.
  std::span<const EvidenceId> user_candidates(UserId u) const {
    auto it = by_user_.find(u);
    if (it == by_user_.end()) return {};
    return it->second;
  }

  /// Attribute and kg evidence that mention `item`.
  std::span<const EvidenceId> item_evidence(ItemId item) const {
    auto it = by_item_.find(item);
    if (it == by_item_.end()) return {};
    return it->second;
  }

  /// History evidence of `u` for `item` strictly before `before`, latest first.
  std::vector<EvidenceId> history_of(UserId u, ItemId item, std::int64_t before) const {
    std::vector<EvidenceId> out;
    auto it = history_.find({u, item});
    if (it == history_.end()) return out;
    for (auto id = it->second.rbegin(); id != it->second.rend(); ++id)
      if (std::get<HistoryPayload>(items_[*id].payload).timestamp < before) out.push_back(*id);
    return out;
  }

  void rebuild_index() {
    by_user_.clear();
    by_item_.clear();
    history_.clear();
    // Attribute evidence with the same (name, value) embeds identically; every
    // carrier indexes the lowest id so candidate lists hold one copy.
    std::map<std::pair<std::string, std::string>, EvidenceId> canonical;
    for (const auto& ev : items_) {
      if (const auto* a = std::get_if<AttributePayload>(&ev.payload)) {
        by_item_[a->item_id].push_back(canonical.try_emplace({a->name, a->value}, ev.id).first->second);
      } else if (const auto* k = std::get_if<KgPayload>(&ev.payload)) {
        by_item_[k->head].push_back(ev.id);
        if (k->tail != k->head) by_item_[k->tail].push_back(ev.id);
      }
    }
    std::map<UserId, std::set<ItemId>> user_items;
    for (const auto& ev : items_) {
      if (const auto* h = std::get_if<HistoryPayload>(&ev.payload)) {
        by_user_[h->user_id].push_back(ev.id);
        history_[{h->user_id, h->item_id}].push_back(ev.id);
        user_items[h->user_id].insert(h->item_id);
      }
    }
    for (auto& [u, ids] : by_user_) {
      for (ItemId item : user_items[u]) {
        auto it = by_item_.find(item);
        if (it != by_item_.end()) ids.insert(ids.end(), it->second.begin(), it->second.end());
      }
      std::sort(ids.begin(), ids.end());
      ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    }
    for (auto& [item, ids] : by_item_) {
      std::sort(ids.begin(), ids.end());
      ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    }
    for (auto& [key, ids] : history_)
      std::sort(ids.begin(), ids.end(), [this](EvidenceId a, EvidenceId b) {
        return std::get<HistoryPayload>(items_[a].payload).timestamp <
               std::get<HistoryPayload>(items_[b].payload).timestamp;
      });
  }

 private:
  std::vector<EvidenceItem> items_;
  std::map<UserId, std::vector<EvidenceId>> by_user_;
  std::map<ItemId, std::vector<EvidenceId>> by_item_;
  std::map<std::pair<UserId, ItemId>, std::vector<EvidenceId>> history_;
};

/// Single-head attention block plus a 3d -> d -> 1 tanh MLP.
struct RankerParams {
  Matrix query_proj;  // d x 2d, applied to [z_u ; e_item]
  Matrix key_proj;    // d x d
  Matrix value_proj;  // d x d
  Matrix mlp_w1;      // d x 3d
  Vector mlp_b1;      // d
  Vector mlp_w2;      // d
  double mlp_b2 = 0.0;

  bool operator==(const RankerParams&) const = default;
};

enum class ParamGroup : unsigned { encoder = 1, ranker = 2, all = 3 };

struct ModelParams {
  Matrix item_embeddings;  // |I| x d
  Vector recency_weights;  // L
  RankerParams ranker;
  double irm_dummy_w = 1.0;

  std::size_t dim() const { return item_embeddings.cols(); }
  std::size_t num_items() const { return item_embeddings.rows(); }
  std::size_t max_context() const { return recency_weights.size(); }

  static ModelParams zeros(std::size_t num_items, std::size_t d, std::size_t max_context) {
    ModelParams p;
    p.item_embeddings = Matrix(num_items, d);
    p.recency_weights.assign(max_context, 0.0);
    p.ranker.query_proj = Matrix(d, 2 * d);
    p.ranker.key_proj = Matrix(d, d);
    p.ranker.value_proj = Matrix(d, d);
    p.ranker.mlp_w1 = Matrix(d, 3 * d);
    p.ranker.mlp_b1.assign(d, 0.0);
    p.ranker.mlp_w2.assign(d, 0.0);
    p.ranker.mlp_b2 = 0.0;
    p.irm_dummy_w = 0.0;
    return p;
  }

  static ModelParams zeros_like(const ModelParams& other) {
    return zeros(other.num_items(), other.dim(), other.max_context());
  }

  /// Visits every trainable block as (name, span). The dummy multiplier is
  /// not trainable and is not visited.
  template <typename Fn>
  void visit(Fn&& fn, ParamGroup group = ParamGroup::all) {
    visit_impl(*this, fn, group);
  }
  template <typename Fn>
  void visit(Fn&& fn, ParamGroup group = ParamGroup::all) const {
    visit_impl(*this, fn, group);
  }

  std::size_t parameter_count(ParamGroup group = ParamGroup::all) const {
    std::size_t n = 0;
    visit([&](const char*, auto span) { n += span.size(); }, group);
    return n;
  }

  bool finite() const {
    bool ok = std::isfinite(irm_dummy_w);
    visit([&](const char*, auto span) { ok = ok && all_finite(span); });
    return ok;
  }

  bool operator==(const ModelParams&) const = default;

 private:
  template <typename Self, typename Fn>
  static void visit_impl(Self& self, Fn& fn, ParamGroup group) {
    const auto bits = static_cast<unsigned>(group);
    if (bits & static_cast<unsigned>(ParamGroup::encoder)) {
      fn("item_embeddings", self.item_embeddings.flat());
      fn("recency_weights", std::span(self.recency_weights));
    }
    if (bits & static_cast<unsigned>(ParamGroup::ranker)) {
      fn("query_proj", self.ranker.query_proj.flat());
      fn("key_proj", self.ranker.key_proj.flat());
      fn("value_proj", self.ranker.value_proj.flat());
      fn("mlp_w1", self.ranker.mlp_w1.flat());
      fn("mlp_b1", std::span(self.ranker.mlp_b1));
      fn("mlp_w2", std::span(self.ranker.mlp_w2));
      fn("mlp_b2", std::span(&self.ranker.mlp_b2, 1));
    }
  }
};

/// Small random initialization; the dummy multiplier starts at 1.
inline ModelParams init_params(std::size_t num_items, std::size_t d, std::size_t max_context,
                               std::uint64_t seed, double embedding_scale = 0.1) {
  ModelParams p = ModelParams::zeros(num_items, d, max_context);
  Rng rng(derive_seed(seed, 0x1a17));
  for (auto& x : p.item_embeddings.flat()) x = embedding_scale * rng.normal();
  const auto fill = [&](Matrix& m) {
    const double s = 1.0 / std::sqrt(static_cast<double>(m.cols()));
    for (auto& x : m.flat()) x = s * rng.normal();
  };
  fill(p.ranker.query_proj);
  fill(p.ranker.key_proj);
  fill(p.ranker.value_proj);
  fill(p.ranker.mlp_w1);
  for (auto& x : p.ranker.mlp_w2) x = 0.1 * rng.normal() / std::sqrt(static_cast<double>(d));
  p.irm_dummy_w = 1.0;
  return p;
}

struct HyperParams {
  double lambda1 = 0.1;
  double lambda2 = 0.05;
  double alpha = 0.6;
  double beta = 0.5;
  double gamma = 0.2;
  std::size_t K = 20;
  std::size_t d = 128;
  std::size_t L = 20;
  std::size_t n_neg = 16;
  double lr = 1e-4;
  std::size_t batch_size = 256;
  std::size_t T1 = 5;
  std::size_t T2 = 20;
  double tau_cite = 0.01;
  double temp_cite = 0.0025;
  std::uint64_t seed = 0;
  // Keep the invariance penalty active during joint training.
  bool stage2_irm = true;
  std::size_t eval_negatives = 100;
  std::size_t stability_users = 200;

  void validate() const {
    const auto bad = [](const std::string& what) { throw Error("bad-hyperparams", what); };
    if (!(lambda1 >= 0)) bad("lambda1");
    if (!(lambda2 >= 0)) bad("lambda2");
    if (!(alpha >= 0 && alpha <= 1)) bad("alpha");
    if (!(beta >= 0)) bad("beta");
    if (!(gamma >= 0)) bad("gamma");
    if (d < 1) bad("d");
    if (L < 1) bad("L");
    if (n_neg < 1) bad("n_neg");
    if (!(lr > 0)) bad("lr");
    if (batch_size < 1) bad("batch_size");
    if (!(tau_cite > 0 && tau_cite < 1)) bad("tau_cite");
    if (!(temp_cite > 0)) bad("temp_cite");
  }

  bool operator==(const HyperParams&) const = default;
};

struct Explanation {
  std::string text;
  std::vector<std::size_t> citations;  // 1-based ranks into the retrieved top-K
  std::vector<double> per_citation_weight;
};

}  // namespace cirr
