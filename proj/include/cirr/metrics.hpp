// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cirr/model.hpp"
#include "cirr/ranker.hpp"
#include "cirr/split.hpp"
#include "cirr/types.hpp"

namespace cirr {

/// Single relevant item: 1 / log2(rank + 1) inside the cutoff.
inline double ndcg_at_k(long rank, std::size_t k) {
  if (rank < 1) throw Error("invalid-rank", std::to_string(rank));
  if (k < 1) throw Error("invalid-k");
  return static_cast<std::size_t>(rank) <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

inline double hr_at_k(long rank, std::size_t k) {
  if (rank < 1) throw Error("invalid-rank", std::to_string(rank));
  if (k < 1) throw Error("invalid-k");
  return static_cast<std::size_t>(rank) <= k ? 1.0 : 0.0;
}

/// Relative NDCG drop from the training environment to a shifted one.
inline double ood_degradation(double ndcg_train, double ndcg_test) {
  if (!(ndcg_train > 0.0)) throw Error("degenerate-baseline");
  return (ndcg_train - ndcg_test) / ndcg_train;
}

/// Mean over explanations of |citations within 1..K| / K.
inline double evidence_coverage_metric(std::span<const Explanation> explanations, std::size_t K) {
  if (explanations.empty()) throw Error("empty-eval-set");
  double total = 0.0;
  for (const auto& ex : explanations) {
    const std::set<std::size_t> cited(ex.citations.begin(), ex.citations.end());
    total += 1.0 - coverage_loss(cited, K);
  }
  return total / static_cast<double>(explanations.size());
}

/// Same, with each explanation measured against its own effective K.
inline double evidence_coverage_metric(std::span<const Explanation> explanations,
                                       std::span<const std::size_t> Ks) {
  if (explanations.empty()) throw Error("empty-eval-set");
  double total = 0.0;
  for (std::size_t i = 0; i < explanations.size(); ++i)
    total += evidence_coverage_metric(explanations.subspan(i, 1), Ks[i]);
  return total / static_cast<double>(explanations.size());
}

/// 1-based rank of items[0] by score descending; ties go to the lower item id.
inline long rank_of_target(std::span<const double> scores, std::span<const ItemId> items) {
  long rank = 1;
  for (std::size_t c = 1; c < items.size(); ++c)
    if (scores[c] > scores[0] || (scores[c] == scores[0] && items[c] < items[0])) ++rank;
  return rank;
}

/// Items sorted by (score desc, id asc), first k.
inline std::vector<ItemId> top_k_items(std::span<const double> scores, std::span<const ItemId> items,
                                       std::size_t k) {
  std::vector<std::size_t> idx(items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : items[a] < items[b];
                    });
  std::vector<ItemId> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(items[idx[i]]);
  return out;
}

/// F1 of a top-k list against the ground-truth set.
inline double f1_at_k(std::span<const ItemId> ranking, const std::set<ItemId>& truth, std::size_t k) {
  if (truth.empty()) throw Error("empty-ground-truth");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) hits += truth.count(ranking[i]);
  return 2.0 * static_cast<double>(hits) / static_cast<double>(k + truth.size());
}

struct F1Case {
  std::vector<ItemId> full;     // ranking with all retrieved evidence
  std::vector<ItemId> removed;  // ranking with the key evidence removed
  std::set<ItemId> truth;
  double score_drop = 0.0;
};

struct DeltaF1 {
  double delta_f1 = 0.0;
  double mean_score_drop = 0.0;
};

/// Mean F1 drop of the top-k list when the key evidence is removed, reported
/// with the mean raw score drop.
inline DeltaF1 delta_f1(std::span<const F1Case> cases, std::size_t k = 10) {
  DeltaF1 r;
  if (cases.empty()) return r;
  for (const auto& c : cases) {
    r.delta_f1 += f1_at_k(c.full, c.truth, k) - f1_at_k(c.removed, c.truth, k);
    r.mean_score_drop += c.score_drop;
  }
  r.delta_f1 /= static_cast<double>(cases.size());
  r.mean_score_drop /= static_cast<double>(cases.size());
  return r;
}

struct EvalOptions {
  std::uint64_t seed = 0;
  std::size_t negatives = 100;
  bool full_catalog = false;
  std::size_t cutoff = 10;
  bool faithfulness = true;
};

/// Candidate list for case `index`: target first, then seeded negatives (or
/// the whole catalog).
inline std::vector<ItemId> eval_candidates(const EvalCase& c, std::size_t index,
                                           std::size_t num_items, const EvalOptions& opt) {
  std::vector<ItemId> items{c.target};
  if (opt.full_catalog) {
    for (ItemId i = 0; i < num_items; ++i)
      if (i != c.target) items.push_back(i);
    return items;
  }
  Rng rng(derive_seed(opt.seed, 0xe7a1, index));
  const auto negs = sample_negatives(rng, num_items, c.target, opt.negatives);
  items.insert(items.end(), negs.begin(), negs.end());
  return items;
}

struct EnvMetrics {
  EnvId env = 0;
  std::size_t cases = 0;
  double ndcg = 0.0;
  double hr = 0.0;
};

struct EvalReport {
  std::vector<EnvMetrics> per_env;  // ascending env id
  EnvMetrics overall;
  EnvId train_env = 0;
  EnvId test_env = 0;
  double ood_delta = 0.0;
  double evidence_coverage = 0.0;
  double delta_f1 = 0.0;
  double mean_score_drop = 0.0;
  double cf_pass_rate = 0.0;  // fraction of cases with score drop >= gamma
  std::size_t faithfulness_cases = 0;
  HyperParams config;
  std::uint64_t seed = 0;

  const EnvMetrics& env(EnvId e) const {
    for (const auto& m : per_env)
      if (m.env == e) return m;
    throw Error("unknown-environment", std::to_string(e));
  }

  /// Flat metric,env,value rows with 6 decimals.
  std::string to_csv() const {
    std::string out = "metric,env,value\n";
    char buf[128];
    const auto row = [&](const char* name, const std::string& env, double v) {
      std::snprintf(buf, sizeof buf, "%s,%s,%.6f\n", name, env.c_str(), v);
      out += buf;
    };
    for (const auto& m : per_env) {
      row("cases", std::to_string(m.env), static_cast<double>(m.cases));
      row("ndcg10", std::to_string(m.env), m.ndcg);
      row("hr10", std::to_string(m.env), m.hr);
    }
    row("ndcg10", "all", overall.ndcg);
    row("hr10", "all", overall.hr);
    row("ood_delta", std::to_string(train_env) + "->" + std::to_string(test_env), ood_delta);
    row("evidence_coverage", "all", evidence_coverage);
    row("delta_f1", "all", delta_f1);
    row("mean_score_drop", "all", mean_score_drop);
    row("cf_pass_rate", "all", cf_pass_rate);
    return out;
  }

  std::string to_text() const {
    std::string out;
    char buf[256];
    out += "environment  cases   NDCG@10   HR@10\n";
    for (const auto& m : per_env) {
      std::snprintf(buf, sizeof buf, "env-%-8u %6zu  %.6f  %.6f\n", m.env, m.cases, m.ndcg, m.hr);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "%-12s %6zu  %.6f  %.6f\n", "all", overall.cases, overall.ndcg,
                  overall.hr);
    out += buf;
    std::snprintf(buf, sizeof buf,
                  "ood_delta (env-%u -> env-%u): %.6f\nevidence_coverage: %.6f\ndelta_f1: %.6f\n"
                  "mean_score_drop: %.6f\ncf_pass_rate: %.6f\n",
                  train_env, test_env, ood_delta, evidence_coverage, delta_f1, mean_score_drop,
                  cf_pass_rate);
    out += buf;
    return out;
  }
};

/// Rank metrics for any scorer: `scorer(case, items)` returns one score per
/// item. Fills per-environment and overall NDCG/HR.
template <typename Scorer>
EvalReport rank_metrics(Scorer&& scorer, std::span<const EvalCase> cases, std::size_t num_items,
                        const EnvSplit& split, const EvalOptions& opt) {
  if (cases.empty()) throw Error("empty-split");
  EvalReport rep;
  rep.seed = opt.seed;
  std::map<EnvId, EnvMetrics> acc;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto items = eval_candidates(cases[i], i, num_items, opt);
    const Vector scores = scorer(cases[i], std::span<const ItemId>(items));
    const long rank = rank_of_target(scores, items);
    auto& m = acc[cases[i].env_id];
    m.env = cases[i].env_id;
    ++m.cases;
    m.ndcg += ndcg_at_k(rank, opt.cutoff);
    m.hr += hr_at_k(rank, opt.cutoff);
    ++rep.overall.cases;
    rep.overall.ndcg += ndcg_at_k(rank, opt.cutoff);
    rep.overall.hr += hr_at_k(rank, opt.cutoff);
  }
  for (auto& [e, m] : acc) {
    m.ndcg /= static_cast<double>(m.cases);
    m.hr /= static_cast<double>(m.cases);
    rep.per_env.push_back(m);
  }
  rep.overall.ndcg /= static_cast<double>(rep.overall.cases);
  rep.overall.hr /= static_cast<double>(rep.overall.cases);
  rep.train_env = split.train_envs.empty() ? rep.per_env.front().env : split.train_envs.front();
  rep.test_env = split.test_envs.empty() ? rep.per_env.back().env
                                         : *std::max_element(split.test_envs.begin(), split.test_envs.end());
  if (acc.count(rep.train_env) && acc.count(rep.test_env))
    rep.ood_delta = ood_degradation(acc[rep.train_env].ndcg, acc[rep.test_env].ndcg);
  return rep;
}

/// Full evaluation of the pipeline: rank metrics plus, for the top-1
/// recommendation of every case, its explanation coverage, the score drop
/// when its key evidence is dropped from the retrieved set, and the top-10 F1
/// change when that evidence is removed from retrieval altogether.
inline EvalReport evaluate(const CirrModel& model, std::span<const EvalCase> cases,
                           std::size_t num_items, const EnvSplit& split, const EvalOptions& opt) {
  if (cases.empty()) throw Error("empty-split");
  const auto& hp = model.hyper();
  std::vector<Explanation> explanations;
  std::vector<std::size_t> effective_k;
  std::vector<F1Case> f1_cases;
  std::size_t passes = 0;

  auto scorer = [&](const EvalCase& c, std::span<const ItemId> items) {
    CirrModel::Query q(model, c.user_id, c.context, c.timestamp);
    Vector scores;
    scores.reserve(items.size());
    for (ItemId i : items) scores.push_back(q.score(i));
    if (!opt.faithfulness || hp.K == 0) return scores;

    const auto top = top_k_items(scores, items, opt.cutoff);
    const ItemId best = top.front();
    const auto retrieved = q.retrieve(best);
    if (retrieved.empty()) return scores;
    const auto out = q.rank(best, retrieved);
    explanations.push_back(generate_explanation(retrieved, out, model.pool(), hp.tau_cite));
    effective_k.push_back(retrieved.size());
    const std::size_t key = select_key_evidence(out);
    const double drop = out.score - q.rank(best, retrieved.without_rank(key)).score;
    if (drop >= hp.gamma) ++passes;

    const auto removed = model.score(c, items, retrieved.pool_id_at_rank(key));
    f1_cases.push_back({top, top_k_items(removed, items, opt.cutoff), {c.target}, drop});
    return scores;
  };

  EvalReport rep = rank_metrics(scorer, cases, num_items, split, opt);
  rep.config = hp;
  if (!explanations.empty()) {
    rep.faithfulness_cases = explanations.size();
    rep.evidence_coverage = evidence_coverage_metric(explanations, effective_k);
    const auto df = delta_f1(f1_cases, opt.cutoff);
    rep.delta_f1 = df.delta_f1;
    rep.mean_score_drop = df.mean_score_drop;
    rep.cf_pass_rate = static_cast<double>(passes) / static_cast<double>(explanations.size());
  }
  return rep;
}

/// One row per K: overall NDCG@10 and evidence coverage with retrieval size
/// K on a frozen model.
struct SweepRow {
  std::size_t K = 0;
  double ndcg = 0.0;
  double coverage = 0.0;
};

inline std::vector<SweepRow> sweep_k(const ModelParams& params, const EvidencePool& prepared_pool,
                                     const HyperParams& hp, std::span<const EvalCase> cases,
                                     std::size_t num_items, const EnvSplit& split,
                                     std::span<const std::size_t> k_values, const EvalOptions& opt) {
  if (k_values.empty()) throw Error("empty-sweep");
  std::vector<SweepRow> rows;
  for (std::size_t k : k_values) {
    HyperParams h = hp;
    h.K = k;
    CirrModel model(params, prepared_pool, h);
    const auto rep = evaluate(model, cases, num_items, split, opt);
    rows.push_back({k, rep.overall.ndcg, rep.evidence_coverage});
  }
  return rows;
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = "K,ndcg10,coverage\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", r.K, r.ndcg, r.coverage);
    out += buf;
  }
  return out;
}

}  // namespace cirr
