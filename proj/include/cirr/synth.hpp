// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cirr/random.hpp"
#include "cirr/split.hpp"
#include "cirr/types.hpp"

namespace cirr {

/// Synthetic multi-environment benchmark. Items carry a stable latent block
/// a_i and a spurious ("trend") block b_i; users carry a stable preference
/// p_u. Each step emits a pair of interactions in one environment e:
///   choice  c ~ softmax_i(stable_scale * <p_u, a_i> / sqrt(stable_dim))
///   cue     v ~ softmax_j(s_e * spurious_scale * <b_j, b_c> / sqrt(spurious_dim))
/// with the cue written just before the choice. The choice never depends on
/// e, while the cue's trend overlap with the next item does, so a model that
/// leans on the last item's trend is rewarded in proportion to s_e. The
/// effective strength s_e = spurious_strength[e] * (1 - 2 * shift * e/(E-1))
/// decays along the environment axis and flips sign past shift 0.5.
struct SynthConfig {
  std::size_t num_users = 2000;
  std::size_t num_items = 1000;
  std::size_t num_envs = 4;
  std::size_t interactions_per_user = 40;
  std::size_t stable_dim = 8;
  std::size_t spurious_dim = 8;
  std::vector<double> spurious_strength;  // per environment; empty means all 1
  double shift_intensity = 0.5;
  std::uint64_t seed = 0;
  std::vector<double> env_weights;  // empty means env 0 at 0.4, rest equal
  double stable_scale = 2.0;
  double spurious_scale = 2.0;
  std::size_t attributes_per_block = 2;
  std::size_t kg_links_per_item = 2;

  std::vector<double> strengths() const {
    return spurious_strength.empty() ? std::vector<double>(num_envs, 1.0) : spurious_strength;
  }

  std::vector<double> weights() const {
    if (!env_weights.empty()) return env_weights;
    std::vector<double> w(num_envs, num_envs > 1 ? 0.6 / static_cast<double>(num_envs - 1) : 1.0);
    if (num_envs > 1) w[0] = 0.4;
    return w;
  }

  /// `d` is the model embedding size the data is meant for.
  void validate(std::size_t d) const {
    const auto bad = [](const std::string& what) { throw Error("bad-config", what); };
    if (num_envs < 2) bad("num_envs must be >= 2");
    if (num_users < 1) bad("num_users");
    if (num_items < 2) bad("num_items");
    if (interactions_per_user < 2) bad("interactions_per_user must be >= 2");
    if (stable_dim < 1) bad("stable_dim");
    if (stable_dim + spurious_dim > d) bad("stable_dim + spurious_dim exceeds d");
    if (!spurious_strength.empty() && spurious_strength.size() != num_envs)
      bad("spurious_strength needs one value per environment");
    for (double s : spurious_strength)
      if (!(s >= 0.0 && s <= 1.0)) bad("spurious_strength outside [0,1]");
    if (!(shift_intensity >= 0.0 && shift_intensity <= 1.0)) bad("shift_intensity outside [0,1]");
    if (!env_weights.empty()) {
      if (env_weights.size() != num_envs) bad("env_weights needs one value per environment");
      for (double w : env_weights)
        if (!(w > 0.0)) bad("env_weights must be positive");
    }
  }
};

struct GroundTruth {
  Matrix user_pref;      // num_users x stable_dim
  Matrix item_stable;    // num_items x stable_dim
  Matrix item_spurious;  // num_items x spurious_dim
  std::vector<double> env_strength;
  EnvSplit split;
};

struct SynthData {
  InteractionDataset data;
  EvidencePool pool;
  GroundTruth truth;
};

namespace detail {

inline std::size_t draw_categorical(Rng& rng, std::span<const double> weights, double total) {
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return i;
  }
  return weights.size() - 1;
}

/// Indices of the `n` largest |row[k]| (ascending index on ties).
inline std::vector<std::size_t> strongest_dims(std::span<const double> row, std::size_t n) {
  std::vector<std::size_t> idx(row.size());
  for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
  n = std::min(n, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double fa = std::fabs(row[a]), fb = std::fabs(row[b]);
                      return fa != fb ? fa > fb : a < b;
                    });
  idx.resize(n);
  return idx;
}

/// Unnormalized softmax weights of `logit` into `out`; returns their sum.
inline double softmax_into(std::span<const double> logit, Vector& out) {
  double mx = -1e300;
  for (double x : logit) mx = std::max(mx, x);
  double total = 0.0;
  for (std::size_t i = 0; i < logit.size(); ++i) total += (out[i] = std::exp(logit[i] - mx));
  return total;
}

}  // namespace detail

inline std::vector<double> effective_strengths(const SynthConfig& cfg) {
  const auto base = cfg.strengths();
  std::vector<double> s(cfg.num_envs);
  for (std::size_t e = 0; e < cfg.num_envs; ++e) {
    const double graded = static_cast<double>(e) / static_cast<double>(cfg.num_envs - 1);
    s[e] = base[e] * (1.0 - 2.0 * cfg.shift_intensity * graded);
  }
  return s;
}

inline SynthData generate_synthetic(const SynthConfig& cfg, std::size_t d) {
  cfg.validate(d);
  SynthData out;
  auto& truth = out.truth;
  truth.env_strength = effective_strengths(cfg);
  truth.split = default_split(cfg.num_envs);

  Rng latent(derive_seed(cfg.seed, 0x5e7a));
  truth.user_pref = Matrix(cfg.num_users, cfg.stable_dim);
  truth.item_stable = Matrix(cfg.num_items, cfg.stable_dim);
  truth.item_spurious = Matrix(cfg.num_items, cfg.spurious_dim);
  for (auto& x : truth.item_stable.flat()) x = latent.normal();
  for (auto& x : truth.item_spurious.flat()) x = latent.normal();
  for (auto& x : truth.user_pref.flat()) x = latent.normal();

  const double ss = cfg.stable_scale / std::sqrt(static_cast<double>(cfg.stable_dim));
  const double sp = cfg.spurious_dim > 0
                        ? cfg.spurious_scale / std::sqrt(static_cast<double>(cfg.spurious_dim))
                        : 0.0;
  const auto env_w = cfg.weights();
  double env_total = 0.0;
  for (double w : env_w) env_total += w;

  std::vector<Interaction> interactions;
  interactions.reserve(cfg.num_users * cfg.interactions_per_user);
  Vector stable_logit(cfg.num_items), prob(cfg.num_items);
  const std::size_t pairs = (cfg.interactions_per_user + 1) / 2;
  for (UserId u = 0; u < cfg.num_users; ++u) {
    Rng rng(derive_seed(cfg.seed, 0x05e2, u));
    std::vector<EnvId> envs(pairs);
    for (auto& e : envs) e = static_cast<EnvId>(detail::draw_categorical(rng, env_w, env_total));
    if (std::all_of(envs.begin(), envs.end(), [&](EnvId e) { return e == envs[0]; }))
      envs.back() = static_cast<EnvId>((envs[0] + 1 + rng.below(cfg.num_envs - 1)) % cfg.num_envs);

    const auto pu = truth.user_pref.row(u);
    for (ItemId i = 0; i < cfg.num_items; ++i) stable_logit[i] = ss * dot(pu, truth.item_stable.row(i));
    const double stable_total = detail::softmax_into(stable_logit, prob);
    const Vector stable_prob = prob;

    std::int64_t t = 1'600'000'000 + static_cast<std::int64_t>(rng.below(86400 * 30));
    const auto emit = [&](ItemId item, EnvId e) {
      const double affinity = std::tanh(stable_logit[item] / std::max(cfg.stable_scale, 1e-9));
      const double rating = std::clamp(std::round(3.0 + 2.0 * affinity + 0.5 * rng.normal()), 1.0, 5.0);
      t += 3600 + static_cast<std::int64_t>(rng.below(86400));
      interactions.push_back({u, item, rating, t, e});
    };
    for (std::size_t k = 0; k < pairs; ++k) {
      const EnvId e = envs[k];
      const auto choice = static_cast<ItemId>(detail::draw_categorical(rng, stable_prob, stable_total));
      const bool with_cue = 2 * k + 1 < cfg.interactions_per_user;
      if (with_cue) {
        const double coef = truth.env_strength[e] * sp;
        Vector cue_logit(cfg.num_items);
        for (ItemId j = 0; j < cfg.num_items; ++j)
          cue_logit[j] = coef * dot(truth.item_spurious.row(j), truth.item_spurious.row(choice));
        const double total = detail::softmax_into(cue_logit, prob);
        emit(static_cast<ItemId>(detail::draw_categorical(rng, prob, total)), e);
      }
      emit(choice, e);
    }
  }
  out.data = InteractionDataset(std::move(interactions), cfg.num_users, cfg.num_items, cfg.num_envs);

  // Evidence: history records, then item attributes, then kg links.
  std::vector<EvidenceItem> ev;
  for (const auto& x : out.data.interactions())
    ev.push_back({static_cast<EvidenceId>(ev.size()),
                  HistoryPayload{x.user_id, x.item_id, x.rating, x.timestamp}, {}, 0.0});

  std::vector<std::vector<AttributePayload>> item_attrs(cfg.num_items);
  std::map<std::pair<std::string, std::string>, std::vector<ItemId>> carriers;
  for (ItemId i = 0; i < cfg.num_items; ++i) {
    const auto add = [&](const char* prefix, std::span<const double> row) {
      for (std::size_t k : detail::strongest_dims(row, cfg.attributes_per_block)) {
        AttributePayload a{prefix + std::to_string(k), row[k] >= 0 ? "high" : "low", i};
        carriers[{a.name, a.value}].push_back(i);
        item_attrs[i].push_back(a);
      }
    };
    add("style_", truth.item_stable.row(i));
    if (cfg.spurious_dim > 0) add("trend_", truth.item_spurious.row(i));
    for (const auto& a : item_attrs[i])
      ev.push_back({static_cast<EvidenceId>(ev.size()), a, {}, 0.0});
  }

  Rng kg_rng(derive_seed(cfg.seed, 0x6b67));
  std::set<std::tuple<ItemId, std::string, ItemId>> seen;
  for (ItemId i = 0; i < cfg.num_items; ++i) {
    const auto& attrs = item_attrs[i];
    if (attrs.empty()) continue;
    for (std::size_t l = 0; l < cfg.kg_links_per_item; ++l) {
      // alternate stable and spurious attributes
      const auto& a = attrs[(l * cfg.attributes_per_block + l / 2) % attrs.size()];
      const auto& pool = carriers[{a.name, a.value}];
      if (pool.size() < 2) continue;
      ItemId j = pool[kg_rng.below(pool.size())];
      if (j == i) j = pool[(std::find(pool.begin(), pool.end(), i) - pool.begin() + 1) % pool.size()];
      const std::string rel = a.name.rfind("style_", 0) == 0 ? "compatible_with" : "co_trending_with";
      if (!seen.insert({i, rel, j}).second) continue;
      ev.push_back({static_cast<EvidenceId>(ev.size()), KgPayload{i, rel, j}, {}, 0.0});
    }
  }
  out.pool = EvidencePool(std::move(ev));
  return out;
}

/// Key=value audit record of the generator run.
inline std::string synth_meta(const SynthConfig& cfg, const SynthData& s) {
  std::string out;
  char buf[128];
  const auto kv = [&](const char* k, const std::string& v) { out += std::string(k) + "=" + v + "\n"; };
  kv("seed", std::to_string(cfg.seed));
  kv("num_users", std::to_string(s.data.num_users()));
  kv("num_items", std::to_string(s.data.num_items()));
  kv("num_envs", std::to_string(s.data.num_envs()));
  kv("num_interactions", std::to_string(s.data.interactions().size()));
  kv("num_evidence", std::to_string(s.pool.size()));
  kv("interactions_per_user", std::to_string(cfg.interactions_per_user));
  kv("stable_dim", std::to_string(cfg.stable_dim));
  kv("spurious_dim", std::to_string(cfg.spurious_dim));
  std::snprintf(buf, sizeof buf, "%.6f", cfg.shift_intensity);
  kv("shift_intensity", buf);
  for (std::size_t e = 0; e < s.truth.env_strength.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%.6f", s.truth.env_strength[e]);
    kv(("env_strength." + std::to_string(e)).c_str(), buf);
  }
  std::string test;
  for (EnvId e : s.truth.split.test_envs) test += (test.empty() ? "" : ",") + std::to_string(e);
  kv("test_envs", test);
  return out;
}

}  // namespace cirr
