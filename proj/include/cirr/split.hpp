// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <set>
#include <unordered_set>
#include <vector>

#include "cirr/random.hpp"
#include "cirr/types.hpp"

namespace cirr {

/// Which environments supply training targets and which are held out.
struct EnvSplit {
  std::vector<EnvId> train_envs;
  std::vector<EnvId> test_envs;

  bool is_train(EnvId e) const {
    return std::find(train_envs.begin(), train_envs.end(), e) != train_envs.end();
  }
};

/// Environment 0 is the reference training environment; the last environment
/// is the most shifted one and never contributes training targets.
inline EnvSplit default_split(std::size_t num_envs) {
  EnvSplit s;
  for (EnvId e = 0; e + 1 < num_envs; ++e) s.train_envs.push_back(e);
  if (num_envs > 0) s.test_envs.push_back(static_cast<EnvId>(num_envs - 1));
  return s;
}

/// A held-out next-item case.
struct EvalCase {
  UserId user_id = 0;
  std::vector<ItemId> context;
  ItemId target = 0;
  EnvId env_id = 0;
  std::int64_t timestamp = 0;
};

struct ExampleSet {
  std::vector<TrainingExample> train;
  std::vector<EvalCase> eval;
};

/// Last `max_len` items strictly before position `pos` of the user's stream.
inline std::vector<ItemId> context_before(std::span<const Interaction> stream, std::size_t pos,
                                          std::size_t max_len) {
  const std::size_t begin = pos > max_len ? pos - max_len : 0;
  std::vector<ItemId> ctx;
  ctx.reserve(pos - begin);
  for (std::size_t j = begin; j < pos; ++j) ctx.push_back(stream[j].item_id);
  return ctx;
}

/// For every user and environment the last interaction in that environment is
/// held out as an evaluation case. Remaining interactions in training
/// environments become training targets. The first interaction of a stream
/// has no context and is never a target.
inline ExampleSet build_examples(const InteractionDataset& data, const EnvSplit& split,
                                 std::size_t max_len) {
  ExampleSet out;
  for (UserId u = 0; u < data.num_users(); ++u) {
    const auto stream = data.user_slice(u);
    std::vector<std::size_t> last_in_env(data.num_envs(), stream.size());
    for (std::size_t j = 0; j < stream.size(); ++j) last_in_env[stream[j].env_id] = j;
    std::vector<bool> held(stream.size(), false);
    for (EnvId e = 0; e < data.num_envs(); ++e) {
      const auto j = last_in_env[e];
      if (j == stream.size() || j == 0) continue;
      held[j] = true;
      out.eval.push_back({u, context_before(stream, j, max_len), stream[j].item_id, e,
                          stream[j].timestamp});
    }
    for (std::size_t j = 1; j < stream.size(); ++j) {
      if (held[j] || !split.is_train(stream[j].env_id)) continue;
      TrainingExample ex;
      ex.user_id = u;
      ex.context = context_before(stream, j, max_len);
      ex.target = stream[j].item_id;
      ex.env_id = stream[j].env_id;
      ex.timestamp = stream[j].timestamp;
      out.train.push_back(std::move(ex));
    }
  }
  return out;
}

/// `n` distinct items drawn uniformly from the catalog minus `target`.
inline std::vector<ItemId> sample_negatives(Rng& rng, std::size_t num_items, ItemId target,
                                            std::size_t n) {
  if (num_items < 2) throw Error("catalog-too-small");
  n = std::min(n, num_items - 1);
  std::vector<ItemId> out;
  out.reserve(n);
  if (2 * n >= num_items) {
    std::vector<ItemId> all;
    for (ItemId i = 0; i < num_items; ++i)
      if (i != target) all.push_back(i);
    for (std::size_t k = 0; k < n; ++k) {
      const auto j = k + rng.below(all.size() - k);
      std::swap(all[k], all[j]);
      out.push_back(all[k]);
    }
    return out;
  }
  std::unordered_set<ItemId> seen{target};
  while (out.size() < n) {
    const auto i = static_cast<ItemId>(rng.below(num_items));
    if (seen.insert(i).second) out.push_back(i);
  }
  return out;
}

/// Group training-example indices by environment (ascending env id).
inline std::map<EnvId, std::vector<std::size_t>> by_environment(
    const std::vector<TrainingExample>& xs) {
  std::map<EnvId, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < xs.size(); ++i) out[xs[i].env_id].push_back(i);
  return out;
}

}  // namespace cirr
