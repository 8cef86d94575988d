// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "cirr/adam.hpp"
#include "cirr/encoder.hpp"
#include "cirr/random.hpp"
#include "cirr/ranker.hpp"
#include "cirr/retriever.hpp"
#include "cirr/split.hpp"
#include "cirr/types.hpp"

namespace cirr {

inline double total_loss(double l_rec, double l_inv, double l_cons, const HyperParams& hp) {
  return l_rec + hp.lambda1 * l_inv + hp.lambda2 * l_cons;
}

struct TrainRecord {
  int stage = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;  // 0 on epoch records
  double l_rec = 0.0;
  double l_inv = 0.0;
  double l_cons = 0.0;
  double total = 0.0;
  double wall_time = 0.0;

  bool same_losses(const TrainRecord& o) const {
    return stage == o.stage && epoch == o.epoch && step == o.step && l_rec == o.l_rec &&
           l_inv == o.l_inv && l_cons == o.l_cons && total == o.total;
  }
};

struct TrainLog {
  std::vector<TrainRecord> epochs;
  std::vector<TrainRecord> steps;

  /// Identical losses; wall time is not compared.
  bool same_losses(const TrainLog& o) const {
    const auto eq = [](const auto& a, const auto& b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (!a[i].same_losses(b[i])) return false;
      return true;
    };
    return eq(epochs, o.epochs) && eq(steps, o.steps);
  }

  void append(const TrainLog& o) {
    epochs.insert(epochs.end(), o.epochs.begin(), o.epochs.end());
    steps.insert(steps.end(), o.steps.begin(), o.steps.end());
  }

  /// Per-epoch CSV, fixed column order. Wall time is written as 0 unless
  /// `with_wall_time`, keeping reruns byte-identical.
  std::string to_csv(bool with_wall_time = false) const {
    std::string out = "stage,epoch,L_rec,L_inv,L_cons,total,wall_time\n";
    char buf[256];
    for (const auto& r : epochs) {
      std::snprintf(buf, sizeof buf, "%d,%zu,%.9f,%.9f,%.9f,%.9f,%.3f\n", r.stage, r.epoch, r.l_rec,
                    r.l_inv, r.l_cons, r.total, with_wall_time ? r.wall_time : 0.0);
      out += buf;
    }
    return out;
  }
};

/// Everything needed to continue training exactly where it stopped.
struct TrainState {
  ModelParams params;
  AdamState adam;
  Rng rng;
  std::size_t stage1_epochs = 0;
  std::size_t stage2_epochs = 0;

  static TrainState fresh(const ModelParams& params, std::uint64_t seed) {
    return {params, AdamState::for_params(params), Rng(derive_seed(seed, 0x7a1e)), 0, 0};
  }
};

/// Evidence embeddings from the given parameters plus stability statistics
/// from the training environments only.
inline EvidencePool prepare_pool(const EvidencePool& pool, const InteractionDataset& data,
                                 const ModelParams& params, const EnvSplit& split,
                                 const HyperParams& hp) {
  return precompute_stability(embed_evidence(pool, params), data, params, split.train_envs,
                              hp.seed, hp.stability_users);
}

/// Two-stage optimizer. Stage 1 trains the encoder alone on per-environment
/// batches (round-robin over environments) against L_rec^e + lambda1 * L_inv.
/// Stage 2 trains every parameter on mixed batches through retrieval and the
/// ranker against the full objective.
class Trainer {
 public:
  Trainer(const InteractionDataset& data, const EvidencePool& pool, EnvSplit split,
          HyperParams hp, TrainState state)
      : data_(&data),
        raw_pool_(&pool),
        split_(std::move(split)),
        hp_(hp),
        state_(std::move(state)),
        examples_(build_examples(data, split_, hp.L)) {
    hp_.validate();
    if (data.num_envs() < 2) throw Error("single-environment");
    if (examples_.train.empty()) throw Error("empty-split");
  }

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const HyperParams& hyper() const { return hp_; }
  const ExampleSet& examples() const { return examples_; }

  /// Called after every optimizer step; lets tests audit each step.
  std::function<void(const TrainRecord&)> on_step;
  bool log_wall_time = false;

  TrainLog run_stage1(std::size_t epochs) {
    TrainLog log;
    const auto groups = by_environment(examples_.train);
    for (std::size_t k = 0; k < epochs; ++k) {
      const std::size_t epoch = ++state_.stage1_epochs;
      const auto t0 = std::chrono::steady_clock::now();
      Rng shuffle_rng(state_.rng.next_u64());

      // Round-robin over environments: batch b of every env before batch b+1.
      std::vector<std::pair<EnvId, std::vector<std::size_t>>> batches;
      std::map<EnvId, std::vector<std::vector<std::size_t>>> per_env;
      std::size_t rounds = 0;
      for (const auto& [e, idx] : groups) {
        auto order = idx;
        shuffle_rng.shuffle(order);
        auto& chunks = per_env[e];
        for (std::size_t s = 0; s < order.size(); s += hp_.batch_size)
          chunks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                              order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + hp_.batch_size)));
        rounds = std::max(rounds, chunks.size());
      }
      for (std::size_t r = 0; r < rounds; ++r)
        for (auto& [e, chunks] : per_env)
          if (r < chunks.size()) batches.emplace_back(e, std::move(chunks[r]));

      TrainRecord acc{1, epoch};
      for (std::size_t b = 0; b < batches.size(); ++b) {
        auto batch = materialize(batches[b].second, 1, epoch, b);
        detail::ExampleRefs refs;
        for (const auto& ex : batch) refs.push_back(&ex);
        const auto obj = detail::dot_objective(state_.params, {{batches[b].first, refs}}, 1.0, 1.0,
                                               hp_.lambda1);
        adam_step(state_.params, obj.grads, state_.adam, hp_.lr, ParamGroup::encoder);
        check_finite();
        TrainRecord rec{1, epoch, b + 1, obj.rec, obj.penalty, 0.0,
                        total_loss(obj.rec, obj.penalty, 0.0, hp_)};
        record_step(log, rec, acc);
      }
      finish_epoch(log, acc, batches.size(), t0);
    }
    return log;
  }

  TrainLog run_stage2(std::size_t epochs) {
    TrainLog log;
    for (std::size_t k = 0; k < epochs; ++k) {
      const std::size_t epoch = ++state_.stage2_epochs;
      const auto t0 = std::chrono::steady_clock::now();
      Rng shuffle_rng(state_.rng.next_u64());
      pool_ = prepare_pool(*raw_pool_, *data_, state_.params, split_, hp_);

      std::vector<std::size_t> order(examples_.train.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      shuffle_rng.shuffle(order);

      TrainRecord acc{2, epoch};
      std::size_t nb = 0;
      for (std::size_t s = 0; s < order.size(); s += hp_.batch_size, ++nb) {
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + hp_.batch_size)));
        const auto batch = materialize(idx, 2, epoch, nb);
        auto rec = joint_step(batch);
        rec.stage = 2;
        rec.epoch = epoch;
        rec.step = nb + 1;
        record_step(log, rec, acc);
      }
      finish_epoch(log, acc, nb, t0);
    }
    return log;
  }

  /// Pool prepared with the current parameters (for evaluation).
  EvidencePool prepared_pool() const {
    return prepare_pool(*raw_pool_, *data_, state_.params, split_, hp_);
  }

 private:
  struct ItemForward {
    RetrievalResult retrieved;
    RankTape tape;
    RankOutput out;
  };

  std::vector<TrainingExample> materialize(const std::vector<std::size_t>& idx, int stage,
                                           std::size_t epoch, std::size_t batch) const {
    Rng rng(derive_seed(hp_.seed, 0x4e47, stage, epoch, batch));
    std::vector<TrainingExample> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
      TrainingExample ex = examples_.train[i];
      ex.negatives = sample_negatives(rng, data_->num_items(), ex.target, hp_.n_neg);
      out.push_back(std::move(ex));
    }
    return out;
  }

  TrainRecord joint_step(const std::vector<TrainingExample>& batch) {
    const auto& params = state_.params;
    const std::size_t d = params.dim();
    const double B = static_cast<double>(batch.size());
    ModelParams grads = ModelParams::zeros_like(params);

    struct ExampleForward {
      Vector z;
      EncodeTape enc;
      std::vector<ItemForward> items;
      Vector scores;
    };
    std::vector<ExampleForward> fwd(batch.size());
    std::map<EnvId, std::pair<double, std::size_t>> env_g;  // sum of g, count
    std::vector<IrmTerms> irm(batch.size());
    const bool use_irm = hp_.lambda1 != 0.0 && hp_.stage2_irm;

    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& ex = batch[i];
      auto& f = fwd[i];
      f.z = encode(params, ex.context, &f.enc);
      QueryRetriever retriever(pool_, f.z, hp_,
                               hp_.K == 0 ? std::vector<EvidenceId>{}
                                          : context_candidates(pool_, ex.user_id, ex.context, ex.timestamp));
      f.items.resize(1 + ex.negatives.size());
      f.scores.resize(f.items.size());
      for (std::size_t c = 0; c < f.items.size(); ++c) {
        const ItemId item = c == 0 ? ex.target : ex.negatives[c - 1];
        auto& it = f.items[c];
        if (hp_.K > 0) it.retrieved = retriever.for_item(item);
        it.out = rank_score(params, f.z, item, it.retrieved, pool_, &it.tape);
        f.scores[c] = it.out.score;
      }
      irm[i] = irm_terms(f.scores);
      env_g[ex.env_id].first += irm[i].g;
      env_g[ex.env_id].second += 1;
    }

    double l_inv = 0.0;
    for (auto& [e, gc] : env_g) {
      gc.first /= static_cast<double>(gc.second);
      l_inv += gc.first * gc.first;
    }

    double l_rec = 0.0, l_cons = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& ex = batch[i];
      auto& f = fwd[i];
      const auto ce = softmax_ce(f.scores, 1.0);
      l_rec += ce.loss / B;
      Vector dz(d, 0.0);
      Vector dcov;

      if (hp_.lambda2 != 0.0 && !f.items[0].retrieved.empty()) {
        const auto& target = f.items[0];
        const auto cov = coverage_surrogate(target.out, hp_.tau_cite, hp_.temp_cite);
        const auto cf = counterfactual_loss(params, f.z, ex.target, target.retrieved, pool_, hp_.gamma);
        l_cons += consistency_loss(cov.value, cf.loss.value, hp_.beta) / B;
        dcov = cov.dattention;
        for (auto& x : dcov) x *= hp_.lambda2 / B;
        const double w = hp_.lambda2 * hp_.beta / B;
        if (cf.loss.value > 0.0) {
          accumulate(grads, cf.loss.grads, w);
          axpy(w, cf.dz, dz);
        }
      }

      for (std::size_t c = 0; c < f.items.size(); ++c) {
        double ds = ce.dloss_ds[c] / B;
        if (use_irm) {
          const auto& [g, n] = env_g[ex.env_id];
          ds += hp_.lambda1 * 2.0 * g * irm[i].dg_ds[c] / static_cast<double>(n);
        }
        const std::span<const double> datt = c == 0 ? std::span<const double>(dcov) : std::span<const double>{};
        if (ds == 0.0 && datt.empty()) continue;
        rank_backward(params, f.items[c].tape, ds, datt, grads, dz);
      }
      encode_backward(params, f.enc, dz, grads);
    }

    adam_step(state_.params, grads, state_.adam, hp_.lr, ParamGroup::all);
    check_finite();
    return {2, 0, 0, l_rec, l_inv, l_cons, total_loss(l_rec, l_inv, l_cons, hp_)};
  }

  static void accumulate(ModelParams& into, const ModelParams& from, double w) {
    std::vector<std::span<const double>> src;
    from.visit([&](const char*, auto s) { src.push_back(s); });
    std::size_t b = 0;
    into.visit([&](const char*, std::span<double> dst) { axpy(w, src[b++], dst); });
  }

  void check_finite() const {
    if (!state_.params.finite()) throw Error("numerical-overflow", "non-finite parameter after update");
  }

  void record_step(TrainLog& log, const TrainRecord& rec, TrainRecord& acc) {
    log.steps.push_back(rec);
    if (on_step) on_step(rec);
    acc.l_rec += rec.l_rec;
    acc.l_inv += rec.l_inv;
    acc.l_cons += rec.l_cons;
  }

  void finish_epoch(TrainLog& log, TrainRecord acc, std::size_t steps,
                    std::chrono::steady_clock::time_point t0) const {
    const double n = static_cast<double>(std::max<std::size_t>(steps, 1));
    acc.l_rec /= n;
    acc.l_inv /= n;
    acc.l_cons /= n;
    acc.total = total_loss(acc.l_rec, acc.l_inv, acc.l_cons, hp_);
    acc.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(acc);
  }

  const InteractionDataset* data_;
  const EvidencePool* raw_pool_;
  EnvSplit split_;
  HyperParams hp_;
  TrainState state_;
  ExampleSet examples_;
  EvidencePool pool_;
};

/// Stage 1 on a fresh optimizer state; returns updated parameters and log.
inline std::pair<ModelParams, TrainLog> train_stage1(const InteractionDataset& data,
                                                     const ModelParams& params,
                                                     const HyperParams& hp) {
  if (hp.T1 < 1) throw Error("bad-hyperparams", "T1");
  EvidencePool empty;
  Trainer t(data, empty, default_split(data.num_envs()), hp, TrainState::fresh(params, hp.seed));
  auto log = t.run_stage1(hp.T1);
  return {t.state().params, std::move(log)};
}

/// Stage 2 on a fresh optimizer state.
inline std::pair<ModelParams, TrainLog> train_stage2(const InteractionDataset& data,
                                                     const EvidencePool& pool,
                                                     const ModelParams& params,
                                                     const HyperParams& hp) {
  Trainer t(data, pool, default_split(data.num_envs()), hp, TrainState::fresh(params, hp.seed));
  auto log = t.run_stage2(hp.T2);
  return {t.state().params, std::move(log)};
}

}  // namespace cirr
