// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "cirr/error.hpp"
#include "cirr/softmax_loss.hpp"
#include "cirr/types.hpp"

namespace cirr {

using PreferenceVector = Vector;

/// Loss value plus gradients shaped like the parameters. `grads.irm_dummy_w`
/// holds the derivative with respect to the dummy multiplier when it is
/// differentiated, and 0 otherwise.
struct LossGrad {
  double value = 0.0;
  ModelParams grads;
};

/// Saved forward state of one encode call.
struct EncodeTape {
  std::vector<ItemId> items;
  Vector weights;  // softmax over the used recency slots
  std::size_t first_slot = 0;
};

/// z = sum_j softmax(recency_weights[last |context| slots])_j * e_{context_j}.
/// The most recent item (last in `context`) uses the last slot.
inline PreferenceVector encode(const ModelParams& params, std::span<const ItemId> context,
                               EncodeTape* tape = nullptr) {
  if (context.empty()) throw Error("empty-sequence");
  const std::size_t L = params.max_context();
  if (context.size() > L) throw Error("sequence-too-long", std::to_string(context.size()));
  for (ItemId i : context)
    if (i >= params.num_items()) throw Error("item-out-of-range", std::to_string(i));

  const std::size_t first = L - context.size();
  const Vector w = softmax(std::span(params.recency_weights).subspan(first));
  PreferenceVector z(params.dim(), 0.0);
  for (std::size_t j = 0; j < context.size(); ++j)
    axpy(w[j], params.item_embeddings.row(context[j]), z);
  if (tape) {
    tape->items.assign(context.begin(), context.end());
    tape->weights = w;
    tape->first_slot = first;
  }
  return z;
}

/// Accumulates dL/d(item_embeddings) and dL/d(recency_weights) given dL/dz.
inline void encode_backward(const ModelParams& params, const EncodeTape& tape,
                            std::span<const double> dz, ModelParams& grads) {
  const std::size_t n = tape.items.size();
  Vector dw(n);
  double mean = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    axpy(tape.weights[j], dz, grads.item_embeddings.row(tape.items[j]));
    dw[j] = dot(dz, params.item_embeddings.row(tape.items[j]));
    mean += tape.weights[j] * dw[j];
  }
  for (std::size_t j = 0; j < n; ++j)
    grads.recency_weights[tape.first_slot + j] += tape.weights[j] * (dw[j] - mean);
}

/// Encodes the user's interactions that happened in `env` (most recent
/// `max_context` of them). Absent when the user has none there.
inline std::optional<PreferenceVector> encode_env(const ModelParams& params,
                                                  std::span<const Interaction> user_interactions,
                                                  EnvId env) {
  std::vector<ItemId> items;
  for (const auto& x : user_interactions)
    if (x.env_id == env) items.push_back(x.item_id);
  if (items.empty()) return std::nullopt;
  const std::size_t L = params.max_context();
  std::span<const ItemId> ctx(items);
  if (ctx.size() > L) ctx = ctx.subspan(ctx.size() - L);
  return encode(params, ctx);
}

namespace detail {

struct DotForward {
  Vector z;
  EncodeTape tape;
  Vector scores;  // index 0 is the target
};

inline DotForward dot_forward(const ModelParams& params, const TrainingExample& ex) {
  if (ex.negatives.empty()) throw Error("no-negatives");
  DotForward f;
  f.z = encode(params, ex.context, &f.tape);
  f.scores.reserve(1 + ex.negatives.size());
  const auto score = [&](ItemId c) {
    if (c >= params.num_items()) throw Error("item-out-of-range", std::to_string(c));
    f.scores.push_back(dot(f.z, params.item_embeddings.row(c)));
  };
  score(ex.target);
  for (ItemId c : ex.negatives) score(c);
  if (!all_finite(f.scores)) throw Error("numerical-overflow");
  return f;
}

inline void dot_backward(const ModelParams& params, const TrainingExample& ex,
                         const DotForward& f, std::span<const double> dscore,
                         ModelParams& grads) {
  Vector dz(params.dim(), 0.0);
  const auto back = [&](ItemId c, double ds) {
    if (ds == 0.0) return;
    axpy(ds, params.item_embeddings.row(c), dz);
    axpy(ds, f.z, grads.item_embeddings.row(c));
  };
  back(ex.target, dscore[0]);
  for (std::size_t k = 0; k < ex.negatives.size(); ++k) back(ex.negatives[k], dscore[k + 1]);
  encode_backward(params, f.tape, dz, grads);
}

/// Joint value/gradient of L_rec (at multiplier w) and of
/// penalty_weight * sum_e (dL_e/dw at w=1)^2 over the given per-environment
/// batches. The penalty value is always computed. One forward pass per example.
struct DotObjective {
  double rec = 0.0;
  double penalty = 0.0;
  ModelParams grads;
};

using ExampleRefs = std::vector<const TrainingExample*>;

inline DotObjective dot_objective(const ModelParams& params,
                                  const std::map<EnvId, ExampleRefs>& env_batches, double w,
                                  double rec_weight, double penalty_weight) {
  DotObjective out;
  out.grads = ModelParams::zeros_like(params);
  std::size_t total = 0;
  for (const auto& [e, batch] : env_batches) total += batch.size();
  if (total == 0) throw Error("empty-batch");

  for (const auto& [e, batch] : env_batches) {
    if (batch.empty()) throw Error("empty-batch", "environment " + std::to_string(e));
    std::vector<DotForward> fwd;
    fwd.reserve(batch.size());
    std::vector<IrmTerms> irm;
    double g_env = 0.0;
    for (const auto* ex : batch) {
      fwd.push_back(dot_forward(params, *ex));
      irm.push_back(irm_terms(fwd.back().scores));
      g_env += irm.back().g / static_cast<double>(batch.size());
    }
    out.penalty += g_env * g_env;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto ce = softmax_ce(fwd[i].scores, w);
      out.rec += ce.loss / static_cast<double>(total);
      out.grads.irm_dummy_w += rec_weight * ce.dloss_dw / static_cast<double>(total);
      Vector ds(ce.dloss_ds.size());
      for (std::size_t c = 0; c < ds.size(); ++c) {
        ds[c] = rec_weight * ce.dloss_ds[c] / static_cast<double>(total);
        if (penalty_weight != 0.0)
          ds[c] += penalty_weight * 2.0 * g_env * irm[i].dg_ds[c] /
                   static_cast<double>(batch.size());
      }
      dot_backward(params, *batch[i], fwd[i], ds, out.grads);
    }
  }
  if (!std::isfinite(out.rec) || !std::isfinite(out.penalty)) throw Error("numerical-overflow");
  return out;
}

}  // namespace detail

/// Mean sampled-softmax cross-entropy with logits w * (z . e_c) over
/// {target} + negatives. Gradients cover item embeddings, recency weights and
/// the multiplier w (in grads.irm_dummy_w).
inline LossGrad rec_loss_and_grad(const ModelParams& params,
                                  std::span<const TrainingExample> batch, double w) {
  if (batch.empty()) throw Error("empty-batch");
  detail::ExampleRefs refs;
  for (const auto& ex : batch) refs.push_back(&ex);
  auto obj = detail::dot_objective(params, {{EnvId{0}, refs}}, w, 1.0, 0.0);
  return {obj.rec, std::move(obj.grads)};
}

/// sum_e (d/dw L_e(w) at w = 1)^2 with gradients through to the encoder.
inline LossGrad irm_penalty(const ModelParams& params,
                            const std::map<EnvId, std::vector<TrainingExample>>& env_batches) {
  if (env_batches.empty()) throw Error("no-environments");
  std::map<EnvId, detail::ExampleRefs> refs;
  for (const auto& [e, batch] : env_batches) {
    if (batch.empty()) throw Error("empty-batch", "environment " + std::to_string(e));
    for (const auto& ex : batch) refs[e].push_back(&ex);
  }
  auto obj = detail::dot_objective(params, refs, 1.0, 0.0, 1.0);
  obj.grads.irm_dummy_w = 0.0;
  return {obj.penalty, std::move(obj.grads)};
}

}  // namespace cirr
