// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

#include "cirr/types.hpp"

namespace cirr {

/// Adam moments shaped like the parameters. The step counter is shared by all
/// groups, so a group that sat idle (the ranker during stage 1) still gets
/// the bias correction of the global step.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  ModelParams m;
  ModelParams v;

  static AdamState for_params(const ModelParams& p) {
    AdamState s;
    s.m = ModelParams::zeros_like(p);
    s.v = ModelParams::zeros_like(p);
    return s;
  }

  bool operator==(const AdamState&) const = default;
};

inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, double lr,
                      ParamGroup group = ParamGroup::all) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);

  std::vector<std::span<const double>> g;
  grads.visit([&](const char*, auto s) { g.push_back(s); }, group);
  std::vector<std::span<double>> m, v;
  state.m.visit([&](const char*, auto s) { m.push_back(s); }, group);
  state.v.visit([&](const char*, auto s) { v.push_back(s); }, group);

  std::size_t block = 0;
  params.visit(
      [&](const char*, std::span<double> p) {
        auto gb = g[block];
        auto mb = m[block];
        auto vb = v[block];
        for (std::size_t i = 0; i < p.size(); ++i) {
          mb[i] = state.beta1 * mb[i] + (1.0 - state.beta1) * gb[i];
          vb[i] = state.beta2 * vb[i] + (1.0 - state.beta2) * gb[i] * gb[i];
          p[i] -= lr * (mb[i] / c1) / (std::sqrt(vb[i] / c2) + state.eps);
        }
        ++block;
      },
      group);
}

}  // namespace cirr
