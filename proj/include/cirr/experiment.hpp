// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "cirr/metrics.hpp"
#include "cirr/model.hpp"
#include "cirr/synth.hpp"
#include "cirr/trainer.hpp"

namespace cirr {

/// A variant of the full model with some components switched off.
struct Ablation {
  bool no_causal = false;    // lambda1 = 0
  bool no_rag = false;       // K = 0
  bool no_faithful = false;  // lambda2 = 0

  std::string name() const {
    if (!no_causal && !no_rag && !no_faithful) return "full";
    std::string n;
    const auto add = [&](const char* s) { n += (n.empty() ? "" : "+") + std::string(s); };
    if (no_causal) add("no-causal");
    if (no_rag) add("no-rag");
    if (no_faithful) add("no-faithful");
    return n;
  }

  HyperParams apply(HyperParams hp) const {
    if (no_causal) hp.lambda1 = 0.0;
    if (no_rag) hp.K = 0;
    if (no_faithful) hp.lambda2 = 0.0;
    return hp;
  }
};

/// The switch matrix: full model and each single component removed.
inline std::vector<Ablation> ablation_matrix() {
  return {{}, {true, false, false}, {false, true, false}, {false, false, true}};
}

/// Scale that finishes a five-seed run in minutes on one core.
inline void desk_scale(SynthConfig& synth, HyperParams& hp) {
  synth.num_users = 600;
  synth.num_items = 300;
  synth.interactions_per_user = 40;
  hp.d = 16;
  hp.L = 10;
  hp.lr = 1e-2;
  hp.batch_size = 64;
  hp.T1 = 5;
  hp.T2 = 3;
}

struct RunResult {
  EvalReport report;
  TrainLog log;
  TrainState state;
};

/// Trains both stages from a fresh initialization and evaluates on the held
/// out cases of every environment.
inline RunResult train_and_evaluate(const InteractionDataset& data, const EvidencePool& pool,
                                    const HyperParams& hp, const EvalOptions& opt) {
  const auto split = default_split(data.num_envs());
  Trainer tr(data, pool, split, hp,
             TrainState::fresh(init_params(data.num_items(), hp.d, hp.L, hp.seed), hp.seed));
  RunResult r;
  if (hp.T1 > 0) r.log.append(tr.run_stage1(hp.T1));
  if (hp.T2 > 0) r.log.append(tr.run_stage2(hp.T2));
  const auto prepared = tr.prepared_pool();
  const CirrModel model(tr.state().params, prepared, hp);
  r.report = evaluate(model, tr.examples().eval, data.num_items(), split, opt);
  r.state = tr.state();
  return r;
}

/// Generates the benchmark for `seed`, then trains and evaluates with the
/// same seed.
inline RunResult run_synthetic(SynthConfig synth, HyperParams hp, std::uint64_t seed,
                               EvalOptions opt = {}) {
  synth.seed = seed;
  hp.seed = seed;
  opt.seed = seed;
  opt.negatives = hp.eval_negatives;
  const auto s = generate_synthetic(synth, hp.d);
  return train_and_evaluate(s.data, s.pool, hp, opt);
}

// ---------------------------------------------------------------------------
// multi-seed summaries

struct MeanStd {
  double mean = 0.0;
  double stdev = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.stdev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

/// Named scalar columns of a report, in output order.
inline std::vector<std::pair<std::string, double>> report_scalars(const EvalReport& r) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& m : r.per_env) {
    out.emplace_back("ndcg10.env" + std::to_string(m.env), m.ndcg);
    out.emplace_back("hr10.env" + std::to_string(m.env), m.hr);
  }
  out.emplace_back("ndcg10.all", r.overall.ndcg);
  out.emplace_back("hr10.all", r.overall.hr);
  out.emplace_back("ood_delta", r.ood_delta);
  out.emplace_back("evidence_coverage", r.evidence_coverage);
  out.emplace_back("delta_f1", r.delta_f1);
  out.emplace_back("mean_score_drop", r.mean_score_drop);
  out.emplace_back("cf_pass_rate", r.cf_pass_rate);
  return out;
}

/// `variant,metric,mean,stdev,n` rows over seeds.
inline std::string seed_summary_csv(const std::vector<std::pair<std::string, std::vector<EvalReport>>>& runs) {
  std::string out = "variant,metric,mean,stdev,n\n";
  char buf[256];
  for (const auto& [variant, reports] : runs) {
    if (reports.empty()) continue;
    const auto names = report_scalars(reports.front());
    for (std::size_t k = 0; k < names.size(); ++k) {
      std::vector<double> xs;
      for (const auto& r : reports) xs.push_back(report_scalars(r).at(k).second);
      const auto ms = mean_std(xs);
      std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%zu\n", variant.c_str(), names[k].first.c_str(),
                    ms.mean, ms.stdev, xs.size());
      out += buf;
    }
  }
  return out;
}

inline std::string seed_summary_text(const std::vector<std::pair<std::string, std::vector<EvalReport>>>& runs) {
  std::string out;
  char buf[256];
  for (const auto& [variant, reports] : runs) {
    if (reports.empty()) continue;
    const auto& hp = reports.front().config;
    std::snprintf(buf, sizeof buf, "== %s (lambda1=%s K=%zu lambda2=%s, %zu seeds)\n", variant.c_str(),
                  format_double(hp.lambda1).c_str(), hp.K, format_double(hp.lambda2).c_str(),
                  reports.size());
    out += buf;
    const auto names = report_scalars(reports.front());
    for (std::size_t k = 0; k < names.size(); ++k) {
      std::vector<double> xs;
      for (const auto& r : reports) xs.push_back(report_scalars(r).at(k).second);
      const auto ms = mean_std(xs);
      std::snprintf(buf, sizeof buf, "  %-20s %.6f +- %.6f\n", names[k].first.c_str(), ms.mean, ms.stdev);
      out += buf;
    }
  }
  return out;
}

}  // namespace cirr
