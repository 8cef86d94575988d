// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"

using namespace cirr;
using namespace cirr::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("criterion %2d: %s  %s\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string summary(const char* name, const CheckResult& r) {
  return fmt("%s %zu inst, worst %.1e", name, r.instances, r.worst);
}

void criterion_1() {
  const auto t0 = Clock::now();
  CheckResult value;
  const auto rec = gradcheck_rec(100, 101);
  const auto inv = gradcheck_inv(100, 102, &value);
  const auto rank = gradcheck_rank(100, 103);
  const auto cov = gradcheck_coverage(100, 104);
  const auto cf = gradcheck_cf(100, 105);
  const double secs = seconds_since(t0);
  const bool pass = rec.ok() && inv.ok() && value.ok() && rank.ok() && cov.ok() && cf.ok() && secs < 60;
  report(1, pass,
         summary("L_rec", rec) + "; " + summary("L_inv", inv) + fmt(" (value worst %.1e)", value.worst) + "; " +
             summary("rank_score", rank) + "; " + summary("coverage", cov) + "; " + summary("L_cf", cf) +
             fmt("; %.1fs", secs));
}

void criterion_2() {
  const auto m = metric_oracle(200);
  const auto e = eval_rank_oracle(1000, 201);
  report(2, m.ok() && e.ok(),
         fmt("ndcg/hr ranks 1..200: %zu mismatches; evaluate rank vs full sort on %zu cases: %zu mismatches",
             m.mismatches, e.instances, e.mismatches));
}

void criterion_3() {
  const auto r = retrieval_oracle(100, 500, 301);
  report(3, r.ok(), fmt("%zu trials x 500 candidates: %zu mismatches", r.instances, r.mismatches));
}

// ---------------------------------------------------------------------------
// five-seed desk benchmark shared by criteria 4, 5, 6 and 10

struct SeedRuns {
  EvalReport full, no_causal, base, no_faithful;
  double ndcg_k0 = 0.0, ndcg_k20 = 0.0;
  bool totals_ok = true;
  std::size_t steps_checked = 0;
};

struct Bench {
  std::vector<SeedRuns> seeds;
  double seconds = 0.0;
};

Bench run_benchmark() {
  const auto t0 = Clock::now();
  SynthConfig synth;
  HyperParams hp;
  desk_scale(synth, hp);
  Bench b;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    synth.seed = seed;
    hp.seed = seed;
    const auto s = generate_synthetic(synth, hp.d);
    EvalOptions opt;
    opt.seed = seed;
    opt.negatives = hp.eval_negatives;
    SeedRuns r;

    const auto run = [&](const Ablation& a) { return train_and_evaluate(s.data, s.pool, a.apply(hp), opt); };
    const auto full = run({});
    r.full = full.report;
    for (const auto& rec : full.log.steps) {
      const double expect = rec.l_rec + 0.1 * rec.l_inv + 0.05 * rec.l_cons;
      r.totals_ok = r.totals_ok && std::fabs(rec.total - expect) <= 1e-9;
      ++r.steps_checked;
    }
    r.no_causal = run({true, false, false}).report;
    r.base = run({true, true, false}).report;
    r.no_faithful = run({false, false, true}).report;

    // Frozen full model with retrieval switched off and on.
    const auto split = default_split(s.data.num_envs());
    const auto examples = build_examples(s.data, split, hp.L);
    const auto prepared = prepare_pool(s.pool, s.data, full.state.params, split, hp);
    EvalOptions sweep_opt = opt;
    sweep_opt.faithfulness = false;
    const std::vector<std::size_t> ks{0, 20};
    const auto rows = sweep_k(full.state.params, prepared, hp, examples.eval, s.data.num_items(), split, ks, sweep_opt);
    r.ndcg_k0 = rows[0].ndcg;
    r.ndcg_k20 = rows[1].ndcg;

    std::printf("  seed %llu: ood_delta full %.4f no-causal %.4f base %.4f | cf_pass full %.3f no-faithful %.3f |"
                " coverage full %.3f no-faithful %.3f | ndcg K=0 %.4f K=20 %.4f\n",
                static_cast<unsigned long long>(seed), r.full.ood_delta, r.no_causal.ood_delta, r.base.ood_delta,
                r.full.cf_pass_rate, r.no_faithful.cf_pass_rate, r.full.evidence_coverage,
                r.no_faithful.evidence_coverage, r.ndcg_k0, r.ndcg_k20);
    std::fflush(stdout);
    b.seeds.push_back(std::move(r));
  }
  b.seconds = seconds_since(t0);
  return b;
}

double mean_of(const Bench& b, auto&& get) {
  double s = 0.0;
  for (const auto& r : b.seeds) s += get(r);
  return s / static_cast<double>(b.seeds.size());
}

void criterion_4(const Bench& b) {
  const double full = mean_of(b, [](const SeedRuns& r) { return r.full.ood_delta; });
  const double base = mean_of(b, [](const SeedRuns& r) { return r.base.ood_delta; });
  int wins = 0;
  for (const auto& r : b.seeds) wins += r.full.ood_delta < r.no_causal.ood_delta;
  const bool ratio_ok = full <= 0.6 * base;
  report(4, ratio_ok && wins >= 4 && b.seconds < 600,
         fmt("mean ood_delta full %.4f vs base (lambda1=0, K=0) %.4f, ratio %.3f (need <= 0.6); "
             "full < no-causal in %d/5 seeds (need >= 4); benchmark %.0fs",
             full, base, full / base, wins, b.seconds));
}

void criterion_5(const Bench& b) {
  const double cf_full = mean_of(b, [](const SeedRuns& r) { return r.full.cf_pass_rate; });
  const double cf_abl = mean_of(b, [](const SeedRuns& r) { return r.no_faithful.cf_pass_rate; });
  const double cov_full = mean_of(b, [](const SeedRuns& r) { return r.full.evidence_coverage; });
  const double cov_abl = mean_of(b, [](const SeedRuns& r) { return r.no_faithful.evidence_coverage; });
  report(5, cf_full > cf_abl && cov_full > cov_abl,
         fmt("cf_pass_rate lambda2=0.05 %.4f vs lambda2=0 %.4f (need >); coverage %.4f vs %.4f (need >)", cf_full,
             cf_abl, cov_full, cov_abl));
}

void criterion_6(const Bench& b) {
  bool ok = true;
  std::size_t steps = 0;
  for (const auto& r : b.seeds) {
    ok = ok && r.totals_ok;
    steps += r.steps_checked;
  }
  report(6, ok && steps > 0, fmt("%zu logged steps, total = L_rec + 0.1 L_inv + 0.05 L_cons to 1e-9", steps));
}

void criterion_10(const Bench& b) {
  const double k0 = mean_of(b, [](const SeedRuns& r) { return r.ndcg_k0; });
  const double k20 = mean_of(b, [](const SeedRuns& r) { return r.ndcg_k20; });
  report(10, k20 >= k0, fmt("mean NDCG@10 K=20 %.4f vs K=0 %.4f", k20, k0));
}

// ---------------------------------------------------------------------------

void criterion_7() {
  SynthConfig synth;
  synth.num_users = 40;
  synth.num_items = 30;
  synth.interactions_per_user = 8;
  synth.stable_dim = 4;
  synth.spurious_dim = 4;
  synth.spurious_strength.assign(synth.num_envs, 0.0);
  synth.seed = 11;
  const std::size_t d = 8, L = 5;
  const auto s = generate_synthetic(synth, d);
  const auto examples = build_examples(s.data, default_split(synth.num_envs), L);

  // Ten examples, five from each of two environments, negatives fixed.
  Rng rng(derive_seed(11, 0x70f));
  std::map<EnvId, std::vector<TrainingExample>> toy;
  for (const auto& ex : examples.train) {
    if (ex.env_id > 1 || toy[ex.env_id].size() == 5) continue;
    auto copy = ex;
    copy.negatives = sample_negatives(rng, synth.num_items, ex.target, 4);
    toy[ex.env_id].push_back(std::move(copy));
  }
  std::map<EnvId, detail::ExampleRefs> refs;
  for (auto& [e, xs] : toy)
    for (auto& x : xs) refs[e].push_back(&x);

  // Full-batch Adam on L_rec + 0.1 L_inv until the gradient vanishes.
  auto params = init_params(synth.num_items, d, L, 11);
  auto adam = AdamState::for_params(params);
  double max_grad = 0.0;
  std::size_t steps = 0;
  for (; steps < 200000; ++steps) {
    const auto obj = detail::dot_objective(params, refs, 1.0, 1.0, 0.1);
    max_grad = 0.0;
    obj.grads.visit([&](const char*, std::span<const double> g) {
      for (double x : g) max_grad = std::max(max_grad, std::fabs(x));
    }, ParamGroup::encoder);
    if (max_grad < 1e-7) break;
    adam_step(params, obj.grads, adam, 1e-2, ParamGroup::encoder);
  }
  const double penalty = irm_penalty(params, toy).value;
  report(7, penalty < 1e-6 && toy.size() == 2,
         fmt("10-example toy, spurious_strength = 0: irm_penalty %.2e after %zu steps (max |grad| %.1e)", penalty,
             steps, max_grad));
}

struct PipelineBytes {
  std::string data, pool, checkpoint, report;
};

PipelineBytes pipeline_once(const SynthConfig& synth, const HyperParams& hp) {
  const auto s = generate_synthetic(synth, hp.d);
  PipelineBytes out{format_interactions(s.data), format_pool(s.pool), {}, {}};
  const auto data = parse_interactions(out.data);
  const auto pool = parse_evidence_pool(out.pool);
  const auto split = default_split(data.num_envs());
  Trainer tr(data, pool, split, hp, TrainState::fresh(init_params(data.num_items(), hp.d, hp.L, hp.seed), hp.seed));
  tr.run_stage1(hp.T1);
  tr.run_stage2(hp.T2);
  out.checkpoint = format_checkpoint({hp, tr.state()});
  const auto prepared = tr.prepared_pool();
  EvalOptions opt;
  opt.seed = hp.seed;
  const auto rep = evaluate(CirrModel(tr.state().params, prepared, hp), tr.examples().eval, data.num_items(), split, opt);
  out.report = rep.to_csv() + rep.to_text();
  return out;
}

void criterion_8() {
  SynthConfig synth;
  synth.num_users = 120;
  synth.num_items = 80;
  synth.interactions_per_user = 16;
  synth.stable_dim = 6;
  synth.spurious_dim = 6;
  synth.seed = 7;
  HyperParams hp;
  hp.d = 12;
  hp.L = 6;
  hp.lr = 1e-2;
  hp.batch_size = 32;
  hp.T1 = 2;
  hp.T2 = 2;
  hp.K = 10;
  hp.seed = 7;
  const auto a = pipeline_once(synth, hp);
  const auto b = pipeline_once(synth, hp);
  const bool identical = a.data == b.data && a.pool == b.pool && a.checkpoint == b.checkpoint && a.report == b.report;

  // Uninterrupted run against one stopped and restored from text after
  // every epoch.
  const auto s = generate_synthetic(synth, hp.d);
  const auto split = default_split(s.data.num_envs());
  const auto start = TrainState::fresh(init_params(s.data.num_items(), hp.d, hp.L, hp.seed), hp.seed);
  Trainer whole(s.data, s.pool, split, hp, start);
  TrainLog log_whole = whole.run_stage1(2);
  log_whole.append(whole.run_stage2(2));

  TrainLog log_parts;
  std::string text = format_checkpoint({hp, start});
  for (int part = 0; part < 4; ++part) {
    const auto ck = parse_checkpoint(text);
    Trainer t(s.data, s.pool, split, ck.hyper, ck.state);
    log_parts.append(part < 2 ? t.run_stage1(1) : t.run_stage2(1));
    text = format_checkpoint({hp, t.state()});
  }
  const bool resumed = log_whole.same_losses(log_parts) && text == format_checkpoint({hp, whole.state()});
  report(8, identical && resumed,
         fmt("two pipeline runs byte-identical: %s; resumed after every epoch equals uninterrupted over %zu steps: %s",
             identical ? "yes" : "no", log_whole.steps.size(), resumed ? "yes" : "no"));
}

void criterion_9() {
  const auto r = citation_roundtrip(1000, 901);
  std::size_t bad = 0;
  for (const auto& f : coverage_fixtures())
    if (std::fabs(coverage_loss(extract_evidence_ids(f.text, f.K), f.K) - f.loss) > 1e-12) ++bad;
  report(9, r.ok() && bad == 0,
         fmt("round trip on %zu instances: %zu mismatches; %zu hand-counted fixtures: %zu mismatches", r.instances,
             r.mismatches, coverage_fixtures().size(), bad));
}

}  // namespace

// Arguments select criteria by number; none runs all of them.
int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const auto want = [&](int c) { return only.empty() || only.count(c) > 0; };
  try {
    if (want(1)) criterion_1();
    if (want(2)) criterion_2();
    if (want(3)) criterion_3();
    Bench bench;
    if (want(4) || want(5) || want(6) || want(10)) {
      std::printf("five-seed desk benchmark (600 users, 300 items, d=16, T1=5, T2=3):\n");
      bench = run_benchmark();
    }
    if (want(4)) criterion_4(bench);
    if (want(5)) criterion_5(bench);
    if (want(6)) criterion_6(bench);
    if (want(7)) criterion_7();
    if (want(8)) criterion_8();
    if (want(9)) criterion_9();
    if (want(10)) criterion_10(bench);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
