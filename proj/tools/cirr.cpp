// SPDX-License-Identifier: Apache-2.0
// cirr: datagen / train / evaluate / explain / sweep-k / ablate.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cirr/cirr.hpp"

#ifndef CIRR_VERSION
#define CIRR_VERSION "dev"
#endif

namespace fs = std::filesystem;
using namespace cirr;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

const char* const kInteractionsFile = "interactions.tsv";
const char* const kEvidenceFile = "evidence.txt";
const char* const kMetaFile = "meta.txt";
const char* const kCheckpointFile = "checkpoint.ckpt";

// Flag values as given on the command line; applied after the config file.
struct Overrides {
  std::map<std::string, std::string> hyper;
  std::map<std::string, std::string> synth;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool desk = false;
  Overrides flags;
};

struct Paths {
  std::string data, checkpoint, out, resume;
};

void add_common(CLI::App* app, Common& c, bool with_hyper, bool with_synth) {
  app->add_option("--config", c.config, "Config file ([hyper], [synth], [paths], [eval] sections)")
      ->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Seed for generation, training and evaluation");
  app->add_flag("--desk", c.desk,
                "Desk-scale preset (600 users, 300 items, d=16, L=10, lr=1e-2, batch 64, T1=5, T2=3) "
                "applied before the config file");
  if (with_hyper) {
    const HyperParams def;
    for (const auto& f : hyper_fields()) {
      const std::string name = f.name;
      if (name == "seed") continue;
      app->add_option("--" + name, c.flags.hyper[name], "Hyperparameter (default " + f.get(def) + ")")
          ->group("Hyperparameters");
    }
  }
  if (with_synth) {
    const SynthConfig def;
    for (const auto& f : synth_fields()) {
      const std::string name = f.name;
      if (name == "seed") continue;
      const auto shown = f.get(def);
      app->add_option("--" + name, c.flags.synth[name],
                      "Generator setting (default " + (shown.empty() ? std::string("auto") : shown) + ")")
          ->group("Generator");
    }
  }
}

struct Resolved {
  HyperParams hp;
  SynthConfig synth;
  ConfigFile file;
};

/// defaults -> optional desk preset -> config file -> flags.
Resolved resolve(const Common& c, std::optional<HyperParams> base = std::nullopt) {
  Resolved r;
  if (base) r.hp = *base;
  if (c.desk) desk_scale(r.synth, r.hp);
  if (!c.config.empty()) {
    r.file = load_config(c.config);
    apply_config(r.file, &r.hp, &r.synth, {"paths", "eval"});
  }
  for (const auto& [k, v] : c.flags.hyper)
    if (!v.empty()) set_hyper(r.hp, k, v);
  for (const auto& [k, v] : c.flags.synth)
    if (!v.empty()) set_synth(r.synth, k, v);
  if (c.seed) {
    r.hp.seed = *c.seed;
    r.synth.seed = *c.seed;
  } else if (const auto* h = r.file.section("hyper"); h && h->count("seed")) {
    r.synth.seed = r.hp.seed;
  }
  r.hp.validate();
  return r;
}

void fill_paths(const ConfigFile& file, Paths& p) {
  const auto kv = checked_section(file, "paths", {"data", "checkpoint", "out", "resume"});
  const auto take = [&](const char* key, std::string& dst) {
    if (dst.empty() && kv.count(key)) dst = kv.at(key);
  };
  take("data", p.data);
  take("checkpoint", p.checkpoint);
  take("out", p.out);
  take("resume", p.resume);
}

std::map<std::string, std::string> eval_section(const ConfigFile& file) {
  return checked_section(file, "eval", {"seeds", "full_catalog", "k_values"});
}

void need(const std::string& value, const char* what) {
  if (value.empty()) throw Error("missing-path", what);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot-write", dir + ": " + ec.message());
}

std::string join(const std::string& dir, const char* file) { return (fs::path(dir) / file).string(); }

void write_manifest(const std::string& out, const std::string& command, const Paths& p,
                    const HyperParams* hp, const SynthConfig* synth,
                    const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  std::string m = "tool=cirr\nversion=" CIRR_VERSION "\ncommand=" + command + "\n";
  m += "[paths]\ndata=" + p.data + "\ncheckpoint=" + p.checkpoint + "\nout=" + p.out +
       "\nresume=" + p.resume + "\n";
  if (!extra.empty()) {
    m += "[options]\n";
    for (const auto& [k, v] : extra) m += k + "=" + v + "\n";
  }
  if (hp) m += "[hyper]\n" + format_hyper(*hp);
  if (synth) m += "[synth]\n" + format_synth(*synth);
  write_file(join(out, "run-manifest"), m);
}

struct Dataset {
  InteractionDataset data;
  EvidencePool pool;
};

Dataset load_dataset(const std::string& dir) {
  return {load_interactions(join(dir, kInteractionsFile)), load_evidence_pool(join(dir, kEvidenceFile))};
}

void check_compatible(const ModelParams& p, const InteractionDataset& data) {
  if (p.num_items() != data.num_items())
    throw Error("incompatible-checkpoint", "checkpoint has " + std::to_string(p.num_items()) +
                                               " items, dataset has " + std::to_string(data.num_items()));
}

std::vector<std::size_t> parse_k_list(const std::string& s) {
  std::vector<std::size_t> ks;
  for (auto tok : split_view(s, ',')) {
    const auto v = parse_int<std::size_t>(trim(tok));
    if (!v) throw Error("bad-value", "k list: " + s);
    ks.push_back(*v);
  }
  if (ks.empty()) throw Error("bad-value", "empty k list");
  return ks;
}

// ---------------------------------------------------------------------------
// subcommands

struct DatagenCmd {
  Common common;
  Paths paths;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("datagen", "Write a synthetic multi-environment dataset and evidence pool");
    sub->add_option("--out", paths.out, "Output directory");
    add_common(sub, common, false, true);
    sub->add_option("--d", common.flags.hyper["d"], "Model embedding size the data must fit (default 128)");
    sub->callback([this] { run(); });
  }

  void run() {
    auto r = resolve(common);
    fill_paths(r.file, paths);
    need(paths.out, "--out");
    const auto s = generate_synthetic(r.synth, r.hp.d);
    ensure_dir(paths.out);
    save_interactions(join(paths.out, kInteractionsFile), s.data);
    save_evidence_pool(join(paths.out, kEvidenceFile), s.pool);
    write_file(join(paths.out, kMetaFile), synth_meta(r.synth, s));
    write_manifest(paths.out, "datagen", paths, nullptr, &r.synth);
    std::printf("wrote %zu interactions, %zu evidence records to %s\n", s.data.interactions().size(),
                s.pool.size(), paths.out.c_str());
  }
};

struct TrainCmd {
  Common common;
  Paths paths;
  std::string stage = "all";
  bool log_wall_time = false;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("train", "Two-stage training: encoder with invariance penalty, then joint");
    sub->add_option("--data", paths.data, "Dataset directory (from datagen)");
    sub->add_option("--out", paths.out, "Output directory for checkpoint.ckpt and train_log.csv");
    sub->add_option("--resume", paths.resume, "Checkpoint to continue from");
    sub->add_option("--stage", stage, "Which stage to run")->check(CLI::IsMember({"1", "2", "all"}));
    sub->add_flag("--log-wall-time", log_wall_time, "Record real wall time in train_log.csv");
    add_common(sub, common, true, false);
    sub->callback([this] { run(); });
  }

  void run() {
    std::optional<Checkpoint> resumed;
    {
      // Paths may come from the config file, so peek before resolving.
      if (!common.config.empty()) fill_paths(load_config(common.config), paths);
      if (!paths.resume.empty()) resumed = load_checkpoint(paths.resume);
    }
    auto r = resolve(common, resumed ? std::optional(resumed->hyper) : std::nullopt);
    need(paths.data, "--data");
    need(paths.out, "--out");
    const auto ds = load_dataset(paths.data);
    const auto& hp = r.hp;

    TrainState state = resumed ? resumed->state
                               : TrainState::fresh(init_params(ds.data.num_items(), hp.d, hp.L, hp.seed), hp.seed);
    check_compatible(state.params, ds.data);
    if (state.params.dim() != hp.d || state.params.max_context() != hp.L)
      throw Error("incompatible-checkpoint", "d or L differs from the checkpoint");

    Trainer tr(ds.data, ds.pool, default_split(ds.data.num_envs()), hp, std::move(state));
    tr.log_wall_time = log_wall_time;
    TrainLog log;
    if (stage == "1" || stage == "all") {
      const auto done = tr.state().stage1_epochs;
      if (tr.state().stage2_epochs > 0 && done < hp.T1)
        throw Error("bad-stage", "stage 2 already started; stage 1 cannot resume");
      if (done < hp.T1) log.append(tr.run_stage1(hp.T1 - done));
    }
    if (stage == "2" || stage == "all") {
      const auto done = tr.state().stage2_epochs;
      if (done < hp.T2) log.append(tr.run_stage2(hp.T2 - done));
    }

    ensure_dir(paths.out);
    save_checkpoint(join(paths.out, kCheckpointFile), {hp, tr.state()});
    write_file(join(paths.out, "train_log.csv"), log.to_csv(log_wall_time));
    write_manifest(paths.out, "train", paths, &hp, nullptr, {{"stage", stage}});
    for (const auto& e : log.epochs)
      std::printf("stage %d epoch %zu  L_rec %.6f  L_inv %.6f  L_cons %.6f  total %.6f\n", e.stage, e.epoch,
                  e.l_rec, e.l_inv, e.l_cons, e.total);
  }
};

/// Per-seed reports for a variant: retrained on the given data, or on a
/// freshly generated benchmark per seed when no data is given.
std::vector<EvalReport> run_seeds(const std::optional<Dataset>& ds, const SynthConfig& synth,
                                  const HyperParams& hp, std::size_t seeds, bool full_catalog) {
  std::vector<EvalReport> out;
  for (std::size_t k = 0; k < seeds; ++k) {
    const std::uint64_t seed = hp.seed + k;
    EvalOptions opt;
    opt.full_catalog = full_catalog;
    if (ds) {
      HyperParams h = hp;
      h.seed = seed;
      opt.seed = seed;
      opt.negatives = h.eval_negatives;
      out.push_back(train_and_evaluate(ds->data, ds->pool, h, opt).report);
    } else {
      out.push_back(run_synthetic(synth, hp, synth.seed + k, opt).report);
    }
  }
  return out;
}

struct EvaluateCmd {
  Common common;
  Paths paths;
  std::size_t seeds = 0;
  bool full_catalog = false;
  std::size_t dump_cases = 20;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("evaluate", "NDCG@10/HR@10 per environment, OOD delta and faithfulness");
    sub->add_option("--data", paths.data, "Dataset directory; omitted means generate per seed");
    sub->add_option("--checkpoint", paths.checkpoint, "Evaluate this trained model (single run)");
    sub->add_option("--out", paths.out, "Output directory for report.csv and report.txt");
    sub->add_option("--seeds", seeds, "Train and evaluate this many seeds and report mean and stdev");
    sub->add_flag("--full-catalog", full_catalog, "Rank against every item instead of sampled negatives");
    sub->add_option("--dump-cases", dump_cases, "Evaluation cases written to retrieval.txt (with --checkpoint)");
    add_common(sub, common, true, true);
    sub->callback([this] { run(); });
  }

  void run() {
    Checkpoint ck;
    if (!common.config.empty()) fill_paths(load_config(common.config), paths);
    if (!paths.checkpoint.empty()) ck = load_checkpoint(paths.checkpoint);
    auto r = resolve(common, paths.checkpoint.empty() ? std::nullopt : std::optional(ck.hyper));
    const auto ev = eval_section(r.file);
    if (seeds == 0) seeds = ev.count("seeds") ? parse_int<std::size_t>(ev.at("seeds")).value_or(0) : 1;
    if (seeds == 0) throw Error("bad-value", "seeds");
    if (!full_catalog && ev.count("full_catalog")) full_catalog = ev.at("full_catalog") == "true";
    need(paths.out, "--out");
    ensure_dir(paths.out);

    std::optional<Dataset> ds;
    if (!paths.data.empty()) ds = load_dataset(paths.data);

    if (!paths.checkpoint.empty()) {
      if (!ds) throw Error("missing-path", "--data is required with --checkpoint");
      if (seeds != 1) throw Error("bad-value", "--seeds needs training; drop --checkpoint");
      check_compatible(ck.state.params, ds->data);
      const auto split = default_split(ds->data.num_envs());
      const auto examples = build_examples(ds->data, split, r.hp.L);
      const auto prepared = prepare_pool(ds->pool, ds->data, ck.state.params, split, r.hp);
      const CirrModel model(ck.state.params, prepared, r.hp);
      EvalOptions opt;
      opt.seed = r.hp.seed;
      opt.negatives = r.hp.eval_negatives;
      opt.full_catalog = full_catalog;
      const auto rep = evaluate(model, examples.eval, ds->data.num_items(), split, opt);
      write_file(join(paths.out, "report.csv"), rep.to_csv());
      write_file(join(paths.out, "report.txt"), "[config]\n" + format_hyper(r.hp) + "[results]\n" + rep.to_text());
      write_file(join(paths.out, "retrieval.txt"), dump_retrieval(model, examples.eval));
      std::fputs(rep.to_text().c_str(), stdout);
    } else {
      const auto reports = run_seeds(ds, r.synth, r.hp, seeds, full_catalog);
      const std::vector<std::pair<std::string, std::vector<EvalReport>>> runs{{"cirr", reports}};
      write_file(join(paths.out, "report.csv"), seed_summary_csv(runs));
      const auto text = "[config]\n" + format_hyper(r.hp) + "[results]\n" + seed_summary_text(runs);
      write_file(join(paths.out, "report.txt"), text);
      std::fputs(text.c_str(), stdout);
    }
    write_manifest(paths.out, "evaluate", paths, &r.hp, ds ? nullptr : &r.synth,
                   {{"seeds", std::to_string(seeds)}, {"full_catalog", full_catalog ? "true" : "false"}});
  }

  std::string dump_retrieval(const CirrModel& model, std::span<const EvalCase> cases) const {
    std::string out;
    for (std::size_t i = 0; i < std::min(dump_cases, cases.size()); ++i) {
      const auto& c = cases[i];
      CirrModel::Query q(model, c.user_id, c.context, c.timestamp);
      out += "case " + std::to_string(i) + " user " + std::to_string(c.user_id) + " env " +
             std::to_string(c.env_id) + " target " + std::to_string(c.target) + "\n";
      out += q.retrieve(c.target).serialize(model.pool());
    }
    return out;
  }
};

struct ExplainCmd {
  Common common;
  Paths paths;
  std::uint32_t user = 0;
  std::size_t top = 10;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("explain", "Ranked list, explanation and citation sidecar for one user");
    sub->add_option("--data", paths.data, "Dataset directory");
    sub->add_option("--checkpoint", paths.checkpoint, "Trained model");
    sub->add_option("--user", user, "User id")->required();
    sub->add_option("--top", top, "Length of the printed ranked list")->check(CLI::PositiveNumber);
    sub->add_option("--out", paths.out, "Also write explain.txt and run-manifest here");
    add_common(sub, common, true, false);
    sub->callback([this] { run(); });
  }

  void run() {
    if (!common.config.empty()) fill_paths(load_config(common.config), paths);
    need(paths.checkpoint, "--checkpoint");
    need(paths.data, "--data");
    const auto ck = load_checkpoint(paths.checkpoint);
    auto r = resolve(common, ck.hyper);
    const auto ds = load_dataset(paths.data);
    check_compatible(ck.state.params, ds.data);
    if (user >= ds.data.num_users()) throw Error("user-out-of-range", std::to_string(user));
    const auto stream = ds.data.user_slice(user);
    if (stream.empty()) throw Error("empty-sequence", "user " + std::to_string(user));

    const auto split = default_split(ds.data.num_envs());
    const auto prepared = prepare_pool(ds.pool, ds.data, ck.state.params, split, r.hp);
    const CirrModel model(ck.state.params, prepared, r.hp);
    const auto context = context_before(stream, stream.size(), r.hp.L);
    const std::int64_t now = stream.back().timestamp + 1;
    CirrModel::Query q(model, user, context, now);

    std::vector<ItemId> items(ds.data.num_items());
    for (ItemId i = 0; i < items.size(); ++i) items[i] = i;
    Vector scores;
    for (ItemId i : items) scores.push_back(q.score(i));
    const auto ranked = top_k_items(scores, items, top);

    std::string out = "user " + std::to_string(user) + "\n[ranking]\n";
    char buf[96];
    for (std::size_t k = 0; k < ranked.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%zu\t%u\t%.9f\n", k + 1, ranked[k], scores[ranked[k]]);
      out += buf;
    }
    const auto retrieved = q.retrieve(ranked.front());
    if (retrieved.empty()) {
      out += "[explanation]\nno evidence retrieved for item " + std::to_string(ranked.front()) + "\n";
    } else {
      const auto rank_out = q.rank(ranked.front(), retrieved);
      const auto ex = generate_explanation(retrieved, rank_out, model.pool(), r.hp.tau_cite);
      out += "[retrieved]\n" + retrieved.serialize(model.pool());
      out += "[explanation]\n" + ex.text + "\n";
      out += "[citations]\n" + citation_sidecar(ex, retrieved);
    }
    std::fputs(out.c_str(), stdout);
    if (!paths.out.empty()) {
      ensure_dir(paths.out);
      write_file(join(paths.out, "explain.txt"), out);
      write_manifest(paths.out, "explain", paths, &r.hp, nullptr,
                     {{"user", std::to_string(user)}, {"top", std::to_string(top)}});
    }
  }
};

struct SweepCmd {
  Common common;
  Paths paths;
  std::string k_values;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("sweep-k", "NDCG@10 and coverage of a trained model for several K");
    sub->add_option("--data", paths.data, "Dataset directory");
    sub->add_option("--checkpoint", paths.checkpoint, "Trained model");
    sub->add_option("--k-values", k_values, "Comma-separated K values (default 0,5,10,20,50)");
    sub->add_option("--out", paths.out, "Output directory for sweep.csv and report.txt");
    add_common(sub, common, true, false);
    sub->callback([this] { run(); });
  }

  void run() {
    if (!common.config.empty()) fill_paths(load_config(common.config), paths);
    need(paths.checkpoint, "--checkpoint");
    need(paths.data, "--data");
    need(paths.out, "--out");
    const auto ck = load_checkpoint(paths.checkpoint);
    auto r = resolve(common, ck.hyper);
    const auto ev = eval_section(r.file);
    if (k_values.empty()) k_values = ev.count("k_values") ? ev.at("k_values") : "0,5,10,20,50";
    const auto ks = parse_k_list(k_values);
    const auto ds = load_dataset(paths.data);
    check_compatible(ck.state.params, ds.data);
    const auto split = default_split(ds.data.num_envs());
    const auto examples = build_examples(ds.data, split, r.hp.L);
    const auto prepared = prepare_pool(ds.pool, ds.data, ck.state.params, split, r.hp);
    EvalOptions opt;
    opt.seed = r.hp.seed;
    opt.negatives = r.hp.eval_negatives;
    const auto rows = sweep_k(ck.state.params, prepared, r.hp, examples.eval, ds.data.num_items(), split, ks, opt);
    ensure_dir(paths.out);
    const auto csv = sweep_csv(rows);
    write_file(join(paths.out, "sweep.csv"), csv);
    write_file(join(paths.out, "report.txt"), "[config]\n" + format_hyper(r.hp) + "[sweep]\n" + csv);
    write_manifest(paths.out, "sweep-k", paths, &r.hp, nullptr, {{"k_values", k_values}});
    std::fputs(csv.c_str(), stdout);
  }
};

struct AblateCmd {
  Common common;
  Paths paths;
  Ablation switches;
  std::size_t seeds = 0;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("ablate", "Train and evaluate model variants; no switches runs the full matrix");
    sub->add_flag("--no-causal", switches.no_causal, "Drop the invariance penalty (lambda1 = 0)");
    sub->add_flag("--no-rag", switches.no_rag, "Drop retrieval (K = 0)");
    sub->add_flag("--no-faithful", switches.no_faithful, "Drop the consistency loss (lambda2 = 0)");
    sub->add_option("--data", paths.data, "Dataset directory; omitted means generate per seed");
    sub->add_option("--seeds", seeds, "Seeds per variant (default 1)");
    sub->add_option("--out", paths.out, "Output directory for report.csv and report.txt");
    add_common(sub, common, true, true);
    sub->callback([this] { run(); });
  }

  void run() {
    if (!common.config.empty()) fill_paths(load_config(common.config), paths);
    auto r = resolve(common);
    const auto ev = eval_section(r.file);
    if (seeds == 0) seeds = ev.count("seeds") ? parse_int<std::size_t>(ev.at("seeds")).value_or(0) : 1;
    if (seeds == 0) throw Error("bad-value", "seeds");
    need(paths.out, "--out");
    std::optional<Dataset> ds;
    if (!paths.data.empty()) ds = load_dataset(paths.data);

    const bool any = switches.no_causal || switches.no_rag || switches.no_faithful;
    const auto variants = any ? std::vector<Ablation>{switches} : ablation_matrix();
    std::vector<std::pair<std::string, std::vector<EvalReport>>> runs;
    std::string configs;
    for (const auto& v : variants) {
      const auto hp = v.apply(r.hp);
      runs.emplace_back(v.name(), run_seeds(ds, r.synth, hp, seeds, false));
      configs += "[config " + v.name() + "]\n" + format_hyper(hp);
    }
    ensure_dir(paths.out);
    write_file(join(paths.out, "report.csv"), seed_summary_csv(runs));
    const auto text = configs + "[results]\n" + seed_summary_text(runs);
    write_file(join(paths.out, "report.txt"), text);
    std::string names;
    for (const auto& v : variants) names += (names.empty() ? "" : ",") + v.name();
    write_manifest(paths.out, "ablate", paths, &r.hp, ds ? nullptr : &r.synth,
                   {{"variants", names}, {"seeds", std::to_string(seeds)}});
    std::fputs(text.c_str(), stdout);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cirr: causal invariant retrieval-augmented recommendation"};
  app.set_version_flag("--version", CIRR_VERSION);
  app.require_subcommand(1);
  app.fallthrough(false);

  DatagenCmd datagen;
  TrainCmd train;
  EvaluateCmd evaluate_cmd;
  ExplainCmd explain;
  SweepCmd sweep;
  AblateCmd ablate;
  datagen.setup(app);
  train.setup(app);
  evaluate_cmd.setup(app);
  explain.setup(app);
  sweep.setup(app);
  ablate.setup(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", e.what());
    std::fputs(app.help().c_str(), stderr);
    return kUsage;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: runtime: %s\n", e.what());
    return kRuntime;
  }
  return kOk;
}
