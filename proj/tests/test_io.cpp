// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cirr/cirr.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cirr;
using namespace cirr::testing;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cirr_test_" + name)).string();
}

}  // namespace

TEST(Interactions, RoundTrip) {
  SynthConfig cfg;
  cfg.num_users = 20;
  cfg.num_items = 15;
  cfg.interactions_per_user = 6;
  cfg.stable_dim = 2;
  cfg.spurious_dim = 2;
  const auto s = generate_synthetic(cfg, 4);
  const auto path = temp_path("interactions.tsv");
  save_interactions(path, s.data);
  EXPECT_EQ(load_interactions(path), s.data);
  std::filesystem::remove(path);
}

TEST(Interactions, HeaderOptionalAndCountsInferred) {
  const auto a = parse_interactions("0\t1\t4\t10\t0\n0\t2\t3.5\t20\t1\n");
  EXPECT_EQ(a.num_users(), 1u);
  EXPECT_EQ(a.num_items(), 3u);
  EXPECT_EQ(a.num_envs(), 2u);
  EXPECT_EQ(a.interactions()[1].rating, 3.5);
  const auto b = parse_interactions("# num_items=9\nuser_id\titem_id\trating\ttimestamp\tenv_id\n"
                                    "0\t1\t4\t10\t0\n\n0\t2\t3.5\t20\t1\n");
  EXPECT_EQ(b.num_items(), 9u);
  EXPECT_EQ(b.interactions(), a.interactions());
}

TEST(Interactions, Rejects) {
  EXPECT_EQ(error_code([] { parse_interactions("0\t1\t4\t10\n"); }), "malformed-line");
  EXPECT_EQ(error_code([] { parse_interactions("0\t1\t4\t10\t0\n0\tx\t4\t10\t1\n"); }), "malformed-line");
  EXPECT_EQ(error_code([] { parse_interactions("0\t1\t4\t10\t0\n0\t-2\t4\t10\t1\n"); }), "malformed-line");
  EXPECT_EQ(error_code([] { parse_interactions("# only a comment\n"); }), "empty-dataset");
  EXPECT_EQ(error_code([] { parse_interactions("0\t1\t9\t10\t0\n0\t2\t4\t11\t1\n"); }), "rating-out-of-range");
  EXPECT_EQ(error_code([] { parse_interactions("0\t1\t4\t10\t0\n0\t2\t4\t11\t0\n"); }), "single-environment");
  EXPECT_EQ(error_code([] { parse_interactions("0\t1\t4\t10\t0\n0\t2\t4\t11\t1\n1\t2\t4\t11\t1\n"); }),
            "short-user-stream");
  EXPECT_EQ(error_code([] { load_interactions(temp_path("does_not_exist.tsv")); }), "file-not-found");
}

TEST(EvidencePoolIo, RoundTripEveryField) {
  Rng rng(1);
  auto pool = mixed_pool(rng, 30);
  for (auto& ev : pool.mutable_items()) {
    ev.embedding = random_unit(rng, 5);
    ev.stability_var = rng.uniform() * 1e-3;
  }
  const auto path = temp_path("evidence.txt");
  save_evidence_pool(path, pool);
  const auto back = load_evidence_pool(path);
  EXPECT_EQ(back, pool);
  EXPECT_EQ(back.user_candidates(0).size(), pool.user_candidates(0).size());
  std::filesystem::remove(path);
}

TEST(EvidencePoolIo, Rejects) {
  EXPECT_EQ(error_code([] { parse_evidence_pool("id=0\tsource=nope\n"); }), "unknown-source");
  EXPECT_EQ(error_code([] { parse_evidence_pool("id=0\tsource=history\tuser=1\n"); }), "malformed-record");
  EXPECT_EQ(error_code([] { parse_evidence_pool("id=0\tsource=kg_triplet\thead=1\trelation=r\ttail=2\nid=0\t"
                                                "source=kg_triplet\thead=1\trelation=r\ttail=3\n"); }),
            "duplicate-evidence-id");
  EXPECT_EQ(error_code([] { parse_evidence_pool("id=1\tsource=kg_triplet\thead=1\trelation=r\ttail=2\n"); }),
            "non-dense-evidence-ids");
  EXPECT_EQ(error_code([] { parse_evidence_pool("id=0\tsource=attribute\tname=a\tvalue=b\titem=1\tstray\n"); }),
            "malformed-record");
}

TEST(Checkpoint, ExactRoundTrip) {
  Rng rng(2);
  TrainState st = TrainState::fresh(random_params(rng, 9, 4, 3), 7);
  st.params.irm_dummy_w = 1.0 / 3.0;
  st.adam.step = 12;
  st.adam.m = random_params(rng, 9, 4, 3, 1e-3);
  st.adam.v = random_params(rng, 9, 4, 3, 1e-7);
  st.rng.next_u64();
  st.stage1_epochs = 3;
  st.stage2_epochs = 1;
  HyperParams hp;
  hp.lambda1 = 0.1 + 1e-17;
  hp.K = 7;
  const auto text = format_checkpoint({hp, st});
  const auto ck = parse_checkpoint(text);
  EXPECT_EQ(ck.hyper, hp);
  EXPECT_EQ(ck.state.params, st.params);
  EXPECT_EQ(ck.state.adam, st.adam);
  EXPECT_EQ(ck.state.stage1_epochs, 3u);
  EXPECT_EQ(ck.state.stage2_epochs, 1u);
  Rng a = ck.state.rng, b = st.rng;
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_EQ(format_checkpoint(ck), text);

  const auto path = temp_path("model.ckpt");
  save_checkpoint(path, {hp, st});
  EXPECT_EQ(format_checkpoint(load_checkpoint(path)), text);
  std::filesystem::remove(path);
}

TEST(Checkpoint, Rejects) {
  Rng rng(3);
  const auto text = format_checkpoint({HyperParams{}, TrainState::fresh(random_params(rng, 3, 2, 2), 0)});
  EXPECT_EQ(error_code([&] { parse_checkpoint("cirr-checkpoint 99\n" + text.substr(text.find('\n') + 1)); }),
            "incompatible-checkpoint");
  const auto half = error_code([&] { parse_checkpoint(text.substr(0, text.size() / 2)); });
  EXPECT_TRUE(half == "truncated-checkpoint" || half == "corrupt-checkpoint") << half;
  EXPECT_EQ(error_code([&] { parse_checkpoint(text.substr(0, text.rfind("[end]"))); }), "truncated-checkpoint");
  std::string bad = text;
  bad.replace(bad.find("0x"), 2, "zz");
  EXPECT_EQ(error_code([&] { parse_checkpoint(bad); }), "corrupt-checkpoint");
}

TEST(HyperIo, SetAndFormat) {
  HyperParams hp;
  set_hyper(hp, "lambda1", "0.25");
  set_hyper(hp, "K", "8");
  set_hyper(hp, "stage2_irm", "false");
  EXPECT_EQ(hp.lambda1, 0.25);
  EXPECT_EQ(hp.K, 8u);
  EXPECT_FALSE(hp.stage2_irm);
  EXPECT_EQ(error_code([&] { set_hyper(hp, "lambda3", "1"); }), "unknown-key");
  EXPECT_EQ(error_code([&] { set_hyper(hp, "K", "-1"); }), "bad-value");
  EXPECT_EQ(error_code([&] { set_hyper(hp, "alpha", "abc"); }), "bad-value");

  HyperParams back;
  const auto text = format_hyper(hp);
  for (auto line : lines_of(text)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    set_hyper(back, line.substr(0, eq), line.substr(eq + 1));
  }
  EXPECT_EQ(back, hp);
}

TEST(Numbers, FormatAndParse) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10);
    EXPECT_EQ(*parse_double(format_double(x)), x);
    EXPECT_EQ(*parse_double(format_hex(x)), x);
  }
  EXPECT_FALSE(parse_double("1.5x"));
  EXPECT_FALSE(parse_double(""));
  EXPECT_EQ(*parse_int<std::uint32_t>("42"), 42u);
  EXPECT_FALSE(parse_int<std::uint32_t>("-1"));
}

TEST(Config, ParseSectionsAndComments) {
  const auto cfg = parse_config("top = 1\n# comment\n[hyper]\n  lambda1 = 0.3  # trailing\nK=4\n\n[synth]\nspurious_strength = 1, 0.5,0,0\n");
  EXPECT_EQ(cfg.section("")->at("top"), "1");
  EXPECT_EQ(cfg.section("hyper")->at("lambda1"), "0.3");
  EXPECT_EQ(cfg.section("hyper")->at("K"), "4");
  EXPECT_EQ(cfg.section("missing"), nullptr);
  EXPECT_EQ(error_code([] { parse_config("[hyper\n"); }), "bad-config");
  EXPECT_EQ(error_code([] { parse_config("novalue\n"); }), "bad-config");
  EXPECT_EQ(error_code([] { parse_config(" = 3\n"); }), "bad-config");
}

TEST(Config, ApplyToHyperAndSynth) {
  const auto cfg = parse_config("[hyper]\nlambda1 = 0.3\nK = 4\n[synth]\nspurious_strength = 1, 0.5,0,0\nnum_users = 12\n[paths]\ndata = x\n");
  HyperParams hp;
  SynthConfig synth;
  apply_config(cfg, &hp, &synth, {"paths"});
  EXPECT_EQ(hp.lambda1, 0.3);
  EXPECT_EQ(hp.K, 4u);
  EXPECT_EQ(synth.num_users, 12u);
  EXPECT_EQ(synth.spurious_strength, (std::vector<double>{1, 0.5, 0, 0}));
  EXPECT_EQ(error_code([&] { apply_config(cfg, &hp, &synth); }), "unknown-key");
  EXPECT_EQ(error_code([&] { apply_config(parse_config("[synth]\nnum_user = 3\n"), &hp, &synth); }), "unknown-key");
  EXPECT_EQ(error_code([&] { apply_config(parse_config("[synth]\nseed = x\n"), &hp, &synth); }), "bad-value");
  EXPECT_EQ(checked_section(cfg, "paths", {"data", "out"}).at("data"), "x");
  EXPECT_TRUE(checked_section(cfg, "eval", {"x"}).empty());
  EXPECT_EQ(error_code([&] { checked_section(cfg, "paths", {"out"}); }), "unknown-key");
}

TEST(Config, SynthFieldsRoundTrip) {
  SynthConfig a;
  a.spurious_strength = {1, 0.75, 0.5, 0.125};
  a.env_weights = {0.4, 0.3, 0.2, 0.1};
  a.shift_intensity = 0.3;
  a.seed = 99;
  SynthConfig b;
  const auto text = format_synth(a);
  for (auto line : lines_of(text)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    set_synth(b, line.substr(0, eq), line.substr(eq + 1));
  }
  EXPECT_EQ(format_synth(b), format_synth(a));
  EXPECT_EQ(b.spurious_strength, a.spurious_strength);
  EXPECT_EQ(*parse_list(format_list(a.env_weights)), a.env_weights);
  EXPECT_TRUE(parse_list("")->empty());
  EXPECT_FALSE(parse_list("1,,2"));
}

TEST(Experiment, AblationsAndSummaries) {
  const auto m = ablation_matrix();
  ASSERT_EQ(m.size(), 4u);
  EXPECT_EQ(m[0].name(), "full");
  EXPECT_EQ(m[1].name(), "no-causal");
  EXPECT_EQ(m[2].name(), "no-rag");
  EXPECT_EQ(m[3].name(), "no-faithful");
  EXPECT_EQ((Ablation{true, true, false}.name()), "no-causal+no-rag");
  const auto hp = Ablation{true, true, true}.apply(HyperParams{});
  EXPECT_EQ(hp.lambda1, 0.0);
  EXPECT_EQ(hp.K, 0u);
  EXPECT_EQ(hp.lambda2, 0.0);

  const std::vector<double> xs{1, 2, 3, 4};
  const auto ms = mean_std(xs);
  EXPECT_DOUBLE_EQ(ms.mean, 2.5);
  EXPECT_DOUBLE_EQ(ms.stdev, std::sqrt(5.0 / 3.0));
  EXPECT_EQ(mean_std(std::vector<double>{7}).stdev, 0.0);

  EvalReport a, b;
  a.overall.ndcg = 0.2;
  b.overall.ndcg = 0.4;
  const auto csv = seed_summary_csv({{"full", {a, b}}});
  EXPECT_EQ(csv.substr(0, 28), "variant,metric,mean,stdev,n\n");
  EXPECT_NE(csv.find("full,ndcg10.all,0.300000,0.141421,2\n"), std::string::npos);
  EXPECT_NE(seed_summary_text({{"full", {a, b}}}).find("== full"), std::string::npos);
}
