// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "cirr/cirr.hpp"
#include "test_util.hpp"

using namespace cirr;
using cirr::testing::error_code;

namespace {

SynthConfig small_config(std::uint64_t seed = 1) {
  SynthConfig cfg;
  cfg.num_users = 50;
  cfg.num_items = 40;
  cfg.interactions_per_user = 11;
  cfg.stable_dim = 4;
  cfg.spurious_dim = 4;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(GenerateSynthetic, ShapeAndValidity) {
  const auto cfg = small_config();
  const auto s = generate_synthetic(cfg, 8);
  EXPECT_EQ(s.data.num_users(), 50u);
  EXPECT_EQ(s.data.num_items(), 40u);
  EXPECT_EQ(s.data.num_envs(), 4u);
  EXPECT_EQ(s.data.interactions().size(), 50u * 11);
  EXPECT_NO_THROW(s.data.validate());
  for (UserId u = 0; u < 50; ++u) {
    const auto xs = s.data.user_slice(u);
    ASSERT_EQ(xs.size(), 11u);
    std::set<EnvId> envs;
    for (std::size_t j = 0; j < xs.size(); ++j) {
      envs.insert(xs[j].env_id);
      if (j) {
        EXPECT_LT(xs[j - 1].timestamp, xs[j].timestamp);
      }
      EXPECT_EQ(xs[j].rating, std::round(xs[j].rating));
    }
    EXPECT_GE(envs.size(), 2u) << "user " << u;
    // Interactions come in cue/choice pairs sharing an environment.
    for (std::size_t j = 1; j < xs.size(); j += 2) EXPECT_EQ(xs[j - 1].env_id, xs[j].env_id);
  }
}

TEST(GenerateSynthetic, Deterministic) {
  const auto a = generate_synthetic(small_config(3), 8);
  const auto b = generate_synthetic(small_config(3), 8);
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.pool, b.pool);
  EXPECT_EQ(a.truth.user_pref, b.truth.user_pref);
  EXPECT_NE(a.data, generate_synthetic(small_config(4), 8).data);
}

TEST(GenerateSynthetic, EvidencePool) {
  const auto cfg = small_config();
  const auto s = generate_synthetic(cfg, 8);
  std::size_t hist = 0, attr = 0, kg = 0;
  for (const auto& ev : s.pool.items()) {
    switch (ev.source()) {
      case EvidenceSource::history: ++hist; break;
      case EvidenceSource::attribute: ++attr; break;
      case EvidenceSource::kg_triplet: {
        ++kg;
        const auto& k = std::get<KgPayload>(ev.payload);
        EXPECT_NE(k.head, k.tail);
        EXPECT_TRUE(k.relation == "compatible_with" || k.relation == "co_trending_with");
        break;
      }
    }
    EXPECT_TRUE(ev.embedding.empty());
  }
  EXPECT_EQ(hist, s.data.interactions().size());
  EXPECT_EQ(attr, cfg.num_items * 2 * cfg.attributes_per_block);
  EXPECT_GT(kg, 0u);
  EXPECT_LE(kg, cfg.num_items * cfg.kg_links_per_item);
  // History records mirror the interactions.
  const auto& h = std::get<HistoryPayload>(s.pool.at(0).payload);
  const auto& x = s.data.interactions().front();
  EXPECT_EQ(h.user_id, x.user_id);
  EXPECT_EQ(h.item_id, x.item_id);
  EXPECT_EQ(h.timestamp, x.timestamp);
}

TEST(GenerateSynthetic, Attributes) {
  const auto s = generate_synthetic(small_config(), 8);
  for (const auto& ev : s.pool.items())
    if (const auto* a = std::get_if<AttributePayload>(&ev.payload)) {
      const bool style = a->name.rfind("style_", 0) == 0;
      const auto& m = style ? s.truth.item_stable : s.truth.item_spurious;
      const std::size_t k = std::stoul(a->name.substr(a->name.find('_') + 1));
      EXPECT_EQ(a->value, m(a->item_id, k) >= 0 ? "high" : "low");
    }
}

TEST(EffectiveStrengths, LinearShift) {
  SynthConfig cfg;
  cfg.num_envs = 4;
  cfg.shift_intensity = 0.5;
  auto s = effective_strengths(cfg);
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_DOUBLE_EQ(s[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s[3], 0.0);
  cfg.shift_intensity = 1.0;
  cfg.spurious_strength = {0.8, 0.8, 0.8, 0.5};
  s = effective_strengths(cfg);
  EXPECT_DOUBLE_EQ(s[0], 0.8);
  EXPECT_DOUBLE_EQ(s[3], -0.5);
  cfg.shift_intensity = 0.0;
  s = effective_strengths(cfg);
  EXPECT_EQ(s, cfg.spurious_strength);
}

TEST(GenerateSynthetic, SpuriousCueTracksStrength) {
  // With strength 1 in env 0 and 0 elsewhere, a cue's trend overlap with the
  // following choice is positive only in env 0.
  auto cfg = small_config(7);
  cfg.num_users = 300;
  cfg.spurious_strength = {1.0, 0.0, 0.0, 0.0};
  cfg.shift_intensity = 0.0;
  cfg.spurious_scale = 6.0;
  const auto s = generate_synthetic(cfg, 8);
  std::vector<double> overlap(4, 0.0), count(4, 0.0);
  for (UserId u = 0; u < cfg.num_users; ++u) {
    const auto xs = s.data.user_slice(u);
    for (std::size_t j = 1; j < xs.size(); j += 2) {
      overlap[xs[j].env_id] += dot(s.truth.item_spurious.row(xs[j - 1].item_id),
                                   s.truth.item_spurious.row(xs[j].item_id));
      count[xs[j].env_id] += 1;
    }
  }
  const double strong = overlap[0] / count[0];
  EXPECT_GT(strong, 2.0);
  for (EnvId e = 1; e < 4; ++e) EXPECT_LT(std::fabs(overlap[e] / count[e]), strong / 3) << "env " << e;
}

TEST(GenerateSynthetic, EnvironmentWeights) {
  auto cfg = small_config(8);
  cfg.num_users = 400;
  cfg.env_weights = {0.7, 0.1, 0.1, 0.1};
  const auto s = generate_synthetic(cfg, 8);
  std::vector<double> n(4, 0.0);
  for (const auto& x : s.data.interactions()) n[x.env_id] += 1;
  const double total = static_cast<double>(s.data.interactions().size());
  EXPECT_NEAR(n[0] / total, 0.7, 0.05);
  const auto w = SynthConfig{}.weights();
  ASSERT_EQ(w.size(), 4u);
  EXPECT_DOUBLE_EQ(w[0], 0.4);
  for (std::size_t e = 1; e < 4; ++e) EXPECT_DOUBLE_EQ(w[e], 0.2);
}

TEST(GenerateSynthetic, ValidateRejects) {
  const auto bad = [](auto mutate, std::size_t d = 16) {
    auto cfg = small_config();
    mutate(cfg);
    return error_code([&] { generate_synthetic(cfg, d); });
  };
  EXPECT_EQ(bad([](SynthConfig& c) { c.num_envs = 1; }), "bad-config");
  EXPECT_EQ(bad([](SynthConfig& c) { c.interactions_per_user = 1; }), "bad-config");
  EXPECT_EQ(bad([](SynthConfig&) {}, 7), "bad-config");
  EXPECT_EQ(bad([](SynthConfig& c) { c.spurious_strength = {1.0}; }), "bad-config");
  EXPECT_EQ(bad([](SynthConfig& c) { c.spurious_strength = {1.0, 1.0, 1.5, 1.0}; }), "bad-config");
  EXPECT_EQ(bad([](SynthConfig& c) { c.shift_intensity = 2.0; }), "bad-config");
  EXPECT_EQ(bad([](SynthConfig& c) { c.env_weights = {1, 1, 0, 1}; }), "bad-config");
  EXPECT_EQ(bad([](SynthConfig&) {}), "");
}

TEST(SynthMeta, Records) {
  const auto cfg = small_config();
  const auto s = generate_synthetic(cfg, 8);
  const auto meta = synth_meta(cfg, s);
  EXPECT_NE(meta.find("seed=1\n"), std::string::npos);
  EXPECT_NE(meta.find("num_interactions=550\n"), std::string::npos);
  EXPECT_NE(meta.find("env_strength.3=0.000000\n"), std::string::npos);
  EXPECT_NE(meta.find("test_envs=3\n"), std::string::npos);
}
