#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "badseg/defenses.hpp"
#include "badseg/random.hpp"
#include "loss_fixtures.hpp"

using namespace badseg;
using namespace badseg::defense;
using badseg::testing::fixture_arch;

namespace {

// 90 points at the origin, 10 planted at (10,0,…), all with 0.01 noise.
std::vector<std::vector<double>> two_clusters(std::uint64_t seed, int dim = 8) {
  Rng rng(seed);
  std::vector<std::vector<double>> reps;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> r(static_cast<std::size_t>(dim));
    for (double& v : r) v = 0.01 * rng.normal();
    if (i >= 90) r[0] += 10.0;
    reps.push_back(r);
  }
  return reps;
}

struct Small {
  std::vector<VideoSequence> videos = synth_dataset(51, 3, 3, 32, 32);
  model::ModelParams params = model::init_params(fixture_arch(), 6);
};

EvalSetup small_setup(const Small& s) {
  EvalSetup e;
  e.clean = s.videos;
  BadNetTrigger trig;
  trig.size_px = 8;
  trig.pad_px = 4;
  for (const auto& v : s.videos) e.triggered.push_back(trigger_video(v, trig));
  return e;
}

}  // namespace

TEST(FineTune, SubsetSizeAndErrors) {
  const auto s = finetune_subset(20, 0.10, 4);
  EXPECT_EQ(s.size(), 2u);
  EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
  EXPECT_EQ(s, finetune_subset(20, 0.10, 4));
  EXPECT_EQ(finetune_subset(20, 1.0, 4).size(), 20u);
  // 1% of 20 rounds to zero videos.
  EXPECT_THROW(finetune_subset(20, 0.01, 4), std::invalid_argument);
  EXPECT_THROW(finetune_subset(20, 0.0, 4), std::invalid_argument);
  EXPECT_THROW(finetune_subset(0, 0.5, 4), std::invalid_argument);
}

TEST(FineTune, ZeroEpochsIsIdentity) {
  Small s;
  train::SupervisedConfig cfg;
  cfg.epochs = 0;
  EXPECT_EQ(defend_finetune(s.params, s.videos, 0.5, cfg, 1), s.params);
}

TEST(FineTune, UpdatesOnlyFromClean) {
  Small s;
  train::SupervisedConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 1e-3;
  cfg.prompt_set = {PromptKind::Point};
  const auto a = defend_finetune(s.params, s.videos, 0.34, cfg, 1);
  EXPECT_NE(a, s.params);
  EXPECT_EQ(a, defend_finetune(s.params, s.videos, 0.34, cfg, 1));
}

TEST(Prune, ZeroIsIdentityAndBoundsChecked) {
  Small s;
  const auto calib = calibration_set(s.videos, 4);
  EXPECT_EQ(defend_prune(s.params, 0, calib), s.params);
  EXPECT_THROW(defend_prune(s.params, fixture_arch().head_channels, calib), std::invalid_argument);
  EXPECT_THROW(defend_prune(s.params, -1, calib), std::invalid_argument);
  EXPECT_THROW(defend_prune(s.params, 2, {}), std::invalid_argument);
}

TEST(Prune, ZeroesExactlyKLeastActiveChannels) {
  Small s;
  const auto calib = calibration_set(s.videos, 4);
  ASSERT_EQ(calib.size(), 4u);
  const int k = 3;
  std::vector<int> pruned;
  const auto out = defend_prune(s.params, k, calib, &pruned);
  ASSERT_EQ(pruned.size(), static_cast<std::size_t>(k));

  const auto act = channel_activity(s.params, calib);
  std::vector<double> sorted = act;
  std::sort(sorted.begin(), sorted.end());
  for (int c : pruned) EXPECT_LE(act[static_cast<std::size_t>(c)], sorted[k - 1]);

  const Tensor& w = out.at(model::kFinalConvWeight);
  const Tensor& b = out.at(model::kFinalConvBias);
  const int C = fixture_arch().head_channels;
  const std::size_t per = w.size() / static_cast<std::size_t>(C);
  int zero_channels = 0;
  for (int c = 0; c < C; ++c) {
    bool all_zero = b[static_cast<std::size_t>(c)] == 0.0f;
    for (std::size_t i = 0; i < per; ++i) all_zero = all_zero && w[static_cast<std::size_t>(c) * per + i] == 0.0f;
    zero_channels += all_zero;
  }
  EXPECT_EQ(zero_channels, k);
  for (const auto& [path, t] : out.tensors)
    if (path != model::kFinalConvWeight && path != model::kFinalConvBias) EXPECT_EQ(t, s.params.at(path)) << path;
}

TEST(Spectral, PlantedClusterIsFlagged) {
  const auto reps = two_clusters(1);
  // 1.5·f·N = 10 flags.
  const auto r = spectral_signatures(reps, 1.0 / 15.0);
  std::vector<bool> flags(100, false), truth(100, false);
  for (auto i : r.flagged) flags[i] = true;
  for (int i = 90; i < 100; ++i) truth[static_cast<std::size_t>(i)] = true;
  const auto st = detection_stats(flags, truth);
  EXPECT_EQ(st.true_positives, 10u);
  EXPECT_GE(st.precision, 0.9);
  EXPECT_FALSE(r.degenerate);
  // With the true fraction the 1.5× margin over-flags but still finds every planted point.
  const auto wide = spectral_signatures(reps, 0.10);
  EXPECT_EQ(wide.flagged.size(), 15u);
  for (int i = 90; i < 100; ++i)
    EXPECT_TRUE(std::count(wide.flagged.begin(), wide.flagged.end(), static_cast<std::size_t>(i)));
}

TEST(Spectral, ScoresNonNegativeAndTranslationInvariant) {
  auto reps = two_clusters(2);
  const auto a = spectral_signatures(reps, 0.1);
  for (auto& r : reps)
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += 3.0 + static_cast<double>(j);
  const auto b = spectral_signatures(reps, 0.1);
  ASSERT_EQ(a.scores.size(), b.scores.size());
  for (std::size_t i = 0; i < a.scores.size(); ++i) {
    EXPECT_GE(a.scores[i], 0.0);
    EXPECT_NEAR(a.scores[i], b.scores[i], 1e-6 * std::max(1.0, a.scores[i]));
  }
  EXPECT_EQ(a.flagged, b.flagged);
}

TEST(Spectral, IdenticalRepsFlagNothing) {
  const std::vector<std::vector<double>> same(5, {1.0, 2.0});
  const auto r = spectral_signatures(same, 0.2);
  EXPECT_TRUE(r.degenerate);
  EXPECT_TRUE(r.flagged.empty());
  EXPECT_THROW(spectral_signatures({{1.0}}, 0.1), std::invalid_argument);
  EXPECT_THROW(spectral_signatures({{1.0}, {1.0, 2.0}}, 0.1), std::invalid_argument);
}

TEST(Strip, StubScores) {
  Frame f(6, 5, 0.3f);
  std::vector<Frame> pool_frames(4, Frame(6, 5, 0.7f));
  std::vector<const Frame*> pool;
  for (const auto& p : pool_frames) pool.push_back(&p);
  const ProbabilityFn half = [](const Frame& x, const PromptSpec&) { return Tensor({x.height, x.width}, 0.5f); };
  EXPECT_NEAR(strip_score(half, f, PointPrompt{1, 1}, pool, 8, 3), std::log(2.0), 1e-9);
  const ProbabilityFn hard = [](const Frame& x, const PromptSpec&) {
    Tensor t({x.height, x.width});
    for (std::size_t i = 0; i < t.size(); i += 2) t[i] = 1.0f;
    return t;
  };
  EXPECT_LT(strip_score(hard, f, PointPrompt{1, 1}, pool, 8, 3), 1e-5);
  EXPECT_THROW(strip_score(half, f, PointPrompt{1, 1}, {}, 8, 3), std::invalid_argument);
}

TEST(Strip, ScoreIsDeterministicAndBounded) {
  Small s;
  std::vector<const Frame*> pool;
  for (const auto& v : s.videos)
    for (const auto& fr : v.frames) pool.push_back(&fr);
  const auto prob = model_probability(s.params);
  const Frame& x = s.videos[0].frames[1];
  const double a = strip_score(prob, x, PointPrompt{16, 16}, pool, 4, 7);
  EXPECT_EQ(a, strip_score(prob, x, PointPrompt{16, 16}, pool, 4, 7));
  EXPECT_GE(a, 0.0);
  EXPECT_LE(a, std::log(2.0) + 1e-12);
  // Sampling with replacement once the pool is smaller than n.
  const double b = strip_score(prob, x, PointPrompt{16, 16}, {pool[0], pool[1]}, 5, 7);
  EXPECT_GE(b, 0.0);
  EXPECT_LE(b, std::log(2.0) + 1e-12);
}

TEST(Strip, ThresholdIsLowerFirstPercentile) {
  std::vector<double> v(200);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(200 - i);
  EXPECT_EQ(strip_threshold(v), 2.0);
}

TEST(Detection, Stats) {
  const auto s = detection_stats({true, true, false, false}, {true, false, true, false});
  EXPECT_EQ(s.flagged, 2u);
  EXPECT_EQ(s.true_positives, 1u);
  EXPECT_EQ(s.positives, 2u);
  EXPECT_EQ(s.precision, 0.5);
  EXPECT_EQ(s.recall, 0.5);
  const auto none = detection_stats({false, false}, {false, false});
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(none.recall, 0.0);
  EXPECT_THROW(detection_stats({true}, {}), std::invalid_argument);
}

TEST(Report, IdentityDefenseKeepsMetrics) {
  Small s;
  const auto setup = small_setup(s);
  const auto before = metrics::evaluate(s.params, setup.clean, setup.triggered, setup.target, setup.prompts);
  const auto r = evaluate_defense("none", nlohmann::json::object(), before, s.params, setup);
  EXPECT_EQ(r.after, before);
  // An all-true keep mask is also an identity.
  metrics::FrameKeep keep;
  for (const auto& v : setup.clean) keep.clean.emplace_back(v.frames.size(), true);
  for (const auto& v : setup.triggered) keep.triggered.emplace_back(v.frames.size(), true);
  EXPECT_EQ(evaluate_defense("strip", {}, before, s.params, setup, keep).after, before);
  EvalSetup missing = setup;
  missing.triggered.clear();
  EXPECT_THROW(evaluate_defense("none", {}, before, s.params, missing), std::invalid_argument);
}

TEST(Report, JsonRoundTrip) {
  DefenseReport r;
  r.defense = "strip";
  r.hyper = {{"n_overlays", 32}};
  r.before.target = "disappearance";
  r.before.by_prompt["point"] = {0.5, 0.25, 1.0};
  r.after = r.before;
  r.after.by_prompt["point"].asr = 0.125;
  r.flagged_ids = {"v0:3", "v1:0"};
  r.detection = DetectionStats{2, 1, 4, 0.5, 0.25};
  r.threshold = 0.0625;
  r.note = "x";
  nlohmann::json j = r;
  EXPECT_EQ(j.get<DefenseReport>(), r);
  DefenseReport bare;
  bare.defense = "none";
  EXPECT_EQ(nlohmann::json(bare).get<DefenseReport>(), bare);
}

TEST(Report, TableHasNineColumnsByThreePrompts) {
  std::vector<DefenseReport> reports;
  auto add = [&](std::string name, nlohmann::json hyper) {
    DefenseReport r;
    r.defense = std::move(name);
    r.hyper = std::move(hyper);
    for (const char* p : {"point", "box", "mask"}) r.before.by_prompt[p] = r.after.by_prompt[p] = {0.5, 0.5, 0.5};
    reports.push_back(r);
  };
  add("none", {});
  add("spectral", {});
  add("strip", {});
  for (int k : {5, 15, 30}) add("prune", {{"k", k}});
  for (double f : {0.01, 0.05, 0.10}) add("finetune", {{"fraction", f}});
  reports.back().after.by_prompt.clear();  // a configuration that could not run
  const std::string csv = defense_table_csv(reports);
  std::istringstream in(csv);
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header,
            "metric,prompt,none,spectral,strip,prune_k5,prune_k15,prune_k30,finetune_1pct,finetune_5pct,finetune_10pct");
  int rows = 0;
  std::set<std::string> prompts;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 10) << line;
    prompts.insert(line.substr(line.find(',') + 1, line.find(',', line.find(',') + 1) - line.find(',') - 1));
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "n/a");
  }
  EXPECT_EQ(rows, 9);
  EXPECT_EQ(prompts, (std::set<std::string>{"point", "box", "mask"}));
}
