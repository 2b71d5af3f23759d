#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "badseg/metrics.hpp"
#include "badseg/model.hpp"
#include "loss_fixtures.hpp"

using namespace badseg;
using badseg::testing::fixture_arch;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("badseg_model_" + name);
  std::filesystem::remove_all(d);
  return d;
}

const VideoSequence& clip() {
  static const auto v = synth_dataset(21, 1, 3, 32, 32);
  return v[0];
}

double largest_gap(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST(ModelArch, RejectsBadShapes) {
  auto a = fixture_arch();
  EXPECT_NO_THROW(model::validate(a));
  a.dim = 15;
  EXPECT_THROW(model::validate(a), std::invalid_argument);
  a = fixture_arch();
  a.image_size = 30;
  EXPECT_THROW(model::validate(a), std::invalid_argument);
  a = fixture_arch();
  a.layers = 0;
  EXPECT_THROW(model::validate(a), std::invalid_argument);
}

TEST(ModelArch, JsonRoundTripAndUnknownKey) {
  auto a = fixture_arch();
  a.head_upsample = 1;
  nlohmann::json j = a;
  EXPECT_EQ(j.get<model::ArchConfig>(), a);
  j["depth"] = 3;
  EXPECT_THROW(j.get<model::ArchConfig>(), std::invalid_argument);
}

TEST(ModelInit, SeedDeterminesParameters) {
  const auto a = model::init_params(fixture_arch(), 7);
  EXPECT_EQ(a, model::init_params(fixture_arch(), 7));
  EXPECT_NE(a, model::init_params(fixture_arch(), 8));
  EXPECT_GT(a.count("encoder."), 0u);
  EXPECT_GT(a.count("prompt."), 0u);
  EXPECT_GT(a.count("decoder."), 0u);
  EXPECT_EQ(a.count(), a.count("encoder.") + a.count("prompt.") + a.count("decoder."));
}

TEST(ModelInit, OnlyFourierMatrixIsFrozen) {
  const auto p = model::init_params(fixture_arch(), 1);
  for (const auto& path : p.paths()) EXPECT_EQ(model::is_trainable(path), path != model::kFourierMatrix) << path;
  EXPECT_EQ(p.at(model::kFinalConvWeight).dim(0), fixture_arch().head_channels);
  EXPECT_THROW(p.at("encoder.nope"), std::out_of_range);
}

TEST(ModelForward, EmbeddingShapes) {
  const auto p = model::init_params(fixture_arch(), 1);
  const auto e = model::encode_image(p, clip().frames[0]);
  EXPECT_EQ(e.grid_h, 4);
  EXPECT_EQ(e.grid_w, 4);
  EXPECT_EQ(e.tokens.shape(), (std::vector<int>{16, 16}));
  EXPECT_EQ(e.pooled.shape(), (std::vector<int>{1, 16}));
  // Pooled embedding is the token mean.
  for (int d = 0; d < 16; ++d) {
    double s = 0;
    for (int t = 0; t < 16; ++t) s += e.tokens.at(t, d);
    EXPECT_NEAR(e.pooled.at(0, d), s / 16, 1e-5);
  }
}

TEST(ModelForward, NonMultipleFrameIsPaddedAndCropped) {
  const auto p = model::init_params(fixture_arch(), 1);
  Frame f(30, 45, 0.3f);
  const Frame padded = model::pad_to_patch(f, 8);
  EXPECT_EQ(padded.height, 32);
  EXPECT_EQ(padded.width, 48);
  const Tensor logits = model::predict(p, f, PointPrompt{10, 20});
  EXPECT_EQ(logits.shape(), (std::vector<int>{30, 45}));
  for (float v : logits.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ModelForward, PromptTokenCounts) {
  const auto p = model::init_params(fixture_arch(), 1);
  EXPECT_EQ(model::encode_prompt(p, PointPrompt{3, 4}, 32, 32).sparse.dim(0), 1);
  const auto box = model::encode_prompt(p, BoxPrompt{2, 2, 9, 9}, 32, 32);
  EXPECT_EQ(box.sparse.dim(0), 2);
  EXPECT_TRUE(box.dense.empty());
  const auto mask = model::encode_prompt(p, MaskPrompt{Mask(32, 32)}, 32, 32);
  EXPECT_EQ(mask.dense.shape(), (std::vector<int>{16, 16}));
  // Empty mask: the bias-free dense path is exactly zero.
  for (float v : mask.dense.values()) EXPECT_EQ(v, 0.0f);
}

TEST(ModelForward, DegenerateBoxAndOutOfFramePrompts) {
  const auto p = model::init_params(fixture_arch(), 1);
  const Tensor logits = model::predict(p, clip().frames[0], BoxPrompt{5, 5, 5, 5});
  EXPECT_EQ(logits.shape(), (std::vector<int>{32, 32}));
  EXPECT_THROW(model::predict(p, clip().frames[0], PointPrompt{40, 1}), std::invalid_argument);
}

TEST(ModelForward, PointLocationChangesPrediction) {
  const auto p = model::init_params(fixture_arch(), 1);
  const Tensor a = model::predict(p, clip().frames[0], PointPrompt{4, 4});
  const Tensor b = model::predict(p, clip().frames[0], PointPrompt{28, 28});
  EXPECT_GT(largest_gap(a, b), 1e-6);
  EXPECT_EQ(a, model::predict(p, clip().frames[0], PointPrompt{4, 4}));
}

TEST(ModelForward, SplitPathMatchesPredict) {
  const auto p = model::init_params(fixture_arch(), 2);
  const Frame& f = clip().frames[1];
  const PromptSpec prompt = BoxPrompt{3, 4, 20, 25};
  const auto e = model::encode_image(p, f);
  const auto t = model::encode_prompt(p, prompt, f.height, f.width);
  EXPECT_LT(largest_gap(model::decode_mask(p, e, t, f.height, f.width), model::predict(p, f, prompt)), 1e-6);
}

TEST(ModelVideo, PropagatesThresholdedPreviousMask) {
  const auto p = model::init_params(fixture_arch(), 2);
  const PromptSpec first = PointPrompt{16, 16};
  const auto out = model::forward_video(p, clip(), first);
  ASSERT_EQ(out.size(), clip().frames.size());
  EXPECT_EQ(out[0], model::predict(p, clip().frames[0], first));
  for (std::size_t t = 1; t < out.size(); ++t)
    EXPECT_EQ(out[t], model::predict(p, clip().frames[t], MaskPrompt{metrics::binarize(out[t - 1])}));
}

TEST(ModelAttention, RowsAreStochastic) {
  const auto p = model::init_params(fixture_arch(), 3);
  model::AttentionRecord rec;
  model::encode_image(p, clip().frames[0], &rec);
  ASSERT_EQ(rec.maps.size(), 2u);
  for (const auto& layer : rec.maps) {
    ASSERT_EQ(layer.size(), 2u);
    for (const Tensor& a : layer) {
      ASSERT_EQ(a.shape(), (std::vector<int>{16, 16}));
      for (int i = 0; i < 16; ++i) {
        double s = 0;
        for (int j = 0; j < 16; ++j) {
          EXPECT_GE(a.at(i, j), 0.0f);
          s += a.at(i, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-5);
      }
    }
  }
}

TEST(ModelIo, SaveLoadRoundTrip) {
  const auto p = model::init_params(fixture_arch(), 4);
  const auto dir = scratch_dir("roundtrip");
  model::save_params(dir, p);
  EXPECT_EQ(model::load_params(dir), p);
  std::filesystem::remove_all(dir);
}

TEST(ModelIo, ShapeMismatchAndMissingFilesFail) {
  const auto dir = scratch_dir("mismatch");
  auto small = model::init_params(fixture_arch(), 4);
  model::save_params(dir, small);
  // Overwrite arch.json with a wider model; the stored tensors no longer fit.
  auto wide = fixture_arch();
  wide.dim = 24;
  {
    std::ofstream out(dir / "arch.json");
    out << nlohmann::json(wide).dump();
  }
  EXPECT_THROW(model::load_params(dir), std::runtime_error);
  EXPECT_THROW(model::load_params(scratch_dir("absent")), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(ModelBinder, FrozenPathsGetNoGradient) {
  const auto p = model::init_params(fixture_arch(), 5);
  ad::Graph g;
  model::Binder b(g, p, model::prefix_filter({"decoder."}));
  const auto e = model::encode_image(b, clip().frames[0]);
  const auto pr = model::encode_prompt(b, PointPrompt{10, 10}, 32, 32);
  const auto logits = model::decode_mask(b, e.tokens, e.grid_h, e.grid_w, pr, 32, 32);
  g.backward(ad::sum_all(logits));
  const auto grads = b.gradients();
  EXPECT_FALSE(grads.empty());
  for (const auto& [path, t] : grads) EXPECT_EQ(path.rfind("decoder.", 0), 0u) << path;
}

TEST(ModelGradients, FullModelMatchesFiniteDifferences) {
  const auto f = badseg::testing::baseline_fixture();
  EXPECT_LT(grad_check(f->loss, f->tensors(), {.step = badseg::testing::kDecoderStep, .probes = 100, .seed = 1}), 1e-4);
}
