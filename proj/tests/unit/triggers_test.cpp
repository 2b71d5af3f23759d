#include <gtest/gtest.h>

#include <cmath>

#include "badseg/random.hpp"
#include "badseg/triggers.hpp"

using namespace badseg;

namespace {

Frame noise_frame(int h, int w, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  Frame f(h, w);
  Rng rng(seed);
  for (float& v : f.rgb) v = static_cast<float>(rng.uniform(lo, hi));
  return f;
}

// Set of pixels whose value changed.
std::vector<std::pair<int, int>> changed_pixels(const Frame& a, const Frame& b) {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < a.height; ++i)
    for (int j = 0; j < a.width; ++j)
      for (int c = 0; c < 3; ++c)
        if (a.at(i, j, c) != b.at(i, j, c)) {
          out.emplace_back(i, j);
          break;
        }
  return out;
}

ComplexGrid channel_spectrum(const Frame& f, int c) {
  ComplexGrid g(f.height, f.width);
  for (int i = 0; i < f.height; ++i)
    for (int j = 0; j < f.width; ++j) g.at(i, j) = f.at(i, j, c);
  return fft2(g);
}

}  // namespace

TEST(BadNet, DefaultFootprintOn100x100) {
  const Frame in = noise_frame(100, 100, 1);
  const Frame out = apply_trigger(in, BadNetTrigger{}, 0);
  for (int i = 0; i < 100; ++i)
    for (int j = 0; j < 100; ++j) {
      const bool inside = i >= 52 && i <= 91 && j >= 52 && j <= 91;
      for (int c = 0; c < 3; ++c) {
        if (inside) {
          EXPECT_EQ(out.at(i, j, c), c == 0 ? 1.0f : 0.0f);
        } else {
          EXPECT_EQ(out.at(i, j, c), in.at(i, j, c));
        }
      }
    }
  EXPECT_EQ(trigger_footprint(BadNetTrigger{}, 100, 100, 0), (Rect{52, 52, 40, 40}));
}

TEST(BadNet, Idempotent) {
  const Frame in = noise_frame(64, 64, 2);
  const BadNetTrigger t{8, 8, {0.2f, 0.9f, 0.1f}, {}};
  const Frame once = apply_trigger(in, t, 0);
  EXPECT_EQ(apply_trigger(once, t, 0), once);
}

TEST(BadNet, AllLocationsAreLocalAndInBounds) {
  using K = TriggerLocation::Kind;
  const Frame in = noise_frame(48, 64, 3);
  for (K k : {K::TopLeft, K::TopRight, K::BottomLeft, K::BottomRight, K::Center, K::Random}) {
    BadNetTrigger t{6, 4, {1.0f, 1.0f, 0.0f}, {k, 17}};
    for (int idx : {0, 5}) {
      const Rect r = *trigger_footprint(t, 48, 64, idx);
      EXPECT_GE(r.top, 0);
      EXPECT_GE(r.left, 0);
      EXPECT_LE(r.top + r.height, 48);
      EXPECT_LE(r.left + r.width, 64);
      const auto changed = changed_pixels(in, apply_trigger(in, t, idx));
      EXPECT_EQ(changed.size(), 36u);
      for (auto [i, j] : changed) EXPECT_TRUE(r.contains(i, j));
    }
  }
  EXPECT_EQ(trigger_footprint(BadNetTrigger{6, 4, {}, {K::TopRight, 0}}, 48, 64, 0), (Rect{4, 54, 6, 6}));
  EXPECT_EQ(trigger_footprint(BadNetTrigger{6, 4, {}, {K::Center, 0}}, 48, 64, 0), (Rect{21, 29, 6, 6}));
}

TEST(BadNet, RandomPlacementDependsOnSeedAndFrameIndex) {
  BadNetTrigger t{5, 0, {1, 1, 1}, {TriggerLocation::Kind::Random, 99}};
  EXPECT_EQ(trigger_footprint(t, 64, 64, 3), trigger_footprint(t, 64, 64, 3));
  int distinct = 0;
  for (int idx = 1; idx < 10; ++idx) distinct += trigger_footprint(t, 64, 64, idx) != trigger_footprint(t, 64, 64, 0);
  EXPECT_GT(distinct, 5);
}

TEST(BadNet, OversizedFootprintRejected) {
  EXPECT_THROW(apply_trigger(Frame(32, 32), BadNetTrigger{}, 0), std::invalid_argument);
  EXPECT_THROW(apply_trigger(Frame(32, 32), BadNetTrigger{0, 0, {}, {}}, 0), std::invalid_argument);
  EXPECT_THROW(apply_trigger(Frame(32, 32), BadNetTrigger{4, 0, {2.0f, 0, 0}, {}}, 0), std::invalid_argument);
}

TEST(Blended, ZeroAlphaIsIdentity) {
  const Frame in = noise_frame(40, 50, 4);
  BlendedTrigger t;
  t.alpha = 0.0;
  EXPECT_EQ(apply_trigger(in, t, 0), in);
}

TEST(Blended, ConvexCombinationArithmetic) {
  const Frame in(100, 100, 0.5f);
  BlendedTrigger t;
  t.texture = Frame(18, 18, 1.0f);
  const Frame out = apply_trigger(in, t, 0);
  EXPECT_EQ(trigger_footprint(t, 100, 100, 0), (Rect{82, 82, 18, 18}));
  for (int i = 0; i < 100; ++i)
    for (int j = 0; j < 100; ++j) {
      const float expected = (i >= 82 && j >= 82) ? 0.5f * 0.82f + 1.0f * 0.18f : 0.5f;
      EXPECT_NEAR(out.at(i, j, 1), expected, 1e-6);
    }
  EXPECT_NEAR(out.at(90, 90, 0), 0.59f, 1e-6);
}

TEST(Blended, SeededTextureIsDeterministicAndLocal) {
  const Frame in = noise_frame(64, 64, 5);
  BlendedTrigger t;
  t.texture_seed = 12;
  const Frame a = apply_trigger(in, t, 0);
  EXPECT_EQ(a, apply_trigger(in, t, 7));
  const Rect r = *trigger_footprint(t, 64, 64, 0);
  EXPECT_EQ(r.height, 12);  // round(0.18 * 64) = 11.52 -> 12
  for (auto [i, j] : changed_pixels(in, a)) EXPECT_TRUE(r.contains(i, j));
  BlendedTrigger other = t;
  other.texture_seed = 13;
  EXPECT_NE(apply_trigger(in, other, 0), a);
}

TEST(WaNet, RescaledToExactMaxDisplacement) {
  for (auto [h, w] : {std::pair{64, 64}, std::pair{48, 80}, std::pair{128, 128}}) {
    const Tensor field = make_wanet_field(h, w, WaNetTrigger{101, 0.01, 3});
    float peak = 0.0f;
    for (float v : field.values()) peak = std::max(peak, std::fabs(v));
    EXPECT_NEAR(peak, 0.01 * std::min(h, w), 1e-5);
  }
}

TEST(WaNet, SameSeedBitIdentical) {
  const WaNetTrigger t{101, 0.01, 21};
  EXPECT_EQ(make_wanet_field(40, 30, t), make_wanet_field(40, 30, t));
  EXPECT_NE(make_wanet_field(40, 30, t), make_wanet_field(40, 30, WaNetTrigger{101, 0.01, 22}));
}

TEST(WaNet, FieldIsSmooth) {
  const Tensor field = make_wanet_field(64, 64, WaNetTrigger{101, 0.01, 7});
  float peak = 0.0f, step = 0.0f;
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j)
      for (int c = 0; c < 2; ++c) {
        const float v = field[(static_cast<std::size_t>(i) * 64 + j) * 2 + c];
        peak = std::max(peak, std::fabs(v));
        if (j + 1 < 64) step = std::max(step, std::fabs(field[(static_cast<std::size_t>(i) * 64 + j + 1) * 2 + c] - v));
      }
  EXPECT_LT(step, 0.1f * peak);
}

TEST(WaNet, KernelClippedForSmallFrames) {
  EXPECT_EQ(wanet_effective_kernel(64, 64, 101), 63);
  EXPECT_EQ(wanet_effective_kernel(200, 150, 101), 101);
  EXPECT_EQ(wanet_effective_kernel(1, 1, 101), 1);
  EXPECT_NO_THROW(apply_trigger(noise_frame(8, 8, 1), WaNetTrigger{}, 0));
}

TEST(WaNet, OutputStaysInRange) {
  const Frame out = apply_trigger(noise_frame(64, 64, 8), WaNetTrigger{101, 0.05, 2}, 0);
  for (float v : out.rgb) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Fiba, WindowGeometry) {
  EXPECT_EQ(fiba_window_side(64, 64, 0.06), 4);  // 3.84 -> 4
  EXPECT_EQ(fiba_window_side(10, 10, 0.06), 1);
  EXPECT_EQ(fiba_window_side(25, 40, 0.06), 2);  // 1.5 rounds half up
  int inside = 0;
  for (int u = 0; u < 32; ++u)
    for (int v = 0; v < 32; ++v) inside += in_fiba_window(u, v, 32, 32, 2);
  EXPECT_EQ(inside, 4);
  EXPECT_TRUE(in_fiba_window(0, 0, 32, 32, 1));
  EXPECT_FALSE(in_fiba_window(1, 0, 32, 32, 1));
}

TEST(Fiba, ZeroAlphaAndSelfMixAreIdentity) {
  const Frame benign = noise_frame(32, 24, 9);
  const Frame trig = noise_frame(32, 24, 10);
  const Frame a = fiba_mix(benign, trig, 0.06, 0.0);
  const Frame b = fiba_mix(benign, benign, 0.06, 0.25);
  for (std::size_t i = 0; i < benign.rgb.size(); ++i) {
    EXPECT_NEAR(a.rgb[i], benign.rgb[i], 1e-5);
    EXPECT_NEAR(b.rgb[i], benign.rgb[i], 1e-5);
  }
}

TEST(Fiba, ConstantImagesMixLinearly) {
  const Frame out = fiba_mix(Frame(32, 32, 0.2f), Frame(32, 32, 0.8f), 0.06, 0.25);
  for (float v : out.rgb) EXPECT_NEAR(v, 0.75f * 0.2f + 0.25f * 0.8f, 1e-5);
}

TEST(Fiba, PhasePreservedAndOutsideAmplitudeUnchanged) {
  const Frame benign = noise_frame(40, 40, 11, 0.3f, 0.7f);
  const Frame trig = noise_frame(40, 40, 12);
  const int side = fiba_window_side(40, 40, 0.3);
  for (int c = 0; c < 3; ++c) {
    const ComplexGrid b = channel_spectrum(benign, c);
    const ComplexGrid mixed = fiba_mix_spectrum(b, channel_spectrum(trig, c), 0.3, 0.25);
    for (int u = 0; u < 40; ++u)
      for (int v = 0; v < 40; ++v) {
        const auto& m = mixed.at(u, v);
        const auto& o = b.at(u, v);
        if (std::abs(m) > 1e-6 && std::abs(o) > 1e-6) {
          EXPECT_LT(std::abs(std::remainder(std::arg(m) - std::arg(o), 2 * M_PI)), 1e-5);
        }
        if (!in_fiba_window(u, v, 40, 40, side)) EXPECT_LT(std::abs(std::abs(m) - std::abs(o)), 1e-5);
      }
  }
}

TEST(Fiba, ShapeMismatchRejected) {
  EXPECT_THROW(fiba_mix(Frame(8, 8), Frame(8, 9), 0.06, 0.25), std::invalid_argument);
}

TEST(Physical, CompositesOnlyOpaqueSpritePixels) {
  const Frame in = noise_frame(64, 64, 13);
  PhysicalTrigger t;
  t.object_image = make_sprite("ball", 32);
  t.scale_fraction = 0.25;
  const Frame out = apply_trigger(in, t, 0);
  const Rect r = *trigger_footprint(t, 64, 64, 0);
  EXPECT_EQ(r, (Rect{48, 0, 16, 16}));
  const auto changed = changed_pixels(in, out);
  EXPECT_GT(changed.size(), 100u);
  EXPECT_LT(changed.size(), 256u);  // transparent corners untouched
  for (auto [i, j] : changed) EXPECT_TRUE(r.contains(i, j));
}

TEST(Physical, SpritesAreDistinctAndUnknownRejected) {
  EXPECT_NE(make_sprite("leaf", 16), make_sprite("cone", 16));
  EXPECT_THROW(make_sprite("chair", 16), std::invalid_argument);
  PhysicalTrigger t;
  t.object_image = make_sprite("cone", 16);
  t.scale_fraction = 1.0;
  EXPECT_NO_THROW(apply_trigger(Frame(20, 20), t, 0));
}
