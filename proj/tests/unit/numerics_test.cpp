#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <cstring>
#include <sstream>

#include "badseg/autograd.hpp"
#include "badseg/bvtf.hpp"
#include "badseg/gradcheck.hpp"
#include "badseg/random.hpp"
#include "badseg/signal.hpp"

using namespace badseg;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(-scale, scale));
  return t;
}

// Reduces any output to a scalar through a fixed random projection so every
// output coordinate contributes to the checked gradient.
ad::Var project(ad::Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(y.shape(), rng);
  return ad::sum_all(ad::mul(y, y.graph().constant(std::move(w))));
}

ComplexGrid naive_dft(const ComplexGrid& x) {
  ComplexGrid out(x.height, x.width);
  for (int u = 0; u < x.height; ++u)
    for (int v = 0; v < x.width; ++v) {
      std::complex<double> s = 0.0;
      for (int i = 0; i < x.height; ++i)
        for (int j = 0; j < x.width; ++j) {
          const double ang = -2.0 * M_PI * (static_cast<double>(u * i) / x.height + static_cast<double>(v * j) / x.width);
          s += x.at(i, j) * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      out.at(u, v) = s;
    }
  return out;
}

ComplexGrid random_grid(int h, int w, Rng& rng) {
  ComplexGrid g(h, w);
  for (auto& v : g.data) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  return g;
}

}  // namespace

TEST(GradCheck, QuadraticIsExact) {
  const LossBuilder half_norm = [](ad::Graph&, std::span<const ad::Var> p) {
    return ad::scale(ad::squared_distance(p[0], p[0].graph().constant(Tensor({2}))), 0.5f);
  };
  EXPECT_LE(grad_check(half_norm, {Tensor({2}, {3.0f, 4.0f})}), 1e-6);
}

TEST(GradCheck, ConstantLossHasZeroError) {
  const LossBuilder constant = [](ad::Graph& g, std::span<const ad::Var> p) {
    return ad::add(ad::scale(ad::sum_all(p[0]), 0.0f), g.constant(Tensor::scalar(2.5f)));
  };
  EXPECT_EQ(grad_check(constant, {Tensor({3}, {1.0f, -2.0f, 0.5f})}), 0.0);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  const LossBuilder f = [](ad::Graph&, std::span<const ad::Var> p) { return ad::sum_all(p[0]); };
  EXPECT_THROW(grad_check(f, {Tensor({1})}, {.step = 0.0f}), std::invalid_argument);
}

struct PrimitiveCase {
  const char* name;
  std::vector<std::vector<int>> shapes;
  std::function<ad::Var(std::span<const ad::Var>)> op;
};

class PrimitiveGradients : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradients, MatchCentralDifferences) {
  const PrimitiveCase& c = GetParam();
  Rng rng(42);
  std::vector<Tensor> params;
  for (const auto& s : c.shapes) params.push_back(random_tensor(s, rng));
  const LossBuilder loss = [&c](ad::Graph&, std::span<const ad::Var> p) { return project(c.op(p), 7); };
  // 1e-2 sits near the float32 optimum (cube root of machine epsilon) for central differences.
  EXPECT_LT(grad_check(loss, params, {.step = 1e-2f, .probes = 100, .seed = 3}), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(
    Ops, PrimitiveGradients,
    ::testing::Values(
        PrimitiveCase{"matmul", {{5, 4}, {4, 3}}, [](auto p) { return ad::matmul(p[0], p[1]); }},
        PrimitiveCase{"matmul_tb", {{5, 4}, {3, 4}}, [](auto p) { return ad::matmul(p[0], p[1], false, true); }},
        PrimitiveCase{"matmul_ta", {{4, 5}, {4, 3}}, [](auto p) { return ad::matmul(p[0], p[1], true, false); }},
        PrimitiveCase{"matmul_tt", {{4, 5}, {3, 4}}, [](auto p) { return ad::matmul(p[0], p[1], true, true); }},
        PrimitiveCase{"linear", {{6, 4}, {4, 3}, {3}}, [](auto p) { return ad::linear(p[0], p[1], p[2]); }},
        PrimitiveCase{"softmax", {{4, 6}}, [](auto p) { return ad::softmax_rows(p[0]); }},
        PrimitiveCase{"sigmoid", {{3, 5}}, [](auto p) { return ad::sigmoid(p[0]); }},
        PrimitiveCase{"gelu", {{3, 5}}, [](auto p) { return ad::gelu(p[0]); }},
        PrimitiveCase{"mul", {{3, 5}, {3, 5}}, [](auto p) { return ad::mul(p[0], p[1]); }},
        PrimitiveCase{"sub", {{3, 5}, {3, 5}}, [](auto p) { return ad::sub(p[0], p[1]); }},
        PrimitiveCase{"layer_norm", {{4, 8}, {8}, {8}}, [](auto p) { return ad::layer_norm(p[0], p[1], p[2]); }},
        PrimitiveCase{"transpose", {{3, 4}}, [](auto p) { return ad::transpose(p[0]); }},
        PrimitiveCase{"slice_concat", {{3, 6}, {3, 2}},
                      [](auto p) { return ad::concat_cols({ad::slice_cols(p[0], 1, 4), p[1]}); }},
        PrimitiveCase{"rows", {{4, 3}, {2, 3}},
                      [](auto p) { return ad::concat_rows({ad::slice_rows(p[0], 1, 3), p[1]}); }},
        PrimitiveCase{"mean_rows", {{5, 3}}, [](auto p) { return ad::mean_rows(p[0]); }},
        PrimitiveCase{"conv2d", {{2, 7, 6}, {3, 2, 3, 3}, {3}},
                      [](auto p) { return ad::conv2d(p[0], p[1], p[2], 1, 1); }},
        PrimitiveCase{"conv2d_stride", {{2, 8, 8}, {4, 2, 4, 4}, {4}},
                      [](auto p) { return ad::conv2d(p[0], p[1], p[2], 4, 0); }},
        PrimitiveCase{"channel_bias", {{3, 4, 4}, {3}}, [](auto p) { return ad::add_channel_bias(p[0], p[1]); }},
        PrimitiveCase{"upsample_nearest", {{2, 3, 3}}, [](auto p) { return ad::upsample_nearest(p[0], 2); }},
        PrimitiveCase{"resize_bilinear", {{2, 4, 3}}, [](auto p) { return ad::resize_bilinear(p[0], 9, 7); }},
        PrimitiveCase{"mse", {{4, 4}, {4, 4}}, [](auto p) { return ad::mse(p[0], p[1]); }},
        PrimitiveCase{"bce", {{1, 4, 4}},
                      [](auto p) {
                        Tensor q({1, 4, 4});
                        for (std::size_t i = 0; i < q.size(); i += 3) q[i] = 1.0f;
                        return ad::bce_with_logits(p[0], q);
                      }},
        PrimitiveCase{"dice", {{1, 4, 4}},
                      [](auto p) {
                        Tensor q({1, 4, 4});
                        for (std::size_t i = 0; i < q.size(); i += 2) q[i] = 1.0f;
                        return ad::dice_with_logits(p[0], q, 1e-6f);
                      }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Autograd, NonFiniteValuesAreSurfaced) {
  ad::Graph g;
  ad::Var a = g.variable(Tensor({2}, {1.0f, std::numeric_limits<float>::infinity()}));
  EXPECT_THROW(ad::scale(a, 2.0f), NonFiniteError);
}

TEST(Autograd, ConstantsReceiveNoGradient) {
  ad::Graph g;
  ad::Var w = g.variable(Tensor({2, 2}, {1, 2, 3, 4}));
  ad::Var x = g.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  ad::Var y = ad::sum_all(ad::matmul(x, w));
  g.backward(y);
  EXPECT_EQ(g.grad(x), Tensor({2, 2}));
  EXPECT_EQ(g.grad(w), Tensor({2, 2}, {1, 1, 1, 1}));
}

TEST(Fft, ConstantImageHasOnlyDc) {
  ComplexGrid x(4, 4);
  for (auto& v : x.data) v = 0.25;
  const ComplexGrid s = fft2(x);
  EXPECT_NEAR(s.at(0, 0).real(), 16 * 0.25, 1e-12);
  for (std::size_t i = 1; i < s.data.size(); ++i) EXPECT_LT(std::abs(s.data[i]), 1e-12);
}

TEST(Fft, DeltaHasFlatSpectrum) {
  ComplexGrid x(4, 4);
  x.at(0, 0) = 1.0;
  for (const auto& v : fft2(x).data) EXPECT_NEAR(std::abs(v - 1.0), 0.0, 1e-12);
}

TEST(Fft, MatchesDirectDft) {
  Rng rng(5);
  for (auto [h, w] : {std::pair{8, 8}, std::pair{5, 7}, std::pair{6, 9}}) {
    const ComplexGrid x = random_grid(h, w, rng);
    const ComplexGrid fast = fft2(x);
    const ComplexGrid slow = naive_dft(x);
    for (std::size_t i = 0; i < fast.data.size(); ++i) EXPECT_LT(std::abs(fast.data[i] - slow.data[i]), 1e-9);
  }
}

TEST(Fft, RoundTripAndParseval) {
  Rng rng(11);
  for (int n : {1, 3, 8, 17, 64}) {
    const ComplexGrid x = random_grid(n, n == 17 ? 30 : n, rng);
    const ComplexGrid s = fft2(x);
    const ComplexGrid back = ifft2(s);
    double err = 0.0, e_x = 0.0, e_s = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      err = std::max(err, std::abs(back.data[i] - x.data[i]));
      e_x += std::norm(x.data[i]);
      e_s += std::norm(s.data[i]);
    }
    EXPECT_LT(err, 1e-5);
    EXPECT_NEAR(e_s / x.data.size(), e_x, 1e-4 * e_x);
  }
}

TEST(Gaussian, KernelNormalizedAndDefaultSigma) {
  for (int k : {1, 5, 101}) {
    const auto w = gaussian_kernel(k);
    double s = 0.0;
    for (double v : w) s += v;
    EXPECT_NEAR(s, 1.0, 1e-7);
  }
  const auto w = gaussian_kernel(7);  // sigma = 7/6
  EXPECT_NEAR(w[4] / w[3], std::exp(-0.5 / std::pow(7.0 / 6.0, 2)), 1e-12);
}

TEST(Gaussian, ConstantFieldPreserved) {
  Tensor f({9, 11}, 0.37f);
  const Tensor out = gaussian_smooth(f, 5, 1.3);
  EXPECT_LT(max_abs_diff(out, f), 1e-6f);
}

TEST(Gaussian, SizeOneIsIdentity) {
  Rng rng(1);
  const Tensor f = random_tensor({6, 5}, rng);
  EXPECT_EQ(gaussian_smooth(f, 1), f);
}

TEST(Gaussian, ImpulseCenterWeight) {
  Tensor f({11, 11});
  f.at(5, 5) = 1.0f;
  double z = 0.0;
  for (int i = -2; i <= 2; ++i) z += std::exp(-0.5 * i * i);
  const double expected = 1.0 / (z * z);  // product of the two 1-D center weights
  const Tensor out = gaussian_smooth(f, 5, 1.0);
  EXPECT_NEAR(out.at(5, 5), expected, 1e-6);
  EXPECT_NEAR(out.at(5, 5), 0.1621, 1e-3);
  EXPECT_NEAR(sum(out), 1.0, 1e-6);
}

TEST(Gaussian, EvenKernelRejected) {
  EXPECT_THROW(gaussian_smooth(Tensor({4, 4}), 4), std::invalid_argument);
  EXPECT_THROW(gaussian_smooth(Tensor({4, 4}), 3, -1.0), std::invalid_argument);
}

TEST(Warp, ZeroFieldIsBitIdentity) {
  Rng rng(9);
  Frame f(7, 5);
  for (float& v : f.rgb) v = static_cast<float>(rng.uniform());
  EXPECT_EQ(bilinear_warp(f, Tensor({7, 5, 2})), f);
}

TEST(Warp, IntegerShiftMatchesIndexOracle) {
  Frame ramp(4, 6);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j)
      for (int c = 0; c < 3; ++c) ramp.at(i, j, c) = static_cast<float>(j) / 5.0f;
  Tensor d({4, 6, 2});
  for (int p = 0; p < 24; ++p) d[static_cast<std::size_t>(p) * 2 + 1] = 1.0f;
  const Frame out = bilinear_warp(ramp, d);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) EXPECT_FLOAT_EQ(out.at(i, j, 0), ramp.at(i, std::min(j + 1, 5), 0));
}

TEST(Warp, HalfPixelMidpoint) {
  Frame col(2, 1);
  for (int c = 0; c < 3; ++c) col.at(1, 0, c) = 1.0f;
  Tensor d({2, 1, 2});
  d[0] = 0.5f;
  d[2] = 0.5f;
  const Frame out = bilinear_warp(col, d);
  EXPECT_FLOAT_EQ(out.at(0, 0, 0), 0.5f);
  EXPECT_FLOAT_EQ(out.at(1, 0, 0), 1.0f);  // clamped at the border
}

TEST(Warp, ShapeMismatchRejected) {
  EXPECT_THROW(bilinear_warp(Frame(4, 4), Tensor({4, 3, 2})), std::invalid_argument);
}

TEST(Bvtf, ByteLayout) {
  std::ostringstream os;
  write_bvtf(os, Tensor({2, 1}, {1.0f, -2.0f}));
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 4u + 4 + 1 + 1 + 2 * 4 + 2 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "BVTF");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 0);
  EXPECT_EQ(bytes[9], 2);
  EXPECT_EQ(bytes[10], 2);
  EXPECT_EQ(bytes[14], 1);
  float v;
  std::memcpy(&v, bytes.data() + 22, 4);
  EXPECT_EQ(v, -2.0f);
}

TEST(Bvtf, RoundTripAndCorruption) {
  Rng rng(3);
  const Tensor t = random_tensor({3, 4, 5}, rng);
  std::stringstream ss;
  write_bvtf(ss, t);
  EXPECT_EQ(read_bvtf(ss), t);
  std::stringstream bad("BVTX....");
  EXPECT_THROW(read_bvtf(bad), std::runtime_error);
  std::string truncated;
  {
    std::ostringstream os;
    write_bvtf(os, t);
    truncated = os.str().substr(0, 30);
  }
  std::stringstream ts(truncated);
  EXPECT_THROW(read_bvtf(ts), std::runtime_error);
}
