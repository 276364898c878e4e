#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "kflo/tensor.hpp"
#include "oracles.hpp"

using namespace kflo;

namespace {

ConvGeometry geometry(std::size_t stride, std::size_t pad, std::size_t dil = 1, std::size_t groups = 1) {
  ConvGeometry g;
  g.stride = {stride, stride};
  g.padding = {pad, pad};
  g.dilation = {dil, dil};
  g.groups = groups;
  return g;
}

}  // namespace

TEST(TensorTest, ShapeAndStorage) {
  Tensor t({2, 3, 4}, 1.5f);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  t.at(1, 2, 3) = 7.0f;
  EXPECT_EQ(t[23], 7.0f);
  EXPECT_THROW(t.at(2, 0, 0), DimensionError);
  EXPECT_THROW(t.at(0, 0), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), DimensionError);
  EXPECT_THROW((void)t.reshaped({5, 5}), DimensionError);
  EXPECT_EQ(t.reshaped({4, 6}).data()[23], 7.0f);
}

TEST(TensorTest, FiniteCheck) {
  Tensor t({3});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(check_finite(t, "probe"), InputError);
}

TEST(Conv2dTest, AllOnesThreeByThree) {
  const Tensor x({1, 1, 3, 3}, 1.0f), k({1, 1, 3, 3}, 1.0f);
  const Tensor y = conv2d(x, k, ConvGeometry::trivial());
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 9.0f);
}

TEST(Conv2dTest, IdentityKernelIsExact) {
  Rng rng(1);
  const Tensor x = oracle::random_tensor<float>({2, 3, 5, 4}, rng);
  Tensor k({3, 3, 1, 1});
  for (std::size_t i = 0; i < 3; ++i) k.at(i, i, 0, 0) = 1.0f;
  EXPECT_EQ(conv2d(x, k, ConvGeometry::trivial()), x);

  const Tensor single = oracle::random_tensor<float>({1, 1, 4, 4}, rng);
  EXPECT_EQ(conv2d(single, Tensor({1, 1, 1, 1}, 1.0f), ConvGeometry::trivial()), single);
}

TEST(Conv2dTest, MatchesNaiveOracleStride2Pad1) {
  Rng rng(2);
  const Tensor x = oracle::random_tensor<float>({2, 3, 8, 8}, rng);
  const Tensor k = oracle::random_tensor<float>({4, 3, 3, 3}, rng);
  const auto g = geometry(2, 1);
  const Tensor y = conv2d(x, k, g);
  const Tensor ref = oracle::conv2d(x, k, g);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4, 4}));
  EXPECT_LE(max_abs_difference(y, ref), 1e-6);
}

TEST(Conv2dTest, MatchesOracleWithDilationAndGroups) {
  Rng rng(3);
  for (std::size_t groups : {1u, 2u, 4u}) {
    const Tensor x = oracle::random_tensor<float>({2, 4, 9, 7}, rng);
    const Tensor k = oracle::random_tensor<float>({8, 4 / groups, 3, 2}, rng);
    ConvGeometry g = geometry(1, 2, 2, groups);
    g.stride = {2, 1};
    EXPECT_LE(max_abs_difference(conv2d(x, k, g), oracle::conv2d(x, k, g)), 1e-6) << groups;
  }
}

TEST(Conv2dTest, ShapeErrorsNameTheAxis) {
  const Tensor x({1, 3, 5, 5});
  try {
    (void)conv2d(x, Tensor({2, 2, 3, 3}), ConvGeometry::trivial());
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)conv2d(x, Tensor({2, 3, 7, 7}), ConvGeometry::trivial()), DimensionError);
  EXPECT_THROW((void)conv2d(x, Tensor({3, 1, 3, 3}), geometry(1, 0, 1, 2)), DimensionError);
  EXPECT_THROW((void)conv2d(Tensor({3, 5, 5}), Tensor({2, 3, 3, 3}), ConvGeometry::trivial()),
               DimensionError);
}

TEST(Conv2dTest, LinearInBothArguments) {
  Rng rng(4);
  const auto g = geometry(1, 1);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor X = oracle::random_tensor<float>({2, 3, 6, 6}, rng);
    const Tensor Y = oracle::random_tensor<float>({2, 3, 6, 6}, rng);
    const Tensor K = oracle::random_tensor<float>({4, 3, 3, 3}, rng);
    const Tensor L = oracle::random_tensor<float>({4, 3, 3, 3}, rng);
    const float a = static_cast<float>(uniform(rng, -2, 2)), b = static_cast<float>(uniform(rng, -2, 2));

    Tensor mix(X.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * X[i] + b * Y[i];
    const Tensor cx = conv2d(X, K, g), cy = conv2d(Y, K, g);
    Tensor rhs(cx.shape());
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * cx[i] + b * cy[i];
    EXPECT_LE(relative_deviation(conv2d(mix, K, g), rhs), 1e-5);

    Tensor kmix(K.shape());
    for (std::size_t i = 0; i < kmix.size(); ++i) kmix[i] = a * K[i] + b * L[i];
    const Tensor ck = conv2d(X, K, g), cl = conv2d(X, L, g);
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * ck[i] + b * cl[i];
    EXPECT_LE(relative_deviation(conv2d(X, kmix, g), rhs), 1e-5);
  }
}

TEST(Conv2dTest, OutputShapeSweep) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    ConvGeometry g;
    for (std::size_t a = 0; a < 2; ++a) {
      g.stride[a] = 1 + uniform_index(rng, 3);
      g.padding[a] = uniform_index(rng, 3);
      g.dilation[a] = 1 + uniform_index(rng, 3);
    }
    g.groups = 1 + uniform_index(rng, 3);
    const std::size_t cin = g.groups * (1 + uniform_index(rng, 2));
    const std::size_t cout = g.groups * (1 + uniform_index(rng, 2));
    const std::size_t M = 1 + uniform_index(rng, 3), N = 1 + uniform_index(rng, 3);
    const std::size_t H = 1 + uniform_index(rng, 10), W = 1 + uniform_index(rng, 10);
    const long hspan = static_cast<long>(H + 2 * g.padding[0]) - static_cast<long>(g.dilation[0] * (M - 1)) - 1;
    const long wspan = static_cast<long>(W + 2 * g.padding[1]) - static_cast<long>(g.dilation[1] * (N - 1)) - 1;
    const Tensor x = oracle::random_tensor<float>({1, cin, H, W}, rng);
    const Tensor k = oracle::random_tensor<float>({cout, cin / g.groups, M, N}, rng);
    if (hspan < 0 || wspan < 0) {
      EXPECT_THROW((void)conv2d(x, k, g), DimensionError);
      continue;
    }
    const Tensor y = conv2d(x, k, g);
    const std::size_t Ho = static_cast<std::size_t>(std::floor(static_cast<double>(hspan) / g.stride[0])) + 1;
    const std::size_t Wo = static_cast<std::size_t>(std::floor(static_cast<double>(wspan) / g.stride[1])) + 1;
    EXPECT_EQ(y.shape(), (Shape{1, cout, Ho, Wo}));
    EXPECT_LE(max_abs_difference(y, oracle::conv2d(x, k, g)), 1e-6);
  }
}

TEST(PointwiseConv1dTest, HandEvaluatedExample) {
  const Tensor x({1, 2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const Tensor k({2, 2, 1}, std::vector<float>{1, 1, 0, 2});
  const Tensor y = pointwise_conv1d(x, k);
  EXPECT_EQ(y, Tensor({1, 2, 3}, std::vector<float>{5, 7, 9, 8, 10, 12}));
}

TEST(PointwiseConv1dTest, IdentityAndZeroKernels) {
  Rng rng(6);
  const Tensor x = oracle::random_tensor<float>({1, 4, 11}, rng);
  Tensor eye({4, 4, 1});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i, 0) = 1.0f;
  EXPECT_EQ(pointwise_conv1d(x, eye), x);
  const Tensor zero = pointwise_conv1d(x, Tensor({3, 4, 1}));
  for (float v : zero.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW((void)pointwise_conv1d(x, Tensor({3, 5, 1})), DimensionError);
}

TEST(PointwiseConv1dTest, CompositionIsMatrixProduct) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c1 = 1 + uniform_index(rng, 6), c2 = 1 + uniform_index(rng, 6),
                      c3 = 1 + uniform_index(rng, 6), len = 1 + uniform_index(rng, 20);
    const Tensor x = oracle::random_tensor<float>({1, c1, len}, rng);
    const Tensor a = oracle::random_tensor<float>({c2, c1, 1}, rng);
    const Tensor b = oracle::random_tensor<float>({c3, c2, 1}, rng);
    const auto prod = oracle::matmul(std::vector<float>(b.data().begin(), b.data().end()),
                                     std::vector<float>(a.data().begin(), a.data().end()), c3, c2, c1);
    Tensor ab({c3, c1, 1});
    for (std::size_t i = 0; i < prod.size(); ++i) ab[i] = static_cast<float>(prod[i]);
    EXPECT_LE(relative_deviation(pointwise_conv1d(pointwise_conv1d(x, a), b), pointwise_conv1d(x, ab)),
              1e-5);
  }
}

TEST(FcTest, IdentityAndConvEquivalence) {
  Rng rng(8);
  const Tensor x = oracle::random_tensor<float>({3, 5}, rng);
  Tensor eye({5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye.at(i, i) = 1.0f;
  EXPECT_EQ(fc_forward(x, eye), x);

  const Tensor w = oracle::random_tensor<float>({7, 5}, rng);
  const Tensor y = fc_forward(x, w);
  const Tensor c = conv2d(x.reshaped({3, 5, 1, 1}), w.reshaped({7, 5, 1, 1}), ConvGeometry::trivial());
  EXPECT_EQ(y, c.reshaped({3, 7}));

  double worst = 0.0;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t o = 0; o < 7; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 5; ++i) acc += static_cast<double>(x.at(b, i)) * w.at(o, i);
      worst = std::max(worst, std::abs(acc - y.at(b, o)));
    }
  EXPECT_LE(worst, 1e-6);
  EXPECT_THROW((void)fc_forward(x, Tensor({7, 4})), DimensionError);
}

TEST(ActivationTest, Relu) {
  const Tensor y = relu(Tensor({3}, std::vector<float>{-1, 0, 2}));
  EXPECT_EQ(y, Tensor({3}, std::vector<float>{0, 0, 2}));
}

TEST(PoolTest, MaxPoolPicksFirstMaximum) {
  const Tensor x({1, 1, 2, 4}, std::vector<float>{1, 3, 5, 5, 3, 2, 5, 0});
  ConvGeometry g;
  g.stride = {2, 2};
  const auto r = maxpool2d(x, g);
  EXPECT_EQ(r.output, Tensor({1, 1, 1, 2}, std::vector<float>{3, 5}));
  EXPECT_EQ(r.argmax, (std::vector<std::size_t>{1, 2}));
}

TEST(PoolTest, MaxPoolDropsRemainderAndHonoursPadding) {
  Rng rng(9);
  const Tensor x = oracle::random_tensor<float>({2, 3, 5, 5}, rng);
  ConvGeometry g;
  g.stride = {2, 2};
  EXPECT_EQ(maxpool2d(x, g).output.shape(), (Shape{2, 3, 2, 2}));
  g.padding = {1, 1};
  const auto padded = maxpool2d(x, g);
  EXPECT_EQ(padded.output.shape(), (Shape{2, 3, 3, 3}));
  // Corner window holds only x[0,0,0,0] once padding is stripped.
  EXPECT_EQ(padded.output.at(0, 0, 0, 0), x.at(0, 0, 0, 0));
}

TEST(PoolTest, GlobalAveragePool) {
  const Tensor x({1, 2, 2, 2}, std::vector<float>{1, 2, 3, 4, -1, -1, -1, 3});
  EXPECT_EQ(global_avg_pool(x), Tensor({1, 2}, std::vector<float>{2.5f, 0.0f}));
}

TEST(CrossEntropyTest, UniformLogitsGiveLogClasses) {
  const Tensor logits({2, 7}, 0.25f);
  const std::vector<int> labels{3, 6};
  const auto r = softmax_cross_entropy(logits, std::span<const int>(labels));
  EXPECT_NEAR(r.loss, std::log(7.0), 1e-6);
}

TEST(CrossEntropyTest, MatchesTwoPassOracle) {
  Rng rng(10);
  const Tensor logits = oracle::random_tensor<float>({6, 5}, rng, -8, 8);
  const std::vector<int> labels{0, 4, 2, 2, 1, 3};
  const auto r = softmax_cross_entropy(logits, std::span<const int>(labels));
  EXPECT_NEAR(r.loss, oracle::cross_entropy_mean(logits, labels), 1e-6);
  const auto s = softmax_cross_entropy(logits, std::span<const int>(labels), Reduction::sum);
  EXPECT_NEAR(s.loss, 6 * oracle::cross_entropy_mean(logits, labels), 1e-5);
}

TEST(CrossEntropyTest, LargeLogitsStayFinite) {
  const Tensor logits({1, 3}, std::vector<float>{1000.0f, -1000.0f, 999.0f});
  const std::vector<int> labels{2};
  const auto r = softmax_cross_entropy(logits, std::span<const int>(labels));
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, std::log1p(std::exp(1.0)), 1e-5);
}

TEST(CrossEntropyTest, LabelOutOfRange) {
  const Tensor logits({2, 3});
  const std::vector<int> bad{0, 3}, negative{-1, 0};
  EXPECT_THROW(softmax_cross_entropy(logits, std::span<const int>(bad)), InputError);
  EXPECT_THROW(softmax_cross_entropy(logits, std::span<const int>(negative)), InputError);
}

TEST(DeviationTest, NanPropagates) {
  Tensor a({2}, 1.0f), b({2}, 1.0f);
  EXPECT_EQ(relative_deviation(a, b), 0.0);
  a[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_TRUE(std::isnan(relative_deviation(a, b)));
}
