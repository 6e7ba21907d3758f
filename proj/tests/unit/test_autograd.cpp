#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "pcon/autograd.hpp"
#include "pcon/losses.hpp"
#include "pcon/selftest.hpp"

using namespace pcon;

namespace {

Tensor<double> leaf(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v), true); }

}  // namespace

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor<double>({0, 3}, 0.0), ShapeError);
  EXPECT_THROW(Tensor<double>({2, 2, 2}, 0.0), ShapeError);
  const Tensor<double> t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  auto x = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  tape.backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  EXPECT_EQ(tape.size(), 0u);  // cleared after backward
}

TEST(Backward, DotWithItself) {
  Tape tape;
  auto x = leaf({1, 2}, {1, 2});
  tape.backward(sum(dot(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, ArctanhAtHalf) {
  Tape tape;
  auto x = leaf({1}, {0.5});
  tape.backward(sum(arctanh(x)));
  const double fd = (std::atanh(0.5 + 1e-6) - std::atanh(0.5 - 1e-6)) / 2e-6;
  EXPECT_NEAR(x.grad()[0], 4.0 / 3.0, 1e-12);
  EXPECT_NEAR(x.grad()[0], fd, 1e-8);
}

TEST(Backward, ArctanhAccurateNearZero) {
  const Tensor<double> x({1}, std::vector<double>{1e-12});
  EXPECT_NEAR(arctanh(x).item(), 1e-12, 1e-26);
}

TEST(Backward, RequiresScalar) {
  Tape tape;
  auto x = leaf({2}, {1, 2});
  EXPECT_THROW(tape.backward(x * x), ShapeError);
}

TEST(Backward, ReluSubgradientAtZeroIsZero) {
  Tape tape;
  auto x = leaf({3}, {-1, 0, 2});
  tape.backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST(Backward, ClampGradientZeroOutside) {
  Tape tape;
  auto x = leaf({3}, {-2, 0.3, 2});
  tape.backward(sum(clamp(x, -1.0, 1.0)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Backward, NoGradGuardStopsRecording) {
  Tape tape;
  auto x = leaf({2}, {1, 2});
  {
    NoGradGuard guard;
    auto y = x * x;
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, NoTapeMeansNoTrace) {
  auto x = leaf({2}, {1, 2});
  auto y = exp(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Broadcast, RowVectorAndScalar) {
  Tape tape;
  auto x = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = leaf({1, 3}, {10, 20, 30});
  auto y = (x + b) * 2.0;
  EXPECT_EQ(y.at(1, 2), 72.0);
  tape.backward(sum(y));
  for (double g : b.grad()) EXPECT_EQ(g, 4.0);
  EXPECT_THROW(x + Tensor<double>({1, 2}, 0.0), ShapeError);
}

TEST(Matmul, ValuesAndShapeErrors) {
  const Tensor<double> a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor<double> b({3, 1}, std::vector<double>{1, 0, -1});
  const auto c = matmul(a, b);
  EXPECT_EQ(c.at(0, 0), -2.0);
  EXPECT_EQ(c.at(1, 0), -2.0);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(GradCheck, SumOfSquares) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<double> v(12);
  for (double& x : v) x = n(rng);
  const Tensor<double> x({3, 4}, v);
  EXPECT_LE(grad_check([](const Tensor<double>& t) { return sum(t * t); }, x), 1e-9);
}

TEST(GradCheck, NonScalarRejected) {
  const Tensor<double> x({2}, std::vector<double>{1, 2});
  EXPECT_THROW(grad_check([](const Tensor<double>& t) { return t * t; }, x), ShapeError);
}

TEST(GradCheck, HclLossOnRandomBatch) {
  Sampler s(21);
  const Tensor<double> raw({8, 8}, s.gaussian(64));
  const BallConfig ball{0.1, 1e-5, 8};
  auto f = [&](const Tensor<double>& t) {
    return hcl_loss(project_embeddings(t, EmbeddingSpace::poincare(ball), true, 0.5)).total;
  };
  EXPECT_LE(grad_check(f, raw, 1e-4), 1e-4);
}

TEST(GradCheck, SupConLossOnRandomBatch) {
  Sampler s(22);
  const Tensor<double> raw({8, 6}, s.gaussian(48));
  const std::vector<int> labels{0, 0, 1, 1, 0, 0, 2, 2};
  auto f = [&](const Tensor<double>& t) {
    auto batch = project_embeddings(t, EmbeddingSpace::cosine(), true, 0.5);
    return supcon_cosine(batch, PositiveSet::from_labels(labels)).total;
  };
  EXPECT_LE(grad_check(f, raw, 1e-4), 1e-4);
}

TEST(StructuralOps, ConcatSliceIndexTranspose) {
  Tape tape;
  auto a = leaf({1, 2}, {1, 2});
  auto b = leaf({2, 2}, {3, 4, 5, 6});
  auto c = concat<double>({a, b});
  EXPECT_EQ(c.rows(), 3u);
  EXPECT_EQ(c.at(2, 1), 6.0);
  auto s = slice(c, 1, 3);
  EXPECT_EQ(s.at(0, 0), 3.0);
  auto t = transpose(index_rows(c, {2, 0}));
  EXPECT_EQ(t.at(1, 0), 6.0);
  EXPECT_EQ(t.at(0, 1), 1.0);
  tape.backward(sum(s) + sum(t));
  EXPECT_EQ(a.grad()[0], 1.0);
  EXPECT_EQ(b.grad()[0], 1.0);
  EXPECT_EQ(b.grad()[2], 2.0);
  EXPECT_THROW(slice(c, 2, 2), ShapeError);
}

TEST(StructuralOps, CastKeepsGradientFlow) {
  Tape tape;
  Tensor<float> x({2}, std::vector<float>{1.5f, -2.0f}, true);
  auto y = cast<double>(x);
  tape.backward(sum(y * y));
  EXPECT_FLOAT_EQ(x.grad()[0], 3.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], -4.0f);
}

TEST(LogSumExp, StableAndIgnoresMinusInfinity) {
  const Tensor<double> x({1, 3}, std::vector<double>{1000, 1000, -INFINITY});
  EXPECT_NEAR(logsumexp(x, 1).item(), 1000 + std::log(2.0), 1e-9);
  Tape tape;
  auto y = leaf({1, 3}, {0.0, std::log(3.0), -INFINITY});
  tape.backward(sum(logsumexp(y, 1)));
  EXPECT_NEAR(y.grad()[0], 0.25, 1e-15);
  EXPECT_NEAR(y.grad()[1], 0.75, 1e-15);
  EXPECT_EQ(y.grad()[2], 0.0);
}

TEST(PairwiseSqDist, ExactZeroForCoincidentRows) {
  const Tensor<double> x({3, 2}, std::vector<double>{0.3, 0.1, 0.3, 0.1, -1, 2});
  const auto d = pairwise_sq_dist(x);
  EXPECT_EQ(d.at(0, 1), 0.0);
  EXPECT_NEAR(d.at(0, 2), 1.69 + 3.61, 1e-12);
  Sampler s(5);
  const Tensor<double> r({4, 3}, s.gaussian(12));
  EXPECT_LE(grad_check([](const Tensor<double>& t) { return sum(sqrt(pairwise_sq_dist(t) + 1.0)); }, r), 1e-6);
}

TEST(ClipRowNorm, GradientInsideAndOutside) {
  Sampler s(6);
  const Tensor<double> x({4, 3}, s.gaussian(12, 2.0));
  const Tensor<double> w({4, 3}, s.gaussian(12));
  // max norm 1.5: some rows are clipped, some pass through
  EXPECT_LE(grad_check([&](const Tensor<double>& t) { return sum(clip_row_norm(t, 1.5) * w); }, x), 1e-6);
  const auto y = clip_row_norm(x, 1.5);
  for (std::size_t i = 0; i < 4; ++i) {
    double n = 0;
    for (std::size_t k = 0; k < 3; ++k) n += y.at(i, k) * y.at(i, k);
    EXPECT_LE(std::sqrt(n), 1.5 + 1e-12);
  }
}

TEST(ConvStem, ConvAndPoolGradients) {
  Sampler s(7);
  const std::size_t cin = 2, h = 4, w = 4, cout = 3;
  const Tensor<double> x({2, cin * h * w}, s.gaussian(2 * cin * h * w));
  const Tensor<double> weight({cout, cin * 9}, s.gaussian(cout * cin * 9));
  const Tensor<double> bias({1, cout}, s.gaussian(cout));
  const Tensor<double> probe({2, cout * h * w / 4}, s.gaussian(2 * cout * h * w / 4));
  auto through = [&](const Tensor<double>& xi, const Tensor<double>& wi, const Tensor<double>& bi) {
    return sum(avg_pool2x2(conv3x3(xi, wi, bi, cin, h, w), cout, h, w) * probe);
  };
  EXPECT_LE(grad_check([&](const Tensor<double>& t) { return through(t, weight, bias); }, x), 1e-6);
  EXPECT_LE(grad_check([&](const Tensor<double>& t) { return through(x, t, bias); }, weight), 1e-6);
  EXPECT_LE(grad_check([&](const Tensor<double>& t) { return through(x, weight, t); }, bias), 1e-6);
}

TEST(ConvStem, MatchesDirectConvolution) {
  // single channel, identity-centre kernel plus a right-neighbour tap
  const Tensor<double> x({1, 9}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  k[5] = 10.0;
  const auto y = conv3x3(x, Tensor<double>({1, 9}, k), Tensor<double>({1, 1}, 0.5), 1, 3, 3);
  EXPECT_EQ(y.at(0, 0), 1 + 20 + 0.5);
  EXPECT_EQ(y.at(0, 2), 3 + 0 + 0.5);
  EXPECT_EQ(y.at(0, 4), 5 + 60 + 0.5);
}

TEST(Determinism, ReplayIsBitIdentical) {
  auto run = [] {
    Sampler s(99);
    Tape tape;
    auto x = Tensor<double>({6, 5}, s.gaussian(30), true);
    const auto report = hcl_loss(project_embeddings(x, EmbeddingSpace::poincare({0.3, 1e-5, 5}), true, 0.5));
    tape.backward(report.total);
    std::vector<double> out{report.value()};
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(std::memcmp(&a[i], &b[i], sizeof(double)), 0);
}

TEST(Composition, HandDerivedDistanceGradient) {
  // D(x,y) = arcosh(1 + 2c|x-y|^2 / ((1-c|x|^2)(1-c|y|^2))) / sqrt(c), differentiated by hand in y
  const double c = 0.7;
  const std::vector<double> xv{0.2, -0.4, 0.3}, yv{-0.5, 0.1, 0.25};
  double u = 0, xx = 0, yy = 0;
  for (int k = 0; k < 3; ++k) u += (xv[k] - yv[k]) * (xv[k] - yv[k]), xx += xv[k] * xv[k], yy += yv[k] * yv[k];
  const double a = 1 - c * xx, b = 1 - c * yy;
  const double A = 1 + 2 * c * u / (a * b);
  std::vector<double> expected(3);
  for (int k = 0; k < 3; ++k) {
    const double dA = 2 * c / a * (2 * (yv[k] - xv[k]) / b + u * 2 * c * yv[k] / (b * b));
    expected[k] = dA / std::sqrt(A * A - 1) / std::sqrt(c);
  }
  Tape tape;
  const Tensor<double> x({1, 3}, xv);
  auto y = leaf({1, 3}, yv);
  tape.backward(sum(hyp_distance_rows(x, y, BallConfig{c, 1e-5, 3})));
  for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(y.grad()[k] - expected[k]) / std::abs(expected[k]), 1e-8);
}

class PrimitiveProperties : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PrimitiveProperties, TwoHundredTrialsEach) {
  for (const auto& r : primitive_gradient_properties(200, GetParam())) {
    EXPECT_TRUE(r.passed()) << r.name << ": worst " << r.worst << " > " << r.tolerance;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveProperties, ::testing::Values(31u, 32u));

TEST(Float32, TrainingPrecisionGradients) {
  Tape tape;
  Tensor<float> w({3, 2}, std::vector<float>{0.1f, -0.2f, 0.3f, 0.4f, -0.5f, 0.6f}, true);
  const Tensor<float> x({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  tape.backward(sum(matmul(x, w)));
  // d/dw_ij sum(xw) = sum_r x_ri
  EXPECT_FLOAT_EQ(w.grad()[0], 5.0f);
  EXPECT_FLOAT_EQ(w.grad()[5], 9.0f);
  EXPECT_EQ(default_fd_step<float>(), 1e-2);
}
