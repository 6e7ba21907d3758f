#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "../oracle/naive_losses.hpp"
#include "pcon/losses.hpp"
#include "pcon/selftest.hpp"

using namespace pcon;

namespace {

oracle::Mat to_mat(const Tensor<double>& t) {
  oracle::Mat m(t.rows(), oracle::Vec(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t k = 0; k < t.cols(); ++k) m[i][k] = t.at(i, k);
  return m;
}

Tensor<double> repeated_row(std::size_t rows, std::vector<double> row) {
  std::vector<double> v;
  for (std::size_t i = 0; i < rows; ++i) v.insert(v.end(), row.begin(), row.end());
  return Tensor<double>({rows, row.size()}, v);
}

const BallConfig kBall{0.1, 1e-5, 0};

EmbeddingBatch<double> ball_batch(const Tensor<double>& raw, double tau = 0.5, const BallConfig& b = kBall,
                                  bool nf = true) {
  return project_embeddings(raw, EmbeddingSpace::poincare(b), nf, tau);
}

EmbeddingBatch<double> sphere_batch(const Tensor<double>& raw, double tau = 0.5) {
  return project_embeddings(raw, EmbeddingSpace::cosine(), true, tau);
}

double sum_terms(const LossReport<double>& r) {
  const auto t = r.terms();
  return std::accumulate(t.begin(), t.end(), 0.0);
}

}  // namespace

TEST(InfoNce, SingleSourceIsZero) {
  const Tensor<double> raw({2, 3}, std::vector<double>{1, 0, 0, 0.3, 0.5, -1});
  const auto r = info_nce_cosine(sphere_batch(raw));
  EXPECT_NEAR(r.value(), 0.0, 1e-15);
}

TEST(InfoNce, UniformSimilaritiesGiveLog3) {
  const auto r = info_nce_cosine(sphere_batch(repeated_row(4, {0.2, -0.7, 1.1})));
  for (double t : r.terms()) EXPECT_NEAR(t, std::log(3.0), 1e-12);
  EXPECT_NEAR(r.value(), 4 * std::log(3.0), 1e-12);
}

TEST(Hcl, SingleSourceIsZero) {
  const Tensor<double> raw({2, 4}, std::vector<double>{1, 2, 3, 4, -1, 0, 2, 0.5});
  EXPECT_NEAR(hcl_loss(ball_batch(raw)).value(), 0.0, 1e-15);
}

TEST(Hcl, CoincidentPointsGiveLogOfCandidates) {
  for (std::size_t rows : {4u, 6u, 10u}) {
    const auto r = hcl_loss(ball_batch(repeated_row(rows, {0.5, 0.1, -0.3})));
    for (double t : r.terms()) EXPECT_NEAR(t, std::log(double(rows) - 1), 1e-12);
  }
}

TEST(Hcl, RejectsWrongSpaceAndOddBatches) {
  const Tensor<double> raw({4, 3}, 1.0);
  EXPECT_THROW(hcl_loss(sphere_batch(raw)), LossError);
  EXPECT_THROW(info_nce_cosine(ball_batch(raw)), LossError);
  EXPECT_THROW(hcl_loss(ball_batch(Tensor<double>({3, 3}, 1.0))), LossError);
}

TEST(Hcl, RejectsPointsOutsideBall) {
  EmbeddingBatch<double> batch;
  batch.space = EmbeddingSpace::poincare({1.0, 1e-5, 2});
  batch.z = Tensor<double>({2, 2}, std::vector<double>{1.5, 0, 0, 0.2});
  EXPECT_THROW(hcl_loss(batch), LossError);
}

TEST(SupCon, UniformSimilaritiesSameClassGiveLog3) {
  auto batch = sphere_batch(repeated_row(4, {1, 1}));
  batch.labels = std::vector<int>{7, 7, 7, 7};
  const auto r = supcon_cosine(batch, positives_from_batch(batch));
  for (double t : r.terms()) EXPECT_NEAR(t, std::log(3.0), 1e-12);
}

TEST(Shcl, CoincidentSameClassGiveLog3) {
  auto batch = ball_batch(repeated_row(4, {0.1, 0.2, 0.3}));
  batch.labels = std::vector<int>{1, 1, 1, 1};
  const auto r = shcl_loss(batch, positives_from_batch(batch));
  for (double t : r.terms()) EXPECT_NEAR(t, std::log(3.0), 1e-12);
}

TEST(SupCon, EmptyPositiveSetRejectsBatch) {
  Sampler s(1);
  auto batch = sphere_batch(Tensor<double>({4, 3}, s.gaussian(12)));
  batch.labels = std::vector<int>{0, 0, 1, 2};
  EXPECT_THROW(supcon_cosine(batch, positives_from_batch(batch)), LossError);
  batch.labels = std::vector<int>{0, 0, 1};
  EXPECT_THROW(positives_from_batch(batch), LossError);
  batch.labels.reset();
  EXPECT_THROW(positives_from_batch(batch), LossError);
}

TEST(ProjectEmbeddings, Examples) {
  const BallConfig ball{0.3, 1e-5, 0};
  Sampler s(2);
  const auto b = ball_batch(Tensor<double>({3, 5}, s.gaussian(15)), 0.5, ball);
  for (std::size_t i = 0; i < 3; ++i) {
    double n = 0;
    for (std::size_t k = 0; k < 5; ++k) n += b.z.at(i, k) * b.z.at(i, k);
    EXPECT_NEAR(std::sqrt(n), std::tanh(std::sqrt(0.3)) / std::sqrt(0.3), 1e-12);
  }
  const auto c = sphere_batch(Tensor<double>({1, 2}, std::vector<double>{3, 4}));
  EXPECT_NEAR(c.z.at(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(c.z.at(0, 1), 0.8, 1e-15);
  const auto o = ball_batch(Tensor<double>({1, 2}, 0.0), 0.5, ball, false);
  EXPECT_EQ(o.z.at(0, 0), 0.0);
  EXPECT_EQ(o.z.at(0, 1), 0.0);
}

TEST(ProjectEmbeddings, Errors) {
  EXPECT_THROW(sphere_batch(Tensor<double>({2, 2}, std::vector<double>{0, 0, 1, 1})), LossError);
  EXPECT_THROW(ball_batch(Tensor<double>({2, 2}, std::vector<double>{0, 0, 1, 1})), LossError);
  EXPECT_THROW(sphere_batch(Tensor<double>({2, 2}, std::vector<double>{NAN, 0, 1, 1})), NonFiniteEmbedding);
  EXPECT_THROW(ball_batch(Tensor<double>({2, 2}, std::vector<double>{1, INFINITY, 1, 1})), NonFiniteEmbedding);
  EXPECT_THROW(sphere_batch(Tensor<double>({4}, 1.0)), LossError);
}

TEST(ProjectEmbeddings, LargeRowsClippedInsideBall) {
  const BallConfig ball{1.0, 1e-5, 0};
  const auto b = ball_batch(Tensor<double>({1, 2}, std::vector<double>{100, 0}), 0.5, ball, false);
  EXPECT_LE(b.z.at(0, 0), 1.0 - 1e-5 + 1e-15);
}

// Oracle equivalence: 100 random batches per loss family.
TEST(OracleEquivalence, AllFourFamilies) {
  Sampler g(7);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = g.index(1, 8), d = g.index(1, 32);
    const double tau = g.uniform(0.2, 1.0);
    const double c = g.uniform(0.01, 1.0);
    const bool nf = g.uniform(0, 1) < 0.5;
    // unnormalized rows keep sqrt(c)|v| <= 2 so no point sits in the clip
    // band, where artanh amplifies rounding by 1/boundary_eps (covered below)
    auto v = g.gaussian(2 * n * d);
    for (std::size_t i = 0; i < 2 * n; ++i) {
      double norm = 0;
      for (std::size_t k = 0; k < d; ++k) norm += v[i * d + k] * v[i * d + k];
      const double target = g.uniform(0.05, 2.0) / std::sqrt(c);
      for (std::size_t k = 0; k < d; ++k) v[i * d + k] *= target / std::sqrt(norm);
    }
    const Tensor<double> raw({2 * n, d}, v);
    const std::size_t classes = g.index(1, 3);
    std::vector<int> labels;
    for (std::size_t k = 0; k < n; ++k) {
      const int y = int(g.index(0, classes - 1));
      labels.push_back(y);
      labels.push_back(y);
    }
    const auto m = to_mat(raw);
    const oracle::Space sph{false, 0, 0, true};
    const oracle::Space hyp{true, c, 1e-5, nf};
    const BallConfig ball{c, 1e-5, d};

    auto compare = [&](const LossReport<double>& r, const oracle::Vec& ref) {
      const auto t = r.terms();
      ASSERT_EQ(t.size(), ref.size());
      for (std::size_t i = 0; i < t.size(); ++i) worst = std::max(worst, std::abs(t[i] - ref[i]));
      worst = std::max(worst, std::abs(r.value() - oracle::total(ref)));
    };
    compare(info_nce_cosine(sphere_batch(raw, tau)), oracle::self_supervised(m, sph, tau));
    compare(hcl_loss(ball_batch(raw, tau, ball, nf)), oracle::self_supervised(m, hyp, tau));
    auto sb = sphere_batch(raw, tau);
    sb.labels = labels;
    compare(supcon_cosine(sb, positives_from_batch(sb)), oracle::supervised(m, labels, sph, tau));
    auto hb = ball_batch(raw, tau, ball, nf);
    hb.labels = labels;
    compare(shcl_loss(hb, positives_from_batch(hb)), oracle::supervised(m, labels, hyp, tau));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(OracleEquivalence, NearBoundaryWithinConditioning) {
  // points at the clip radius: artanh'(1 - eps) ~ 1/(2 eps), so agreement is
  // limited to about 1e-16 / eps / tau in absolute terms
  Sampler g(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<double> raw({8, 6}, g.gaussian(48, 10.0));
    const double c = g.uniform(0.5, 2.0), tau = 0.5;
    const auto ref = oracle::self_supervised(to_mat(raw), {true, c, 1e-5, false}, tau);
    const auto got = hcl_loss(ball_batch(raw, tau, {c, 1e-5, 6}, false)).terms();
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], ref[i], 1e-8);
  }
}

TEST(Reduction, TotalEqualsSumOfTerms) {
  Sampler g(8);
  const Tensor<double> raw({8, 6}, g.gaussian(48));
  EXPECT_NEAR(hcl_loss(ball_batch(raw)).value(), sum_terms(hcl_loss(ball_batch(raw))), 1e-12);
  EXPECT_NEAR(info_nce_cosine(sphere_batch(raw)).value(), sum_terms(info_nce_cosine(sphere_batch(raw))), 1e-12);
}

// Supervised losses reduce to their self-supervised forms whenever every
// pair has its own label: checked for every such labelling of 2N in {4,6,8}.
TEST(Reduction, SupervisedEqualsSelfSupervisedWhenOnlyPairsShareLabels) {
  Sampler g(9);
  double worst = 0;
  std::size_t labellings = 0;
  for (std::size_t n : {2u, 3u, 4u}) {
    const Tensor<double> raw({2 * n, 5}, g.gaussian(10 * n));
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    const auto ref_cos = info_nce_cosine(sphere_batch(raw)).terms();
    const auto ref_hyp = hcl_loss(ball_batch(raw)).terms();
    do {
      std::vector<int> labels;
      for (int y : ids) labels.insert(labels.end(), {y * 3 - 5, y * 3 - 5});
      auto sb = sphere_batch(raw);
      sb.labels = labels;
      auto hb = ball_batch(raw);
      hb.labels = labels;
      const auto cos = supcon_cosine(sb, positives_from_batch(sb)).terms();
      const auto hyp = shcl_loss(hb, positives_from_batch(hb)).terms();
      for (std::size_t i = 0; i < 2 * n; ++i) {
        worst = std::max(worst, std::abs(cos[i] - ref_cos[i]));
        worst = std::max(worst, std::abs(hyp[i] - ref_hyp[i]));
      }
      ++labellings;
    } while (std::next_permutation(ids.begin(), ids.end()));
  }
  EXPECT_EQ(labellings, 2u + 6u + 24u);
  EXPECT_LE(worst, 1e-12);
}

TEST(Equivariance, PermutingSourcesKeepsTotal) {
  Sampler g(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = g.index(2, 6), d = g.index(2, 8);
    const auto v = g.gaussian(2 * n * d);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g.engine());
    std::vector<double> pv;
    std::vector<int> labels, plabels;
    for (std::size_t k = 0; k < n; ++k) labels.insert(labels.end(), 2, int(k % 2));
    for (std::size_t k : perm) {
      pv.insert(pv.end(), v.begin() + long(2 * k * d), v.begin() + long(2 * (k + 1) * d));
      plabels.insert(plabels.end(), 2, labels[2 * k]);
    }
    const Tensor<double> a({2 * n, d}, v), b({2 * n, d}, pv);
    EXPECT_NEAR(hcl_loss(ball_batch(a)).value(), hcl_loss(ball_batch(b)).value(), 1e-10);
    EXPECT_NEAR(info_nce_cosine(sphere_batch(a)).value(), info_nce_cosine(sphere_batch(b)).value(), 1e-10);
    auto ha = ball_batch(a), hb = ball_batch(b);
    ha.labels = labels;
    hb.labels = plabels;
    EXPECT_NEAR(shcl_loss(ha, positives_from_batch(ha)).value(), shcl_loss(hb, positives_from_batch(hb)).value(), 1e-10);
  }
}

TEST(Temperature, UniformSimilarityIndependentOfTau) {
  for (double tau : {0.05, 0.1, 0.5, 1.0, 3.0}) {
    for (std::size_t rows : {4u, 8u}) {
      const auto raw = repeated_row(rows, {0.4, -0.2, 0.9, 0.1});
      for (double t : hcl_loss(ball_batch(raw, tau)).terms()) EXPECT_NEAR(t, std::log(double(rows) - 1), 1e-12);
      for (double t : info_nce_cosine(sphere_batch(raw, tau)).terms()) EXPECT_NEAR(t, std::log(double(rows) - 1), 1e-12);
    }
  }
}

TEST(Temperature, StableAtSmallTau) {
  Sampler g(11);
  const Tensor<double> raw({8, 4}, g.gaussian(32, 3.0));
  const auto r = hcl_loss(ball_batch(raw, 1e-3, {1.0, 1e-5, 0}));
  EXPECT_TRUE(std::isfinite(r.value()));
  for (double t : r.terms()) EXPECT_GE(t, -1e-12);
}

TEST(Gradients, AllFamiliesThroughProjection) {
  Sampler g(12);
  const Tensor<double> raw({8, 8}, g.gaussian(64));
  const std::vector<int> labels{0, 0, 1, 1, 0, 0, 1, 1};
  const BallConfig ball{0.1, 1e-5, 8};
  auto hcl = [&](const auto& t) { return hcl_loss(project_embeddings(t, EmbeddingSpace::poincare(ball), true, 0.5)).total; };
  auto nce = [&](const auto& t) { return info_nce_cosine(project_embeddings(t, EmbeddingSpace::cosine(), true, 0.5)).total; };
  auto sup = [&](const auto& t) {
    auto b = project_embeddings(t, EmbeddingSpace::cosine(), true, 0.5);
    return supcon_cosine(b, PositiveSet::from_labels(labels)).total;
  };
  auto shcl = [&](const auto& t) {
    auto b = project_embeddings(t, EmbeddingSpace::poincare(ball), true, 0.5);
    return shcl_loss(b, PositiveSet::from_labels(labels)).total;
  };
  EXPECT_LE(grad_check(hcl, raw, 1e-5), 1e-4);
  EXPECT_LE(grad_check(nce, raw, 1e-5), 1e-4);
  EXPECT_LE(grad_check(sup, raw, 1e-5), 1e-4);
  EXPECT_LE(grad_check(shcl, raw, 1e-5), 1e-4);
  // the extended-precision oracle agrees with the plain one on a smooth case
  EXPECT_LE(grad_check_extended(hcl, raw, 1e-6), 1e-4);
}

TEST(Gradients, PropertySuite) {
  for (const auto& r : loss_gradient_properties(100, 3)) {
    EXPECT_TRUE(r.passed()) << r.name << ": worst " << r.worst;
  }
}
