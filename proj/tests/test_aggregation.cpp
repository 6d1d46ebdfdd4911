#include "support.hpp"

#include <gtest/gtest.h>

using namespace vladbuff;
using testing_support::gaussian;
using testing_support::random_model;
using testing_support::reference_aggregate;
using testing_support::reference_model;
using testing_support::to_rows;

namespace {

Vocabulary vocab_from(const RowMatrix& c) {
  Vocabulary v;
  v.centroids = c;
  return v;
}

}  // namespace

TEST(InitAssignment, Formula) {
  RowMatrix c(2, 2);
  c << 1, 0, 0, 1;
  const auto p = init_assignment_from_vocab(vocab_from(c), 1.0);
  EXPECT_EQ(p.weights, RowMatrix(2.0 * c));
  EXPECT_DOUBLE_EQ(p.biases[0], -1.0);
  EXPECT_DOUBLE_EQ(p.biases[1], -1.0);
  EXPECT_THROW(init_assignment_from_vocab(vocab_from(c), 0.0), ConfigError);
  EXPECT_THROW(init_assignment_from_vocab(vocab_from(c), -2.0), ConfigError);
}

TEST(InitAssignment, ArgmaxMatchesHardAssignmentForAnyScale) {
  CounterRng rng(1);
  const auto v = vocab_from(l2_normalize_rows(gaussian(rng, 8, 6)));
  const RowMatrix x = l2_normalize_rows(gaussian(rng, 100, 6));
  const auto hard = assign_hard(x, v);
  for (double s : {0.01, 1.0, 100.0, 1e4}) {
    const RowMatrix alpha = soft_assign(x, init_assignment_from_vocab(v, s));
    for (Index i = 0; i < x.rows(); ++i) {
      Index arg = 0;
      alpha.row(i).maxCoeff(&arg);
      EXPECT_EQ(arg, hard[static_cast<std::size_t>(i)]) << "s=" << s;
    }
  }
}

TEST(SoftAssign, UniformWhenParametersAreZero) {
  AssignmentParams p{RowMatrix::Zero(5, 3), Vector::Zero(5), 1.0};
  CounterRng rng(2);
  const RowMatrix alpha = soft_assign(l2_normalize_rows(gaussian(rng, 4, 3)), p);
  EXPECT_LT((alpha.array() - 0.2).abs().maxCoeff(), 1e-15);
}

TEST(SoftAssign, RowsSumToOneAndShapeChecked) {
  CounterRng rng(3);
  AssignmentParams p{gaussian(rng, 6, 4, 30.0), gaussian(rng, 6, 1).col(0), 1.0};
  const RowMatrix alpha = soft_assign(l2_normalize_rows(gaussian(rng, 50, 4)), p);
  for (Index i = 0; i < alpha.rows(); ++i) EXPECT_NEAR(alpha.row(i).sum(), 1.0, 1e-9);
  EXPECT_THROW(soft_assign(RowMatrix::Ones(2, 5), p), ShapeError);
}

TEST(SoftAssign, HandLogits) {
  RowMatrix logits(3, 2);
  logits << 1, 0, 0, 1, 2, 2;
  const RowMatrix got = softmax_rows(logits);
  for (Index i = 0; i < 3; ++i) {
    const double z = std::exp(logits(i, 0)) + std::exp(logits(i, 1));
    for (Index k = 0; k < 2; ++k) EXPECT_NEAR(got(i, k), std::exp(logits(i, k)) / z, 1e-12);
  }
  // Identity weights on e1, e2 reproduce the first two rows; the third
  // feature ties.
  RowMatrix x(3, 2);
  x << 1, 0, 0, 1, std::sqrt(0.5), std::sqrt(0.5);
  AssignmentParams p{RowMatrix::Identity(2, 2), Vector::Zero(2), 1.0};
  const RowMatrix alpha = soft_assign(x, p);
  EXPECT_NEAR(alpha(0, 0), got(0, 0), 1e-12);
  EXPECT_NEAR(alpha(1, 1), got(1, 1), 1e-12);
  EXPECT_NEAR(alpha(2, 0), 0.5, 1e-12);
}

TEST(SoftAssign, LargeLogitsStayFinite) {
  AssignmentParams p{RowMatrix::Zero(2, 1), Vector(2), 1.0};
  p.biases << 1000.0, -1000.0;
  const RowMatrix alpha = soft_assign(RowMatrix::Ones(1, 1), p);
  EXPECT_DOUBLE_EQ(alpha(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(alpha(0, 1), 0.0);
}

TEST(SoftCount, HalfWhenParametersAreZero) {
  CounterRng rng(4);
  for (Index n : {1, 3, 17}) {
    const Vector w = soft_count(l2_normalize_rows(gaussian(rng, n, 5)), BurstParams{0.0, 0.0, 1.0, true});
    EXPECT_LT((w.array() - 0.5 * static_cast<double>(n)).abs().maxCoeff(), 1e-12);
  }
}

TEST(SoftCount, HandValues) {
  RowMatrix x(3, 2);
  x << 1, 0, 1, 0, 0, 1;
  const Vector w = soft_count(LocalFeatureSet{"h", x, true}, BurstParams{4.0, -2.0, 1.0, true});
  const double s2 = 1.0 / (1.0 + std::exp(-2.0)), sm2 = 1.0 / (1.0 + std::exp(2.0));
  EXPECT_NEAR(w[0], 2 * s2 + sm2, 1e-15);
  EXPECT_NEAR(w[0], 1.8808, 5e-5);
  EXPECT_NEAR(w[1], 1.8808, 5e-5);
  EXPECT_NEAR(w[2], 1.1192, 5e-5);
}

TEST(SoftCount, SingleFeatureIsSelfTerm) {
  RowMatrix x(1, 3);
  x << 0, 0.6, 0.8;
  const Vector w = soft_count(x, BurstParams{3.0, -1.0, 1.0, true});
  EXPECT_NEAR(w[0], 1.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(SoftCount, RequiresUnitRows) {
  RowMatrix x(2, 2);
  x << 3, 4, 1, 0;
  EXPECT_THROW(soft_count(x, BurstParams{}), ContractError);
}

TEST(SoftCount, BoundsAndMonotoneInOffset) {
  CounterRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.below(20));
    const RowMatrix u = l2_normalize_rows(gaussian(rng, n, 4));
    const double a = 0.5 + 10 * rng.uniform(), b = -5 + 5 * rng.uniform();
    const Vector w = soft_count(u, {a, b, 1.0, true});
    const Vector w_up = soft_count(u, {a, b + 0.25, 1.0, true});
    const double lo = static_cast<double>(n) / (1.0 + std::exp(-(b - a)));
    const double hi = static_cast<double>(n) / (1.0 + std::exp(-(b + a)));
    for (Index i = 0; i < n; ++i) {
      EXPECT_GT(w[i], lo);
      EXPECT_LT(w[i], hi);
      EXPECT_LE(w[i], static_cast<double>(n));
      EXPECT_GT(w_up[i], w[i]);
    }
  }
}

TEST(Aggregate, IncreasingOffsetLowersPerFeatureWeights) {
  CounterRng rng(6);
  auto m = random_model(rng, 5, 3, true);
  const LocalFeatureSet x{"x", gaussian(rng, 12, 5), false};
  const RowMatrix before = feature_weights(x, m);
  m.burst.b += 0.5;
  const RowMatrix after = feature_weights(x, m);
  EXPECT_TRUE(((after - before).array() <= 0.0).all());
}

TEST(Aggregate, MatchesStraightLineOracle) {
  // N=4, D=3, C=2 hand-built case.
  RowMatrix x(4, 3);
  x << 1, 0.2, 0, 0.9, 0.1, 0.1, 0, 1, 0.3, -0.2, 0.4, 1;
  AggregationModel m;
  m.vocabulary.centroids.resize(2, 3);
  m.vocabulary.centroids << 0.8, 0.1, 0.1, 0, 0.7, 0.5;
  m.assignment = init_assignment_from_vocab(m.vocabulary, 3.0);
  m.burst = {4.0, -2.0, 0.8, true};
  refresh_fingerprint(m);
  const auto got = aggregate(x, m);
  const auto want = reference_aggregate(to_rows(x), reference_model(m));
  ASSERT_EQ(got.vector.size(), 6);
  for (Index i = 0; i < 6; ++i) EXPECT_NEAR(got.vector[i], want[static_cast<std::size_t>(i)], 1e-10);
  EXPECT_EQ(got.config_hash, m.config_hash);
}

TEST(Aggregate, MatchesOracleOnRandomModels) {
  CounterRng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(30));
    const Index d = 2 + static_cast<Index>(rng.below(8));
    const Index c = 2 + static_cast<Index>(rng.below(5));
    const Index dp = trial % 2 ? 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(d))) : 0;
    const auto m = random_model(rng, d, c, trial % 3 != 0, dp);
    const RowMatrix x = gaussian(rng, n, d);
    const auto got = aggregate(x, m).vector;
    const auto want = reference_aggregate(to_rows(x), reference_model(m));
    for (Index i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[static_cast<std::size_t>(i)], 1e-10);
  }
}

TEST(Aggregate, BurstDisabledEqualsZeroExponent) {
  CounterRng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    auto m = random_model(rng, 6, 4, true);
    const RowMatrix x = gaussian(rng, 1 + static_cast<Index>(rng.below(40)), 6);
    m.burst.p = 0.0;
    const Vector with_p0 = aggregate(x, m).vector;
    m.burst.enabled = false;
    const Vector vanilla = aggregate(x, m).vector;
    EXPECT_LE((with_p0 - vanilla).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Aggregate, PermutationInvariant) {
  CounterRng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = random_model(rng, 5, 3, true, trial % 2 ? 3 : 0);
    const RowMatrix x = gaussian(rng, 25, 5);
    const auto perm = rng.permutation(25);
    RowMatrix shuffled(25, 5);
    for (Index i = 0; i < 25; ++i) shuffled.row(i) = x.row(static_cast<Index>(perm[i]));
    EXPECT_LE((aggregate(x, m).vector - aggregate(shuffled, m).vector).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Aggregate, OutputLengthAndUnitNorm) {
  CounterRng rng(10);
  const auto m = random_model(rng, 7, 5, true, 3);
  const auto d = aggregate(gaussian(rng, 11, 7), m);
  EXPECT_EQ(d.vector.size(), 15);
  EXPECT_NEAR(d.vector.norm(), 1.0, 1e-12);
  EXPECT_THROW(aggregate(gaussian(rng, 3, 6), m), ShapeError);
}

TEST(Aggregate, FeatureOnCentroidLeavesZeroBlock) {
  RowMatrix c(2, 2);
  c << 1, 0, 0, 1;
  auto m = make_model(vocab_from(c), 10.0, BurstParams{});
  RowMatrix x(1, 2);
  x << 1, 0;
  const auto blocks = aggregate_blocks({"x", x, false}, m);
  EXPECT_TRUE(blocks.row(0).isZero(0.0));
  const auto d = aggregate(x, m);
  EXPECT_NEAR(d.vector.norm(), 1.0, 1e-12);
  // The other cluster carries (x - c_1) direction, normalized.
  EXPECT_NEAR(d.vector[2], std::sqrt(0.5), 1e-9);
  EXPECT_NEAR(d.vector[3], -std::sqrt(0.5), 1e-9);
}

TEST(Aggregate, AllBlocksZeroIsDegenerate) {
  RowMatrix c(2, 2);
  c << 1, 0, 1, 0.5;
  AggregationModel m;
  m.vocabulary.centroids = c;
  // Assignment pinned to cluster 0 regardless of input.
  m.assignment = {RowMatrix::Zero(2, 2), Vector(2), 1.0};
  m.assignment.biases << 0.0, -1e6;
  m.burst.enabled = false;
  refresh_fingerprint(m);
  RowMatrix x(2, 2);
  x << 1, 0, 1, 0;
  EXPECT_THROW(aggregate(x, m), DegenerateError);
}

TEST(Aggregate, WhiteningIsAppliedLast) {
  CounterRng rng(11);
  auto m = random_model(rng, 4, 3, true);
  RowMatrix descs(40, 12);
  for (Index i = 0; i < 40; ++i) descs.row(i) = aggregate(gaussian(rng, 8, 4), m).vector.transpose();
  m.whitening = fit_whitening(descs, 5);
  refresh_fingerprint(m);
  const RowMatrix x = gaussian(rng, 8, 4);
  const auto d = aggregate(x, m);
  EXPECT_EQ(d.vector.size(), 5);
  AggregationModel plain = m;
  plain.whitening.reset();
  const auto expect = apply_whitening(aggregate(x, plain), *m.whitening);
  EXPECT_EQ(d.vector, expect.vector);
}

TEST(BurstSuppression, DuplicatesCountOnceInSaturatedRegime) {
  // One duplicated unit feature orthogonal to the rest; hard assignment to a
  // dedicated cluster so the cluster sum holds only the duplicates.
  const Index d = 6;
  RowMatrix c = RowMatrix::Zero(3, d);
  c(0, 0) = 0.5;
  c(1, 1) = 0.5;
  c(2, 2) = 0.5;
  for (double p : {1.0, 0.0}) {
    auto m = make_model(vocab_from(c), 1e3, BurstParams{50.0, -25.0, p, true});
    ForwardCache fc;
    Vector single;
    for (int k : {1, 2, 4, 8}) {
      RowMatrix x = RowMatrix::Zero(k + 2, d);
      for (int i = 0; i < k; ++i) x(i, 0) = 1.0;
      x(k, 1) = 1.0;
      x(k + 1, 2) = 1.0;
      forward(x, m, fc);
      const Vector contrib = fc.blocks.row(0).transpose();
      if (k == 1) {
        single = contrib;
        continue;
      }
      const double ratio = contrib.norm() / single.norm();
      if (p == 1.0)
        EXPECT_NEAR(ratio, 1.0, 0.01) << "k=" << k;
      else
        EXPECT_NEAR(ratio, static_cast<double>(k), 0.05 * k) << "k=" << k;
    }
  }
}

TEST(ClusterMargins, HandCases) {
  RowMatrix q(3, 2), p(3, 2), n(3, 2);
  q << 1, 0, 0, 1, 0.6, 0.8;
  p << 1, 0, 1, 0, 0.6, 0.8;
  n << 0, 1, 0, 1, -0.6, -0.8;
  const auto r = cluster_margin_analysis(q, p, n);
  EXPECT_NEAR(r.margins[0], std::sqrt(2.0) - 0.0, 1e-12);
  EXPECT_NEAR(r.margins[1], 0.0 - std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(r.margins[2], 2.0, 1e-12);
  EXPECT_EQ(r.rank, (std::vector<Index>{1, 2, 0}));

  const auto same = cluster_margin_analysis(q, q, n);
  for (Index k = 0; k < 3; ++k) EXPECT_NEAR(same.margins[k], (q.row(k) - n.row(k)).norm(), 1e-15);
  const auto zero = cluster_margin_analysis(q, p, p);
  EXPECT_TRUE(zero.margins.isZero(0.0));
  EXPECT_THROW(cluster_margin_analysis(q, p, RowMatrix::Zero(2, 2)), ShapeError);
}

TEST(ClusterMargins, MostChangedCluster) {
  MarginAnalysis base{Vector::Zero(4), {0, 3, 1, 2}};
  MarginAnalysis cand{Vector::Zero(4), {3, 0, 1, 2}};
  EXPECT_EQ(most_changed_cluster(base, cand), 1);
  EXPECT_EQ(most_changed_cluster(base, base), 0);
}

TEST(Model, FingerprintTracksParameters) {
  CounterRng rng(12);
  auto m = random_model(rng, 4, 3, true);
  const std::string h = m.config_hash;
  EXPECT_EQ(model_fingerprint(m), h);
  m.burst.p += 1e-12;
  EXPECT_NE(model_fingerprint(m), h);
  m.burst.p -= 1e-12;
  m.burst.enabled = false;
  EXPECT_NE(model_fingerprint(m), h);
}

TEST(Model, Validation) {
  CounterRng rng(13);
  auto m = random_model(rng, 4, 3, true, 2);
  EXPECT_NO_THROW(validate_model(m));
  auto bad = m;
  bad.assignment.weights = RowMatrix::Zero(3, 3);
  EXPECT_THROW(validate_model(bad), ShapeError);
  bad = m;
  bad.prepool->rotation = RowMatrix::Zero(4, 3);
  EXPECT_THROW(validate_model(bad), ShapeError);
  bad = m;
  bad.burst.a = -100;
  bad.burst.b = -100;
  EXPECT_THROW(validate_model(bad), ConfigError);
}
