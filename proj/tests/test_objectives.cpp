#include "moon/objectives.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace moon;

namespace {

RowVector<double> row(std::initializer_list<double> v) {
  RowVector<double> r(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

MatrixD random_unit_rows(int n, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  MatrixD m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  m.rowwise().normalize();
  return m;
}

}  // namespace

TEST(InterLoss, EqualLogitsGiveLogTwo) {
  const auto q = row({1, 0}), p = row({0.6, 0.8});
  MatrixD n(1, 2);
  n << 0.6, -0.8;
  EXPECT_NEAR(inter_loss(q, p, n, 0.07), std::log(2.0), 1e-12);
}

TEST(InterLoss, UnitTemperatureExample) {
  const auto q = row({1, 0}), p = row({1, 0});
  MatrixD n(1, 2);
  n << 0, 1;
  EXPECT_NEAR(inter_loss(q, p, n, 1.0), std::log(1 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(inter_loss(q, p, n, 1.0), 0.3133, 1e-4);
}

TEST(InterLoss, EqualLogitNegatives) {
  const auto q = row({1, 0, 0});
  const auto p = row({0, 1, 0});
  const MatrixD n = MatrixD::Zero(7, 3).rowwise() + row({0, 0, 1});
  EXPECT_NEAR(inter_loss(q, p, n, 0.07), std::log(8.0), 1e-12);
}

TEST(InterLoss, RejectsBadInputs) {
  const auto q = row({1, 0});
  EXPECT_THROW(inter_loss(q, q, MatrixD(0, 2), 0.07), ValidationError);
  EXPECT_THROW(inter_loss<double>(q, q, MatrixD::Zero(1, 2), 0.0), ValidationError);
  EXPECT_THROW(inter_loss<double>(q, q, MatrixD::Zero(1, 2), -1.0), ValidationError);
}

TEST(IntraLoss, EqualLogitsGiveLogTwo) {
  const auto img = row({0, 1}), txt = row({1, 0});
  MatrixD u(1, 2);
  u << -1, 0;
  EXPECT_NEAR(intra_loss(img, txt, u, 0.07), std::log(2.0), 1e-12);
}

TEST(IntraLoss, SaturatesAtLargeGap) {
  const double tau = 0.07;
  const auto img = row({1, 0}), txt = row({1, 0});
  MatrixD u(1, 2);
  u << 1 - 20 * tau, 0;  // logit gap 20
  EXPECT_LT(intra_loss(img, txt, u, tau), 1e-3);
}

TEST(IntraLoss, HalfTemperatureExample) {
  const auto img = row({1, 0}), txt = row({0.9, 0});
  MatrixD u(1, 2);
  u << 0.1, 0;
  EXPECT_NEAR(intra_loss(img, txt, u, 0.5), -std::log(std::exp(1.8) / (std::exp(1.8) + std::exp(0.2))), 1e-12);
  EXPECT_NEAR(intra_loss(img, txt, u, 0.5), 0.1839, 1e-4);
}

TEST(ContrastiveLoss, NonNegativeAndShiftInvariant) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const MatrixD v = random_unit_rows(6, 8, rng);
    const double l = inter_loss<double>(v.row(0), v.row(1), v.bottomRows(4), 0.07);
    EXPECT_GE(l, 0.0);
    const double c = 3.7;
    const double pos = v.row(0).dot(v.row(1)) / 0.07;
    const Eigen::VectorXd neg = v.bottomRows(4) * v.row(0).transpose() / 0.07;
    auto lse_loss = [](double p, const Eigen::VectorXd& n) {
      const double mx = std::max(p, n.maxCoeff());
      return -(p - mx - std::log(std::exp(p - mx) + (n.array() - mx).exp().sum()));
    };
    EXPECT_NEAR(l, lse_loss(pos, neg), 1e-10);
    EXPECT_NEAR(lse_loss(pos + c, (neg.array() + c).matrix()), lse_loss(pos, neg), 1e-10);
  }
}

TEST(Reliability, MarginEqualOffsetIsHalf) {
  const auto q = row({1, 0}), p = row({0.5, 0}), n = row({0.2, 0});
  EXPECT_NEAR(reliability_weight(q, p, n, 10.0, 0.3), 0.5, 1e-12);
}

TEST(Reliability, UnitSharpness) {
  const auto q = row({1, 0}), p = row({1.2, 0}), n = row({0, 0});
  EXPECT_NEAR(reliability_weight(q, p, n, 1.0, 0.2), 1 / (1 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(reliability_weight(q, p, n, 1.0, 0.2), 0.7311, 1e-4);
}

TEST(Reliability, Saturates) {
  const auto q = row({1, 0}), p = row({1.0, 0}), n = row({0, 0});
  EXPECT_GT(reliability_weight(q, p, n, 10.0, 0.0), 0.999);
}

TEST(Reliability, MonotoneInMarginAndOffset) {
  const auto q = row({1, 0}), n = row({0.1, 0});
  double prev = 0;
  for (double m = -1; m <= 1; m += 0.05) {
    const double phi = reliability_weight(q, row({m, 0}), n, 10.0, 0.0);
    EXPECT_GT(phi, prev);
    prev = phi;
  }
  prev = 1;
  for (double d = -0.2; d <= 0.2; d += 0.01) {
    const double phi = reliability_weight(q, row({0.3, 0}), n, 10.0, d);
    EXPECT_LT(phi, prev);
    prev = phi;
  }
}

TEST(Reliability, ScheduleOverload) {
  FilterSchedule s;
  s.total_steps = 10;
  const auto q = row({1, 0}), p = row({0.4, 0}), n = row({0.1, 0});
  EXPECT_DOUBLE_EQ(reliability_weight(q, p, n, s, 5), reliability_weight(q, p, n, s.sharpness, 0.0));
}

TEST(FilterWeights, ThresholdRule) {
  const auto w = filter_weights({0.7, 0.5, 0.6, 0.1}, 0.6);
  ASSERT_EQ(w.size(), 4u);
  EXPECT_DOUBLE_EQ(w[0], 1.0);
  EXPECT_DOUBLE_EQ(w[1], 0.5);
  EXPECT_DOUBLE_EQ(w[2], 1.0);
  EXPECT_DOUBLE_EQ(w[3], 0.1);
}

TEST(FilterWeights, LoweringOffsetNeverLowersWeights) {
  std::mt19937_64 rng(2);
  FilterSchedule s;
  s.total_steps = 100;
  for (int trial = 0; trial < 30; ++trial) {
    const MatrixD v = random_unit_rows(3, 8, rng);
    double prev = 0;
    for (int step = 0; step <= 100; step += 10) {
      const double phi = reliability_weight<double>(v.row(0), v.row(1), v.row(2), s, step);
      const double w = filter_weights({phi}, s.delta_threshold)[0];
      EXPECT_GE(w, prev);
      prev = w;
    }
  }
}

TEST(Schedule, EndpointsAndMidpoint) {
  FilterSchedule s;
  EXPECT_DOUBLE_EQ(schedule_delta_bar(0, 100, s), 0.2);
  EXPECT_DOUBLE_EQ(schedule_delta_bar(100, 100, s), -0.2);
  EXPECT_NEAR(schedule_delta_bar(50, 100, s), 0.0, 1e-15);
  EXPECT_THROW(schedule_delta_bar(101, 100, s), ValidationError);
  EXPECT_THROW(schedule_delta_bar(-1, 100, s), ValidationError);
}

TEST(Schedule, Validation) {
  FilterSchedule s;
  s.delta_bar_start = -0.3;
  EXPECT_THROW(s.validate(), ConfigError);
  s = FilterSchedule{};
  s.sharpness = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = FilterSchedule{};
  s.delta_threshold = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(TotalLoss, RegularisersOff) {
  LossBreakdown b;
  b.losses = {0.1, 0.2, 0.3, 0.4, 0.5};
  b.active.fill(true);
  b.aux = 3;
  b.sparsity = 2;
  EXPECT_NEAR(total_loss(b, 0.0, 0.0), 1.5, 1e-12);
}

TEST(TotalLoss, RegularisersOnly) {
  LossBreakdown b;
  b.active.fill(true);
  b.aux = 1.0;
  b.sparsity = std::log(2.0);
  EXPECT_NEAR(total_loss(b, 0.01, 0.01), 0.01 + 0.006931, 1e-6);
}

TEST(TotalLoss, LinearInFilterWeights) {
  // Objective losses are means of multiplier * per-triplet loss.
  const std::vector<double> per_triplet{0.4, 1.3, 0.9};
  auto objective = [&](double m) {
    double s = 0;
    for (double l : per_triplet) s += m * l;
    return s / static_cast<double>(per_triplet.size());
  };
  LossBreakdown half, full;
  half.active.fill(true);
  full.active.fill(true);
  half.losses.fill(objective(0.5));
  full.losses.fill(objective(1.0));
  EXPECT_NEAR(total_loss(full, 0, 0), 2 * total_loss(half, 0, 0), 1e-12);
}

TEST(TotalLoss, NamesNonFinitePart) {
  LossBreakdown b;
  b.active.fill(true);
  b.losses[3] = std::nan("");
  try {
    total_loss(b, 0.01, 0.01);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("intra_pos"), std::string::npos);
  }
  b.losses[3] = 0;
  b.aux = INFINITY;
  EXPECT_THROW(total_loss(b, 0.01, 0.01), NumericError);
}

TEST(TapeContrastive, MatchesPerRowOracle) {
  std::mt19937_64 rng(3);
  const int b = 5, d = 6;
  const MatrixD a = random_unit_rows(b, d, rng), p = random_unit_rows(b, d, rng), n = random_unit_rows(b, d, rng);
  ad::Tape<double> t;
  const ad::Var rows = ad::contrastive_rows(t, t.constant(a), t.constant(p), t.constant(n), 0.07);
  for (int r = 0; r < b; ++r) {
    MatrixD negs(b, d);
    int k = 0;
    for (int j = 0; j < b; ++j)
      if (j != r) negs.row(k++) = p.row(j);
    negs.row(k) = n.row(r);
    EXPECT_NEAR(t.value(rows)(r, 0), inter_loss<double>(a.row(r), p.row(r), negs, 0.07), 1e-10);
  }
}

TEST(TapeReliability, MatchesValueLevel) {
  std::mt19937_64 rng(4);
  const MatrixD q = random_unit_rows(4, 5, rng), p = random_unit_rows(4, 5, rng), n = random_unit_rows(4, 5, rng);
  ad::Tape<double> t;
  const ad::Var phi = ad::reliability_rows(t, t.constant(q), t.constant(p), t.constant(n), 10.0, 0.1);
  for (int r = 0; r < 4; ++r)
    EXPECT_NEAR(t.value(phi)(r, 0), reliability_weight<double>(q.row(r), p.row(r), n.row(r), 10.0, 0.1), 1e-12);
}

TEST(LossAtInit, RandomEmbeddingsNearLogB) {
  // Random unit embeddings: logits concentrate near zero when D is large relative to 1/tau^2.
  std::mt19937_64 rng(5);
  const int b = 32, d = 2048;
  double sum = 0;
  const int trials = 10;
  for (int trial = 0; trial < trials; ++trial) {
    ad::Tape<double> t;
    const ad::Var rows = ad::contrastive_rows(t, t.constant(random_unit_rows(b, d, rng)),
                                              t.constant(random_unit_rows(b, d, rng)),
                                              t.constant(random_unit_rows(b, d, rng)), 0.07);
    sum += t.value(rows).mean();
  }
  EXPECT_NEAR(sum / trials, std::log(static_cast<double>(b)), 0.15 * std::log(static_cast<double>(b)));
}
