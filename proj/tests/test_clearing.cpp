#include "optclear/clearing.hpp"

#include "instances.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace {

using namespace optclear;
using optclear::testing::random_instance;

ClearingOptions light_options() {
  ClearingOptions o;
  o.threads = 1;
  o.random_starts = 1;
  o.max_iterations = 150;
  o.polish_iterations = 600;
  return o;
}

TEST(Smoothing, SurrogateErrorBounds) {
  for (double beta : {0.5, 5.0, 50.0}) {
    for (double x = -20.0; x <= 20.0; x += 0.173) {
      const double step = x >= 0.0 ? 1.0 : 0.0;
      EXPECT_LE(std::abs(smooth_indicator(x, beta) - step), std::exp(-beta * std::abs(x)) + 1e-15);
      // x sigma(beta x) - x^+ is -|x| sigma(-beta |x|), whose largest size is about 0.2785 / beta
      EXPECT_LE(std::abs(smooth_plus(x, beta) - std::max(x, 0.0)), 0.2785 / beta);
      EXPECT_LE(smooth_plus(x, beta), std::max(x, 0.0) + 1e-15);
    }
  }
  EXPECT_THROW(smooth_plus(1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(smooth_indicator(1.0, -1.0), std::invalid_argument);
  EXPECT_DOUBLE_EQ(sigmoid(-800.0), 0.0);
  EXPECT_DOUBLE_EQ(sigmoid(800.0), 1.0);
}

// Best |unit.d - target| over a fine grid of feasible three-seller allocations.
double brute_best(const std::vector<double>& cap, const std::vector<double>& unit, double demand, double target,
                  bool maximise) {
  double best = maximise ? -1e300 : 1e300;
  const int steps = 300;
  for (int i = 0; i <= steps; ++i) {
    const double d0 = cap[0] * i / steps;
    for (int j = 0; j <= steps; ++j) {
      const double d1 = cap[1] * j / steps;
      const double d2 = demand - d0 - d1;
      if (d2 < -1e-12 || d2 > cap[2] + 1e-12) continue;
      const double v = unit[0] * d0 + unit[1] * d1 + unit[2] * d2 - target;
      best = maximise ? std::max(best, v) : std::min(best, std::abs(v));
    }
  }
  return best;
}

TEST(Allocation, MatchesBruteForce) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    const std::vector<double> cap{1.0 + 4.0 * u(rng), 1.0 + 4.0 * u(rng), 1.0 + 4.0 * u(rng)};
    const std::vector<double> unit{10.0 * u(rng), 10.0 * u(rng), trial % 4 == 0 ? 0.0 : 10.0 * u(rng)};
    const double demand = (cap[0] + cap[1] + cap[2]) * u(rng);
    const double target = 40.0 * u(rng);
    for (auto tie : {AllocationTieBreak::proportional, AllocationTieBreak::lexicographic}) {
      const auto a = allocate_scenario(cap, unit, demand, target, AllocationObjective::min_abs_surplus, tie);
      double sum = 0.0;
      for (std::size_t g = 0; g < 3; ++g) {
        EXPECT_GE(a.delta[g], -1e-9);
        EXPECT_LE(a.delta[g], cap[g] + 1e-9);
        sum += a.delta[g];
      }
      EXPECT_NEAR(sum, demand, 1e-9);
      const double grid = brute_best(cap, unit, demand, target, false);
      EXPECT_LE(std::abs(a.surplus), grid + 1e-9);
      EXPECT_GE(std::abs(a.surplus), grid - 0.2);  // grid resolution
    }
    const auto hi = allocate_scenario(cap, unit, demand, target, AllocationObjective::max_surplus,
                                      AllocationTieBreak::proportional);
    EXPECT_GE(hi.surplus, brute_best(cap, unit, demand, target, true) - 1e-9);
  }
}

TEST(Allocation, ProportionalWhenIndifferent) {
  const std::vector<double> cap{1.0, 3.0}, unit{5.0, 5.0};
  const auto a = allocate_scenario(cap, unit, 2.0, 10.0, AllocationObjective::min_abs_surplus,
                                   AllocationTieBreak::proportional);
  EXPECT_NEAR(a.delta[0], 0.5, 1e-12);
  EXPECT_NEAR(a.delta[1], 1.5, 1e-12);
  EXPECT_NEAR(a.surplus, 0.0, 1e-12);
  const auto l = allocate_scenario(cap, unit, 2.0, 10.0, AllocationObjective::min_abs_surplus,
                                   AllocationTieBreak::lexicographic);
  EXPECT_NEAR(l.delta[0], 0.0, 1e-9);
  EXPECT_NEAR(l.delta[1], 2.0, 1e-9);
}

TEST(Allocation, SingleSellerTakesAllDemand) {
  const std::vector<double> cap{4.0}, unit{3.0};
  const auto a = allocate_scenario(cap, unit, 2.5, 100.0, AllocationObjective::min_abs_surplus,
                                   AllocationTieBreak::proportional);
  EXPECT_DOUBLE_EQ(a.delta[0], 2.5);
  EXPECT_DOUBLE_EQ(a.surplus, 7.5 - 100.0);
}

TEST(Allocation, ExcessDemandThrows) {
  const std::vector<double> cap{1.0, 1.0}, unit{1.0, 2.0};
  EXPECT_THROW(allocate_scenario(cap, unit, 2.5, 0.0, AllocationObjective::min_abs_surplus,
                                 AllocationTieBreak::proportional),
               InfeasibleError);
}

TEST(SmoothedObjective, GradientMatchesFiniteDifferences) {
  const auto inst = random_instance(21, 12);
  const auto scales = clearing_scales(inst.problem, {});
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto mode : {ClearingMode::social, ClearingMode::so, ClearingMode::selfish}) {
    SmoothedObjective f(inst.problem, mode, scales);
    f.set_penalty(1e3);
    Eigen::VectorXd lo, hi;
    f.bounds(lo, hi);
    for (int r = 0; r < 5; ++r) {
      Eigen::VectorXd x(lo.size());
      for (Eigen::Index j = 0; j < x.size(); ++j) x(j) = lo(j) + (hi(j) - lo(j)) * u(rng);
      Eigen::VectorXd g;
      f(x, &g);
      for (Eigen::Index j = 0; j < x.size(); ++j) {
        Eigen::VectorXd a = x, b = x;
        a(j) += 1e-5;
        b(j) -= 1e-5;
        const double fd = (f(a) - f(b)) / 2e-5;
        EXPECT_NEAR(g(j), fd, 1e-5 * std::max(1.0, g.cwiseAbs().maxCoeff())) << to_string(mode) << " " << j;
      }
    }
  }
}

TEST(Clearing, IterationCapZeroReturnsZeroTrade) {
  const auto inst = random_instance(2, 10);
  ClearingOptions o = light_options();
  o.max_iterations = 0;
  for (auto mode : {ClearingMode::social, ClearingMode::so, ClearingMode::selfish}) {
    const auto r = clear(inst.problem, mode, o);
    EXPECT_TRUE(r.diagnostics.fallback_used);
    EXPECT_TRUE(r.feasible);
    EXPECT_EQ(r.aggregate_delta, 0.0);
    for (const auto& t : r.trades) EXPECT_EQ(t.delta, 0.0);
  }
}

TEST(Clearing, RandomInstanceProperties) {
  for (std::uint64_t seed : {101u, 102u, 103u}) {
    const auto inst = random_instance(seed, 12);
    const auto scales = clearing_scales(inst.problem, {});
    for (auto mode : {ClearingMode::social, ClearingMode::so, ClearingMode::selfish}) {
      const auto r = clear(inst.problem, mode, light_options());
      ASSERT_TRUE(r.feasible);
      EXPECT_LE(r.diagnostics.volume_residual, 1e-6);
      for (std::size_t i = 0; i < r.trades.size(); ++i) {
        const auto& set = inst.problem.participants[i].set;
        EXPECT_TRUE(set.bounds.contains(r.trades[i]));
        EXPECT_TRUE(is_acceptable(set, r.trades[i], r.roles[i]));
      }
      if (mode == ClearingMode::selfish) {
        EXPECT_LE(std::abs(r.expected_ms), scales.ms_tol);
      } else {
        EXPECT_LE(r.aggregate_delta, 1e-8);
        for (double ms : r.ms) EXPECT_LE(std::abs(ms), scales.ms_tol);
      }
      if (mode == ClearingMode::so && r.aggregate_delta < 0.0) {
        double q = -1.0;
        for (std::size_t i = 0; i < r.trades.size(); ++i)
          if (r.trades[i].delta > 0.0) {
            if (q >= 0.0) {
              EXPECT_NEAR(r.trades[i].q, q, 1e-9);
            }
            q = r.trades[i].q;
          }
      }
    }
  }
}

TEST(Clearing, DeterministicAcrossThreadCounts) {
  const auto inst = random_instance(7, 10);
  ClearingOptions a = light_options();
  ClearingOptions b = a;
  b.threads = 3;
  b.random_starts = a.random_starts;
  const auto ra = clear(inst.problem, ClearingMode::social, a);
  const auto rb = clear(inst.problem, ClearingMode::social, b);
  for (std::size_t i = 0; i < ra.trades.size(); ++i) {
    EXPECT_EQ(ra.trades[i].q, rb.trades[i].q);
    EXPECT_EQ(ra.trades[i].K, rb.trades[i].K);
    EXPECT_EQ(ra.trades[i].delta, rb.trades[i].delta);
  }
}

TEST(Clearing, VolatilityDiagnosticMatchesVarianceChange) {
  const auto inst = random_instance(4, 15);
  const auto r = clear(inst.problem, ClearingMode::social, light_options());
  for (std::size_t i = 0; i < r.trades.size(); ++i) {
    const auto d = volatility_diagnostic(inst.problem, r, i);
    const double scale = 1.0 + r.var_before[i];
    EXPECT_NEAR(d.covariance, r.var_after[i] - r.var_before[i], 1e-8 * scale);
    EXPECT_NEAR(d.direct_delta, r.var_after[i] - r.var_before[i], 1e-8 * scale);
    EXPECT_EQ(d.reduces, d.covariance < 0.0);
  }
}

TEST(Clearing, EvaluateRejectsWrongTradeCount) {
  const auto inst = random_instance(5, 5);
  const auto scales = clearing_scales(inst.problem, {});
  EXPECT_THROW(evaluate_trades(inst.problem, ClearingMode::social, {}, scales, AllocationTieBreak::proportional),
               std::invalid_argument);
}

TEST(Clearing, UnbalancedVolumeIsInfeasible) {
  const auto inst = random_instance(5, 5);
  const auto scales = clearing_scales(inst.problem, {});
  std::vector<TradeTriple> t(inst.problem.participants.size());
  for (std::size_t i = 0; i < t.size(); ++i)
    if (inst.problem.participants[i].role == Role::buyer) t[i].delta = 1.0;
  const auto r = evaluate_trades(inst.problem, ClearingMode::social, t, scales, AllocationTieBreak::proportional);
  EXPECT_FALSE(r.feasible);
}

TEST(Clearing, ScalesFollowDefaults) {
  const auto inst = random_instance(6, 8);
  const auto s = clearing_scales(inst.problem, {});
  double lo = 1e300, hi = -1e300, dmax = 0.0;
  for (const auto& p : inst.problem.participants) {
    for (double v : p.set.price.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    dmax = std::max(dmax, p.set.bounds.delta_max);
  }
  EXPECT_NEAR(s.beta, 50.0 / (hi - lo), 1e-12);
  EXPECT_NEAR(s.ms_tol, 1e-4 * hi * dmax, 1e-12);
  const auto custom = clearing_scales(inst.problem, {2.0, 0.5, 1e-7});
  EXPECT_EQ(custom.beta, 2.0);
  EXPECT_EQ(custom.ms_tol, 0.5);
}

TEST(Clearing, FtrReportAddsPayoff) {
  const auto inst = random_instance(9, 10);
  const auto r = clear(inst.problem, ClearingMode::social, light_options());
  const FTRPosition pos{0, inst.network.bus_count() - 1, 5.0};
  const auto ftr = ftr_sample(inst.outcome, pos);
  std::vector<std::optional<RandomSample>> extra(inst.problem.participants.size());
  extra[0] = ftr;
  const auto rep = report_with_payoffs(inst.problem, r, extra);
  const RandomSample with(inst.scenarios, r.profit_after[0]);
  EXPECT_NEAR(rep.rows[0].var_after, variance(with + ftr), 1e-8 * (1.0 + rep.rows[0].var_after));
  EXPECT_NEAR(rep.rows[0].covariance, rep.rows[0].delta, 1e-8 * (1.0 + rep.rows[0].var_before));
  for (std::size_t i = 1; i < rep.rows.size(); ++i) EXPECT_EQ(rep.rows[i].var_after, r.var_after[i]);
  extra.pop_back();
  EXPECT_THROW(report_with_payoffs(inst.problem, r, extra), std::invalid_argument);
}

}  // namespace
