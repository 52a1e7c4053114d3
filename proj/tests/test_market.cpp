#include "optclear/market.hpp"

#include "instances.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace {

using namespace optclear;

ScenarioSet demand_scenarios(const std::vector<std::vector<double>>& demand) {
  std::vector<Scenario> s(demand.size());
  for (std::size_t k = 0; k < demand.size(); ++k) s[k].demand_mw = demand[k];
  return ScenarioSet(std::move(s), std::vector<double>(demand.size(), 1.0 / static_cast<double>(demand.size())));
}

// Single bus: base load B (offer 1, no ramp, true cost eps), peaker P (offer
// 1/rho, true cost 1), wind W, demand d.
TEST(Market, CopperplateMatchesHandSolution) {
  const double mu = 10.0, sigma = 1.0, rho = std::sqrt(3.0) / 20.0, eps = 0.5, d = 20.0;
  const std::size_t n = 40;
  const auto s = make_uniform_grid(mu, sigma, n);
  std::vector<Participant> parts{
      {"B", ParticipantKind::dispatchable, 0, {0.0, 1.0}, {0.0, eps}, kUnboundedMW, 0.0, 0, 0.0},
      {"P", ParticipantKind::dispatchable, 0, {0.0, 1.0 / rho}, {0.0, 1.0}, kUnboundedMW, kUnboundedMW, 0, 0.0},
      {"W", ParticipantKind::variable, 0, {}, {}, mu + std::sqrt(3.0) * sigma, kUnboundedMW, 0, 0.0},
      {"D", ParticipantKind::consumer, 0, {}, {}, 0.0, 0.0, 0, d}};
  const auto out = solve_market(NetworkModel{}, parts, s, 2);
  ASSERT_TRUE(out.all_feasible());
  EXPECT_NEAR(out.forward.dispatch[0], d - mu, 1e-7);
  EXPECT_NEAR(out.forward.dispatch[1], 0.0, 1e-7);
  EXPECT_NEAR(out.forward.dispatch[2], mu, 1e-7);
  EXPECT_NEAR(out.forward.prices[0], 1.0, 1e-7);
  for (std::size_t k = 0; k < n; ++k) {
    const double w = s[k].wind_mw[0];
    const double gap = std::max(mu - w, 0.0);
    const double price = w < mu ? 1.0 / rho : 0.0;
    EXPECT_NEAR(out.realtime[k].prices[0], price, 1e-7);
    EXPECT_NEAR(out.realtime[k].dispatch[1], gap, 1e-7);
    EXPECT_NEAR(out.profits[0][k], (d - mu) * (1.0 - eps), 1e-6);
    EXPECT_NEAR(out.profits[1][k], gap * (1.0 / rho - 1.0), 1e-6);
    EXPECT_NEAR(out.profits[2][k], mu - gap / rho, 1e-6);
  }
}

TEST(Market, SingleScenarioHasNoDeviation) {
  const auto s = make_uniform_grid(10.0, 1.0, 1);
  std::vector<Participant> parts{
      {"G", ParticipantKind::dispatchable, 0, {0.02, 5.0}, {0.0, 3.0}, 100.0, 4.0, 0, 0.0},
      {"W", ParticipantKind::variable, 0, {}, {}, 20.0, kUnboundedMW, 0, 0.0},
      {"D", ParticipantKind::consumer, 0, {}, {}, 0.0, 0.0, 0, 30.0}};
  const auto out = solve_market(NetworkModel{}, parts, s, 1);
  ASSERT_TRUE(out.all_feasible());
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(out.realtime[0].dispatch[i], out.forward.dispatch[i], 1e-7);
  const double X = out.forward.dispatch[0];
  EXPECT_NEAR(X, 20.0, 1e-7);
  EXPECT_NEAR(out.profits[0][0], out.forward.prices[0] * X - 3.0 * X, 1e-6);
}

TEST(Market, TwoBusCongestionPrices) {
  const auto net = NetworkModel::from_reactances(2, {{0, 1, 20.0, 0.1}}, 0);
  std::vector<Participant> parts{
      {"cheap", ParticipantKind::dispatchable, 0, {0.0, 10.0}, {0.0, 10.0}, kUnboundedMW, kUnboundedMW, 0, 0.0},
      {"dear", ParticipantKind::dispatchable, 1, {0.0, 30.0}, {0.0, 30.0}, kUnboundedMW, kUnboundedMW, 0, 0.0},
      {"load", ParticipantKind::consumer, 1, {}, {}, 0.0, 0.0, 0, 50.0}};
  const auto s = demand_scenarios({{0.0, 50.0}});
  const auto out = solve_market(net, parts, s, 1);
  ASSERT_TRUE(out.all_feasible());
  EXPECT_NEAR(out.forward.prices[0], 10.0, 1e-7);
  EXPECT_NEAR(out.forward.prices[1], 30.0, 1e-7);
  EXPECT_NEAR(out.forward.dispatch[0], 20.0, 1e-7);
  EXPECT_NEAR(out.forward.dispatch[1], 30.0, 1e-7);
  // congestion rent (30 - 10) x 20
  EXPECT_NEAR(out.forward.prices[1] * 50.0 - 10.0 * 20.0 - 30.0 * 30.0, 400.0, 1e-5);
}

TEST(Market, RampsLimitRealtimeMoves) {
  std::vector<Participant> parts{
      {"A", ParticipantKind::dispatchable, 0, {0.0, 10.0}, {0.0, 8.0}, 100.0, 5.0, 0, 0.0},
      {"B", ParticipantKind::dispatchable, 0, {0.0, 50.0}, {0.0, 40.0}, kUnboundedMW, kUnboundedMW, 0, 0.0},
      {"W", ParticipantKind::variable, 0, {}, {}, 10.0, kUnboundedMW, 0, 0.0}};
  std::vector<Scenario> sc(2);
  sc[0].wind_mw = {10.0};
  sc[0].demand_mw = {52.0};
  sc[1].wind_mw = {10.0};
  sc[1].demand_mw = {38.0};
  const ScenarioSet s(sc, {0.5, 0.5});
  const auto out = solve_market(NetworkModel{}, parts, s, 1);
  EXPECT_NEAR(out.forward.dispatch[0], 35.0, 1e-7);
  ASSERT_TRUE(out.all_feasible());
  // up: A capped at 40, peaker sets the price
  EXPECT_NEAR(out.realtime[0].dispatch[0], 40.0, 1e-7);
  EXPECT_NEAR(out.realtime[0].dispatch[1], 2.0, 1e-7);
  EXPECT_NEAR(out.realtime[0].prices[0], 50.0, 1e-7);
  // down: A floored at 30, wind spills
  EXPECT_NEAR(out.realtime[1].dispatch[0], 30.0, 1e-7);
  EXPECT_NEAR(out.realtime[1].dispatch[2], 8.0, 1e-7);
  EXPECT_NEAR(out.realtime[1].prices[0], 0.0, 1e-7);
}

TEST(Market, RampInfeasibilityIsReported) {
  std::vector<Participant> parts{
      {"A", ParticipantKind::dispatchable, 0, {0.0, 10.0}, {0.0, 8.0}, 100.0, 5.0, 0, 0.0}};
  const auto s = demand_scenarios({{50.0}, {30.0}});
  const auto out = solve_market(NetworkModel{}, parts, s, 1);
  EXPECT_FALSE(out.all_feasible());
  EXPECT_TRUE(out.profits.empty());
  EXPECT_THROW(compute_profits(NetworkModel{}, parts, out), InfeasibleError);
}

TEST(Market, ForwardInfeasibleThrows) {
  std::vector<Participant> parts{
      {"A", ParticipantKind::dispatchable, 0, {0.0, 10.0}, {0.0, 8.0}, 10.0, kUnboundedMW, 0, 0.0},
      {"D", ParticipantKind::consumer, 0, {}, {}, 0.0, 0.0, 0, 30.0}};
  const auto s = make_uniform_grid(10.0, 1.0, 2);
  EXPECT_THROW(solve_market(NetworkModel{}, parts, s, 1), InfeasibleError);
}

TEST(Market, Validation) {
  const auto s = make_uniform_grid(10.0, 1.0, 2);
  std::vector<Participant> parts{{"A", ParticipantKind::dispatchable, 3, {}, {}, 10.0, 1.0, 0, 0.0}};
  EXPECT_THROW(solve_forward(NetworkModel{}, parts, s), std::invalid_argument);
  parts = {{"W", ParticipantKind::variable, 0, {}, {}, 5.0, 1.0, 0, 0.0}};
  EXPECT_THROW(solve_forward(NetworkModel{}, parts, s), std::invalid_argument);
  parts = {{"W", ParticipantKind::variable, 0, {}, {}, 50.0, 1.0, 4, 0.0}};
  EXPECT_THROW(solve_forward(NetworkModel{}, parts, s), std::invalid_argument);
  parts = {{"A", ParticipantKind::dispatchable, 0, {-1.0, 0.0}, {}, 10.0, 1.0, 0, 0.0}};
  EXPECT_THROW(solve_forward(NetworkModel{}, parts, s), std::invalid_argument);
}

TEST(Market, RandomInstancesBalanceAndCollectRent) {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const auto inst = optclear::testing::random_instance(seed, 10);
    const auto& out = inst.outcome;
    ASSERT_TRUE(out.all_feasible());
    for (const auto& rt : out.realtime) {
      std::vector<double> y(inst.network.bus_count(), 0.0);
      std::vector<double> d(inst.network.bus_count(), 0.0);
      for (std::size_t i = 0; i < inst.participants.size(); ++i) {
        const auto& p = inst.participants[i];
        if (p.kind == ParticipantKind::consumer) d[p.bus] += p.demand_mw;
        else y[p.bus] += rt.dispatch[i];
      }
      double rent = 0.0;
      for (std::size_t b = 0; b < y.size(); ++b) {
        y[b] -= d[b];
        rent -= rt.prices[b] * y[b];
      }
      EXPECT_TRUE(injection_feasible(y, inst.network, 1e-6));
      EXPECT_GE(rent, -1e-6);
      EXPECT_LT(rt.kkt_residual, 1e-7);
    }
  }
}

TEST(Market, ThreadCountDoesNotChangeResults) {
  const auto inst = optclear::testing::random_instance(3, 12);
  const auto again = solve_market(inst.network, inst.participants, inst.scenarios, 4);
  for (std::size_t i = 0; i < inst.participants.size(); ++i)
    for (std::size_t k = 0; k < inst.scenarios.size(); ++k)
      EXPECT_EQ(inst.outcome.profits[i][k], again.profits[i][k]);
}

TEST(Market, MultiPeriodAggregate) {
  const auto s = make_uniform_grid(10.0, 1.0, 2);
  const RandomSample a(s, {1.0, 3.0}), b(s, {5.0, 7.0});
  const auto agg = multi_period_aggregate({{a, b}}, {{a, b}});
  EXPECT_DOUBLE_EQ(agg.average_price[0][0], 3.0);
  EXPECT_DOUBLE_EQ(agg.total_profit[0][1], 10.0);
  EXPECT_THROW(multi_period_aggregate({{a}, {a, b}}, {{a}, {a}}), std::invalid_argument);
}

}  // namespace
