#include "optclear/options.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace {

using namespace optclear;

struct Fixture {
  ScenarioSet s = make_uniform_grid(10.0, 1.0, 8);
  RandomSample pi{s, {3.0, -1.0, 4.0, 1.0, -5.0, 9.0, 2.0, 6.0}};
  RandomSample price{s, {20.0, 35.0, 10.0, 50.0, 0.0, 42.0, 25.0, 30.0}};

  AcceptabilitySet set(AcceptabilityMode mode, double alpha = 0.0) const {
    return {TradeBounds{100.0, 100.0, 10.0}, mode, alpha, pi, price};
  }
  double mean_payoff(double K) const {
    double m = 0.0;
    for (std::size_t k = 0; k < price.size(); ++k) m += std::max(price[k] - K, 0.0) / 8.0;
    return m;
  }
};

TEST(Options, Payoff) {
  EXPECT_DOUBLE_EQ(option_payoff(30.0, 25.0), 5.0);
  EXPECT_DOUBLE_EQ(option_payoff(20.0, 25.0), 0.0);
  EXPECT_DOUBLE_EQ(option_payoff(25.0, 25.0), 0.0);
}

TEST(Options, ProfitsSettleOnVolume) {
  Fixture f;
  const TradeTriple t{2.0, 28.0, 3.0};
  const auto b = buyer_profit(f.pi, t, f.price);
  const auto w = seller_profit_worst_case(f.pi, t, f.price);
  const RandomSample half = RandomSample::constant(f.s, 1.5);
  const auto part = seller_profit(f.pi, t, f.price, half);
  for (std::size_t k = 0; k < 8; ++k) {
    const double pay = std::max(f.price[k] - 28.0, 0.0);
    EXPECT_DOUBLE_EQ(b[k], f.pi[k] - 6.0 + 3.0 * pay);
    EXPECT_DOUBLE_EQ(w[k], f.pi[k] + 6.0 - 3.0 * pay);
    EXPECT_DOUBLE_EQ(part[k], f.pi[k] + 6.0 - 1.5 * pay);
  }
  EXPECT_THROW(seller_profit(f.pi, t, f.price, RandomSample::constant(f.s, 3.5)), std::invalid_argument);
}

TEST(Options, MerchandisingSurplusByHand) {
  const std::vector<TradeTriple> buys{{2.0, 30.0, 4.0}, {1.0, 10.0, 1.0}};
  const std::vector<TradeTriple> sells{{1.5, 25.0, 3.0}, {3.0, 40.0, 2.0}};
  const std::vector<double> bp{35.0, 5.0}, sp{34.0, 45.0}, ex{3.0, 2.0};
  // fees 8 + 1 - 4.5 - 6, buyer payoffs 20 + 0, seller payoffs 27 + 10
  EXPECT_DOUBLE_EQ(merchandising_surplus(buys, bp, sells, sp, ex), -1.5 - 20.0 + 37.0);
  EXPECT_THROW(merchandising_surplus(buys, bp, sells, sp, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Options, RiskNeutralFeeBoundIsExpectedPayoff) {
  Fixture f;
  const auto set = f.set(AcceptabilityMode::risk_neutral);
  for (double K : {0.0, 12.0, 27.5, 45.0, 60.0}) {
    EXPECT_NEAR(*acceptable_fee_bound(set, K, 2.0, Role::buyer), f.mean_payoff(K), 1e-12);
    EXPECT_NEAR(*acceptable_fee_bound(set, K, 2.0, Role::seller), f.mean_payoff(K), 1e-12);
  }
  EXPECT_FALSE(acceptable_fee_bound(set, 20.0, 0.0, Role::buyer));
  EXPECT_FALSE(acceptable_fee_bound(f.set(AcceptabilityMode::box_only), 20.0, 1.0, Role::buyer));
}

TEST(Options, FeeBoundSeparatesAcceptableFees) {
  Fixture f;
  for (double alpha : {0.0, 0.3, 0.75}) {
    const auto set = f.set(alpha == 0.0 ? AcceptabilityMode::risk_neutral : AcceptabilityMode::cvar, alpha);
    for (double K : {5.0, 22.0, 38.0}) {
      const double delta = 2.5;
      const double qb = *acceptable_fee_bound(set, K, delta, Role::buyer);
      const double qs = *acceptable_fee_bound(set, K, delta, Role::seller);
      if (qb - 1e-3 >= 0.0) {
        EXPECT_TRUE(is_acceptable(set, {qb - 1e-3, K, delta}, Role::buyer, 0.0));
      }
      EXPECT_FALSE(is_acceptable(set, {qb + 1e-3, K, delta}, Role::buyer, 0.0));
      EXPECT_TRUE(is_acceptable(set, {qs + 1e-3, K, delta}, Role::seller, 0.0));
      if (qs - 1e-3 >= 0.0) {
        EXPECT_FALSE(is_acceptable(set, {qs - 1e-3, K, delta}, Role::seller, 0.0));
      }
    }
  }
}

TEST(Options, OutsideBoxThrows) {
  Fixture f;
  const auto set = f.set(AcceptabilityMode::risk_neutral);
  EXPECT_THROW(is_acceptable(set, {101.0, 1.0, 1.0}, Role::buyer), std::invalid_argument);
  EXPECT_THROW(is_acceptable(set, {1.0, 1.0, 11.0}, Role::seller), std::invalid_argument);
  EXPECT_THROW(is_acceptable(set, {-1.0, 1.0, 1.0}, Role::seller), std::invalid_argument);
  EXPECT_TRUE(is_acceptable(set, {1.0, 1.0, 0.0}, Role::seller));
}

TEST(Options, BoxClamp) {
  const TradeBounds box{5.0, 10.0, 2.0};
  const auto t = box.clamp({-1.0, 11.0, 1.0});
  EXPECT_DOUBLE_EQ(t.q, 0.0);
  EXPECT_DOUBLE_EQ(t.K, 10.0);
  EXPECT_DOUBLE_EQ(t.delta, 1.0);
}

TEST(Options, VarianceChangeIdentity) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  const auto s = make_uniform_grid(10.0, 1.0, 50);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(50), b(50);
    for (std::size_t k = 0; k < 50; ++k) {
      a[k] = 10.0 * g(rng);
      b[k] = std::max(g(rng), 0.0) * (trial % 2 ? 1.0 : -1.0);
    }
    const RandomSample A(s, a), B(s, b);
    EXPECT_NEAR(variance(A + B) - variance(A), covariance(2.0 * A + B, B), 1e-9);
  }
}

TEST(Options, FtrPayoff) {
  const std::vector<double> prices{20.0, 35.0, 28.0};
  EXPECT_DOUBLE_EQ(ftr_payoff({0, 1, 10.0}, prices), 150.0);
  EXPECT_DOUBLE_EQ(ftr_payoff({1, 2, 10.0}, prices), -70.0);
  EXPECT_THROW(ftr_payoff({0, 3, 1.0}, prices), std::invalid_argument);
  EXPECT_THROW(ftr_payoff({0, 1, -1.0}, prices), std::invalid_argument);
}

}  // namespace
