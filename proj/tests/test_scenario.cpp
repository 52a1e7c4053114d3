#include "optclear/scenario.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

namespace {

using namespace optclear;

// min over t of t + E[(L - t)^+] / (1 - alpha); piecewise linear and convex,
// so the minimum sits at one of the loss values.
double ru_cvar(const std::vector<double>& w, const std::vector<double>& loss, double alpha) {
  double best = std::numeric_limits<double>::infinity();
  for (double t : loss) {
    double tail = 0.0;
    for (std::size_t k = 0; k < loss.size(); ++k) tail += w[k] * std::max(loss[k] - t, 0.0);
    best = std::min(best, t + tail / (1.0 - alpha));
  }
  return best;
}

TEST(ScenarioSet, RejectsBadWeights) {
  std::vector<Scenario> s(2);
  EXPECT_THROW(ScenarioSet(s, {0.5, 0.6}), std::invalid_argument);
  EXPECT_THROW(ScenarioSet(s, {1.5, -0.5}), std::invalid_argument);
  EXPECT_THROW(ScenarioSet(s, {1.0}), std::invalid_argument);
  EXPECT_THROW(ScenarioSet({}, {}), std::invalid_argument);
  EXPECT_NO_THROW(ScenarioSet(s, {0.25, 0.75}));
}

TEST(ScenarioSet, RejectsWindAboveCapacity) {
  std::vector<Scenario> s(1);
  s[0].wind_mw = {5.0};
  EXPECT_THROW(ScenarioSet(s, {1.0}, {4.0}), std::invalid_argument);
  s[0].wind_mw = {-1.0};
  EXPECT_THROW(ScenarioSet(s, {1.0}), std::invalid_argument);
}

TEST(RandomSample, MixingScenarioSetsThrows) {
  auto a = make_uniform_grid(10.0, 1.0, 4);
  auto b = make_uniform_grid(10.0, 1.0, 4);
  const auto x = RandomSample::constant(a, 1.0);
  const auto y = RandomSample::constant(b, 1.0);
  EXPECT_THROW(x + y, std::invalid_argument);
  EXPECT_THROW(covariance(x, y), std::invalid_argument);
  const auto copy = a;
  EXPECT_NO_THROW(x + RandomSample::constant(copy, 2.0));
  EXPECT_THROW(RandomSample(a, {1.0, 2.0}), std::invalid_argument);
}

TEST(RandomSample, Arithmetic) {
  auto s = make_uniform_grid(10.0, 1.0, 3);
  RandomSample x(s, {1.0, 2.0, 3.0});
  RandomSample y(s, {0.5, 0.5, -1.0});
  const auto z = 2.0 * x - y + 1.0;
  EXPECT_DOUBLE_EQ(z[0], 2.5);
  EXPECT_DOUBLE_EQ(z[1], 4.5);
  EXPECT_DOUBLE_EQ(z[2], 8.0);
  EXPECT_DOUBLE_EQ((-x)[1], -2.0);
}

TEST(Moments, MatchDirectSums) {
  const std::vector<double> w{0.1, 0.2, 0.3, 0.4};
  const std::vector<double> x{1.0, -2.0, 4.0, 0.5};
  const std::vector<double> y{3.0, 1.0, -1.0, 2.0};
  const double mx = 0.1 - 0.4 + 1.2 + 0.2;
  const double my = 0.3 + 0.2 - 0.3 + 0.8;
  double v = 0.0, c = 0.0;
  for (int k = 0; k < 4; ++k) {
    v += w[k] * (x[k] - mx) * (x[k] - mx);
    c += w[k] * (x[k] - mx) * (y[k] - my);
  }
  EXPECT_NEAR(weighted_mean(w, x), mx, 1e-15);
  EXPECT_NEAR(weighted_variance(w, x), v, 1e-14);
  EXPECT_NEAR(weighted_covariance(w, x, y), c, 1e-14);
}

TEST(UniformGrid, MomentsAndSymmetry) {
  for (std::size_t n : {1u, 2u, 7u, 400u}) {
    const double mu = 10.0, sigma = 1.3;
    const auto s = make_uniform_grid(mu, sigma, n);
    std::vector<double> x(n);
    for (std::size_t k = 0; k < n; ++k) x[k] = s[k].wind_mw[0];
    const double dn = static_cast<double>(n);
    EXPECT_NEAR(weighted_mean(s.weights(), x), mu, 1e-12);
    // midpoint rule variance of a uniform law
    EXPECT_NEAR(weighted_variance(s.weights(), x), sigma * sigma * (1.0 - 1.0 / (dn * dn)), 1e-12);
    for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(x[k] - mu, -(x[n - 1 - k] - mu), 1e-12);
  }
  EXPECT_THROW(make_uniform_grid(1.0, 1.0, 10), std::invalid_argument);
  EXPECT_THROW(make_uniform_grid(10.0, 1.0, 0), std::invalid_argument);
}

TEST(UniformScenarios, CouplingKeepsMarginals) {
  const std::vector<UniformWind> winds{{50.0, 5.0, 0.0}, {30.0, 2.0, 40.0}};
  const auto co = make_uniform_scenarios(winds, {1.0, 2.0}, 50, WindCoupling::comonotone, 1);
  const auto ind = make_uniform_scenarios(winds, {}, 50, WindCoupling::independent, 1);
  for (const auto* s : {&co, &ind}) {
    for (std::size_t c = 0; c < 2; ++c) {
      std::vector<double> col(50);
      for (std::size_t k = 0; k < 50; ++k) col[k] = (*s)[k].wind_mw[c];
      EXPECT_NEAR(weighted_mean(s->weights(), col), winds[c].mean_mw, 1e-12);
    }
  }
  EXPECT_NEAR(co.wind_capacity()[0], 50.0 + std::sqrt(3.0) * 5.0, 1e-12);
  EXPECT_DOUBLE_EQ(co.wind_capacity()[1], 40.0);
  EXPECT_EQ(co[3].demand_mw.size(), 2u);
  // comonotone columns rise together
  for (std::size_t k = 1; k < 50; ++k) EXPECT_GT(co[k].wind_mw[1], co[k - 1].wind_mw[1]);
}

TEST(UniformScenarios, SeedDeterminism) {
  const std::vector<UniformWind> winds{{50.0, 5.0, 0.0}, {30.0, 2.0, 0.0}};
  const auto a = make_uniform_scenarios(winds, {}, 40, WindCoupling::independent, 9);
  const auto b = make_uniform_scenarios(winds, {}, 40, WindCoupling::independent, 9);
  const auto c = make_uniform_scenarios(winds, {}, 40, WindCoupling::independent, 10);
  bool differs = false;
  for (std::size_t k = 0; k < 40; ++k) {
    EXPECT_EQ(a[k].wind_mw, b[k].wind_mw);
    differs = differs || a[k].wind_mw != c[k].wind_mw;
  }
  EXPECT_TRUE(differs);
}

TEST(Cvar, AlphaZeroIsMean) {
  const std::vector<double> w{0.2, 0.3, 0.5};
  const std::vector<double> loss{4.0, -1.0, 2.0};
  EXPECT_DOUBLE_EQ(weighted_cvar(w, loss, 0.0), weighted_mean(w, loss));
}

TEST(Cvar, MatchesBreakpointMinimisation) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 30;
    std::vector<double> w(n), loss(n);
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      w[k] = 0.05 + std::abs(u(rng));
      total += w[k];
      loss[k] = u(rng);
    }
    for (double& x : w) x /= total;
    const double alpha = std::uniform_real_distribution<double>(0.0, 0.99)(rng);
    EXPECT_NEAR(weighted_cvar(w, loss, alpha), ru_cvar(w, loss, alpha), 1e-10);
  }
}

TEST(Cvar, ValidatesAlpha) {
  const std::vector<double> w{1.0};
  const std::vector<double> loss{1.0};
  EXPECT_THROW(weighted_cvar(w, loss, 1.0), std::invalid_argument);
  EXPECT_THROW(weighted_cvar(w, loss, -0.1), std::invalid_argument);
  EXPECT_THROW(RiskPreference(1.0), std::invalid_argument);
}

TEST(Cvar, BoundsBetweenMeanAndMax) {
  const auto s = make_uniform_grid(10.0, 1.0, 25);
  std::vector<double> loss(25);
  for (std::size_t k = 0; k < 25; ++k) loss[k] = std::sin(static_cast<double>(k));
  const RandomSample l(s, loss);
  double prev = expectation(l);
  for (double a : {0.1, 0.3, 0.6, 0.9}) {
    const double c = cvar(l, RiskPreference(a));
    EXPECT_GE(c, prev - 1e-12);
    EXPECT_LE(c, *std::max_element(loss.begin(), loss.end()) + 1e-12);
    prev = c;
  }
}

}  // namespace
