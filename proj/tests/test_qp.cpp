#include "optclear/qp.hpp"

#include <gtest/gtest.h>

#include <random>

namespace {

using namespace optclear;
using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd random_spd(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g;
  MatrixXd m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = g(rng);
  return m * m.transpose() + MatrixXd::Identity(n, n);
}

TEST(Qp, UnconstrainedMinimum) {
  QuadraticProgram p;
  p.Q = (MatrixXd(2, 2) << 4.0, 1.0, 1.0, 3.0).finished();
  p.c = (VectorXd(2) << -1.0, 2.0).finished();
  const auto s = solve_qp(p);
  ASSERT_EQ(s.status, QpStatus::optimal);
  const VectorXd x = p.Q.ldlt().solve(-p.c);
  EXPECT_LT((s.x - x).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Qp, EqualityMatchesDirectKkt) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  const int n = 5, m = 2;
  QuadraticProgram p;
  p.Q = random_spd(rng, n);
  p.c = VectorXd::NullaryExpr(n, [&] { return g(rng); });
  p.A = MatrixXd::NullaryExpr(m, n, [&] { return g(rng); });
  p.b = VectorXd::NullaryExpr(m, [&] { return g(rng); });
  MatrixXd kkt = MatrixXd::Zero(n + m, n + m);
  kkt << p.Q, p.A.transpose(), p.A, MatrixXd::Zero(m, m);
  VectorXd rhs(n + m);
  rhs << -p.c, p.b;
  const VectorXd sol = kkt.fullPivLu().solve(rhs);
  const auto s = solve_qp(p);
  ASSERT_EQ(s.status, QpStatus::optimal);
  EXPECT_LT((s.x - sol.head(n)).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((s.eq_dual - sol.tail(m)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Qp, DiagonalBoxIsClampedMinimum) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 6;
    QuadraticProgram p;
    VectorXd d = VectorXd::NullaryExpr(n, [&] { return 0.5 + std::abs(u(rng)); });
    p.Q = d.asDiagonal();
    p.c = VectorXd::NullaryExpr(n, [&] { return u(rng); });
    VectorXd lo = VectorXd::Constant(n, -1.0), hi = VectorXd::Constant(n, 0.5);
    p.G.resize(2 * n, n);
    p.G << MatrixXd::Identity(n, n), -MatrixXd::Identity(n, n);
    p.h.resize(2 * n);
    p.h << hi, -lo;
    const auto s = solve_qp(p);
    ASSERT_EQ(s.status, QpStatus::optimal);
    for (int i = 0; i < n; ++i) EXPECT_NEAR(s.x(i), std::clamp(-p.c(i) / d(i), -1.0, 0.5), 1e-9);
    EXPECT_GE(s.ineq_dual.minCoeff(), 0.0);
  }
}

TEST(Qp, RandomProblemsSatisfyKkt) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 8, me = 2, mi = 10;
    QuadraticProgram p;
    p.Q = trial % 3 == 0 ? MatrixXd(MatrixXd::Zero(n, n)) : random_spd(rng, n);
    p.c = VectorXd::NullaryExpr(n, [&] { return g(rng); });
    p.A = MatrixXd::NullaryExpr(me, n, [&] { return g(rng); });
    const VectorXd x0 = VectorXd::NullaryExpr(n, [&] { return g(rng); });
    p.b = p.A * x0;
    p.G.resize(mi + 2 * n, n);
    p.G << MatrixXd::NullaryExpr(mi, n, [&] { return g(rng); }), MatrixXd::Identity(n, n),
        -MatrixXd::Identity(n, n);
    p.h.resize(mi + 2 * n);
    // x0 strictly feasible; the box keeps LP instances bounded
    p.h << p.G.topRows(mi) * x0 + VectorXd::Constant(mi, 0.5), x0.array() + 3.0, 3.0 - x0.array();
    const auto s = solve_qp(p);
    ASSERT_EQ(s.status, QpStatus::optimal) << "trial " << trial;
    const auto r = detail::kkt_residuals(p, s.x, s.eq_dual, s.ineq_dual);
    EXPECT_LT(r.primal, 1e-8);
    EXPECT_LT(r.dual, 1e-8);
    EXPECT_LT(r.complementarity, 1e-8);
    EXPECT_NEAR(s.objective, s.dual_objective, 1e-7 * (1.0 + std::abs(s.objective)));
  }
}

TEST(Qp, InfeasibleIsReported) {
  QuadraticProgram p;
  p.Q = MatrixXd::Identity(1, 1);
  p.c = VectorXd::Zero(1);
  p.G = (MatrixXd(2, 1) << 1.0, -1.0).finished();
  p.h = (VectorXd(2) << -1.0, -1.0).finished();  // x <= -1 and x >= 1
  EXPECT_NE(solve_qp(p).status, QpStatus::optimal);
}

TEST(Qp, DimensionMismatchThrows) {
  QuadraticProgram p;
  p.Q = MatrixXd::Identity(2, 2);
  p.c = VectorXd::Zero(3);
  EXPECT_THROW(solve_qp(p), std::invalid_argument);
}

}  // namespace
