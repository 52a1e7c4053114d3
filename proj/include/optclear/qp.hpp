#ifndef OPTCLEAR_QP_HPP
#define OPTCLEAR_QP_HPP

// Dense convex quadratic programming with multiplier recovery:
//
//   minimize   1/2 x'Qx + c'x
//   subject to A x = b      (multipliers eq_dual)
//              G x <= h     (multipliers ineq_dual >= 0)
//
// Stationarity convention: Q x + c + A' eq_dual + G' ineq_dual = 0.
// Mehrotra predictor-corrector interior point, followed by an active-set
// polish that solves the KKT system of the identified active constraints
// exactly. The polish is kept only if it stays primal and dual feasible.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace optclear {

struct QuadraticProgram {
  Eigen::MatrixXd Q;
  Eigen::VectorXd c;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::MatrixXd G;
  Eigen::VectorXd h;
};

enum class QpStatus { optimal, infeasible, not_converged };

struct QpOptions {
  double tolerance = 1e-10;
  int max_iterations = 200;
  bool polish = true;
};

struct QpSolution {
  Eigen::VectorXd x;
  Eigen::VectorXd eq_dual;
  Eigen::VectorXd ineq_dual;
  double objective = 0.0;
  double dual_objective = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
  bool polished = false;
  QpStatus status = QpStatus::not_converged;
};

namespace detail {

inline double inf_norm(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

inline double max_step(const Eigen::VectorXd& v, const Eigen::VectorXd& dv) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (dv(i) < 0.0) alpha = std::min(alpha, -v(i) / dv(i));
  return alpha;
}

struct KktResiduals {
  double primal = 0.0;
  double dual = 0.0;
  double complementarity = 0.0;
};

inline KktResiduals kkt_residuals(const QuadraticProgram& p, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& lambda, const Eigen::VectorXd& z) {
  KktResiduals r;
  const Eigen::VectorXd rd = p.Q * x + p.c + p.A.transpose() * lambda + p.G.transpose() * z;
  r.dual = inf_norm(rd) / (1.0 + inf_norm(p.c));
  double pe = 0.0;
  if (p.A.rows()) pe = inf_norm(p.A * x - p.b) / (1.0 + inf_norm(p.b));
  double pi = 0.0;
  double comp = 0.0;
  if (p.G.rows()) {
    const Eigen::VectorXd slack = p.h - p.G * x;
    pi = std::max(0.0, -slack.minCoeff()) / (1.0 + inf_norm(p.h));
    for (Eigen::Index i = 0; i < slack.size(); ++i) comp = std::max(comp, std::abs(slack(i) * z(i)));
    comp /= 1.0 + std::abs(0.5 * x.dot(p.Q * x) + p.c.dot(x));
    if (z.size() && z.minCoeff() < 0.0) r.dual = std::max(r.dual, -z.minCoeff() / (1.0 + inf_norm(p.c)));
  }
  r.primal = std::max(pe, pi);
  r.complementarity = comp;
  return r;
}

}  // namespace detail

inline QpSolution solve_qp(const QuadraticProgram& p, const QpOptions& opt = {}) {
  using Eigen::Index;
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const Index n = p.c.size();
  const Index me = p.A.rows();
  const Index mi = p.G.rows();
  constexpr double reg = 1e-13;
  if (p.Q.rows() != n || p.Q.cols() != n || (me && p.A.cols() != n) || p.b.size() != me ||
      (mi && p.G.cols() != n) || p.h.size() != mi)
    throw std::invalid_argument("quadratic program dimensions disagree");
  if ((me == 0 && p.A.cols() != n) || (mi == 0 && p.G.cols() != n)) {
    QuadraticProgram shaped = p;
    if (me == 0) shaped.A.resize(0, n);
    if (mi == 0) shaped.G.resize(0, n);
    return solve_qp(shaped, opt);
  }

  struct Factored {
    MatrixXd matrix;  // without regularization, for refinement
    Eigen::PartialPivLU<MatrixXd> lu;
    VectorXd solve(const VectorXd& rhs) const {
      VectorXd x = lu.solve(rhs);
      for (int k = 0; k < 2; ++k) x += lu.solve(rhs - matrix * x);
      return x;
    }
  };
  const auto factor = [&](const VectorXd& d) {
    MatrixXd kkt = MatrixXd::Zero(n + me, n + me);
    kkt.topLeftCorner(n, n) = p.Q;
    if (mi) kkt.topLeftCorner(n, n) += p.G.transpose() * d.asDiagonal() * p.G;
    if (me) {
      kkt.topRightCorner(n, me) = p.A.transpose();
      kkt.bottomLeftCorner(me, n) = p.A;
    }
    MatrixXd regularized = kkt;
    regularized.topLeftCorner(n, n).diagonal().array() += reg;
    if (me) regularized.bottomRightCorner(me, me).diagonal().array() -= reg;
    return Factored{std::move(kkt), Eigen::PartialPivLU<MatrixXd>(regularized)};
  };

  QpSolution sol;
  VectorXd x(n), lambda = VectorXd::Zero(me), s(mi), z(mi);

  {
    const auto lu = factor(VectorXd::Ones(mi));
    VectorXd rhs(n + me);
    rhs.head(n) = -p.c;
    if (mi) rhs.head(n) += p.G.transpose() * p.h;
    if (me) rhs.tail(me) = p.b;
    const VectorXd sol0 = lu.solve(rhs);
    x = sol0.head(n);
    if (mi) {
      s = p.h - p.G * x;
      const double shift = s.minCoeff();
      if (shift < 1.0) s.array() += 1.0 - shift;
      z = VectorXd::Ones(mi);
    }
  }

  const double tol = opt.tolerance;
  int it = 0;
  bool converged = false;
  // best iterate seen, for runs that stall just short of the tolerance
  double best_merit = std::numeric_limits<double>::infinity();
  VectorXd bx, bl, bs, bz;
  int since_best = 0;
  for (; it < opt.max_iterations; ++it) {
    const VectorXd rd = p.Q * x + p.c + p.A.transpose() * lambda + p.G.transpose() * z;
    const VectorXd rp = me ? VectorXd(p.A * x - p.b) : VectorXd();
    const VectorXd rg = mi ? VectorXd(p.G * x + s - p.h) : VectorXd();
    const double mu = mi ? s.dot(z) / static_cast<double>(mi) : 0.0;
    const double obj = 0.5 * x.dot(p.Q * x) + p.c.dot(x);
    const double pres = std::max(me ? detail::inf_norm(rp) / (1.0 + detail::inf_norm(p.b)) : 0.0,
                                 mi ? detail::inf_norm(rg) / (1.0 + detail::inf_norm(p.h)) : 0.0);
    const double dres = detail::inf_norm(rd) / (1.0 + detail::inf_norm(p.c));
    if (pres <= tol && dres <= tol && mu <= tol * (1.0 + std::abs(obj))) {
      converged = true;
      break;
    }
    const double merit = std::max({pres, dres, mu / (1.0 + std::abs(obj))});
    if (merit < 0.5 * best_merit) {
      best_merit = merit;
      bx = x;
      bl = lambda;
      bs = s;
      bz = z;
      since_best = 0;
    } else if (++since_best >= 15) {
      break;
    }
    if (!x.allFinite() || detail::inf_norm(x) > 1e13) break;

    const VectorXd d = mi ? VectorXd(z.cwiseQuotient(s)) : VectorXd();
    const auto lu = factor(d);
    const auto direction = [&](const VectorXd& rc, VectorXd& dx, VectorXd& dl, VectorXd& ds,
                               VectorXd& dz) {
      VectorXd rhs(n + me);
      rhs.head(n) = -rd;
      if (mi) rhs.head(n) -= p.G.transpose() * (d.cwiseProduct(rg) - rc.cwiseQuotient(s));
      if (me) rhs.tail(me) = -rp;
      const VectorXd step = lu.solve(rhs);
      dx = step.head(n);
      dl = step.tail(me);
      if (mi) {
        dz = d.cwiseProduct(p.G * dx + rg) - rc.cwiseQuotient(s);
        ds = -(rc + s.cwiseProduct(dz)).cwiseQuotient(z);
      }
    };

    VectorXd dx, dl, ds, dz;
    if (mi) {
      const VectorXd rc_aff = s.cwiseProduct(z);
      direction(rc_aff, dx, dl, ds, dz);
      const double a_aff = std::min(detail::max_step(s, ds), detail::max_step(z, dz));
      const double mu_aff = (s + a_aff * ds).dot(z + a_aff * dz) / static_cast<double>(mi);
      const double sigma = std::pow(std::clamp(mu_aff / mu, 0.0, 1.0), 3.0);
      const VectorXd rc = rc_aff + ds.cwiseProduct(dz) - VectorXd::Constant(mi, sigma * mu);
      direction(rc, dx, dl, ds, dz);
      const double a = std::min(1.0, 0.99 * std::min(detail::max_step(s, ds), detail::max_step(z, dz)));
      x += a * dx;
      lambda += a * dl;
      s += a * ds;
      z += a * dz;
    } else {
      direction(VectorXd(), dx, dl, ds, dz);
      x += dx;
      lambda += dl;
    }
  }

  if (!converged && best_merit <= 1e3 * tol) {
    x = bx;
    lambda = bl;
    s = bs;
    z = bz;
    converged = true;
  }

  sol.iterations = it;
  sol.x = x;
  sol.eq_dual = lambda;
  sol.ineq_dual = mi ? z : VectorXd();
  const auto ipm_res = detail::kkt_residuals(p, x, lambda, sol.ineq_dual);
  if (converged) {
    sol.status = QpStatus::optimal;
  } else {
    sol.status = ipm_res.primal > 1e-6 ? QpStatus::infeasible : QpStatus::not_converged;
  }

  if (opt.polish && sol.status == QpStatus::optimal) {
    std::vector<Index> active;
    for (Index i = 0; i < mi; ++i)
      if (s(i) < z(i)) active.push_back(i);
    const Index na = static_cast<Index>(active.size());
    MatrixXd kkt = MatrixXd::Zero(n + me + na, n + me + na);
    VectorXd rhs(n + me + na);
    kkt.topLeftCorner(n, n) = p.Q;
    rhs.head(n) = -p.c;
    if (me) {
      kkt.block(0, n, n, me) = p.A.transpose();
      kkt.block(n, 0, me, n) = p.A;
      rhs.segment(n, me) = p.b;
    }
    for (Index k = 0; k < na; ++k) {
      kkt.block(0, n + me + k, n, 1) = p.G.row(active[static_cast<std::size_t>(k)]).transpose();
      kkt.block(n + me + k, 0, 1, n) = p.G.row(active[static_cast<std::size_t>(k)]);
      rhs(n + me + k) = p.h(active[static_cast<std::size_t>(k)]);
    }
    const VectorXd polished = kkt.completeOrthogonalDecomposition().solve(rhs);
    if (polished.allFinite()) {
      VectorXd px = polished.head(n);
      VectorXd pl = polished.segment(n, me);
      VectorXd pz = VectorXd::Zero(mi);
      for (Index k = 0; k < na; ++k) pz(active[static_cast<std::size_t>(k)]) = polished(n + me + k);
      const auto res = detail::kkt_residuals(p, px, pl, pz);
      const double zscale = 1.0 + (mi ? detail::inf_norm(z) : 0.0);
      const bool dual_ok = mi == 0 || pz.minCoeff() >= -1e-9 * zscale;
      if (dual_ok && res.primal <= 1e-9 && res.dual <= 1e-9 && res.complementarity <= 1e-9) {
        for (Index i = 0; i < mi; ++i) pz(i) = std::max(pz(i), 0.0);
        sol.x = px;
        sol.eq_dual = pl;
        sol.ineq_dual = pz;
        sol.polished = true;
      }
    }
  }

  const auto res = detail::kkt_residuals(p, sol.x, sol.eq_dual, sol.ineq_dual);
  sol.kkt_residual = std::max({res.primal, res.dual, res.complementarity});
  sol.objective = 0.5 * sol.x.dot(p.Q * sol.x) + p.c.dot(sol.x);
  sol.dual_objective = -0.5 * sol.x.dot(p.Q * sol.x) - (me ? p.b.dot(sol.eq_dual) : 0.0) -
                       (mi ? p.h.dot(sol.ineq_dual) : 0.0);
  return sol;
}

}  // namespace optclear

#endif  // OPTCLEAR_QP_HPP
