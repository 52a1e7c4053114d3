#ifndef OPTCLEAR_COPPERPLATE_HPP
#define OPTCLEAR_COPPERPLATE_HPP

// Closed forms for the single-bus system with base-load B, peaker P and wind
// W: dispatch, prices and profits, the bilateral option game between P and
// W, the centrally cleared optimum, and acceptability boundaries.
// Wind is uniform on [mu - sqrt(3) sigma, mu + sqrt(3) sigma].

#include "optclear/clearing.hpp"
#include "optclear/market.hpp"
#include "optclear/network.hpp"
#include "optclear/options.hpp"
#include "optclear/scenario.hpp"

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace optclear {

struct CopperplateInstance {
  double mu = 10.0;                      // mean wind, MW
  double sigma = 1.0;                    // wind std, MW
  double rho = std::sqrt(3.0) / 20.0;    // peaker offered cost is 1/rho
  double epsilon = 0.5;                  // base-load true marginal cost
  double d = 20.0;                       // demand, MW

  double half_width() const noexcept { return std::sqrt(3.0) * sigma; }
  double inv_rho() const noexcept { return 1.0 / rho; }
  double omega_min() const noexcept { return mu - half_width(); }
  double omega_max() const noexcept { return mu + half_width(); }

  void validate() const {
    if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
    if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in (0, 1]");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("epsilon must lie in (0, 1)");
    if (omega_min() < 0.0) throw std::invalid_argument("mu - sqrt(3) sigma must be nonnegative");
    if (d < omega_max()) throw std::invalid_argument("demand must cover mu + sqrt(3) sigma");
  }
};

struct CopperplateForward {
  double X_B = 0.0, X_P = 0.0, X_W = 0.0;
  double P = 0.0;
};

struct CopperplateRealtime {
  double x_B = 0.0, x_P = 0.0, x_W = 0.0;
  double p = 0.0;
};

struct CopperplateProfits {
  double B = 0.0, P = 0.0, W = 0.0;
};

inline void require_in_support(const CopperplateInstance& inst, double omega) {
  const double tol = 1e-12 * (1.0 + inst.omega_max());
  if (omega < inst.omega_min() - tol || omega > inst.omega_max() + tol)
    throw std::invalid_argument("wind scenario outside the support");
}

inline CopperplateForward analytic_forward(const CopperplateInstance& inst) {
  inst.validate();
  return {inst.d - inst.mu, 0.0, inst.mu, 1.0};
}

/// The price is 1/rho on the closed interval omega <= mu.
inline CopperplateRealtime analytic_realtime(const CopperplateInstance& inst, double omega) {
  inst.validate();
  require_in_support(inst, omega);
  const double shortfall = std::max(inst.mu - omega, 0.0);
  return {inst.d - inst.mu, shortfall, std::min(omega, inst.mu), omega <= inst.mu ? inst.inv_rho() : 0.0};
}

struct CopperplateDispatch {
  CopperplateForward forward;
  std::vector<CopperplateRealtime> realtime;
};

inline CopperplateDispatch analytic_dispatch(const CopperplateInstance& inst, std::span<const double> omegas) {
  CopperplateDispatch out{analytic_forward(inst), {}};
  for (double w : omegas) out.realtime.push_back(analytic_realtime(inst, w));
  return out;
}

inline CopperplateProfits analytic_profits(const CopperplateInstance& inst, double omega) {
  inst.validate();
  require_in_support(inst, omega);
  const double shortfall = std::max(inst.mu - omega, 0.0);
  return {(inst.d - inst.mu) * (1.0 - inst.epsilon), shortfall * (inst.inv_rho() - 1.0),
          inst.mu - shortfall / inst.rho};
}

/// [lo, hi): scenarios in which W loses money.
struct HalfOpenInterval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double x) const noexcept { return x >= lo && x < hi; }
};

inline std::optional<HalfOpenInterval> loss_region(const CopperplateInstance& inst) {
  inst.validate();
  if (!(inst.rho < inst.half_width() / inst.mu)) return std::nullopt;
  return HalfOpenInterval{inst.omega_min(), inst.mu * (1.0 - inst.rho)};
}

// ---------------------------------------------------------------------------
// Bilateral game: P announces (q, K), W picks delta in [0, sqrt(3) sigma].

/// E[V_W] = -q delta if K > 1/rho, else -(delta/2)(2q + K - 1/rho).
inline double expected_buyer_option_value(const CopperplateInstance& inst, double q, double K, double delta) {
  if (K > inst.inv_rho()) return -q * delta;
  return -0.5 * delta * (2.0 * q + K - inst.inv_rho());
}

enum class StackelbergClass {
  no_trade,        // 2q + K > 1/rho, delta* = 0
  manifold,        // 2q + K = 1/rho, W indifferent on [0, sqrt(3) sigma]
  not_equilibrium, // 2q + K < 1/rho, W buys the cap
};

struct StackelbergOutcome {
  StackelbergClass kind = StackelbergClass::no_trade;
  double delta_lo = 0.0;  // best responses form [delta_lo, delta_hi]
  double delta_hi = 0.0;
};

inline StackelbergOutcome stackelberg_classify(const CopperplateInstance& inst, double q, double K,
                                               double tol = 1e-9) {
  inst.validate();
  if (q < 0.0 || K < 0.0) throw std::invalid_argument("q and K must be nonnegative");
  const double gap = 2.0 * q + K - inst.inv_rho();
  const double cap = inst.half_width();
  if (std::abs(gap) <= tol * inst.inv_rho()) return {StackelbergClass::manifold, 0.0, cap};
  if (gap > 0.0) return {StackelbergClass::no_trade, 0.0, 0.0};
  return {StackelbergClass::not_equilibrium, cap, cap};
}

struct BilateralDelta {
  double W = 0.0;
  double P = 0.0;
};

/// Variance changes of W and P for a trade on 2q + K = 1/rho.
inline BilateralDelta bilateral_variance_delta(const CopperplateInstance& inst, double q, double K, double delta) {
  inst.validate();
  if (std::abs(2.0 * q + K - inst.inv_rho()) > 1e-9 * inst.inv_rho())
    throw std::invalid_argument("trade is not on the manifold 2q + K = 1/rho");
  const double s = inst.half_width();
  const double common = q * q * delta * (delta - s);
  return {common - q * K * delta * s / 2.0, common - q * (K - 1.0) * delta * s / 2.0};
}

// ---------------------------------------------------------------------------
// Central clearing

struct CentralOptimum {
  double q = 0.0;
  double K = 0.0;
  double delta = 0.0;
  double delta_lo = 0.0;  // range of optimal volumes
  double delta_hi = 0.0;
  double aggregate_delta = 0.0;
};

inline double central_delta_lower(const CopperplateInstance& inst) {
  return inst.half_width() * (2.0 - inst.rho) / 4.0;
}

/// Aggregate variance change at a manifold trade (q, 1/rho - 2q, delta).
inline double central_objective(const CopperplateInstance& inst, double q, double delta) {
  const double s = inst.half_width();
  const double K = inst.inv_rho() - 2.0 * q;
  return 2.0 * q * q * delta * (delta - s) - q * K * delta * s + q * delta * s / 2.0;
}

inline CentralOptimum central_optimum(const CopperplateInstance& inst, double delta) {
  inst.validate();
  const double s = inst.half_width();
  const double lo = central_delta_lower(inst);
  const double tol = 1e-12 * s;
  if (delta < lo - tol || delta > s + tol)
    throw std::invalid_argument("volume outside the optimal range");
  CentralOptimum o;
  o.delta = delta;
  o.delta_lo = lo;
  o.delta_hi = s;
  o.q = s / (4.0 * inst.rho * delta) - s / (8.0 * delta);
  o.K = inst.inv_rho() * (2.0 * delta - s) / (2.0 * delta) + s / (4.0 * delta);
  const double r = inst.inv_rho() - 0.5;
  o.aggregate_delta = -3.0 * inst.sigma * inst.sigma / 8.0 * r * r;
  return o;
}

struct ManifoldPoint {
  double q = 0.0;
  double K = 0.0;
  double delta = 0.0;
  double value = 0.0;
};

/// Dense search of central_objective over q in [0, 1/(2 rho)] and delta in
/// [0, sqrt(3) sigma].
inline ManifoldPoint grid_search_manifold(const CopperplateInstance& inst, std::size_t nq = 801,
                                          std::size_t nd = 801) {
  inst.validate();
  if (nq < 2 || nd < 2) throw std::invalid_argument("grid needs at least two points per axis");
  ManifoldPoint best{0.0, inst.inv_rho(), 0.0, 0.0};
  for (std::size_t i = 0; i < nq; ++i) {
    const double q = 0.5 * inst.inv_rho() * static_cast<double>(i) / static_cast<double>(nq - 1);
    for (std::size_t j = 0; j < nd; ++j) {
      const double delta = inst.half_width() * static_cast<double>(j) / static_cast<double>(nd - 1);
      const double v = central_objective(inst, q, delta);
      if (v < best.value) best = {q, inst.inv_rho() - 2.0 * q, delta, v};
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Sampled instance

inline constexpr std::size_t kCopperBase = 0;
inline constexpr std::size_t kCopperPeaker = 1;
inline constexpr std::size_t kCopperWind = 2;
inline constexpr std::size_t kCopperLoad = 3;

struct CopperplateMarket {
  NetworkModel network;
  std::vector<Participant> participants;  // B, P, W, load
  ScenarioSet scenarios;
  std::vector<OptionSpec> options;        // W buys, P sells
};

/// The copperplate system as a general market instance on an n-point
/// midpoint grid of the wind support.
inline CopperplateMarket make_copperplate_market(const CopperplateInstance& inst, std::size_t n,
                                                 AcceptabilityMode mode = AcceptabilityMode::risk_neutral,
                                                 double alpha = 0.0) {
  inst.validate();
  CopperplateMarket m{NetworkModel{}, {}, make_uniform_grid(inst.mu, inst.sigma, n), {}};
  Participant base{"B", ParticipantKind::dispatchable, 0, {0.0, 1.0}, {0.0, inst.epsilon}, kUnboundedMW, 0.0, 0, 0.0};
  Participant peaker{"P", ParticipantKind::dispatchable, 0, {0.0, inst.inv_rho()}, {0.0, 1.0},
                     kUnboundedMW, kUnboundedMW, 0, 0.0};
  Participant wind{"W", ParticipantKind::variable, 0, {}, {}, inst.omega_max(), kUnboundedMW, 0, 0.0};
  Participant load{"D", ParticipantKind::consumer, 0, {}, {}, 0.0, 0.0, 0, inst.d};
  m.participants = {base, peaker, wind, load};
  const TradeBounds box{inst.inv_rho(), inst.inv_rho(), inst.half_width()};
  m.options = {OptionSpec{kCopperWind, Role::buyer, box, mode, alpha},
               OptionSpec{kCopperPeaker, Role::seller, box, mode, alpha}};
  return m;
}

// ---------------------------------------------------------------------------
// Acceptability boundaries

struct BoundaryPoint {
  double q = 0.0;
  double delta = 0.0;
  std::optional<double> K;  // empty when acceptability does not switch on [0, 1/rho]
};

/// For each (q, delta), the strike at which acceptability of the trade
/// switches for `role` under CVaR at level alpha. Sellers accept strikes above
/// the boundary, buyers strikes below it.
inline std::vector<BoundaryPoint> acceptability_boundary(const CopperplateInstance& inst, double alpha, Role role,
                                                         std::span<const double> deltas,
                                                         std::span<const double> fees, std::size_t n = 400) {
  inst.validate();
  RiskPreference check(alpha);
  const ScenarioSet s = make_uniform_grid(inst.mu, inst.sigma, n);
  std::vector<double> price(n), profit(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double w = s[k].wind_mw[0];
    price[k] = analytic_realtime(inst, w).p;
    const auto pr = analytic_profits(inst, w);
    profit[k] = role == Role::buyer ? pr.W : pr.P;
  }
  const double kmax = inst.inv_rho();
  AcceptabilitySet set{TradeBounds{std::numeric_limits<double>::max(), kmax, std::numeric_limits<double>::max()},
                       alpha == 0.0 ? AcceptabilityMode::risk_neutral : AcceptabilityMode::cvar, alpha,
                       RandomSample(s, profit), RandomSample(s, price)};
  std::vector<BoundaryPoint> out;
  for (double delta : deltas) {
    for (double q : fees) {
      BoundaryPoint bp{q, delta, std::nullopt};
      const auto ok = [&](double K) { return is_acceptable(set, {q, K, delta}, role, 0.0); };
      // sellers: acceptable set grows with K; buyers: shrinks with K
      const bool at_lo = ok(0.0);
      const bool at_hi = ok(kmax);
      if (delta > 0.0 && at_lo != at_hi) {
        double lo = 0.0, hi = kmax;
        for (int it = 0; it < 200 && hi - lo > 1e-12 * kmax; ++it) {
          const double mid = 0.5 * (lo + hi);
          (ok(mid) == at_lo ? lo : hi) = mid;
        }
        bp.K = 0.5 * (lo + hi);
      }
      out.push_back(bp);
    }
  }
  return out;
}

}  // namespace optclear

#endif  // OPTCLEAR_COPPERPLATE_HPP
