#ifndef OPTCLEAR_OPTIONS_HPP
#define OPTCLEAR_OPTIONS_HPP

// Cash-settled call options: payoffs, profits with options, merchandising
// surplus, acceptability of trades, and FTR payoffs.

#include "optclear/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace optclear {

/// Option price q ($/MW), strike K ($/MWh), volume delta (MW).
struct TradeTriple {
  double q = 0.0;
  double K = 0.0;
  double delta = 0.0;
};

/// The box [0, q_max] x [0, K_max] x [0, delta_max].
struct TradeBounds {
  double q_max = 0.0;
  double K_max = 0.0;
  double delta_max = 0.0;

  bool contains(const TradeTriple& t, double tol = 1e-9) const noexcept {
    return t.q >= -tol && t.K >= -tol && t.delta >= -tol && t.q <= q_max + tol && t.K <= K_max + tol &&
           t.delta <= delta_max + tol;
  }
  TradeTriple clamp(TradeTriple t) const noexcept {
    t.q = std::clamp(t.q, 0.0, q_max);
    t.K = std::clamp(t.K, 0.0, K_max);
    t.delta = std::clamp(t.delta, 0.0, delta_max);
    return t;
  }
};

enum class Role { buyer, seller };
enum class AcceptabilityMode { box_only, risk_neutral, cvar };

struct AcceptabilitySet {
  TradeBounds bounds;
  AcceptabilityMode mode = AcceptabilityMode::risk_neutral;
  double alpha = 0.0;      // cvar mode only
  RandomSample baseline;   // energy-market profit pi
  RandomSample price;      // the participant's real-time price
};

inline double option_payoff(double price, double strike) noexcept { return std::max(price - strike, 0.0); }

/// pi - q delta + (p - K)^+ delta
inline RandomSample buyer_profit(const RandomSample& pi, const TradeTriple& t, const RandomSample& price) {
  pi.require_compatible(price);
  std::vector<double> v(pi.size());
  for (std::size_t k = 0; k < v.size(); ++k)
    v[k] = pi[k] - t.q * t.delta + option_payoff(price[k], t.K) * t.delta;
  return RandomSample(pi.scenarios(), std::move(v));
}

/// pi + q delta - (p - K)^+ exercise, where exercise is the allocated
/// delta_g per scenario.
inline RandomSample seller_profit(const RandomSample& pi, const TradeTriple& t, const RandomSample& price,
                                  const RandomSample& exercise) {
  pi.require_compatible(price);
  pi.require_compatible(exercise);
  std::vector<double> v(pi.size());
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (exercise[k] < -1e-12 || exercise[k] > t.delta * (1.0 + 1e-12) + 1e-12)
      throw std::invalid_argument("allocated exercise outside [0, delta]");
    v[k] = pi[k] + t.q * t.delta - option_payoff(price[k], t.K) * exercise[k];
  }
  return RandomSample(pi.scenarios(), std::move(v));
}

/// Seller profit under the conjectured worst case: full exercise in every scenario.
inline RandomSample seller_profit_worst_case(const RandomSample& pi, const TradeTriple& t,
                                             const RandomSample& price) {
  return seller_profit(pi, t, price, RandomSample::constant(pi.scenarios(), t.delta));
}

/// Market maker's cash in one scenario:
///   sum_r q_r D_r - sum_g q_g D_g - sum_r (p_r - K_r)^+ D_r + sum_g (p_g - K_g)^+ d_g.
inline double merchandising_surplus(std::span<const TradeTriple> buys, std::span<const double> buy_prices,
                                    std::span<const TradeTriple> sells, std::span<const double> sell_prices,
                                    std::span<const double> sell_exercise) {
  if (buys.size() != buy_prices.size() || sells.size() != sell_prices.size() ||
      sells.size() != sell_exercise.size())
    throw std::invalid_argument("merchandising surplus: dimension mismatch");
  double ms = 0.0;
  for (std::size_t r = 0; r < buys.size(); ++r)
    ms += buys[r].q * buys[r].delta - option_payoff(buy_prices[r], buys[r].K) * buys[r].delta;
  for (std::size_t g = 0; g < sells.size(); ++g)
    ms += -sells[g].q * sells[g].delta + option_payoff(sell_prices[g], sells[g].K) * sell_exercise[g];
  return ms;
}

/// Participant profit with a trade: buyers settle on full volume, sellers on
/// the worst-case full exercise.
inline RandomSample profit_with_trade(const AcceptabilitySet& set, const TradeTriple& t, Role role) {
  return role == Role::buyer ? buyer_profit(set.baseline, t, set.price)
                             : seller_profit_worst_case(set.baseline, t, set.price);
}

/// Slack tolerance used by the acceptability predicates, scaled to the
/// magnitude of the baseline profit.
inline double acceptability_tolerance(const AcceptabilitySet& set) {
  double scale = 1.0;
  for (double v : set.baseline.values()) scale = std::max(scale, std::abs(v));
  return 1e-9 * scale;
}

/// Risk of the participant's loss under the set's mode (mean loss when risk
/// neutral, CVaR of the loss otherwise).
inline double acceptability_risk(const AcceptabilitySet& set, const RandomSample& profit) {
  const auto w = profit.scenarios().weights();
  std::vector<double> loss(profit.size());
  for (std::size_t k = 0; k < loss.size(); ++k) loss[k] = -profit[k];
  const double alpha = set.mode == AcceptabilityMode::cvar ? set.alpha : 0.0;
  return weighted_cvar(w, loss, alpha);
}

inline bool is_acceptable(const AcceptabilitySet& set, const TradeTriple& t, Role role,
                          std::optional<double> tol = std::nullopt) {
  if (!set.bounds.contains(t)) throw std::invalid_argument("trade lies outside the allowable box");
  if (set.mode == AcceptabilityMode::box_only || t.delta == 0.0) return true;
  const double slack = tol.value_or(acceptability_tolerance(set));
  const double before = acceptability_risk(set, set.baseline);
  const double after = acceptability_risk(set, profit_with_trade(set, t, role));
  return after <= before + slack;
}

/// The acceptable fee range for a fixed (K, delta). The trade's fee shifts
/// profit by a constant, so the risk measure moves by exactly -/+ q delta:
/// sellers need q >= returned value, buyers need q <= returned value.
/// Returns nullopt for delta == 0 or box_only mode (any fee in the box).
inline std::optional<double> acceptable_fee_bound(const AcceptabilitySet& set, double strike, double delta,
                                                  Role role) {
  if (set.mode == AcceptabilityMode::box_only || !(delta > 0.0)) return std::nullopt;
  const TradeTriple feeless{0.0, strike, delta};
  const double before = acceptability_risk(set, set.baseline);
  const double after = acceptability_risk(set, profit_with_trade(set, feeless, role));
  // seller: after - q delta <= before ; buyer: after + q delta <= before
  return role == Role::seller ? (after - before) / delta : (before - after) / delta;
}

struct FTRPosition {
  std::size_t from_bus = 0;  // a
  std::size_t to_bus = 0;    // b
  double volume_mw = 0.0;    // f
};

/// (p_b - p_a) f; may be negative.
inline double ftr_payoff(const FTRPosition& pos, std::span<const double> bus_prices) {
  if (pos.from_bus >= bus_prices.size() || pos.to_bus >= bus_prices.size())
    throw std::invalid_argument("FTR bus out of range");
  if (pos.volume_mw < 0.0) throw std::invalid_argument("FTR volume must be nonnegative");
  return (bus_prices[pos.to_bus] - bus_prices[pos.from_bus]) * pos.volume_mw;
}

}  // namespace optclear

#endif  // OPTCLEAR_OPTIONS_HPP
