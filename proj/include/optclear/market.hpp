#ifndef OPTCLEAR_MARKET_HPP
#define OPTCLEAR_MARKET_HPP

// Two-stage benchmark electricity market. The forward stage dispatches
// against certainty-equivalent wind; each real-time scenario re-dispatches
// within ramp limits around the forward set points. Nodal prices are the
// multipliers of the nodal energy-balance constraints.

#include "optclear/errors.hpp"
#include "optclear/network.hpp"
#include "optclear/parallel.hpp"
#include "optclear/qp.hpp"
#include "optclear/scenario.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace optclear {

/// Stand-in for unlimited capacity or ramp. Bounds at or above this value are
/// not passed to the solver; solutions are checked to stay well below it.
inline constexpr double kUnboundedMW = 1e9;

enum class ParticipantKind { dispatchable, variable, consumer };

/// c(x) = a x^2 + b x with a >= 0.
struct QuadraticCost {
  double a = 0.0;
  double b = 0.0;
  double operator()(double x) const noexcept { return a * x * x + b * x; }
  double marginal(double x) const noexcept { return 2.0 * a * x + b; }
};

struct Participant {
  std::string id;
  ParticipantKind kind = ParticipantKind::dispatchable;
  std::size_t bus = 0;
  QuadraticCost offered;    // enters dispatch, and hence prices
  QuadraticCost true_cost;  // enters profit
  double capacity_mw = kUnboundedMW;
  double ramp_mw = kUnboundedMW;  // dispatchable only
  std::size_t wind_column = 0;    // variable only: column of Scenario::wind_mw
  double demand_mw = 0.0;         // consumer only

  bool is_producer() const noexcept { return kind != ParticipantKind::consumer; }
};

inline void validate_participants(const NetworkModel& net, std::span<const Participant> parts,
                                  const ScenarioSet& s) {
  for (const Participant& p : parts) {
    if (p.bus >= net.bus_count()) throw std::invalid_argument("participant " + p.id + ": bus out of range");
    if (p.offered.a < 0.0 || p.true_cost.a < 0.0)
      throw std::invalid_argument("participant " + p.id + ": cost must be convex");
    if (!(p.capacity_mw >= 0.0) || !(p.ramp_mw >= 0.0))
      throw std::invalid_argument("participant " + p.id + ": capacity and ramp must be nonnegative");
    if (p.kind == ParticipantKind::variable) {
      if (p.wind_column >= s.wind_columns())
        throw std::invalid_argument("participant " + p.id + ": wind column missing from scenarios");
      for (const Scenario& sc : s.scenarios())
        if (sc.wind_mw[p.wind_column] > p.capacity_mw * (1.0 + 1e-12))
          throw std::invalid_argument("participant " + p.id + ": availability exceeds capacity");
    }
    if (p.kind == ParticipantKind::consumer && p.demand_mw < 0.0)
      throw std::invalid_argument("participant " + p.id + ": demand must be nonnegative");
  }
}

/// Per-bus demand of a scenario; falls back to the consumers' fixed demand
/// when the scenario carries none.
inline std::vector<double> bus_demand(const NetworkModel& net, std::span<const Participant> parts,
                                      const Scenario& s) {
  if (!s.demand_mw.empty()) {
    if (s.demand_mw.size() != net.bus_count())
      throw std::invalid_argument("scenario demand must have one entry per bus");
    return s.demand_mw;
  }
  std::vector<double> d(net.bus_count(), 0.0);
  for (const Participant& p : parts)
    if (p.kind == ParticipantKind::consumer) d[p.bus] += p.demand_mw;
  return d;
}

inline std::vector<double> expected_bus_demand(const NetworkModel& net, std::span<const Participant> parts,
                                               const ScenarioSet& s) {
  std::vector<double> d(net.bus_count(), 0.0);
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto dk = bus_demand(net, parts, s[k]);
    for (std::size_t n = 0; n < d.size(); ++n) d[n] += s.weight(k) * dk[n];
  }
  return d;
}

/// x_CE = E[available wind], clipped to [0, capacity].
inline double certainty_surrogate(const Participant& p, const ScenarioSet& s) {
  if (p.kind != ParticipantKind::variable)
    throw std::invalid_argument("certainty surrogate is defined for variable producers only");
  if (p.wind_column >= s.wind_columns()) throw std::invalid_argument("wind column missing from scenarios");
  double m = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) m += s.weight(k) * s[k].wind_mw[p.wind_column];
  return std::clamp(m, 0.0, p.capacity_mw);
}

struct DispatchResult {
  std::vector<double> dispatch;  // MW per participant (0 for consumers)
  std::vector<double> prices;    // $/MWh per bus
  double objective = 0.0;        // offered cost
  double dual_objective = 0.0;
  double kkt_residual = 0.0;
  bool feasible = true;
  std::string message;
};

namespace detail {

inline bool unbounded(double v) { return v >= 0.5 * kUnboundedMW; }

/// Builds and solves the dispatch program over producer outputs x and bus
/// injections y:  min sum c_j(x_j)  s.t.  (sum_{j at n} x_j) - y_n = d_n,
/// 1'y = 0, |H y| <= L, lower <= x <= upper.
inline DispatchResult solve_dispatch(const NetworkModel& net, std::span<const Participant> parts,
                                     std::span<const double> lower, std::span<const double> upper,
                                     std::span<const double> demand) {
  using Eigen::Index;
  std::vector<std::size_t> producers;
  for (std::size_t i = 0; i < parts.size(); ++i)
    if (parts[i].is_producer()) producers.push_back(i);
  const Index np = static_cast<Index>(producers.size());
  const Index nb = static_cast<Index>(net.bus_count());
  const Index nl = static_cast<Index>(net.line_count());
  const Index nv = np + nb;

  DispatchResult out;
  out.dispatch.assign(parts.size(), 0.0);
  out.prices.assign(net.bus_count(), 0.0);

  std::vector<Index> fixed;
  std::vector<std::pair<Index, double>> ineq_upper, ineq_lower;
  for (Index k = 0; k < np; ++k) {
    const std::size_t i = producers[static_cast<std::size_t>(k)];
    const double lo = lower[i];
    const double hi = upper[i];
    if (hi < lo - 1e-9) {
      out.feasible = false;
      out.message = "participant " + parts[i].id + " has an empty operating range";
      return out;
    }
    if (hi - lo <= 1e-9) {
      fixed.push_back(k);
      continue;
    }
    if (!unbounded(hi)) ineq_upper.emplace_back(k, hi);
    if (!unbounded(-lo)) ineq_lower.emplace_back(k, lo);
  }

  QuadraticProgram qp;
  qp.Q = Eigen::MatrixXd::Zero(nv, nv);
  qp.c = Eigen::VectorXd::Zero(nv);
  for (Index k = 0; k < np; ++k) {
    const Participant& p = parts[producers[static_cast<std::size_t>(k)]];
    qp.Q(k, k) = 2.0 * p.offered.a;
    qp.c(k) = p.offered.b;
  }
  const Index me = nb + 1 + static_cast<Index>(fixed.size());
  qp.A = Eigen::MatrixXd::Zero(me, nv);
  qp.b = Eigen::VectorXd::Zero(me);
  for (Index k = 0; k < np; ++k)
    qp.A(static_cast<Index>(parts[producers[static_cast<std::size_t>(k)]].bus), k) = 1.0;
  for (Index n = 0; n < nb; ++n) {
    qp.A(n, np + n) = -1.0;
    qp.b(n) = demand[static_cast<std::size_t>(n)];
    qp.A(nb, np + n) = 1.0;
  }
  for (std::size_t f = 0; f < fixed.size(); ++f) {
    const Index row = nb + 1 + static_cast<Index>(f);
    const std::size_t i = producers[static_cast<std::size_t>(fixed[f])];
    qp.A(row, fixed[f]) = 1.0;
    qp.b(row) = 0.5 * (lower[i] + upper[i]);
  }
  const Index mi = 2 * nl + static_cast<Index>(ineq_upper.size() + ineq_lower.size());
  qp.G = Eigen::MatrixXd::Zero(mi, nv);
  qp.h = Eigen::VectorXd::Zero(mi);
  const Eigen::VectorXd limits = net.limits();
  if (nl) {
    qp.G.block(0, np, nl, nb) = net.shift_factors();
    qp.G.block(nl, np, nl, nb) = -net.shift_factors();
    qp.h.head(nl) = limits;
    qp.h.segment(nl, nl) = limits;
  }
  Index row = 2 * nl;
  for (const auto& [k, hi] : ineq_upper) {
    qp.G(row, k) = 1.0;
    qp.h(row++) = hi;
  }
  for (const auto& [k, lo] : ineq_lower) {
    qp.G(row, k) = -1.0;
    qp.h(row++) = -lo;
  }

  const QpSolution sol = solve_qp(qp);
  if (sol.status == QpStatus::infeasible) {
    out.feasible = false;
    out.message = "dispatch program infeasible";
    return out;
  }
  if (sol.status != QpStatus::optimal)
    throw ConvergenceError("dispatch program did not converge (kkt residual " +
                           std::to_string(sol.kkt_residual) + ")");
  for (Index k = 0; k < np; ++k) {
    const double x = sol.x(k);
    if (unbounded(std::abs(x)))
      throw ConvergenceError("dispatch reached the unbounded-capacity sentinel");
    out.dispatch[producers[static_cast<std::size_t>(k)]] = x;
  }
  for (Index n = 0; n < nb; ++n) out.prices[static_cast<std::size_t>(n)] = -sol.eq_dual(n);
  out.objective = sol.objective;
  out.dual_objective = sol.dual_objective;
  out.kkt_residual = sol.kkt_residual;
  return out;
}

}  // namespace detail

/// Forward stage against expected demand and certainty-equivalent wind.
inline DispatchResult solve_forward(const NetworkModel& net, std::span<const Participant> parts,
                                    const ScenarioSet& s) {
  validate_participants(net, parts, s);
  std::vector<double> lo(parts.size(), 0.0), hi(parts.size(), 0.0);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Participant& p = parts[i];
    if (p.kind == ParticipantKind::dispatchable) hi[i] = p.capacity_mw;
    if (p.kind == ParticipantKind::variable) hi[i] = certainty_surrogate(p, s);
  }
  DispatchResult r = detail::solve_dispatch(net, parts, lo, hi, expected_bus_demand(net, parts, s));
  if (!r.feasible) throw InfeasibleError("forward stage: " + r.message);
  return r;
}

/// Real-time stage for one scenario. Infeasibility is reported in the result.
inline DispatchResult solve_realtime(const NetworkModel& net, std::span<const Participant> parts,
                                     const DispatchResult& forward, const ScenarioSet& s,
                                     std::size_t scenario) {
  const Scenario& sc = s[scenario];
  std::vector<double> lo(parts.size(), 0.0), hi(parts.size(), 0.0);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Participant& p = parts[i];
    if (p.kind == ParticipantKind::dispatchable) {
      const double set_point = forward.dispatch[i];
      const bool free_ramp = detail::unbounded(p.ramp_mw);
      lo[i] = free_ramp ? 0.0 : std::max(0.0, set_point - p.ramp_mw);
      hi[i] = free_ramp ? p.capacity_mw : std::min(p.capacity_mw, set_point + p.ramp_mw);
    } else if (p.kind == ParticipantKind::variable) {
      hi[i] = std::min(sc.wind_mw[p.wind_column], p.capacity_mw);
    }
  }
  DispatchResult r = detail::solve_dispatch(net, parts, lo, hi, bus_demand(net, parts, sc));
  if (!r.feasible) r.message = "scenario " + std::to_string(scenario) + ": " + r.message;
  return r;
}

struct MarketOutcome {
  ScenarioSet scenarios;
  DispatchResult forward;
  std::vector<DispatchResult> realtime;  // one per scenario
  std::vector<RandomSample> profits;     // one per participant; consumers carry -payments

  bool all_feasible() const {
    return std::all_of(realtime.begin(), realtime.end(), [](const DispatchResult& r) { return r.feasible; });
  }
};

/// Producer profit P_n X + p_n (x - X) - c_true(x). Consumers receive the
/// negative of their payment P_n E[d] + p_n (E[d] - d), split pro rata among
/// consumers at the same bus.
inline std::vector<RandomSample> compute_profits(const NetworkModel& net, std::span<const Participant> parts,
                                                 const MarketOutcome& outcome) {
  const ScenarioSet& s = outcome.scenarios;
  if (outcome.realtime.size() != s.size()) throw std::invalid_argument("real-time results missing");
  std::vector<std::string> failed;
  for (const auto& r : outcome.realtime)
    if (!r.feasible) failed.push_back(r.message);
  if (!failed.empty()) throw InfeasibleError("cannot settle infeasible scenarios: " + failed.front());

  const auto mean_demand = expected_bus_demand(net, parts, s);
  std::vector<double> consumer_total(net.bus_count(), 0.0);
  std::vector<int> consumer_count(net.bus_count(), 0);
  for (const Participant& p : parts)
    if (p.kind == ParticipantKind::consumer) {
      consumer_total[p.bus] += p.demand_mw;
      ++consumer_count[p.bus];
    }

  std::vector<RandomSample> out;
  out.reserve(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Participant& p = parts[i];
    const double forward_price = outcome.forward.prices[p.bus];
    std::vector<double> v(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      const DispatchResult& rt = outcome.realtime[k];
      const double price = rt.prices[p.bus];
      if (p.is_producer()) {
        const double x0 = outcome.forward.dispatch[i];
        const double x = rt.dispatch[i];
        v[k] = forward_price * x0 + price * (x - x0) - p.true_cost(x);
      } else {
        const double share = consumer_total[p.bus] > 0.0 ? p.demand_mw / consumer_total[p.bus]
                                                         : 1.0 / consumer_count[p.bus];
        const double d = bus_demand(net, parts, s[k])[p.bus];
        const double payment = forward_price * mean_demand[p.bus] + price * (mean_demand[p.bus] - d);
        v[k] = -share * payment;
      }
    }
    out.emplace_back(s, std::move(v));
  }
  return out;
}

/// Both stages for every scenario. Scenario solves are independent and run
/// on up to `threads` workers; assembly is by scenario index. Profits are
/// filled only when every scenario is feasible.
inline MarketOutcome solve_market(const NetworkModel& net, std::span<const Participant> parts,
                                  const ScenarioSet& s, std::size_t threads = default_thread_count()) {
  MarketOutcome outcome{s, solve_forward(net, parts, s), std::vector<DispatchResult>(s.size()), {}};
  parallel_for(s.size(), threads,
               [&](std::size_t k) { outcome.realtime[k] = solve_realtime(net, parts, outcome.forward, s, k); });
  if (outcome.all_feasible()) outcome.profits = compute_profits(net, parts, outcome);
  return outcome;
}

/// Real-time price faced by a participant (its bus's price) as a sample.
inline RandomSample price_sample(const MarketOutcome& outcome, const Participant& p) {
  std::vector<double> v(outcome.scenarios.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = outcome.realtime[k].prices[p.bus];
  return RandomSample(outcome.scenarios, std::move(v));
}

/// Real-time energy component p (x - X) - c_true(x) of a producer's profit.
inline RandomSample realtime_energy_component(const MarketOutcome& outcome, std::span<const Participant> parts,
                                              std::size_t i) {
  const Participant& p = parts[i];
  if (!p.is_producer()) throw std::invalid_argument("energy component is defined for producers only");
  std::vector<double> v(outcome.scenarios.size());
  for (std::size_t k = 0; k < v.size(); ++k) {
    const DispatchResult& rt = outcome.realtime[k];
    const double x = rt.dispatch[i];
    v[k] = rt.prices[p.bus] * (x - outcome.forward.dispatch[i]) - p.true_cost(x);
  }
  return RandomSample(outcome.scenarios, std::move(v));
}

struct PeriodAggregate {
  std::vector<RandomSample> average_price;  // per participant
  std::vector<RandomSample> total_profit;   // per participant
};

/// Average price over the T periods and total profit over all periods, per
/// participant. prices[i][t], profits[i][t].
inline PeriodAggregate multi_period_aggregate(const std::vector<std::vector<RandomSample>>& prices,
                                              const std::vector<std::vector<RandomSample>>& profits) {
  if (prices.size() != profits.size()) throw std::invalid_argument("prices and profits disagree on participants");
  PeriodAggregate out;
  std::optional<std::size_t> periods;
  for (std::size_t i = 0; i < prices.size(); ++i) {
    const auto& pt = prices[i];
    if (pt.empty()) throw std::invalid_argument("at least one period required");
    if (periods && *periods != pt.size()) throw std::invalid_argument("participants disagree on the number of periods");
    periods = pt.size();
    RandomSample avg = pt.front();
    for (std::size_t t = 1; t < pt.size(); ++t) avg = avg + pt[t];
    out.average_price.push_back(avg * (1.0 / static_cast<double>(pt.size())));
    const auto& ft = profits[i];
    if (ft.empty()) throw std::invalid_argument("at least one profit period required");
    RandomSample total = ft.front();
    for (std::size_t t = 1; t < ft.size(); ++t) total = total + ft[t];
    out.total_profit.push_back(std::move(total));
  }
  return out;
}

}  // namespace optclear

#endif  // OPTCLEAR_MARKET_HPP
