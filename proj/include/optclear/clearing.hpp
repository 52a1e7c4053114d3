#ifndef OPTCLEAR_CLEARING_HPP
#define OPTCLEAR_CLEARING_HPP

// Centralized clearing of the options market.
//
// Outer variables are the trade triples (q, K, delta) of every participant
// (or a shared (q, K) plus per-participant volumes when the system operator
// clears). Per-scenario exercise volumes delta_g are not outer variables:
// allocate_exercise resolves them given the triples.
//
// The local search minimizes a smoothed surrogate: (p - K)^+ and 1{p >= K}
// become x sigmoid(beta x) and sigmoid(beta x). Exercise is split among
// sellers pro rata, then shifted along the spread of their payoffs to cancel
// the surplus. Volume balance, residual surplus, allocations outside
// [0, delta_g] and acceptability enter as quadratic penalties under an
// increasing weight schedule. Every candidate is then repaired and re-evaluated with
// exact payoffs; only exactly feasible candidates are eligible, and the zero
// trade is always among them.

#include "optclear/errors.hpp"
#include "optclear/market.hpp"
#include "optclear/options.hpp"
#include "optclear/parallel.hpp"
#include "optclear/qp.hpp"
#include "optclear/scenario.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace optclear {

// ---------------------------------------------------------------------------
// Smooth surrogates

inline double sigmoid(double t) noexcept {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

/// (1 + exp(-beta x))^-1, a surrogate for 1{x >= 0}.
inline double smooth_indicator(double x, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  return sigmoid(beta * x);
}

/// x (1 + exp(-beta x))^-1, a surrogate for x^+.
inline double smooth_plus(double x, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  return x * sigmoid(beta * x);
}

struct SmoothingConfig {
  double beta = 0.0;    // 1/($/MWh); 0 selects 50 / price scale
  double ms_tol = 0.0;  // $; 0 selects 1e-4 * max price * max delta bound
  double eq_tol = 1e-6; // MW
};

enum class ClearingMode { social, so, selfish };

inline std::string to_string(ClearingMode m) {
  switch (m) {
    case ClearingMode::social: return "social";
    case ClearingMode::so: return "so";
    case ClearingMode::selfish: return "selfish";
  }
  return "unknown";
}

enum class AllocationObjective { min_abs_surplus, max_surplus };

/// How allocate_exercise picks among allocations with the same surplus.
enum class AllocationTieBreak {
  proportional,   // closest to delta_g * demand / sum(delta)
  lexicographic,  // lexicographically smallest vertex
};

struct ClearingOptions {
  SmoothingConfig smoothing;
  int max_iterations = 400;  // quasi-Newton iterations per start and penalty stage
  int random_starts = 4;
  std::uint64_t seed = 1;
  std::size_t threads = default_thread_count();
  AllocationTieBreak tie_break = AllocationTieBreak::proportional;
  std::vector<double> penalty_schedule = {1e1, 1e3, 1e5, 1e7, 1e9};
  int polish_iterations = 6000;  // exact-settlement random search after the smoothed stage
};

struct OptionParticipant {
  std::string id;
  Role role = Role::buyer;
  AcceptabilitySet set;
  std::optional<RandomSample> energy_component;  // A_i; falls back to the baseline profit
};

struct ClearingProblem {
  ScenarioSet scenarios;
  std::vector<OptionParticipant> participants;
};

struct OptionSpec {
  std::size_t participant = 0;  // index into the market's participant list
  Role role = Role::buyer;
  TradeBounds bounds;
  AcceptabilityMode mode = AcceptabilityMode::risk_neutral;
  double alpha = 0.0;
};

inline ClearingProblem make_clearing_problem(const MarketOutcome& outcome, std::span<const Participant> parts,
                                             std::span<const OptionSpec> specs) {
  if (outcome.profits.size() != parts.size()) throw std::invalid_argument("market outcome has no settled profits");
  ClearingProblem problem{outcome.scenarios, {}};
  for (const OptionSpec& spec : specs) {
    if (spec.participant >= parts.size()) throw std::invalid_argument("option participant out of range");
    if (spec.mode == AcceptabilityMode::cvar) RiskPreference check(spec.alpha);
    const Participant& p = parts[spec.participant];
    OptionParticipant op{p.id, spec.role,
                         AcceptabilitySet{spec.bounds, spec.mode, spec.alpha, outcome.profits[spec.participant],
                                          price_sample(outcome, p)},
                         std::nullopt};
    if (p.is_producer()) op.energy_component = realtime_energy_component(outcome, parts, spec.participant);
    problem.participants.push_back(std::move(op));
  }
  return problem;
}

// ---------------------------------------------------------------------------
// Exercise allocation

struct ExerciseAllocation {
  std::vector<std::size_t> sellers;         // participant indices
  std::vector<std::vector<double>> volume;  // [seller][scenario], MW
};

struct ScenarioAllocation {
  std::vector<double> delta;
  double surplus = 0.0;  // a.delta - target
};

namespace detail {

inline std::vector<double> greedy_fill(std::span<const double> cap, std::span<const double> unit, double demand,
                                       bool ascending) {
  std::vector<std::size_t> order(cap.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return ascending ? unit[a] < unit[b] : unit[a] > unit[b]; });
  std::vector<double> d(cap.size(), 0.0);
  double left = demand;
  for (std::size_t k = 0; k < order.size() && left > 0.0;) {
    // sellers with equal unit payoff share pro rata
    std::size_t end = k;
    double group_cap = 0.0;
    while (end < order.size() && unit[order[end]] == unit[order[k]]) group_cap += cap[order[end++]];
    const double take = std::min(left, group_cap);
    for (std::size_t j = k; j < end; ++j)
      d[order[j]] = group_cap > 0.0 ? take * cap[order[j]] / group_cap : 0.0;
    left -= take;
    k = end;
  }
  return d;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Solves over {sum d = demand, unit.d = value, 0 <= d <= cap}: nearest point
/// to `anchor` when `linear` is empty, otherwise minimizes linear.d.
inline std::optional<std::vector<double>> face_program(std::span<const double> cap, std::span<const double> unit,
                                                       double demand, double value,
                                                       std::span<const double> anchor,
                                                       std::span<const double> linear, bool with_value_row) {
  using Eigen::Index;
  const Index n = static_cast<Index>(cap.size());
  QuadraticProgram qp;
  qp.Q = linear.empty() ? Eigen::MatrixXd(Eigen::MatrixXd::Identity(n, n)) : Eigen::MatrixXd::Zero(n, n);
  qp.c = Eigen::VectorXd::Zero(n);
  for (Index i = 0; i < n; ++i) qp.c(i) = linear.empty() ? -anchor[static_cast<std::size_t>(i)] : linear[static_cast<std::size_t>(i)];
  const Index me = with_value_row ? 2 : 1;
  qp.A = Eigen::MatrixXd::Zero(me, n);
  qp.b = Eigen::VectorXd::Zero(me);
  qp.A.row(0).setOnes();
  qp.b(0) = demand;
  if (with_value_row) {
    for (Index i = 0; i < n; ++i) qp.A(1, i) = unit[static_cast<std::size_t>(i)];
    qp.b(1) = value;
  }
  qp.G = Eigen::MatrixXd::Zero(2 * n, n);
  qp.h = Eigen::VectorXd::Zero(2 * n);
  for (Index i = 0; i < n; ++i) {
    qp.G(i, i) = 1.0;
    qp.h(i) = cap[static_cast<std::size_t>(i)];
    qp.G(n + i, i) = -1.0;
  }
  const QpSolution sol = solve_qp(qp);
  if (sol.status != QpStatus::optimal) return std::nullopt;
  std::vector<double> d(cap.size());
  for (Index i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = std::clamp(sol.x(i), 0.0, cap[static_cast<std::size_t>(i)]);
  return d;
}

}  // namespace detail

/// Exercise allocation in one scenario. `cap` are the sellers' volumes,
/// `unit` their per-MW settlement (p_g - K_g)^+, `demand` the exercised
/// volume sum_r delta_r 1{p_r >= K_r} and `target` the cash sellers must
/// deliver for zero surplus. Surplus is unit.delta - target.
inline ScenarioAllocation allocate_scenario(std::span<const double> cap, std::span<const double> unit,
                                            double demand, double target, AllocationObjective objective,
                                            AllocationTieBreak tie_break, double eq_tol = 1e-6) {
  if (cap.size() != unit.size()) throw std::invalid_argument("allocation: dimension mismatch");
  const double total = std::accumulate(cap.begin(), cap.end(), 0.0);
  if (demand > total + eq_tol)
    throw InfeasibleError("exercised volume " + std::to_string(demand) + " MW exceeds sold volume " +
                          std::to_string(total) + " MW");
  demand = std::clamp(demand, 0.0, total);
  ScenarioAllocation out;
  if (cap.empty()) {
    out.surplus = -target;
    return out;
  }
  const std::vector<double> low = detail::greedy_fill(cap, unit, demand, true);
  const std::vector<double> high = detail::greedy_fill(cap, unit, demand, false);
  const double v_min = detail::dot(unit, low);
  const double v_max = detail::dot(unit, high);
  const double value = objective == AllocationObjective::max_surplus ? v_max : std::clamp(target, v_min, v_max);
  const double scale = 1.0 + std::abs(v_max) + std::abs(v_min);
  const bool flat = v_max - v_min <= 1e-12 * scale;

  if (cap.size() == 1) {
    out.delta = {demand};
    out.surplus = unit[0] * demand - target;
    return out;
  }

  std::vector<double> prop(cap.size(), 0.0);
  if (total > 0.0)
    for (std::size_t g = 0; g < cap.size(); ++g) prop[g] = cap[g] * demand / total;

  if (tie_break == AllocationTieBreak::proportional) {
    if (flat || std::abs(detail::dot(unit, prop) - value) <= 1e-12 * scale) {
      out.delta = prop;
    } else if (value <= v_min + 1e-12 * scale) {
      out.delta = low;
    } else if (value >= v_max - 1e-12 * scale) {
      out.delta = high;
    } else {
      auto d = detail::face_program(cap, unit, demand, value, prop, {}, true);
      out.delta = d ? *d : (std::abs(value - v_min) < std::abs(value - v_max) ? low : high);
    }
  } else {
    // fix sellers one at a time at their smallest feasible volume
    std::vector<double> d(cap.size(), 0.0);
    double rest_demand = demand;
    double rest_value = value;
    for (std::size_t g = 0; g < cap.size(); ++g) {
      std::vector<double> sub_cap(cap.begin() + static_cast<std::ptrdiff_t>(g), cap.end());
      std::vector<double> sub_unit(unit.begin() + static_cast<std::ptrdiff_t>(g), unit.end());
      std::vector<double> linear(sub_cap.size(), 0.0);
      linear[0] = 1.0;
      const double su_min = *std::min_element(sub_unit.begin(), sub_unit.end());
      const double su_max = *std::max_element(sub_unit.begin(), sub_unit.end());
      const bool with_value = su_max - su_min > 1e-12 * scale;
      double pick;
      if (sub_cap.size() == 1) {
        pick = rest_demand;
      } else {
        auto sol = detail::face_program(sub_cap, sub_unit, rest_demand, rest_value, {}, linear, with_value);
        pick = sol ? (*sol)[0] : prop[g];
      }
      pick = std::clamp(pick, 0.0, cap[g]);
      d[g] = pick;
      rest_demand -= pick;
      rest_value -= unit[g] * pick;
    }
    out.delta = std::move(d);
  }
  out.surplus = detail::dot(unit, out.delta) - target;
  return out;
}

// ---------------------------------------------------------------------------
// Problem scales

struct ClearingScales {
  double price_scale = 1.0;  // spread of real-time prices across participants
  double max_price = 1.0;
  double volume_scale = 1.0; // largest volume bound
  double money_scale = 1.0;  // price_scale * volume_scale
  double beta = 1.0;
  double ms_tol = 1e-12;
  double eq_tol = 1e-6;
};

inline ClearingScales clearing_scales(const ClearingProblem& problem, const SmoothingConfig& cfg) {
  ClearingScales s;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  double max_abs = 0.0;
  double vol = 0.0;
  for (const auto& p : problem.participants) {
    for (double v : p.set.price.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      max_abs = std::max(max_abs, std::abs(v));
    }
    vol = std::max(vol, p.set.bounds.delta_max);
  }
  if (problem.participants.empty()) lo = hi = 0.0;
  const double spread = hi - lo;
  s.max_price = max_abs;
  s.price_scale = spread > 1e-9 * std::max(1.0, max_abs) ? spread : std::max(1.0, max_abs);
  s.volume_scale = vol > 0.0 ? vol : 1.0;
  s.money_scale = s.price_scale * s.volume_scale;
  s.beta = cfg.beta > 0.0 ? cfg.beta : 50.0 / s.price_scale;
  const double ms = 1e-4 * max_abs * vol;
  s.ms_tol = cfg.ms_tol > 0.0 ? cfg.ms_tol : std::max(ms, 1e-12);
  s.eq_tol = cfg.eq_tol;
  return s;
}

// ---------------------------------------------------------------------------
// Smoothed objective

/// Smoothed clearing objective over the outer decision vector with an
/// analytic gradient. Layout: per participant (q, K, delta) for social and
/// selfish clearing; (q, K, delta_1..delta_m) for operator clearing.
class SmoothedObjective {
 public:
  SmoothedObjective(const ClearingProblem& problem, ClearingMode mode, const ClearingScales& scales)
      : mode_(mode), scales_(scales), m_(problem.participants.size()), n_(problem.scenarios.size()) {
    const auto w = problem.scenarios.weights();
    weights_.assign(w.begin(), w.end());
    for (const auto& p : problem.participants) {
      baseline_.emplace_back(p.set.baseline.values().begin(), p.set.baseline.values().end());
      price_.emplace_back(p.set.price.values().begin(), p.set.price.values().end());
      roles_.push_back(p.role);
      sets_.push_back(&p.set);
      if (p.role == Role::seller) sellers_.push_back(roles_.size() - 1);
    }
    allocation_eps_ = 1e-6 * scales_.price_scale * scales_.price_scale;
    risk_before_.resize(m_);
    for (std::size_t i = 0; i < m_; ++i) {
      std::vector<double> loss(n_);
      for (std::size_t k = 0; k < n_; ++k) loss[k] = -baseline_[i][k];
      risk_before_[i] = smoothed_risk(i, loss, nullptr);
    }
  }

  std::size_t dimension() const noexcept { return mode_ == ClearingMode::so ? 2 + m_ : 3 * m_; }
  ClearingMode mode() const noexcept { return mode_; }
  double penalty() const noexcept { return penalty_; }
  void set_penalty(double lambda) noexcept { penalty_ = lambda; }

  void bounds(Eigen::VectorXd& lo, Eigen::VectorXd& hi) const {
    lo = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dimension()));
    hi = lo;
    if (mode_ == ClearingMode::so) {
      double q = std::numeric_limits<double>::infinity();
      double k = q;
      for (std::size_t i = 0; i < m_; ++i) {
        q = std::min(q, sets_[i]->bounds.q_max);
        k = std::min(k, sets_[i]->bounds.K_max);
        hi(static_cast<Eigen::Index>(2 + i)) = sets_[i]->bounds.delta_max;
      }
      hi(0) = m_ ? q : 0.0;
      hi(1) = m_ ? k : 0.0;
    } else {
      for (std::size_t i = 0; i < m_; ++i) {
        hi(static_cast<Eigen::Index>(3 * i)) = sets_[i]->bounds.q_max;
        hi(static_cast<Eigen::Index>(3 * i + 1)) = sets_[i]->bounds.K_max;
        hi(static_cast<Eigen::Index>(3 * i + 2)) = sets_[i]->bounds.delta_max;
      }
    }
  }

  std::vector<TradeTriple> trades(const Eigen::VectorXd& x) const {
    std::vector<TradeTriple> t(m_);
    for (std::size_t i = 0; i < m_; ++i) {
      if (mode_ == ClearingMode::so) {
        t[i] = {x(0), x(1), x(static_cast<Eigen::Index>(2 + i))};
      } else {
        const auto b = static_cast<Eigen::Index>(3 * i);
        t[i] = {x(b), x(b + 1), x(b + 2)};
      }
    }
    return t;
  }

  Eigen::VectorXd pack(std::span<const TradeTriple> t) const {
    Eigen::VectorXd x(static_cast<Eigen::Index>(dimension()));
    for (std::size_t i = 0; i < m_; ++i) {
      if (mode_ == ClearingMode::so) {
        x(0) = t[i].q;
        x(1) = t[i].K;
        x(static_cast<Eigen::Index>(2 + i)) = t[i].delta;
      } else {
        const auto b = static_cast<Eigen::Index>(3 * i);
        x(b) = t[i].q;
        x(b + 1) = t[i].K;
        x(b + 2) = t[i].delta;
      }
    }
    return x;
  }

  /// Sum of smoothed profit variances only (no penalties), in $^2.
  double smoothed_variance(const Eigen::VectorXd& x) const {
    Terms terms = compute_terms(trades(x));
    double total = 0.0;
    for (std::size_t i = 0; i < m_; ++i) total += weighted_variance(weights_, terms.profit[i]);
    return total;
  }

  double operator()(const Eigen::VectorXd& x, Eigen::VectorXd* gradient = nullptr) const {
    const std::vector<TradeTriple> t = trades(x);
    const Terms terms = compute_terms(t);
    const double unit = scales_.money_scale;
    const double unit2 = unit * unit;
    const double vol2 = scales_.volume_scale * scales_.volume_scale;
    const double lambda = penalty_;
    double value = 0.0;

    // d value / d V_i^w
    std::vector<std::vector<double>> gv(m_, std::vector<double>(n_, 0.0));
    if (mode_ == ClearingMode::selfish) {
      value -= weighted_mean(weights_, terms.ms) / unit;
      for (std::size_t i = 0; i < m_; ++i)
        for (std::size_t k = 0; k < n_; ++k) gv[i][k] = weights_[k] / unit;
    } else {
      for (std::size_t i = 0; i < m_; ++i) {
        const double mean = weighted_mean(weights_, terms.profit[i]);
        double var = 0.0;
        for (std::size_t k = 0; k < n_; ++k) {
          const double dev = terms.profit[i][k] - mean;
          var += weights_[k] * dev * dev;
          gv[i][k] = 2.0 * weights_[k] * dev / unit2;
        }
        value += var / unit2;
      }
      for (std::size_t k = 0; k < n_; ++k) {
        value += lambda * weights_[k] * terms.ms[k] * terms.ms[k] / unit2;
        for (std::size_t i = 0; i < m_; ++i) gv[i][k] -= 2.0 * lambda * weights_[k] * terms.ms[k] / unit2;
      }
    }

    std::vector<double> gq(m_, 0.0), gk(m_, 0.0), gd(m_, 0.0);
    const std::size_t ns = sellers_.size();
    std::vector<double> gdelta(ns), ga(ns), gc(ns), gabar(ns);
    for (std::size_t i = 0; i < m_; ++i) {
      if (roles_[i] != Role::buyer) continue;
      for (std::size_t k = 0; k < n_; ++k) {
        const double g = gv[i][k];
        gq[i] -= g * t[i].delta;
        gk[i] -= g * t[i].delta * terms.dplus[i][k];
        gd[i] += g * (terms.plus[i][k] - t[i].q);
      }
    }
    for (std::size_t k = 0; k < n_; ++k) {
      const Allocation& al = terms.alloc[k];
      for (std::size_t s = 0; s < ns; ++s) {
        const std::size_t i = sellers_[s];
        const double g = gv[i][k];
        gq[i] += g * t[i].delta;
        gd[i] += g * t[i].q;
        gdelta[s] = -g * terms.plus[i][k];
        ga[s] = -g * al.delta[s];
        // allocated volume outside [0, delta_g]
        const double over = al.delta[s] - t[i].delta;
        const double under = -al.delta[s];
        if (over > 0.0) {
          value += lambda * weights_[k] * over * over / vol2;
          gdelta[s] += 2.0 * lambda * weights_[k] * over / vol2;
          gd[i] -= 2.0 * lambda * weights_[k] * over / vol2;
        }
        if (under > 0.0) {
          value += lambda * weights_[k] * under * under / vol2;
          gdelta[s] -= 2.0 * lambda * weights_[k] * under / vol2;
        }
      }
      // delta_g = c_g + abar_g * tau,  tau = e / (N + eps)
      double gtau = 0.0;
      for (std::size_t s = 0; s < ns; ++s) {
        gc[s] = gdelta[s];
        gabar[s] = gdelta[s] * al.tau;
        gtau += gdelta[s] * al.abar[s];
      }
      const double denom = al.norm + allocation_eps_;
      const double ge = gtau / denom;
      const double gnorm = -gtau * al.tau / denom;
      double gabar_sum = 0.0;
      for (std::size_t s = 0; s < ns; ++s) {
        gabar[s] += 2.0 * al.abar[s] * gnorm;
        gabar_sum += gabar[s];
      }
      for (std::size_t s = 0; s < ns; ++s) ga[s] += gabar[s] - gabar_sum / static_cast<double>(ns);
      // e = T - a.c
      double gT = ge;
      for (std::size_t s = 0; s < ns; ++s) {
        ga[s] -= ge * al.c[s];
        gc[s] -= ge * terms.plus[sellers_[s]][k];
      }
      // c_g = delta_g E / D_S
      double gE = 0.0;
      if (terms.seller_volume > kTinyVolume) {
        double gds = 0.0;
        for (std::size_t s = 0; s < ns; ++s) {
          const std::size_t i = sellers_[s];
          gd[i] += gc[s] * al.exercised / terms.seller_volume;
          gE += gc[s] * t[i].delta / terms.seller_volume;
          gds -= gc[s] * al.c[s] / terms.seller_volume;
        }
        for (std::size_t s = 0; s < ns; ++s) gd[sellers_[s]] += gds;
      }
      for (std::size_t s = 0; s < ns; ++s) gk[sellers_[s]] -= ga[s] * terms.dplus[sellers_[s]][k];
      // T = sum_r delta_r (S_r - q_r) + sum_g q_g delta_g ;  E = sum_r delta_r H_r
      for (std::size_t i = 0; i < m_; ++i) {
        if (roles_[i] == Role::buyer) {
          gk[i] -= gT * t[i].delta * terms.dplus[i][k] + gE * t[i].delta * terms.dind[i][k];
          gd[i] += gT * (terms.plus[i][k] - t[i].q) + gE * terms.ind[i][k];
          gq[i] -= gT * t[i].delta;
        } else {
          gq[i] += gT * t[i].delta;
          gd[i] += gT * t[i].q;
        }
      }
    }

    // acceptability penalties on the worst-case profit
    for (std::size_t i = 0; i < m_; ++i) {
      if (sets_[i]->mode == AcceptabilityMode::box_only) continue;
      const TradeTriple& ti = t[i];
      const double sign = roles_[i] == Role::buyer ? 1.0 : -1.0;  // V = sign * delta * (S - q)
      std::vector<double> loss(n_);
      for (std::size_t k = 0; k < n_; ++k)
        loss[k] = -(baseline_[i][k] + sign * ti.delta * (terms.plus[i][k] - ti.q));
      std::vector<double> dloss(n_);
      const double viol = smoothed_risk(i, loss, &dloss) - risk_before_[i];
      if (viol <= 0.0) continue;
      value += lambda * viol * viol / unit2;
      const double c = 2.0 * lambda * viol / unit2;
      for (std::size_t k = 0; k < n_; ++k) {
        const double gV = -c * dloss[k];  // d/dV of the penalty
        gq[i] -= gV * sign * ti.delta;
        gk[i] -= gV * sign * ti.delta * terms.dplus[i][k];
        gd[i] += gV * sign * (terms.plus[i][k] - ti.q);
      }
    }

    // volume balance
    const double imbalance = terms.seller_volume - terms.buyer_volume;
    value += lambda * imbalance * imbalance / vol2;
    for (std::size_t i = 0; i < m_; ++i)
      gd[i] += (roles_[i] == Role::seller ? 1.0 : -1.0) * 2.0 * lambda * imbalance / vol2;

    if (gradient) {
      gradient->setZero(static_cast<Eigen::Index>(dimension()));
      for (std::size_t i = 0; i < m_; ++i) {
        if (mode_ == ClearingMode::so) {
          (*gradient)(0) += gq[i];
          (*gradient)(1) += gk[i];
          (*gradient)(static_cast<Eigen::Index>(2 + i)) = gd[i];
        } else {
          const auto b = static_cast<Eigen::Index>(3 * i);
          (*gradient)(b) = gq[i];
          (*gradient)(b + 1) = gk[i];
          (*gradient)(b + 2) = gd[i];
        }
      }
    }
    return value;
  }

 private:
  static constexpr double kTinyVolume = 1e-12;

  // Smoothed exercise split in one scenario: the proportional split c,
  // corrected along the centered seller payoffs abar so that the sellers'
  // settlement matches the buyers' net cash (zero surplus) when payoffs differ.
  struct Allocation {
    double exercised = 0.0;  // E
    double norm = 0.0;       // |abar|^2
    double tau = 0.0;
    std::vector<double> c, abar, delta;
  };

  struct Terms {
    std::vector<std::vector<double>> plus, dplus, ind, dind, profit;
    std::vector<Allocation> alloc;
    std::vector<double> ms;
    double buyer_volume = 0.0;
    double seller_volume = 0.0;
  };

  Terms compute_terms(std::span<const TradeTriple> t) const {
    Terms terms;
    const double beta = scales_.beta;
    terms.plus.assign(m_, std::vector<double>(n_));
    terms.dplus = terms.ind = terms.dind = terms.profit = terms.plus;
    terms.ms.assign(n_, 0.0);
    double fees = 0.0;
    for (std::size_t i = 0; i < m_; ++i) {
      if (roles_[i] == Role::buyer) {
        terms.buyer_volume += t[i].delta;
        fees += t[i].q * t[i].delta;
      } else {
        terms.seller_volume += t[i].delta;
        fees -= t[i].q * t[i].delta;
      }
      for (std::size_t k = 0; k < n_; ++k) {
        const double x = price_[i][k] - t[i].K;
        const double s = sigmoid(beta * x);
        const double ds = beta * s * (1.0 - s);
        terms.ind[i][k] = s;
        terms.dind[i][k] = ds;           // d ind / d price; d/dK is the negative
        terms.plus[i][k] = x * s;
        terms.dplus[i][k] = s + x * ds;  // d plus / d price
      }
    }
    const std::size_t ns = sellers_.size();
    terms.alloc.resize(n_);
    for (std::size_t k = 0; k < n_; ++k) {
      Allocation& al = terms.alloc[k];
      double buyer_cash = 0.0;
      for (std::size_t i = 0; i < m_; ++i) {
        if (roles_[i] != Role::buyer) continue;
        al.exercised += t[i].delta * terms.ind[i][k];
        buyer_cash += t[i].delta * terms.plus[i][k];
      }
      const double target = buyer_cash - fees;
      al.c.assign(ns, 0.0);
      al.abar.assign(ns, 0.0);
      al.delta.assign(ns, 0.0);
      double mean_a = 0.0;
      for (std::size_t s = 0; s < ns; ++s) mean_a += terms.plus[sellers_[s]][k] / static_cast<double>(ns);
      double e = target;
      for (std::size_t s = 0; s < ns; ++s) {
        const std::size_t i = sellers_[s];
        if (terms.seller_volume > kTinyVolume) al.c[s] = t[i].delta * al.exercised / terms.seller_volume;
        al.abar[s] = terms.plus[i][k] - mean_a;
        al.norm += al.abar[s] * al.abar[s];
        e -= terms.plus[i][k] * al.c[s];
      }
      al.tau = e / (al.norm + allocation_eps_);
      for (std::size_t s = 0; s < ns; ++s) al.delta[s] = al.c[s] + al.abar[s] * al.tau;
    }
    for (std::size_t i = 0; i < m_; ++i) {
      std::size_t slot = 0;
      if (roles_[i] == Role::seller)
        slot = static_cast<std::size_t>(std::find(sellers_.begin(), sellers_.end(), i) - sellers_.begin());
      for (std::size_t k = 0; k < n_; ++k) {
        const double cash = roles_[i] == Role::buyer
                                ? t[i].delta * (terms.plus[i][k] - t[i].q)
                                : t[i].q * t[i].delta - terms.plus[i][k] * terms.alloc[k].delta[slot];
        terms.profit[i][k] = baseline_[i][k] + cash;
        terms.ms[k] -= cash;
      }
    }
    return terms;
  }
  /// Mean loss (risk neutral) or CVaR with softplus smoothing of the
  /// Rockafellar-Uryasev form; writes d risk / d loss when asked.
  double smoothed_risk(std::size_t i, std::span<const double> loss, std::vector<double>* grad) const {
    const AcceptabilitySet& set = *sets_[i];
    const double alpha = set.mode == AcceptabilityMode::cvar ? set.alpha : 0.0;
    if (alpha == 0.0) {
      if (grad) grad->assign(weights_.begin(), weights_.end());
      return weighted_mean(weights_, loss);
    }
    const double beta = 50.0 / scales_.money_scale;
    const double tail = 1.0 - alpha;
    const auto [mn, mx] = std::minmax_element(loss.begin(), loss.end());
    double lo = *mn - 60.0 / beta;
    double hi = *mx + 60.0 / beta;
    // mass(c) = sum w sigmoid(beta (z - c)) decreases in c; solve mass(c) = tail
    const auto mass = [&](double c) {
      double m = 0.0, dm = 0.0;
      for (std::size_t k = 0; k < loss.size(); ++k) {
        const double s = sigmoid(beta * (loss[k] - c));
        m += weights_[k] * s;
        dm -= weights_[k] * beta * s * (1.0 - s);
      }
      return std::pair{m, dm};
    };
    double c = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
      const auto [m, dm] = mass(c);
      const double f = m - tail;
      if (std::abs(f) <= 1e-15) break;
      if (f > 0.0) lo = c; else hi = c;
      double next = dm < 0.0 ? c - f / dm : 0.5 * (lo + hi);
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (std::abs(next - c) <= 1e-14 * (1.0 + std::abs(c))) {
        c = next;
        break;
      }
      c = next;
    }
    double value = c;
    if (grad) grad->assign(loss.size(), 0.0);
    for (std::size_t k = 0; k < loss.size(); ++k) {
      const double t = beta * (loss[k] - c);
      const double softplus = t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
      value += weights_[k] * softplus / beta / tail;
      if (grad) (*grad)[k] = weights_[k] * sigmoid(t) / tail;
    }
    return value;
  }

  ClearingMode mode_;
  ClearingScales scales_;
  std::size_t m_;
  std::size_t n_;
  double penalty_ = 1e1;
  std::vector<double> weights_;
  std::vector<std::vector<double>> baseline_, price_;
  std::vector<double> risk_before_;
  std::vector<Role> roles_;
  std::vector<std::size_t> sellers_;
  std::vector<const AcceptabilitySet*> sets_;
  double allocation_eps_ = 0.0;
};

// ---------------------------------------------------------------------------
// Box-constrained quasi-Newton

struct LocalSearchResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
};

/// Projected BFGS on the unit-scaled box. Variables sitting on a bound with
/// the gradient pointing outward are frozen for the step; the step is
/// projected back onto the box and accepted by Armijo backtracking.
template <class Objective>
LocalSearchResult minimize_in_box(const Objective& f, Eigen::VectorXd x0, const Eigen::VectorXd& lo,
                                  const Eigen::VectorXd& hi, int max_iterations, double tolerance = 1e-10) {
  using Eigen::Index;
  using Eigen::VectorXd;
  const Index n = x0.size();
  VectorXd range = hi - lo;
  std::vector<bool> fixed(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    fixed[static_cast<std::size_t>(i)] = !(range(i) > 0.0);
    if (!(range(i) > 0.0)) range(i) = 1.0;
  }
  const auto to_x = [&](const VectorXd& u) {
    VectorXd x = lo + range.cwiseProduct(u);
    for (Index i = 0; i < n; ++i)
      if (fixed[static_cast<std::size_t>(i)]) x(i) = lo(i);
    return x;
  };
  const auto project = [&](VectorXd u) {
    for (Index i = 0; i < n; ++i) u(i) = fixed[static_cast<std::size_t>(i)] ? 0.0 : std::clamp(u(i), 0.0, 1.0);
    return u;
  };
  const auto eval = [&](const VectorXd& u, VectorXd& g) {
    VectorXd gx(n);
    const double v = f(to_x(u), &gx);
    g = gx.cwiseProduct(range);
    for (Index i = 0; i < n; ++i)
      if (fixed[static_cast<std::size_t>(i)]) g(i) = 0.0;
    return v;
  };

  VectorXd u = project((x0 - lo).cwiseQuotient(range));
  VectorXd g;
  double value = eval(u, g);
  Eigen::MatrixXd inv_hessian = Eigen::MatrixXd::Identity(n, n);
  int it = 0;
  int stalls = 0;
  for (; it < max_iterations; ++it) {
    const VectorXd pg = project(u - g) - u;
    if (pg.lpNorm<Eigen::Infinity>() <= tolerance) break;

    std::vector<bool> frozen(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i)
      frozen[static_cast<std::size_t>(i)] = fixed[static_cast<std::size_t>(i)] || (u(i) <= 0.0 && g(i) > 0.0) ||
                                           (u(i) >= 1.0 && g(i) < 0.0);
    VectorXd gf = g;
    for (Index i = 0; i < n; ++i)
      if (frozen[static_cast<std::size_t>(i)]) gf(i) = 0.0;
    VectorXd d = -(inv_hessian * gf);
    for (Index i = 0; i < n; ++i)
      if (frozen[static_cast<std::size_t>(i)]) d(i) = 0.0;
    if (!(d.dot(gf) < 0.0)) {
      inv_hessian.setIdentity();
      d = -gf;
    }

    double step = 1.0;
    VectorXd trial, gtrial;
    double vtrial = value;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      trial = project(u + step * d);
      vtrial = eval(trial, gtrial);
      if (std::isfinite(vtrial) && vtrial <= value + 1e-4 * g.dot(trial - u)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (inv_hessian.isIdentity()) break;
      inv_hessian.setIdentity();
      continue;
    }
    const VectorXd s = trial - u;
    const VectorXd y = gtrial - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      inv_hessian = (I - rho * s * y.transpose()) * inv_hessian * (I - rho * y * s.transpose()) +
                    rho * s * s.transpose();
    }
    const double improvement = value - vtrial;
    u = trial;
    g = gtrial;
    value = vtrial;
    if (improvement <= 1e-15 * (1.0 + std::abs(value))) {
      if (++stalls >= 5) {
        ++it;
        break;
      }
    } else {
      stalls = 0;
    }
  }
  return {to_x(u), value, it};
}

// ---------------------------------------------------------------------------
// Exact evaluation

struct ClearingDiagnostics {
  int iterations = 0;
  int starts = 0;
  int eligible_candidates = 0;
  double volume_residual = 0.0;   // |sum delta_g - sum delta_r|, MW
  double max_abs_surplus = 0.0;   // max |MS|, $
  double ms_tol = 0.0;
  double beta = 0.0;
  double smoothed_variance = 0.0; // at the returned trades, $^2
  double exact_variance = 0.0;
  bool fallback_used = false;
  std::vector<std::size_t> flagged_scenarios;  // zero surplus unattainable
  std::string status;
};

struct ClearingResult {
  ClearingMode mode = ClearingMode::social;
  std::vector<std::string> ids;
  std::vector<Role> roles;
  std::vector<TradeTriple> trades;
  ExerciseAllocation allocation;
  std::vector<double> ms;                        // per scenario
  std::vector<std::vector<double>> profit_after; // per participant per scenario
  std::vector<double> var_before;
  std::vector<double> var_after;
  double aggregate_delta = 0.0;
  double expected_ms = 0.0;
  double objective = 0.0;  // sum of variances (social, so) or expected surplus (selfish)
  bool feasible = false;
  ClearingDiagnostics diagnostics;

  RandomSample ms_sample(const ScenarioSet& s) const { return RandomSample(s, ms); }
};

/// Settles a fixed set of trades with exact payoffs: allocates exercise per
/// scenario, computes surplus and profits, and checks feasibility.
inline ClearingResult evaluate_trades(const ClearingProblem& problem, ClearingMode mode,
                                      std::vector<TradeTriple> trades, const ClearingScales& scales,
                                      AllocationTieBreak tie_break) {
  const std::size_t m = problem.participants.size();
  const std::size_t n = problem.scenarios.size();
  const auto w = problem.scenarios.weights();
  if (trades.size() != m) throw std::invalid_argument("one trade per participant required");
  ClearingResult r;
  r.mode = mode;
  r.trades = std::move(trades);
  for (std::size_t i = 0; i < m; ++i) {
    r.ids.push_back(problem.participants[i].id);
    r.roles.push_back(problem.participants[i].role);
    if (r.roles.back() == Role::seller) r.allocation.sellers.push_back(i);
  }
  double fees = 0.0;
  double buyer_volume = 0.0;
  double seller_volume = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& t = r.trades[i];
    if (r.roles[i] == Role::buyer) {
      fees += t.q * t.delta;
      buyer_volume += t.delta;
    } else {
      fees -= t.q * t.delta;
      seller_volume += t.delta;
    }
  }
  r.diagnostics.volume_residual = std::abs(seller_volume - buyer_volume);
  r.diagnostics.ms_tol = scales.ms_tol;
  r.diagnostics.beta = scales.beta;

  const std::size_t ns = r.allocation.sellers.size();
  r.allocation.volume.assign(ns, std::vector<double>(n, 0.0));
  r.ms.assign(n, 0.0);
  std::vector<double> cap(ns), unit(ns);
  for (std::size_t g = 0; g < ns; ++g) cap[g] = r.trades[r.allocation.sellers[g]].delta;
  const AllocationObjective objective =
      mode == ClearingMode::selfish ? AllocationObjective::max_surplus : AllocationObjective::min_abs_surplus;
  bool allocation_ok = true;
  for (std::size_t k = 0; k < n; ++k) {
    double demand = 0.0;
    double buyer_cash = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (r.roles[i] != Role::buyer) continue;
      const auto& t = r.trades[i];
      const double p = problem.participants[i].set.price[k];
      if (p >= t.K) demand += t.delta;
      buyer_cash += option_payoff(p, t.K) * t.delta;
    }
    for (std::size_t g = 0; g < ns; ++g) {
      const std::size_t i = r.allocation.sellers[g];
      unit[g] = option_payoff(problem.participants[i].set.price[k], r.trades[i].K);
    }
    try {
      const ScenarioAllocation a =
          allocate_scenario(cap, unit, demand, buyer_cash - fees, objective, tie_break, scales.eq_tol);
      for (std::size_t g = 0; g < ns; ++g) r.allocation.volume[g][k] = a.delta[g];
      r.ms[k] = a.surplus;
    } catch (const InfeasibleError&) {
      allocation_ok = false;
      r.ms[k] = std::numeric_limits<double>::quiet_NaN();
    }
    if (!(std::abs(r.ms[k]) <= scales.ms_tol)) r.diagnostics.flagged_scenarios.push_back(k);
  }

  r.profit_after.assign(m, std::vector<double>(n, 0.0));
  std::size_t seller_slot = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& p = problem.participants[i];
    const auto& t = r.trades[i];
    for (std::size_t k = 0; k < n; ++k) {
      const double payoff = option_payoff(p.set.price[k], t.K);
      r.profit_after[i][k] = p.role == Role::buyer
                                 ? p.set.baseline[k] - t.q * t.delta + payoff * t.delta
                                 : p.set.baseline[k] + t.q * t.delta - payoff * r.allocation.volume[seller_slot][k];
    }
    if (p.role == Role::seller) ++seller_slot;
    r.var_before.push_back(variance(p.set.baseline));
    r.var_after.push_back(weighted_variance(w, r.profit_after[i]));
  }
  const double before = std::accumulate(r.var_before.begin(), r.var_before.end(), 0.0);
  const double after = std::accumulate(r.var_after.begin(), r.var_after.end(), 0.0);
  r.aggregate_delta = after - before;
  r.expected_ms = allocation_ok ? weighted_mean(w, r.ms) : std::numeric_limits<double>::quiet_NaN();
  double max_ms = 0.0;
  for (double v : r.ms) max_ms = std::max(max_ms, std::abs(v));
  r.diagnostics.max_abs_surplus = allocation_ok ? max_ms : std::numeric_limits<double>::infinity();
  r.diagnostics.exact_variance = after;
  r.objective = mode == ClearingMode::selfish ? r.expected_ms : after;

  bool acceptable = true;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& set = problem.participants[i].set;
    if (!set.bounds.contains(r.trades[i]) || !is_acceptable(set, r.trades[i], r.roles[i])) acceptable = false;
  }
  r.feasible = allocation_ok && acceptable && r.diagnostics.volume_residual <= scales.eq_tol;
  if (mode != ClearingMode::selfish && !r.diagnostics.flagged_scenarios.empty()) r.feasible = false;
  return r;
}

/// Pulls candidate trades onto the exactly feasible set where cheap: volume
/// balance by shrinking the heavier side, fees inside their closed-form
/// acceptable ranges with net fee income chosen so the surplus can be
/// settled. Returns nullopt if some fee range is empty.
inline std::optional<std::vector<TradeTriple>> repair_trades(const ClearingProblem& problem, ClearingMode mode,
                                                             std::vector<TradeTriple> t) {
  const std::size_t m = problem.participants.size();
  double buyers = 0.0, sellers = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    t[i] = problem.participants[i].set.bounds.clamp(t[i]);
    // volumes at solver noise level are dropped
    if (t[i].delta < 1e-8 * problem.participants[i].set.bounds.delta_max) t[i].delta = 0.0;
    (problem.participants[i].role == Role::buyer ? buyers : sellers) += t[i].delta;
  }
  if (buyers != sellers) {
    const Role heavy = sellers > buyers ? Role::seller : Role::buyer;
    const double factor = sellers > buyers ? buyers / sellers : sellers / buyers;
    for (std::size_t i = 0; i < m; ++i)
      if (problem.participants[i].role == heavy) t[i].delta *= factor;
  }
  if (mode == ClearingMode::so) {
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) hi = std::min(hi, problem.participants[i].set.bounds.q_max);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& p = problem.participants[i];
      const auto bound = acceptable_fee_bound(p.set, t[i].K, t[i].delta, p.role);
      if (!bound) continue;
      if (p.role == Role::seller) lo = std::max(lo, *bound);
      else hi = std::min(hi, *bound);
    }
    // equal bounds may cross by rounding
    if (lo > hi + 1e-12 * std::max(1.0, std::abs(hi))) return std::nullopt;
    const double q = lo > hi ? 0.5 * (lo + hi) : std::clamp(t.empty() ? 0.0 : t[0].q, lo, hi);
    for (auto& ti : t) ti.q = q;
    return t;
  }
  // Acceptable fee interval per participant, intersected with the box.
  std::vector<double> q_lo(m, 0.0), q_hi(m, 0.0);
  double fee_max = 0.0, fee_min = 0.0, room = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& p = problem.participants[i];
    q_lo[i] = 0.0;
    q_hi[i] = p.set.bounds.q_max;
    const auto bound = acceptable_fee_bound(p.set, t[i].K, t[i].delta, p.role);
    if (bound && p.role == Role::seller) q_lo[i] = std::max(0.0, *bound);
    if (bound && p.role == Role::buyer) q_hi[i] = std::min(q_hi[i], *bound);
    if (q_lo[i] > q_hi[i]) return std::nullopt;
    fee_max += (p.role == Role::buyer ? q_hi[i] : -q_lo[i]) * t[i].delta;
    fee_min += (p.role == Role::buyer ? q_lo[i] : -q_hi[i]) * t[i].delta;
    room += (q_hi[i] - q_lo[i]) * t[i].delta;
  }

  // Net fee income F shifts the surplus by the same amount in every scenario.
  // Selfish clearing wants it as large as possible; otherwise pick F so that
  // every scenario's settlement target stays reachable by some allocation.
  double fee = fee_max;
  if (mode == ClearingMode::social) {
    std::vector<std::size_t> sellers;
    for (std::size_t i = 0; i < m; ++i)
      if (problem.participants[i].role == Role::seller) sellers.push_back(i);
    std::vector<double> cap(sellers.size()), unit(sellers.size());
    for (std::size_t g = 0; g < sellers.size(); ++g) cap[g] = t[sellers[g]].delta;
    const double total_cap = std::accumulate(cap.begin(), cap.end(), 0.0);
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < problem.scenarios.size(); ++k) {
      double demand = 0.0, buyer_cash = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        if (problem.participants[i].role != Role::buyer) continue;
        const double p = problem.participants[i].set.price[k];
        if (p >= t[i].K) demand += t[i].delta;
        buyer_cash += option_payoff(p, t[i].K) * t[i].delta;
      }
      for (std::size_t g = 0; g < sellers.size(); ++g)
        unit[g] = option_payoff(problem.participants[sellers[g]].set.price[k], t[sellers[g]].K);
      demand = std::min(demand, total_cap);
      const double v_min = detail::dot(unit, detail::greedy_fill(cap, unit, demand, true));
      const double v_max = detail::dot(unit, detail::greedy_fill(cap, unit, demand, false));
      lo = std::max(lo, buyer_cash - v_max);
      hi = std::min(hi, buyer_cash - v_min);
    }
    const double top = std::min(hi, fee_max);
    const double bottom = std::max(lo, fee_min);
    // fees on their bounds where settlement allows; otherwise the midpoint
    fee = bottom <= top ? top : std::clamp(0.5 * (lo + hi), fee_min, fee_max);
  }

  // Start from the fee bounds (F = fee_max) and give back the slack evenly.
  const double share = room > 0.0 ? std::clamp((fee_max - fee) / room, 0.0, 1.0) : 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (problem.participants[i].role == Role::buyer) t[i].q = q_hi[i] - share * (q_hi[i] - q_lo[i]);
    else t[i].q = q_lo[i] + share * (q_hi[i] - q_lo[i]);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Clearing

namespace detail {

/// A starting point and the index of the first penalty stage to run from it.
struct ClearingSeed {
  Eigen::VectorXd x;
  std::size_t first_stage = 0;
};

inline double fair_fee(const ClearingProblem& problem, const RandomSample& price, double strike) {
  const auto w = problem.scenarios.weights();
  double fair = 0.0;
  for (std::size_t k = 0; k < price.size(); ++k) fair += w[k] * option_payoff(price[k], strike);
  return fair;
}

inline std::vector<ClearingSeed> clearing_seeds(const ClearingProblem& problem, const SmoothedObjective& f,
                                                const ClearingOptions& opt, double beta) {
  const std::size_t m = problem.participants.size();
  const bool shared = f.mode() == ClearingMode::so;
  Eigen::VectorXd lo, hi;
  f.bounds(lo, hi);
  double buyer_cap = 0.0, seller_cap = 0.0;
  for (const auto& p : problem.participants)
    (p.role == Role::buyer ? buyer_cap : seller_cap) += p.set.bounds.delta_max;
  const double common = std::min(buyer_cap, seller_cap);

  double global_lo = std::numeric_limits<double>::infinity(), global_hi = -global_lo;
  std::vector<double> own_lo(m), own_hi(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto values = problem.participants[i].set.price.values();
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    own_lo[i] = *mn;
    own_hi[i] = *mx;
    global_lo = std::min(global_lo, *mn);
    global_hi = std::max(global_hi, *mx);
  }
  // Strikes this far below every price are exercised with smoothed weight ~1.
  const double below = beta > 0.0 ? 6.0 / beta : 0.0;
  const std::size_t late = opt.penalty_schedule.size() / 2;

  std::vector<ClearingSeed> seeds;
  auto push = [&](std::vector<TradeTriple> t, std::size_t stage) {
    if (shared && m) {
      // shared terms taken from the participants that trade
      double q = 0.0, K = 0.0, active = 0.0;
      for (const auto& ti : t)
        if (ti.delta > 0.0) {
          q += ti.q;
          K += ti.K;
          active += 1.0;
        }
      for (auto& ti : t) {
        ti.q = active > 0.0 ? q / active : 0.0;
        ti.K = active > 0.0 ? K / active : 0.0;
      }
    }
    seeds.push_back({f.pack(t).cwiseMax(lo).cwiseMin(hi), stage});
  };

  for (double fraction : {1.0, 0.5}) {
    for (double level : {0.5, 0.25, 0.75, -1.0}) {
      std::vector<TradeTriple> t(m);
      for (std::size_t i = 0; i < m; ++i) {
        const auto& p = problem.participants[i];
        const double plo = shared ? global_lo : own_lo[i];
        const double phi = shared ? global_hi : own_hi[i];
        const double strike = level < 0.0 ? global_lo - below : plo + level * (phi - plo);
        t[i].K = std::clamp(strike, 0.0, p.set.bounds.K_max);
        const double side = p.role == Role::buyer ? buyer_cap : seller_cap;
        t[i].delta = side > 0.0 ? fraction * common * p.set.bounds.delta_max / side : 0.0;
        t[i].q = std::clamp(fair_fee(problem, p.set.price, t[i].K), 0.0, p.set.bounds.q_max);
      }
      push(std::move(t), level < 0.0 ? late : 0);
    }
  }

  // One buyer against one seller, both strikes below either price range.
  for (std::size_t r = 0; r < m; ++r) {
    if (problem.participants[r].role != Role::buyer) continue;
    for (std::size_t g = 0; g < m; ++g) {
      if (problem.participants[g].role != Role::seller) continue;
      const auto& pr = problem.participants[r].set;
      const auto& pg = problem.participants[g].set;
      const double strike = std::max(0.0, std::min({own_lo[r], own_lo[g], pr.bounds.K_max, pg.bounds.K_max}) - below);
      const double volume = std::min(pr.bounds.delta_max, pg.bounds.delta_max);
      const double fee = std::clamp(fair_fee(problem, pr.price, strike), 0.0, std::min(pr.bounds.q_max, pg.bounds.q_max));
      std::vector<TradeTriple> t(m);
      t[r] = {fee, strike, volume};
      t[g] = {fee, strike, volume};
      push(std::move(t), late);
    }
  }

  std::mt19937_64 rng(opt.seed);
  for (int s = 0; s < opt.random_starts; ++s) {
    Eigen::VectorXd x(lo.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      x(j) = lo(j) + u * (hi(j) - lo(j));
    }
    seeds.push_back({x, 0});
  }
  return seeds;
}

/// Random local search on exactly settled trades. Moves perturb one strike or
/// shift volume on a buyer/seller pair (placing a fresh strike inside the
/// price range when a participant starts trading); a move is kept only if the
/// settled result stays feasible and lowers the total variance.
inline ClearingResult exact_polish(const ClearingProblem& problem, ClearingMode mode, ClearingResult start,
                                   const ClearingScales& scales, const ClearingOptions& opt) {
  const std::size_t m = problem.participants.size();
  std::vector<std::size_t> buyers, sellers;
  std::vector<double> own_lo(m), own_hi(m);
  double spread = 0.0, volume = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& p = problem.participants[i];
    (p.role == Role::buyer ? buyers : sellers).push_back(i);
    const auto values = p.set.price.values();
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    own_lo[i] = *mn;
    own_hi[i] = *mx;
    spread = std::max(spread, *mx - *mn);
    volume = std::max(volume, p.set.bounds.delta_max);
  }
  const bool shared = mode == ClearingMode::so;
  double step_K = 0.2 * std::max(spread, 1.0 / scales.beta);
  double step_D = 0.1 * volume;
  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform;

  ClearingResult best = std::move(start);
  const int rounds = 6;
  const int per_round = std::max(1, opt.polish_iterations / rounds);
  for (int it = 0; it < opt.polish_iterations; ++it) {
    if (it > 0 && it % per_round == 0) {
      step_K *= 0.6;
      step_D *= 0.6;
    }
    std::vector<TradeTriple> t = best.trades;
    auto move_strike = [&](std::size_t i) {
      const double K_max = problem.participants[i].set.bounds.K_max;
      if (t[i].delta > 0.0) t[i].K += step_K * normal(rng);
      else t[i].K = own_lo[i] + uniform(rng) * (own_hi[i] - own_lo[i]);
      t[i].K = std::clamp(t[i].K, 0.0, K_max);
    };
    const std::size_t r = buyers[rng() % buyers.size()];
    const std::size_t g = sellers[rng() % sellers.size()];
    switch (rng() % 3) {
      case 0:
        move_strike(rng() % 2 ? r : g);
        break;
      case 2:
        move_strike(r);
        move_strike(g);
        [[fallthrough]];
      case 1: {
        const double d = step_D * normal(rng);
        t[r].delta = std::clamp(t[r].delta + d, 0.0, problem.participants[r].set.bounds.delta_max);
        t[g].delta = std::clamp(t[g].delta + d, 0.0, problem.participants[g].set.bounds.delta_max);
        break;
      }
    }
    if (shared) {
      const double K = t[r].K == best.trades[r].K ? t[g].K : t[r].K;
      for (auto& ti : t) ti.K = K;
    }
    auto repaired = repair_trades(problem, mode, std::move(t));
    if (!repaired) continue;
    ClearingResult c = evaluate_trades(problem, mode, std::move(*repaired), scales, opt.tie_break);
    if (c.feasible && c.objective < best.objective) best = std::move(c);
  }
  return best;
}

}  // namespace detail

inline ClearingResult clear(const ClearingProblem& problem, ClearingMode mode, const ClearingOptions& opt = {}) {
  std::size_t buyers = 0, sellers = 0;
  for (const auto& p : problem.participants) (p.role == Role::buyer ? buyers : sellers)++;
  if (buyers == 0 || sellers == 0) throw std::invalid_argument("clearing needs at least one buyer and one seller");
  for (const auto& p : problem.participants) {
    if (!p.set.baseline.scenarios().same_as(problem.scenarios) || !p.set.price.scenarios().same_as(problem.scenarios))
      throw std::invalid_argument("participant samples refer to a different scenario set");
  }

  const ClearingScales scales = clearing_scales(problem, opt.smoothing);
  SmoothedObjective objective(problem, mode, scales);
  Eigen::VectorXd lo, hi;
  objective.bounds(lo, hi);

  const auto seeds = detail::clearing_seeds(problem, objective, opt, scales.beta);
  std::vector<std::optional<ClearingResult>> candidates(seeds.size());
  std::vector<int> iterations(seeds.size(), 0);
  auto better = [&](const ClearingResult& a, const std::optional<ClearingResult>& b) {
    if (!a.feasible) return false;
    if (!b || !b->feasible) return true;
    return mode == ClearingMode::selfish ? a.objective > b->objective : a.objective < b->objective;
  };
  parallel_for(seeds.size(), opt.threads, [&](std::size_t s) {
    SmoothedObjective f = objective;
    Eigen::VectorXd x = seeds[s].x;
    // Each penalty stage ends with an exact settlement; the best one is kept.
    auto settle = [&] {
      auto repaired = repair_trades(problem, mode, f.trades(x));
      if (!repaired) return;
      ClearingResult c = evaluate_trades(problem, mode, std::move(*repaired), scales, opt.tie_break);
      if (better(c, candidates[s]) || !candidates[s]) candidates[s] = std::move(c);
    };
    if (opt.max_iterations <= 0) return;
    settle();
    for (std::size_t stage = seeds[s].first_stage; stage < opt.penalty_schedule.size(); ++stage) {
      f.set_penalty(opt.penalty_schedule[stage]);
      LocalSearchResult res = minimize_in_box(f, x, lo, hi, opt.max_iterations);
      iterations[s] += res.iterations;
      x = res.x;
      settle();
    }
  });

  std::vector<TradeTriple> zero(problem.participants.size());
  ClearingResult fallback = evaluate_trades(problem, mode, zero, scales, opt.tie_break);

  const ClearingResult* best = nullptr;
  int eligible = 0;
  if (mode == ClearingMode::selfish) {
    double top = fallback.objective;
    for (const auto& c : candidates)
      if (c && c->feasible) top = std::max(top, c->objective);
    for (const auto& c : candidates)
      if (c && c->feasible) {
        ++eligible;
        if (!best && c->objective >= top - scales.ms_tol) best = &*c;
      }
  } else {
    for (const auto& c : candidates)
      if (c && c->feasible) {
        ++eligible;
        if (!best || c->objective < best->objective) best = &*c;
      }
  }

  ClearingResult result = best ? *best : fallback;
  bool fallback_used = best == nullptr;
  if (mode != ClearingMode::selfish) {
    if (opt.max_iterations > 0 && opt.polish_iterations > 0 && result.feasible)
      result = detail::exact_polish(problem, mode, std::move(result), scales, opt);
    fallback_used = !(result.objective < fallback.objective);
    if (fallback_used) result = fallback;
  }
  result.diagnostics.fallback_used = fallback_used;
  result.diagnostics.eligible_candidates = eligible + 1;
  result.diagnostics.starts = static_cast<int>(seeds.size());
  result.diagnostics.iterations = std::accumulate(iterations.begin(), iterations.end(), 0);
  result.diagnostics.smoothed_variance = objective.smoothed_variance(objective.pack(result.trades));
  if (!result.feasible) {
    result.diagnostics.status = "zero trade infeasible";
  } else if (result.diagnostics.fallback_used) {
    result.diagnostics.status = "no improving acceptable trade; zero trade returned";
  } else {
    result.diagnostics.status = "ok";
  }
  return result;
}

inline ClearingResult clear_social(const ClearingProblem& p, const ClearingOptions& o = {}) {
  return clear(p, ClearingMode::social, o);
}
inline ClearingResult clear_so(const ClearingProblem& p, const ClearingOptions& o = {}) {
  return clear(p, ClearingMode::so, o);
}
inline ClearingResult clear_selfish(const ClearingProblem& p, const ClearingOptions& o = {}) {
  return clear(p, ClearingMode::selfish, o);
}

// ---------------------------------------------------------------------------
// Reporting

struct VolatilityDiagnostic {
  double covariance = 0.0;      // cov(2A + B, B)
  double direct_delta = 0.0;    // var[Pi] - var[pi]
  bool reduces = false;         // covariance < 0
};

/// cov(2A + B, B) with A the real-time energy component of the profit and B
/// the option settlement: (p - K)^+ delta for buyers, -(p - K)^+ delta_g for
/// sellers.
inline VolatilityDiagnostic volatility_diagnostic(const ClearingProblem& problem, const ClearingResult& result,
                                                  std::size_t i) {
  const auto& p = problem.participants.at(i);
  const auto& t = result.trades.at(i);
  const std::size_t n = problem.scenarios.size();
  const auto w = problem.scenarios.weights();
  const RandomSample& a = p.energy_component ? *p.energy_component : p.set.baseline;
  std::vector<double> settle(n);
  std::size_t slot = 0;
  if (p.role == Role::seller) {
    const auto& sellers = result.allocation.sellers;
    slot = static_cast<std::size_t>(std::find(sellers.begin(), sellers.end(), i) - sellers.begin());
  }
  for (std::size_t k = 0; k < n; ++k) {
    const double payoff = option_payoff(p.set.price[k], t.K);
    settle[k] = p.role == Role::buyer ? payoff * t.delta : -payoff * result.allocation.volume.at(slot)[k];
  }
  std::vector<double> lhs(n);
  for (std::size_t k = 0; k < n; ++k) lhs[k] = 2.0 * a[k] + settle[k];
  VolatilityDiagnostic d;
  d.covariance = weighted_covariance(w, lhs, settle);
  d.direct_delta = weighted_variance(w, result.profit_after[i]) - variance(p.set.baseline);
  d.reduces = d.covariance < 0.0;
  return d;
}

struct VarianceRow {
  std::string participant;
  Role role = Role::buyer;
  double var_before = 0.0;
  double var_after = 0.0;
  double delta = 0.0;
  double covariance = 0.0;
};

struct VarianceReport {
  std::vector<VarianceRow> rows;
  double total_before = 0.0;
  double total_after = 0.0;
  double aggregate_delta = 0.0;
};

inline VarianceReport aggregate_report(const ClearingProblem& problem, const ClearingResult& result) {
  VarianceReport report;
  for (std::size_t i = 0; i < problem.participants.size(); ++i) {
    const auto diag = volatility_diagnostic(problem, result, i);
    VarianceRow row{result.ids[i], result.roles[i], result.var_before[i], result.var_after[i],
                    result.var_after[i] - result.var_before[i], diag.covariance};
    report.total_before += row.var_before;
    report.total_after += row.var_after;
    report.rows.push_back(std::move(row));
  }
  report.aggregate_delta = report.total_after - report.total_before;
  return report;
}

/// FTR payoff per scenario from the real-time bus prices.
inline RandomSample ftr_sample(const MarketOutcome& outcome, const FTRPosition& pos) {
  std::vector<double> v(outcome.scenarios.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = ftr_payoff(pos, outcome.realtime[k].prices);
  return RandomSample(outcome.scenarios, std::move(v));
}

/// The report with extra[i] added to participant i's profit after the trade;
/// var_before stays the market-only variance. Missing entries add nothing.
inline VarianceReport report_with_payoffs(const ClearingProblem& problem, const ClearingResult& result,
                                          std::span<const std::optional<RandomSample>> extra) {
  if (extra.size() != problem.participants.size()) throw std::invalid_argument("one entry per participant required");
  VarianceReport report = aggregate_report(problem, result);
  const auto w = problem.scenarios.weights();
  report.total_after = 0.0;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    auto& row = report.rows[i];
    if (extra[i]) {
      if (!extra[i]->scenarios().same_as(problem.scenarios))
        throw std::invalid_argument("extra payoff refers to a different scenario set");
      std::vector<double> total = result.profit_after[i];
      for (std::size_t k = 0; k < total.size(); ++k) total[k] += (*extra[i])[k];
      row.var_after = weighted_variance(w, total);
      row.delta = row.var_after - row.var_before;
      // identity var(A + X) - var(A) = cov(2A + X, X) for the combined addition X
      const auto& base = problem.participants[i].set.baseline;
      std::vector<double> added(total.size()), lhs(total.size());
      for (std::size_t k = 0; k < total.size(); ++k) {
        added[k] = total[k] - base[k];
        lhs[k] = 2.0 * base[k] + added[k];
      }
      row.covariance = weighted_covariance(w, lhs, added);
    }
    report.total_after += row.var_after;
  }
  report.aggregate_delta = report.total_after - report.total_before;
  return report;
}

}  // namespace optclear

#endif  // OPTCLEAR_CLEARING_HPP
