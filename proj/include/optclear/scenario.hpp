#ifndef OPTCLEAR_SCENARIO_HPP
#define OPTCLEAR_SCENARIO_HPP

// Discrete probability space shared by every other module, plus the
// statistics evaluated over it (mean, variance, covariance, CVaR).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace optclear {

struct Scenario {
  std::size_t index = 0;
  std::vector<double> wind_mw;    // available capacity, one entry per wind column
  std::vector<double> demand_mw;  // one entry per bus; may be empty
};

/// Immutable list of weighted scenarios. Copies share identity, so samples
/// built from copies of the same set remain compatible.
class ScenarioSet {
 public:
  ScenarioSet(std::vector<Scenario> scenarios, std::vector<double> weights,
              std::vector<double> wind_capacity_mw = {}) {
    if (scenarios.empty()) throw std::invalid_argument("scenario set must not be empty");
    if (weights.size() != scenarios.size())
      throw std::invalid_argument("one weight per scenario required");
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("scenario weights must be nonnegative");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw std::invalid_argument("scenario weights must sum to 1");
    const std::size_t columns = scenarios.front().wind_mw.size();
    for (std::size_t i = 0; i < scenarios.size(); ++i) {
      auto& s = scenarios[i];
      s.index = i;
      if (s.wind_mw.size() != columns)
        throw std::invalid_argument("scenarios disagree on the number of wind columns");
      for (std::size_t c = 0; c < columns; ++c) {
        if (!(s.wind_mw[c] >= 0.0)) throw std::invalid_argument("wind availability must be nonnegative");
        if (c < wind_capacity_mw.size() && s.wind_mw[c] > wind_capacity_mw[c] * (1.0 + 1e-12))
          throw std::invalid_argument("wind availability exceeds installed capacity");
      }
    }
    auto data = std::make_shared<Data>();
    data->scenarios = std::move(scenarios);
    data->weights = std::move(weights);
    data->wind_capacity = std::move(wind_capacity_mw);
    data_ = std::move(data);
  }

  std::size_t size() const noexcept { return data_->scenarios.size(); }
  const Scenario& operator[](std::size_t i) const { return data_->scenarios.at(i); }
  std::span<const Scenario> scenarios() const noexcept { return data_->scenarios; }
  std::span<const double> weights() const noexcept { return data_->weights; }
  double weight(std::size_t i) const { return data_->weights.at(i); }
  std::size_t wind_columns() const noexcept { return data_->scenarios.front().wind_mw.size(); }
  std::span<const double> wind_capacity() const noexcept { return data_->wind_capacity; }

  bool same_as(const ScenarioSet& other) const noexcept { return data_ == other.data_; }

 private:
  struct Data {
    std::vector<Scenario> scenarios;
    std::vector<double> weights;
    std::vector<double> wind_capacity;
  };
  std::shared_ptr<const Data> data_;
};

/// One real number per scenario of a referenced set.
class RandomSample {
 public:
  RandomSample(ScenarioSet set, std::vector<double> values)
      : set_(std::move(set)), values_(std::move(values)) {
    if (values_.size() != set_.size())
      throw std::invalid_argument("sample length must equal the scenario count");
  }

  static RandomSample constant(const ScenarioSet& set, double c) {
    return RandomSample(set, std::vector<double>(set.size(), c));
  }

  const ScenarioSet& scenarios() const noexcept { return set_; }
  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_.at(i); }

  bool compatible(const RandomSample& other) const noexcept {
    return set_.same_as(other.set_);
  }

  friend RandomSample operator+(const RandomSample& a, const RandomSample& b) {
    a.require_compatible(b);
    std::vector<double> v(a.values_);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += b.values_[i];
    return RandomSample(a.set_, std::move(v));
  }
  friend RandomSample operator-(const RandomSample& a, const RandomSample& b) {
    a.require_compatible(b);
    std::vector<double> v(a.values_);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= b.values_[i];
    return RandomSample(a.set_, std::move(v));
  }
  friend RandomSample operator-(const RandomSample& a) { return a * -1.0; }
  friend RandomSample operator*(const RandomSample& a, double s) {
    std::vector<double> v(a.values_);
    for (double& x : v) x *= s;
    return RandomSample(a.set_, std::move(v));
  }
  friend RandomSample operator*(double s, const RandomSample& a) { return a * s; }
  friend RandomSample operator+(const RandomSample& a, double c) {
    std::vector<double> v(a.values_);
    for (double& x : v) x += c;
    return RandomSample(a.set_, std::move(v));
  }

  void require_compatible(const RandomSample& other) const {
    if (!compatible(other)) throw std::invalid_argument("samples refer to different scenario sets");
  }

 private:
  ScenarioSet set_;
  std::vector<double> values_;
};

/// CVaR level; 0 is risk neutral.
class RiskPreference {
 public:
  explicit RiskPreference(double alpha = 0.0) : alpha_(alpha) {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in [0, 1)");
  }
  double alpha() const noexcept { return alpha_; }

 private:
  double alpha_;
};

// ---------------------------------------------------------------------------
// Statistics over raw weight/value spans. The RandomSample overloads below
// forward here after checking compatibility.

inline double weighted_mean(std::span<const double> w, std::span<const double> x) {
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m += w[i] * x[i];
  return m;
}

inline double weighted_covariance(std::span<const double> w, std::span<const double> x,
                                  std::span<const double> y) {
  const double mx = weighted_mean(w, x);
  const double my = weighted_mean(w, y);
  double c = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) c += w[i] * (x[i] - mx) * (y[i] - my);
  return c;
}

inline double weighted_variance(std::span<const double> w, std::span<const double> x) {
  const double m = weighted_mean(w, x);
  double v = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) v += w[i] * (x[i] - m) * (x[i] - m);
  return v;
}

/// Tail average of the largest losses with total mass 1 - alpha. The
/// scenario straddling the quantile contributes its fractional weight.
inline double weighted_cvar(std::span<const double> w, std::span<const double> loss, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in [0, 1)");
  if (alpha == 0.0) return weighted_mean(w, loss);
  std::vector<std::size_t> order(loss.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return loss[a] > loss[b]; });
  const double tail = 1.0 - alpha;
  double remaining = tail;
  double acc = 0.0;
  for (std::size_t k : order) {
    if (remaining <= 0.0) break;
    const double take = std::min(w[k], remaining);
    acc += take * loss[k];
    remaining -= take;
  }
  return acc / tail;
}

inline double expectation(const RandomSample& x) {
  return weighted_mean(x.scenarios().weights(), x.values());
}

inline double variance(const RandomSample& x) {
  return weighted_variance(x.scenarios().weights(), x.values());
}

inline double covariance(const RandomSample& x, const RandomSample& y) {
  x.require_compatible(y);
  return weighted_covariance(x.scenarios().weights(), x.values(), y.values());
}

inline double cvar(const RandomSample& loss, const RiskPreference& pref) {
  return weighted_cvar(loss.scenarios().weights(), loss.values(), pref.alpha());
}

// ---------------------------------------------------------------------------
// Scenario construction

/// n equally weighted midpoint-rule points of the uniform law with the given
/// mean and standard deviation; one wind column, no demand.
inline ScenarioSet make_uniform_grid(double mu, double sigma, std::size_t n) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("sigma must be nonnegative");
  if (n < 1) throw std::invalid_argument("at least one scenario required");
  const double half_width = std::sqrt(3.0) * sigma;
  if (mu - half_width < 0.0) throw std::invalid_argument("grid would contain negative wind capacity");
  std::vector<Scenario> scenarios(n);
  const double dn = static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    // symmetric offsets: entries k and n-1-k are exact negatives
    const double offset = (2.0 * static_cast<double>(k) + 1.0 - dn) * half_width / dn;
    scenarios[k].wind_mw = {mu + offset};
  }
  return ScenarioSet(std::move(scenarios), std::vector<double>(n, 1.0 / dn));
}

struct UniformWind {
  double mean_mw = 0.0;
  double std_mw = 0.0;
  double capacity_mw = 0.0;  // 0 means mean + sqrt(3) std
};

enum class WindCoupling {
  comonotone,   // every column uses the same quantile in a scenario
  independent,  // columns are independently permuted midpoint grids (Latin hypercube)
};

/// Multi-column midpoint grid. Every column keeps the exact midpoint marginal,
/// so column means are exact under either coupling.
inline ScenarioSet make_uniform_scenarios(std::span<const UniformWind> winds,
                                          std::vector<double> demand_mw, std::size_t n,
                                          WindCoupling coupling, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("at least one scenario required");
  std::vector<std::vector<double>> columns;
  std::vector<double> capacity;
  for (const auto& wind : winds) {
    ScenarioSet grid = make_uniform_grid(wind.mean_mw, wind.std_mw, n);
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = grid[k].wind_mw[0];
    columns.push_back(std::move(col));
    const double top = wind.mean_mw + std::sqrt(3.0) * wind.std_mw;
    capacity.push_back(wind.capacity_mw > 0.0 ? wind.capacity_mw : top);
  }
  if (coupling == WindCoupling::independent) {
    std::mt19937_64 rng(seed);
    for (std::size_t c = 1; c < columns.size(); ++c) {
      auto& col = columns[c];
      for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(col[i], col[j]);
      }
    }
  }
  std::vector<Scenario> scenarios(n);
  for (std::size_t k = 0; k < n; ++k) {
    scenarios[k].wind_mw.resize(columns.size());
    for (std::size_t c = 0; c < columns.size(); ++c) scenarios[k].wind_mw[c] = columns[c][k];
    scenarios[k].demand_mw = demand_mw;
  }
  return ScenarioSet(std::move(scenarios), std::vector<double>(n, 1.0 / static_cast<double>(n)),
                     std::move(capacity));
}

}  // namespace optclear

#endif  // OPTCLEAR_SCENARIO_HPP
