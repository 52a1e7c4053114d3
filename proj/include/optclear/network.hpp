#ifndef OPTCLEAR_NETWORK_HPP
#define OPTCLEAR_NETWORK_HPP

// DC network: shift factors H, line limits L and the injection polytope
//   P = { y : |H y| <= L, 1'y = 0 }.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace optclear {

struct Line {
  std::size_t from = 0;  // 0-based bus index
  std::size_t to = 0;
  double capacity_mw = 0.0;
  double reactance = 0.0;  // 0 when the shift-factor row was supplied directly
};

class NetworkModel {
 public:
  /// Copperplate: a single bus and no lines.
  NetworkModel() : bus_count_(1), shift_factors_(0, 1) {}

  NetworkModel(std::size_t bus_count, std::vector<Line> lines, Eigen::MatrixXd shift_factors)
      : bus_count_(bus_count), lines_(std::move(lines)), shift_factors_(std::move(shift_factors)) {
    validate();
  }

  /// Shift factors from line reactances with the standard DC susceptance
  /// construction; the slack bus absorbs the imbalance and has a zero column.
  static NetworkModel from_reactances(std::size_t bus_count, std::vector<Line> lines,
                                      std::size_t slack_bus) {
    if (bus_count < 1) throw std::invalid_argument("network needs at least one bus");
    if (slack_bus >= bus_count) throw std::invalid_argument("slack bus out of range");
    const auto m = static_cast<Eigen::Index>(lines.size());
    const auto n = static_cast<Eigen::Index>(bus_count);
    Eigen::MatrixXd incidence = Eigen::MatrixXd::Zero(m, n);
    Eigen::VectorXd susceptance(m);
    for (Eigen::Index l = 0; l < m; ++l) {
      const Line& line = lines[static_cast<std::size_t>(l)];
      if (line.from >= bus_count || line.to >= bus_count || line.from == line.to)
        throw std::invalid_argument("line endpoints invalid");
      if (!(line.reactance > 0.0)) throw std::invalid_argument("line reactance must be positive");
      incidence(l, static_cast<Eigen::Index>(line.from)) = 1.0;
      incidence(l, static_cast<Eigen::Index>(line.to)) = -1.0;
      susceptance(l) = 1.0 / line.reactance;
    }
    const Eigen::MatrixXd bbus = incidence.transpose() * susceptance.asDiagonal() * incidence;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index b = 0; b < n; ++b)
      if (b != static_cast<Eigen::Index>(slack_bus)) keep.push_back(b);
    const auto r = static_cast<Eigen::Index>(keep.size());
    Eigen::MatrixXd reduced(r, r);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < r; ++j) reduced(i, j) = bbus(keep[i], keep[j]);
    Eigen::MatrixXd angles = Eigen::MatrixXd::Zero(n, n);  // bus angle per unit injection
    if (r > 0) {
      Eigen::FullPivLU<Eigen::MatrixXd> lu(reduced);
      if (!lu.isInvertible()) throw std::invalid_argument("network is not connected");
      const Eigen::MatrixXd inv = lu.inverse();
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < r; ++j) angles(keep[i], keep[j]) = inv(i, j);
    }
    Eigen::MatrixXd h = susceptance.asDiagonal() * incidence * angles;
    return NetworkModel(bus_count, std::move(lines), std::move(h));
  }

  std::size_t bus_count() const noexcept { return bus_count_; }
  std::size_t line_count() const noexcept { return lines_.size(); }
  std::span<const Line> lines() const noexcept { return lines_; }
  const Eigen::MatrixXd& shift_factors() const noexcept { return shift_factors_; }
  Eigen::VectorXd limits() const {
    Eigen::VectorXd l(static_cast<Eigen::Index>(lines_.size()));
    for (std::size_t i = 0; i < lines_.size(); ++i) l(static_cast<Eigen::Index>(i)) = lines_[i].capacity_mw;
    return l;
  }

 private:
  void validate() const {
    if (bus_count_ < 1) throw std::invalid_argument("network needs at least one bus");
    if (shift_factors_.rows() != static_cast<Eigen::Index>(lines_.size()) ||
        shift_factors_.cols() != static_cast<Eigen::Index>(bus_count_))
      throw std::invalid_argument("shift factor matrix must be lines x buses");
    for (const Line& line : lines_) {
      if (!(line.capacity_mw > 0.0)) throw std::invalid_argument("line limits must be positive");
      if (line.from >= bus_count_ || line.to >= bus_count_)
        throw std::invalid_argument("line endpoints invalid");
    }
    if (!shift_factors_.allFinite()) throw std::invalid_argument("shift factors must be finite");
  }

  std::size_t bus_count_;
  std::vector<Line> lines_;
  Eigen::MatrixXd shift_factors_;
};

inline Eigen::VectorXd line_flows(std::span<const double> injection, const NetworkModel& net) {
  if (injection.size() != net.bus_count())
    throw std::invalid_argument("injection length must equal the bus count");
  const Eigen::Map<const Eigen::VectorXd> y(injection.data(), static_cast<Eigen::Index>(injection.size()));
  return net.shift_factors() * y;
}

/// |1'y| <= tol and |H y| <= L + tol, limits applied in both directions.
inline bool injection_feasible(std::span<const double> injection, const NetworkModel& net, double tol) {
  const Eigen::VectorXd flows = line_flows(injection, net);
  double total = 0.0;
  for (double v : injection) total += v;
  if (std::abs(total) > tol) return false;
  const auto lines = net.lines();
  for (std::size_t l = 0; l < lines.size(); ++l)
    if (std::abs(flows(static_cast<Eigen::Index>(l))) > lines[l].capacity_mw + tol) return false;
  return true;
}

}  // namespace optclear

#endif  // OPTCLEAR_NETWORK_HPP
