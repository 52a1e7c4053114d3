#ifndef OPTCLEAR_IO_HPP
#define OPTCLEAR_IO_HPP

// Run configuration (JSON) and result tables (CSV). Buses are 1-based in
// files and 0-based in memory. Needs nlohmann/json.

#include "optclear/clearing.hpp"
#include "optclear/copperplate.hpp"
#include "optclear/errors.hpp"
#include "optclear/market.hpp"
#include "optclear/network.hpp"
#include "optclear/options.hpp"
#include "optclear/scenario.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace optclear::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Shortest text that reads back to the same double.
inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ConfigError("csv column not found: " + name);
  }
};

inline std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline void write_csv(const fs::path& path, const CsvTable& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  const auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << csv_escape(r[i]);
    os << "\r\n";
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
}

inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw ConfigError("unterminated quoted csv field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline CsvTable read_csv(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  auto rows = parse_csv(ss.str());
  if (rows.empty()) throw ConfigError("empty csv: " + path.string());
  CsvTable t;
  t.header = std::move(rows.front());
  t.rows.assign(std::make_move_iterator(rows.begin() + 1), std::make_move_iterator(rows.end()));
  return t;
}

inline double parse_number(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

// ---------------------------------------------------------------------------
// JSON ingestion

inline json load_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// A config entry given inline or as a path relative to the config file.
inline json resolve(const json& node, const fs::path& base) {
  if (node.is_string()) return load_json(base / node.get<std::string>());
  return node;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

template <class T>
T require(const json& j, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

inline std::size_t bus_index(const json& j, const char* key, std::size_t bus_count) {
  const long b = require<long>(j, key);
  if (b < 1 || static_cast<std::size_t>(b) > bus_count)
    throw ConfigError(std::string("bus out of range in '") + key + "': " + std::to_string(b));
  return static_cast<std::size_t>(b - 1);
}

/// {"buses": N, "slack_bus": s, "lines": [{"from", "to", "capacity_mw",
/// "reactance"} ...]} or, instead of reactances, "shift_factors": rows.
inline NetworkModel parse_network(const json& j) {
  try {
    const auto buses = require<std::size_t>(j, "buses");
    if (buses == 0) throw ConfigError("network needs at least one bus");
    std::vector<Line> lines;
    std::vector<double> reactance;
    for (const json& l : get_or<json>(j, "lines", json::array())) {
      const double cap = get_or<double>(l, "capacity_mw", kUnboundedMW);
      lines.push_back({bus_index(l, "from", buses), bus_index(l, "to", buses), cap, get_or<double>(l, "reactance", 0.0)});
    }
    if (j.contains("shift_factors")) {
      const auto rows = require<std::vector<std::vector<double>>>(j, "shift_factors");
      if (rows.size() != lines.size()) throw ConfigError("one shift-factor row per line required");
      Eigen::MatrixXd H(static_cast<Eigen::Index>(lines.size()), static_cast<Eigen::Index>(buses));
      for (std::size_t l = 0; l < rows.size(); ++l) {
        if (rows[l].size() != buses) throw ConfigError("shift-factor row length must equal the bus count");
        for (std::size_t n = 0; n < buses; ++n)
          H(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(n)) = rows[l][n];
      }
      return NetworkModel(buses, std::move(lines), std::move(H));
    }
    if (lines.empty()) return NetworkModel(buses, {}, Eigen::MatrixXd::Zero(0, static_cast<Eigen::Index>(buses)));
    const std::size_t slack = j.contains("slack_bus") ? bus_index(j, "slack_bus", buses) : 0;
    return NetworkModel::from_reactances(buses, std::move(lines), slack);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
}

inline ParticipantKind parse_kind(const std::string& s) {
  if (s == "dispatchable") return ParticipantKind::dispatchable;
  if (s == "variable") return ParticipantKind::variable;
  if (s == "consumer") return ParticipantKind::consumer;
  throw ConfigError("unknown participant kind '" + s + "'");
}

inline QuadraticCost parse_cost(const json& j, const char* key) {
  if (!j.contains(key)) return {};
  const json& c = j.at(key);
  return {get_or<double>(c, "a", 0.0), get_or<double>(c, "b", 0.0)};
}

/// [{"id", "kind", "bus", "offered": {"a", "b"}, "true_cost": {...},
/// "capacity_mw", "ramp_mw", "wind_column", "demand_mw"} ...]. Missing
/// true_cost means truthful offers; missing capacity or ramp is unlimited.
inline std::vector<Participant> parse_participants(const json& j, std::size_t bus_count) {
  if (!j.is_array()) throw ConfigError("participants must be an array");
  std::vector<Participant> out;
  for (const json& p : j) {
    Participant x;
    x.id = require<std::string>(p, "id");
    x.kind = parse_kind(require<std::string>(p, "kind"));
    x.bus = bus_index(p, "bus", bus_count);
    x.offered = parse_cost(p, "offered");
    x.true_cost = p.contains("true_cost") ? parse_cost(p, "true_cost") : x.offered;
    x.capacity_mw = get_or<double>(p, "capacity_mw", kUnboundedMW);
    x.ramp_mw = get_or<double>(p, "ramp_mw", kUnboundedMW);
    x.wind_column = get_or<std::size_t>(p, "wind_column", 0);
    x.demand_mw = get_or<double>(p, "demand_mw", 0.0);
    for (const auto& other : out)
      if (other.id == x.id) throw ConfigError("duplicate participant id '" + x.id + "'");
    out.push_back(std::move(x));
  }
  return out;
}

inline std::size_t participant_index(std::span<const Participant> parts, const std::string& id) {
  for (std::size_t i = 0; i < parts.size(); ++i)
    if (parts[i].id == id) return i;
  throw ConfigError("unknown participant '" + id + "'");
}

/// {"type": "uniform", "count", "coupling": "comonotone"|"independent",
///  "seed", "winds": [{"mean_mw", "std_mw", "capacity_mw"}]}
/// or {"type": "explicit", "weights", "wind_mw": [[...]], "demand_mw": [[...]]}.
/// `count_override` and `seed_override` come from the command line.
inline ScenarioSet parse_scenarios(const json& j, std::optional<std::size_t> count_override = std::nullopt,
                                   std::optional<std::uint64_t> seed_override = std::nullopt) {
  const std::string type = get_or<std::string>(j, "type", "uniform");
  try {
    if (type == "uniform") {
      const std::size_t n = count_override.value_or(get_or<std::size_t>(j, "count", 100));
      if (n == 0) throw ConfigError("scenario count must be at least 1");
      std::vector<UniformWind> winds;
      for (const json& w : require<json>(j, "winds"))
        winds.push_back({require<double>(w, "mean_mw"), require<double>(w, "std_mw"),
                         get_or<double>(w, "capacity_mw", 0.0)});
      const std::string c = get_or<std::string>(j, "coupling", "independent");
      WindCoupling coupling;
      if (c == "independent") coupling = WindCoupling::independent;
      else if (c == "comonotone") coupling = WindCoupling::comonotone;
      else throw ConfigError("unknown coupling '" + c + "'");
      const std::uint64_t seed = seed_override.value_or(get_or<std::uint64_t>(j, "seed", 1));
      return make_uniform_scenarios(winds, {}, n, coupling, seed);
    }
    if (type == "explicit") {
      const auto wind = require<std::vector<std::vector<double>>>(j, "wind_mw");
      const auto demand = get_or<std::vector<std::vector<double>>>(j, "demand_mw", {});
      std::vector<double> weights = get_or<std::vector<double>>(j, "weights", {});
      if (weights.empty()) weights.assign(wind.size(), wind.empty() ? 0.0 : 1.0 / static_cast<double>(wind.size()));
      if (!demand.empty() && demand.size() != wind.size())
        throw ConfigError("demand_mw needs one row per scenario");
      std::vector<Scenario> s(wind.size());
      for (std::size_t k = 0; k < s.size(); ++k) {
        s[k].wind_mw = wind[k];
        if (!demand.empty()) s[k].demand_mw = demand[k];
      }
      return ScenarioSet(std::move(s), std::move(weights));
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("scenarios: ") + e.what());
  }
  throw ConfigError("unknown scenario type '" + type + "'");
}

inline AcceptabilityMode parse_mode(const std::string& s) {
  if (s == "box_only") return AcceptabilityMode::box_only;
  if (s == "risk_neutral") return AcceptabilityMode::risk_neutral;
  if (s == "cvar") return AcceptabilityMode::cvar;
  throw ConfigError("unknown acceptability mode '" + s + "'");
}

inline Role parse_role(const std::string& s) {
  if (s == "buyer") return Role::buyer;
  if (s == "seller") return Role::seller;
  throw ConfigError("unknown role '" + s + "'");
}

inline ClearingMode parse_clearing_mode(const std::string& s) {
  if (s == "social") return ClearingMode::social;
  if (s == "so") return ClearingMode::so;
  if (s == "selfish") return ClearingMode::selfish;
  throw ConfigError("unknown clearing mode '" + s + "'");
}

inline std::string to_string(Role r) { return r == Role::buyer ? "buyer" : "seller"; }

/// Option entries: {"participant", "role", "mode", "alpha", "q_max",
/// "K_max", "delta_max"}. Fee and strike caps default to the largest
/// real-time price of the outcome.
inline std::vector<OptionSpec> parse_options(const json& j, std::span<const Participant> parts,
                                             const MarketOutcome& outcome) {
  double max_price = 0.0;
  for (const auto& r : outcome.realtime)
    for (double p : r.prices) max_price = std::max(max_price, p);
  std::vector<OptionSpec> out;
  for (const json& o : j) {
    OptionSpec s;
    s.participant = participant_index(parts, require<std::string>(o, "participant"));
    s.role = parse_role(require<std::string>(o, "role"));
    s.mode = parse_mode(get_or<std::string>(o, "mode", "risk_neutral"));
    s.alpha = get_or<double>(o, "alpha", 0.0);
    s.bounds = {get_or<double>(o, "q_max", max_price), get_or<double>(o, "K_max", max_price),
                require<double>(o, "delta_max")};
    if (s.bounds.q_max < 0.0 || s.bounds.K_max < 0.0 || s.bounds.delta_max < 0.0)
      throw ConfigError("option bounds must be nonnegative");
    if (s.mode == AcceptabilityMode::cvar && !(s.alpha >= 0.0 && s.alpha < 1.0))
      throw ConfigError("alpha must lie in [0, 1)");
    out.push_back(s);
  }
  return out;
}

struct FtrHolding {
  std::size_t holder = 0;  // participant index
  FTRPosition position;
};

inline std::vector<FtrHolding> parse_ftr(const json& j, std::span<const Participant> parts, std::size_t bus_count) {
  std::vector<FtrHolding> out;
  for (const json& f : j) {
    const double v = require<double>(f, "volume_mw");
    if (v < 0.0) throw ConfigError("FTR volume must be nonnegative");
    out.push_back({participant_index(parts, require<std::string>(f, "holder")),
                   {bus_index(f, "from_bus", bus_count), bus_index(f, "to_bus", bus_count), v}});
  }
  return out;
}

inline CopperplateInstance parse_copperplate(const json& j) {
  CopperplateInstance c;
  c.mu = get_or<double>(j, "mu", c.mu);
  c.sigma = get_or<double>(j, "sigma", c.sigma);
  c.rho = get_or<double>(j, "rho", c.rho);
  c.epsilon = get_or<double>(j, "epsilon", c.epsilon);
  c.d = get_or<double>(j, "d", c.d);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("copperplate: ") + e.what());
  }
  return c;
}

/// Everything a run needs once files are resolved.
struct RunConfig {
  NetworkModel network;
  std::vector<Participant> participants;
  ScenarioSet scenarios;
  json options = json::array();
  json ftr = json::array();
  ClearingMode mode = ClearingMode::social;
  ClearingOptions clearing;
  std::optional<CopperplateInstance> copperplate;
  std::vector<double> alphas;  // copperplate risk levels for boundary plots
};

struct Overrides {
  std::optional<std::size_t> scenarios;
  std::optional<std::uint64_t> seed;
  std::optional<double> beta;
  std::optional<ClearingMode> mode;
};

inline ClearingOptions parse_clearing(const json& j, ClearingOptions c = {}) {
  c.smoothing.beta = get_or<double>(j, "beta", c.smoothing.beta);
  c.smoothing.ms_tol = get_or<double>(j, "ms_tol", c.smoothing.ms_tol);
  c.smoothing.eq_tol = get_or<double>(j, "eq_tol", c.smoothing.eq_tol);
  c.max_iterations = get_or<int>(j, "max_iterations", c.max_iterations);
  c.random_starts = get_or<int>(j, "random_starts", c.random_starts);
  c.polish_iterations = get_or<int>(j, "polish_iterations", c.polish_iterations);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  const std::string tb = get_or<std::string>(j, "tie_break", "proportional");
  if (tb == "proportional") c.tie_break = AllocationTieBreak::proportional;
  else if (tb == "lexicographic") c.tie_break = AllocationTieBreak::lexicographic;
  else throw ConfigError("unknown tie_break '" + tb + "'");
  if (c.smoothing.beta < 0.0 || c.smoothing.ms_tol < 0.0 || !(c.smoothing.eq_tol > 0.0))
    throw ConfigError("smoothing parameters must be positive");
  if (c.max_iterations < 0 || c.random_starts < 0 || c.polish_iterations < 0) throw ConfigError("iteration counts must be nonnegative");
  return c;
}

/// A run from a parsed config; relative file references resolve against base.
inline RunConfig run_config_from_json(const json& root, const fs::path& base, const Overrides& ov = {}) {
  const json clearing = get_or<json>(root, "clearing", json::object());
  ClearingOptions copt = parse_clearing(clearing);
  if (ov.beta) {
    if (!(*ov.beta > 0.0)) throw ConfigError("beta must be positive");
    copt.smoothing.beta = *ov.beta;
  }
  ClearingMode mode = ov.mode.value_or(parse_clearing_mode(get_or<std::string>(clearing, "mode", "social")));

  if (root.contains("copperplate")) {
    const json& cp = root.at("copperplate");
    const CopperplateInstance inst = parse_copperplate(cp);
    const json sc = get_or<json>(root, "scenarios", json::object());
    const std::size_t n = ov.scenarios.value_or(get_or<std::size_t>(sc, "count", 400));
    if (n == 0) throw ConfigError("scenario count must be at least 1");
    const std::string amode = get_or<std::string>(cp, "mode", "risk_neutral");
    const double alpha = get_or<double>(cp, "option_alpha", 0.0);
    CopperplateMarket m = make_copperplate_market(inst, n, parse_mode(amode), alpha);
    RunConfig rc{m.network, m.participants, m.scenarios, json::array(), get_or<json>(root, "ftr", json::array()),
                 mode, copt, inst, get_or<std::vector<double>>(cp, "alpha", {0.0, 0.5, 0.9})};
    for (const OptionSpec& o : m.options) {
      rc.options.push_back({{"participant", m.participants[o.participant].id},
                            {"role", to_string(o.role)},
                            {"mode", amode},
                            {"alpha", alpha},
                            {"q_max", o.bounds.q_max},
                            {"K_max", o.bounds.K_max},
                            {"delta_max", o.bounds.delta_max}});
    }
    return rc;
  }

  NetworkModel net = parse_network(resolve(require<json>(root, "network"), base));
  std::vector<Participant> parts = parse_participants(resolve(require<json>(root, "participants"), base),
                                                      net.bus_count());
  ScenarioSet s = parse_scenarios(resolve(require<json>(root, "scenarios"), base), ov.scenarios, ov.seed);
  try {
    validate_participants(net, parts, s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return RunConfig{std::move(net), std::move(parts), std::move(s),
                   resolve(get_or<json>(root, "options", json::array()), base),
                   resolve(get_or<json>(root, "ftr", json::array()), base), mode, copt, std::nullopt, {}};
}

inline RunConfig load_run_config(const fs::path& path, const Overrides& ov = {}) {
  return run_config_from_json(load_json(path), path.parent_path(), ov);
}

}  // namespace optclear::io

#endif  // OPTCLEAR_IO_HPP
