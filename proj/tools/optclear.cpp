// optclear: market simulation and option clearing from a JSON config.
//
//   optclear dispatch    --config run.json [--out dir]
//   optclear clear       --config run.json --mode social|so|selfish
//   optclear ftr         --config run.json
//   optclear copperplate [--config copperplate.json]
//   optclear selftest
//
// Exit codes: 0 ok, 2 infeasible model, 3 solver non-convergence, 4 config error.

#include "optclear/io.hpp"
#include "optclear/optclear.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <numbers>

namespace {

using namespace optclear;
namespace io = optclear::io;
using io::CsvTable;
using io::format_number;
using io::json;
namespace fs = std::filesystem;

struct CommonFlags {
  std::string config;
  std::optional<std::size_t> scenarios;
  std::optional<std::uint64_t> seed;
  std::optional<double> beta;
  std::string out = "out";
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
  auto* c = cmd->add_option("--config", f.config, "run configuration (JSON)");
  if (config_required) c->required();
  cmd->add_option("--scenarios", f.scenarios, "override the scenario count");
  cmd->add_option("--seed", f.seed, "override the scenario seed");
  cmd->add_option("--beta", f.beta, "smoothing sharpness (1/$)");
  cmd->add_option("--out", f.out, "output directory");
}

io::RunConfig load(const CommonFlags& f, std::optional<ClearingMode> mode = std::nullopt) {
  io::Overrides ov{f.scenarios, f.seed, f.beta, mode};
  io::RunConfig rc = io::load_run_config(f.config, ov);
  if (f.seed) rc.clearing.seed = *f.seed;
  return rc;
}

fs::path prepare(const std::string& dir) {
  fs::path p(dir);
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

MarketOutcome run_market(const io::RunConfig& rc) {
  MarketOutcome out = solve_market(rc.network, rc.participants, rc.scenarios);
  if (!out.forward.feasible) throw InfeasibleError("forward stage: " + out.forward.message);
  for (const auto& r : out.realtime)
    if (!r.feasible) throw InfeasibleError(r.message);
  return out;
}

void write_market(const fs::path& dir, const io::RunConfig& rc, const MarketOutcome& out) {
  json fwd;
  fwd["prices"] = out.forward.prices;
  json parts = json::array();
  for (std::size_t i = 0; i < rc.participants.size(); ++i)
    parts.push_back({{"id", rc.participants[i].id},
                     {"bus", rc.participants[i].bus + 1},
                     {"dispatch", out.forward.dispatch[i]}});
  fwd["participants"] = parts;
  write_json(dir / "forward.json", fwd);

  CsvTable rt{{"scenario", "participant", "dispatch", "price"}, {}};
  CsvTable pr{{"scenario", "weight", "participant", "profit"}, {}};
  for (std::size_t k = 0; k < out.realtime.size(); ++k) {
    for (std::size_t i = 0; i < rc.participants.size(); ++i) {
      const auto& p = rc.participants[i];
      rt.rows.push_back({std::to_string(k), p.id, format_number(out.realtime[k].dispatch[i]),
                         format_number(out.realtime[k].prices[p.bus])});
      pr.rows.push_back({std::to_string(k), format_number(out.scenarios.weight(k)), p.id,
                         format_number(out.profits[i][k])});
    }
  }
  io::write_csv(dir / "realtime.csv", rt);
  io::write_csv(dir / "profits.csv", pr);
}

const char* direction(double delta, double scale) {
  const double tol = 1e-9 * std::max(1.0, scale);
  if (delta < -tol) return "decrease";
  if (delta > tol) return "increase";
  return "unchanged";
}

void write_report(const fs::path& path, const VarianceReport& rep) {
  CsvTable t{{"participant", "role", "var_before", "var_after", "delta", "cov_diagnostic", "direction"}, {}};
  for (const auto& r : rep.rows)
    t.rows.push_back({r.participant, io::to_string(r.role), format_number(r.var_before), format_number(r.var_after),
                      format_number(r.delta), format_number(r.covariance), direction(r.delta, r.var_before)});
  t.rows.push_back({"TOTAL", "", format_number(rep.total_before), format_number(rep.total_after),
                    format_number(rep.aggregate_delta), "", direction(rep.aggregate_delta, rep.total_before)});
  io::write_csv(path, t);
}

void write_clearing(const fs::path& dir, const ClearingProblem& problem, const ClearingResult& r) {
  json trades = json::array();
  for (std::size_t i = 0; i < r.trades.size(); ++i)
    trades.push_back({{"participant", r.ids[i]},
                      {"role", io::to_string(r.roles[i])},
                      {"q", r.trades[i].q},
                      {"K", r.trades[i].K},
                      {"delta", r.trades[i].delta}});
  const auto& d = r.diagnostics;
  json j{{"mode", to_string(r.mode)},
         {"status", d.status},
         {"feasible", r.feasible},
         {"aggregate_delta", r.aggregate_delta},
         {"expected_ms", r.expected_ms},
         {"trades", trades},
         {"diagnostics",
          {{"iterations", d.iterations},
           {"starts", d.starts},
           {"eligible_candidates", d.eligible_candidates},
           {"volume_residual", d.volume_residual},
           {"max_abs_surplus", d.max_abs_surplus},
           {"ms_tol", d.ms_tol},
           {"beta", d.beta},
           {"smoothed_variance", d.smoothed_variance},
           {"exact_variance", d.exact_variance},
           {"fallback_used", d.fallback_used},
           {"flagged_scenarios", d.flagged_scenarios}}}};
  write_json(dir / "trades.json", j);

  CsvTable alloc{{"scenario", "seller", "volume"}, {}};
  for (std::size_t k = 0; k < problem.scenarios.size(); ++k)
    for (std::size_t g = 0; g < r.allocation.sellers.size(); ++g)
      alloc.rows.push_back({std::to_string(k), r.ids[r.allocation.sellers[g]],
                            format_number(r.allocation.volume[g][k])});
  io::write_csv(dir / "allocation.csv", alloc);

  CsvTable ms{{"scenario", "weight", "ms"}, {}};
  for (std::size_t k = 0; k < r.ms.size(); ++k)
    ms.rows.push_back({std::to_string(k), format_number(problem.scenarios.weight(k)), format_number(r.ms[k])});
  ms.rows.push_back({"expected", "1", format_number(r.expected_ms)});
  io::write_csv(dir / "ms.csv", ms);

  write_report(dir / "variance_report.csv", aggregate_report(problem, r));
}

void print_summary(const ClearingResult& r) {
  std::printf("mode %s: %s\n", to_string(r.mode).c_str(), r.diagnostics.status.c_str());
  for (std::size_t i = 0; i < r.trades.size(); ++i)
    std::printf("  %-8s %-6s q=%.6g K=%.6g delta=%.6g  var %.6g -> %.6g\n", r.ids[i].c_str(),
                io::to_string(r.roles[i]).c_str(), r.trades[i].q, r.trades[i].K, r.trades[i].delta, r.var_before[i],
                r.var_after[i]);
  std::printf("  aggregate variance delta %.10g, E[MS] %.3g, max |MS| %.3g\n", r.aggregate_delta, r.expected_ms,
              r.diagnostics.max_abs_surplus);
  if (r.mode == ClearingMode::selfish) {
    for (std::size_t i = 0; i < r.trades.size(); ++i)
      if (!(r.var_after[i] < r.var_before[i]))
        std::printf("  note: %s variance not reduced (no reduction guarantee under selfish clearing)\n",
                    r.ids[i].c_str());
  }
}

struct Cleared {
  MarketOutcome outcome;
  ClearingProblem problem;
  ClearingResult result;
};

Cleared run_clear(const io::RunConfig& rc, ClearingMode mode) {
  MarketOutcome out = run_market(rc);
  const auto specs = io::parse_options(rc.options, rc.participants, out);
  ClearingProblem problem = make_clearing_problem(out, rc.participants, specs);
  ClearingResult result = clear(problem, mode, rc.clearing);
  return {std::move(out), std::move(problem), std::move(result)};
}

int cmd_dispatch(const CommonFlags& f) {
  const io::RunConfig rc = load(f);
  const MarketOutcome out = run_market(rc);
  const fs::path dir = prepare(f.out);
  write_market(dir, rc, out);
  std::printf("dispatch: %zu scenarios, forward prices", out.scenarios.size());
  for (double p : out.forward.prices) std::printf(" %.6g", p);
  std::printf("\n");
  return 0;
}

int cmd_clear(const CommonFlags& f, const std::optional<std::string>& mode) {
  const std::optional<ClearingMode> m =
      mode ? std::optional<ClearingMode>(io::parse_clearing_mode(*mode)) : std::nullopt;
  const io::RunConfig rc = load(f, m);
  const Cleared c = run_clear(rc, rc.mode);
  const fs::path dir = prepare(f.out);
  write_market(dir, rc, c.outcome);
  write_clearing(dir, c.problem, c.result);
  print_summary(c.result);
  return 0;
}

int cmd_ftr(const CommonFlags& f) {
  const io::RunConfig rc = load(f);
  const auto holdings = io::parse_ftr(rc.ftr, rc.participants, rc.network.bus_count());
  const Cleared c = run_clear(rc, rc.mode);
  std::vector<std::optional<RandomSample>> extra(c.problem.participants.size());
  for (const auto& h : holdings) {
    const std::string& id = rc.participants[h.holder].id;
    std::size_t slot = c.problem.participants.size();
    for (std::size_t i = 0; i < c.problem.participants.size(); ++i)
      if (c.problem.participants[i].id == id) slot = i;
    if (slot == c.problem.participants.size()) throw ConfigError("FTR holder " + id + " is not an option participant");
    RandomSample pay = ftr_sample(c.outcome, h.position);
    extra[slot] = extra[slot] ? *extra[slot] + pay : pay;
  }
  const fs::path dir = prepare(f.out);
  write_clearing(dir, c.problem, c.result);
  const VarianceReport base = aggregate_report(c.problem, c.result);
  const VarianceReport with = report_with_payoffs(c.problem, c.result, extra);
  write_report(dir / "variance_report_ftr.csv", with);
  print_summary(c.result);
  for (std::size_t i = 0; i < base.rows.size(); ++i)
    if (extra[i])
      std::printf("  %s with FTR: variance delta %.10g (without %.10g)\n", base.rows[i].participant.c_str(),
                  with.rows[i].delta, base.rows[i].delta);
  return 0;
}

int cmd_copperplate(const CommonFlags& f) {
  io::Overrides ov{f.scenarios, f.seed, f.beta, std::nullopt};
  io::RunConfig rc = f.config.empty()
                         ? io::run_config_from_json(json{{"copperplate", json::object()}}, fs::current_path(), ov)
                         : io::load_run_config(f.config, ov);
  if (f.seed) rc.clearing.seed = *f.seed;
  if (!rc.copperplate) throw ConfigError("config has no copperplate block");
  const CopperplateInstance inst = *rc.copperplate;
  const std::vector<double> alphas = rc.alphas;
  const fs::path dir = prepare(f.out);

  // market against the closed forms
  const Cleared c = run_clear(rc, rc.mode);
  write_market(dir, rc, c.outcome);
  write_clearing(dir, c.problem, c.result);
  double err = 0.0;
  for (std::size_t k = 0; k < rc.scenarios.size(); ++k) {
    const double w = rc.scenarios[k].wind_mw[0];
    const auto a = analytic_profits(inst, w);
    err = std::max({err, std::abs(a.B - c.outcome.profits[kCopperBase][k]),
                    std::abs(a.P - c.outcome.profits[kCopperPeaker][k]),
                    std::abs(a.W - c.outcome.profits[kCopperWind][k]),
                    std::abs(analytic_realtime(inst, w).p - c.outcome.realtime[k].prices[0])});
  }

  // profit curves with and without the centrally cleared trade
  const CentralOptimum opt = central_optimum(inst, inst.half_width());
  CsvTable fig2{{"omega", "W_without", "W_with", "P_without", "P_with"}, {}};
  const std::size_t points = 401;
  for (std::size_t j = 0; j < points; ++j) {
    const double w = inst.omega_min() + (inst.omega_max() - inst.omega_min()) * static_cast<double>(j) /
                                            static_cast<double>(points - 1);
    const auto a = analytic_profits(inst, w);
    const double pay = option_payoff(analytic_realtime(inst, w).p, opt.K) * opt.delta;
    fig2.rows.push_back({format_number(w), format_number(a.W), format_number(a.W - opt.q * opt.delta + pay),
                         format_number(a.P), format_number(a.P + opt.q * opt.delta - pay)});
  }
  io::write_csv(dir / "fig2_profits.csv", fig2);

  // acceptability boundaries over (q, delta) per risk level
  CsvTable fig3{{"alpha", "role", "delta", "q", "K_boundary"}, {}};
  std::vector<double> deltas, fees;
  for (int j = 1; j <= 4; ++j) deltas.push_back(inst.half_width() * j / 4.0);
  for (int j = 0; j <= 40; ++j) fees.push_back(inst.inv_rho() / 2.0 * j / 40.0);
  for (double alpha : alphas)
    for (Role role : {Role::buyer, Role::seller})
      for (const BoundaryPoint& bp : acceptability_boundary(inst, alpha, role, deltas, fees))
        fig3.rows.push_back({format_number(alpha), io::to_string(role), format_number(bp.delta), format_number(bp.q),
                             bp.K ? format_number(*bp.K) : ""});
  io::write_csv(dir / "fig3_acceptability.csv", fig3);

  const auto loss = loss_region(inst);
  const double closed = -3.0 * inst.sigma * inst.sigma / 8.0 * std::pow(inst.inv_rho() - 0.5, 2);
  json report{{"instance",
               {{"mu", inst.mu}, {"sigma", inst.sigma}, {"rho", inst.rho}, {"epsilon", inst.epsilon}, {"d", inst.d}}},
              {"market_max_abs_error", err},
              {"loss_region", loss ? json{loss->lo, loss->hi} : json(nullptr)},
              {"closed_form_aggregate_delta", closed},
              {"central_optimum", {{"q", opt.q}, {"K", opt.K}, {"delta", opt.delta}}},
              {"cleared_aggregate_delta", c.result.aggregate_delta}};
  write_json(dir / "copperplate_report.json", report);

  std::printf("copperplate: market max |error| vs closed form %.3g\n", err);
  if (loss) std::printf("  W loses money for omega in [%.3f, %.3f)\n", loss->lo, loss->hi);
  std::printf("  closed-form aggregate delta %.6f, cleared %.6f\n", closed, c.result.aggregate_delta);
  print_summary(c.result);
  return 0;
}

int cmd_selftest() {
  int failures = 0;
  auto check = [&](const char* name, bool ok) {
    std::printf("%s %s\n", ok ? "PASS" : "FAIL", name);
    if (!ok) ++failures;
  };
  const CopperplateInstance inst;
  const CopperplateMarket m = make_copperplate_market(inst, 60);
  const MarketOutcome out = solve_market(m.network, m.participants, m.scenarios, 1);
  double err = 0.0;
  for (std::size_t k = 0; k < m.scenarios.size(); ++k) {
    const auto a = analytic_profits(inst, m.scenarios[k].wind_mw[0]);
    err = std::max({err, std::abs(a.W - out.profits[kCopperWind][k]), std::abs(a.P - out.profits[kCopperPeaker][k])});
  }
  check("copperplate market matches closed form", err <= 1e-6);
  const auto loss = loss_region(inst);
  check("loss region", loss && std::abs(loss->lo - 8.268) < 1e-3 && std::abs(loss->hi - 9.134) < 1e-3);
  const std::vector<double> losses{3.0, -1.0, 7.0, 2.0};
  const std::vector<double> w(4, 0.25);
  check("cvar at alpha 0 is the mean", weighted_cvar(w, losses, 0.0) == weighted_mean(w, losses));
  const ClearingProblem problem = make_clearing_problem(out, m.participants, m.options);
  ClearingOptions o;
  o.max_iterations = 0;
  const ClearingResult zero = clear(problem, ClearingMode::social, o);
  check("iteration cap 0 returns zero trade", zero.diagnostics.fallback_used && zero.aggregate_delta == 0.0);
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage market simulation and centralized clearing of cash-settled call options"};
  app.require_subcommand(1);
  CommonFlags dispatch_f, clear_f, ftr_f, cp_f;
  std::optional<std::string> mode;
  auto* dispatch = app.add_subcommand("dispatch", "solve both market stages and write prices and profits");
  add_common(dispatch, dispatch_f, true);
  auto* clear_cmd = app.add_subcommand("clear", "clear the options market");
  add_common(clear_cmd, clear_f, true);
  clear_cmd->add_option("--mode", mode, "social | so | selfish")
      ->check(CLI::IsMember({"social", "so", "selfish"}));
  auto* ftr = app.add_subcommand("ftr", "variance report with FTR payoffs added");
  add_common(ftr, ftr_f, true);
  auto* copper = app.add_subcommand("copperplate", "copperplate oracle report and plot data");
  add_common(copper, cp_f, false);
  auto* selftest = app.add_subcommand("selftest", "quick internal consistency checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 4;
  }

  try {
    if (*dispatch) return cmd_dispatch(dispatch_f);
    if (*clear_cmd) return cmd_clear(clear_f, mode);
    if (*ftr) return cmd_ftr(ftr_f);
    if (*copper) return cmd_copperplate(cp_f);
    if (*selftest) return cmd_selftest();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 4;
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return 2;
  } catch (const ConvergenceError& e) {
    std::cerr << "solver did not converge: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
