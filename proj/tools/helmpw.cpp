#include <CLI11.hpp>
#include <json.hpp>

#include <helmpw/diagnostics.hpp>
#include <helmpw/netmodel.hpp>
#include <helmpw/pw.hpp>
#include <helmpw/refsolver.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace helmpw;
using nlohmann::json;

constexpr int kOk = 0;
constexpr int kError = 1;
constexpr int kInfeasible = 2;

struct RunOptions {
    std::string case_path;
    std::string format = "auto";     // auto | matpower | json
    bool qlims = true;
    double lambda = 1.0;
    double tol_update = 1e-11;
    double tol_mismatch = 1e-8;
    int nmax = 32;
    int stage_cap = 80;
    std::string strategy = "helm";   // helm | nr1 | nr2
    std::string output = "human";    // json | csv | human
    std::string stage_trace_path;    // solve: extra stage-trace JSON file
    std::string out_path;            // convergence: CSV destination
    double precision = 1e-6;         // collapse: lambda window
    double lambda_max = 100.0;       // collapse: search ceiling
};

void add_common(CLI::App* cmd, RunOptions& o, bool with_strategy) {
    cmd->add_option("case", o.case_path, "Case file (.m MATPOWER or native .json)")
        ->required();
    cmd->add_option("--format", o.format, "Case format")
        ->check(CLI::IsMember({"auto", "matpower", "json"}))
        ->capture_default_str();
    cmd->add_flag("--qlims,!--no-qlims", o.qlims,
                  "Enforce generator reactive limits")
        ->capture_default_str();
    cmd->add_option("--scale", o.lambda,
                    "Uniform multiplier on loads and generation")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_option("--tol-update", o.tol_update, "Per-stage update tolerance, pu")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_option("--tol-mismatch", o.tol_mismatch, "Final current mismatch gate, pu")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_option("--nmax", o.nmax, "Series orders per stage")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_option("--stage-cap", o.stage_cap, "Maximum continuation stages")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_option("--output", o.output, "Report format")
        ->check(CLI::IsMember({"json", "csv", "human"}))
        ->capture_default_str();
    if (with_strategy)
        cmd->add_option("--strategy", o.strategy,
                        "helm, nr1 (switch all violations) or nr2 (one at a time)")
            ->check(CLI::IsMember({"helm", "nr1", "nr2"}))
            ->capture_default_str();
}

/// Look the case up as given, then under HELM_PW_FIXTURES.
std::string resolve_case(const std::string& path) {
    namespace fs = std::filesystem;
    if (fs::exists(path)) return path;
    if (const char* dir = std::getenv("HELM_PW_FIXTURES")) {
        fs::path alt = fs::path(dir) / path;
        if (fs::exists(alt)) return alt.string();
    }
    throw std::runtime_error("cannot open case file: " + path);
}

Network load_network(const RunOptions& o) {
    std::string path = resolve_case(o.case_path);
    std::optional<CaseFormat> fmt;
    if (o.format == "matpower") fmt = CaseFormat::matpower;
    if (o.format == "json") fmt = CaseFormat::json;
    Network net = load_case(path, fmt);
    if (o.lambda != 1.0) net = scaled(net, o.lambda);
    return net;
}

PWOptions pw_options(const RunOptions& o, bool keep_germs = false) {
    PWOptions po;
    po.enforce_qlims = o.qlims;
    po.tol_update = o.tol_update;
    po.mismatch_tol = o.tol_mismatch;
    po.nmax = o.nmax;
    po.stage_cap = o.stage_cap;
    po.keep_germs = keep_germs;
    return po;
}

const char* outcome_name(NROutcome oc) {
    switch (oc) {
        case NROutcome::ok: return "ok";
        case NROutcome::diverged: return "diverged";
        default: return "cycled";
    }
}

json bus_array(const Network& net, const Eigen::VectorXcd& v) {
    json arr = json::array();
    for (int i = 0; i < net.n(); ++i)
        arr.push_back({{"id", net.buses[static_cast<size_t>(i)].id},
                       {"vm", std::abs(v(i))},
                       {"va_deg", std::arg(v(i)) * 180.0 / M_PI}});
    return arr;
}

json control_array(const Network& net, const std::vector<double>& q,
                   const std::vector<double>& q_net,
                   const std::vector<std::string>& status) {
    json arr = json::array();
    for (size_t c = 0; c < net.controls.size(); ++c) {
        const ControlSet& cs = net.controls[c];
        json jc{{"ctrl_bus", cs.ctrl_bus},
                {"reg_bus", cs.reg_bus},
                {"vsp", cs.vsp},
                {"q", q[c]},
                {"q_net", q_net[c]},
                {"status", status[c]}};
        if (cs.qmin) jc["qmin"] = *cs.qmin;
        if (cs.qmax) jc["qmax"] = *cs.qmax;
        arr.push_back(jc);
    }
    return arr;
}

json stage_trace_json(const std::vector<PWStageRecord>& trace) {
    json arr = json::array();
    for (const PWStageRecord& r : trace)
        arr.push_back({{"stage", r.k},
                       {"s0", r.s0},
                       {"orders", r.orders},
                       {"update_error", r.update_error},
                       {"accumulated", r.accumulated}});
    return arr;
}

void set_number_or_null(json& j, const char* key, double x) {
    if (std::isfinite(x))
        j[key] = x;
    else
        j[key] = nullptr;
}

std::vector<double> nr_q_net(const Network& net, const std::vector<double>& q_gen) {
    std::vector<double> out(q_gen.size());
    for (size_t c = 0; c < net.controls.size(); ++c) {
        const Bus& ba = net.buses[static_cast<size_t>(net.bus_index(net.controls[c].ctrl_bus))];
        out[c] = q_gen[c] + ba.qg_fixed - ba.qd;
    }
    return out;
}

void print_human_state(std::ostream& os, const Network& net, const Eigen::VectorXcd& v,
                       const std::vector<double>& q, const std::vector<double>& q_net,
                       const std::vector<std::string>& status) {
    os << std::setprecision(6) << std::fixed;
    os << "bus        vm        va_deg\n";
    for (int i = 0; i < net.n(); ++i)
        os << std::left << std::setw(10) << net.buses[static_cast<size_t>(i)].id
           << std::right << std::setw(9) << std::abs(v(i)) << std::setw(12)
           << std::arg(v(i)) * 180.0 / M_PI << "\n";
    if (!net.controls.empty()) {
        os << "control    ctrl_bus  reg_bus   q          q_net      status\n";
        for (size_t c = 0; c < net.controls.size(); ++c)
            os << std::left << std::setw(11) << c << std::setw(10)
               << net.controls[c].ctrl_bus << std::setw(10) << net.controls[c].reg_bus
               << std::setw(11) << q[c] << std::setw(11) << q_net[c] << status[c] << "\n";
    }
    os.unsetf(std::ios::fixed);
}

std::string csv_state(const Network& net, const Eigen::VectorXcd& v) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "bus,vm,va_deg\n";
    for (int i = 0; i < net.n(); ++i)
        os << net.buses[static_cast<size_t>(i)].id << ',' << std::abs(v(i)) << ','
           << std::arg(v(i)) * 180.0 / M_PI << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

int run_solve_helm(const RunOptions& o, const Network& net) {
    Solution sol;
    try {
        sol = solve_pw(net, pw_options(o));
    } catch (const PWError& e) {
        // stall or gate failure: the case is infeasible as posed
        std::cerr << "infeasible: " << e.what() << "\n";
        if (o.output == "json") {
            json j{{"command", "solve"}, {"case", o.case_path},  {"lambda", o.lambda},
                   {"strategy", "helm"}, {"qlims", o.qlims},     {"converged", false},
                   {"error", e.what()},  {"exit_code", kInfeasible}};
            std::cout << j.dump(2) << "\n";
        }
        return kInfeasible;
    }

    json j{{"command", "solve"},   {"case", o.case_path}, {"lambda", o.lambda},
           {"strategy", "helm"},   {"qlims", o.qlims},    {"converged", sol.converged},
           {"stages", sol.stages}, {"stage_trace", stage_trace_json(sol.trace)}};

    if (!o.stage_trace_path.empty()) {
        std::ofstream out(o.stage_trace_path);
        if (!out) throw std::runtime_error("cannot write " + o.stage_trace_path);
        out << stage_trace_json(sol.trace).dump(2) << "\n";
    }

    if (!sol.converged) {
        j["exit_code"] = kInfeasible;
        if (sol.s_crit) j["s_crit"] = *sol.s_crit;
        if (o.output == "json")
            std::cout << j.dump(2) << "\n";
        else if (sol.s_crit)
            std::cout << "infeasible: continuation stalled at s = " << *sol.s_crit
                      << " (lambda " << o.lambda << ")\n";
        return kInfeasible;
    }

    Eigen::VectorXd q_net(static_cast<Eigen::Index>(sol.q_net.size()));
    for (size_t c = 0; c < sol.q_net.size(); ++c)
        q_net(static_cast<Eigen::Index>(c)) = sol.q_net[c];
    try {
        sol.lagrangian = lagrangian_value(net, sol.v, q_net);
    } catch (const std::domain_error&) {
        sol.lagrangian = std::numeric_limits<double>::quiet_NaN();
    }
    Verification ver = verify_solution(net, sol, o.tol_mismatch);

    std::vector<std::string> status;
    for (SaturationStatus s : sol.sat) status.emplace_back(to_string(s));

    j["exit_code"] = kOk;
    j["mismatch"] = sol.mismatch;
    set_number_or_null(j, "lagrangian", sol.lagrangian);
    j["buses"] = bus_array(net, sol.v);
    j["controls"] = control_array(net, sol.q, sol.q_net, status);
    j["verification"] = to_json(ver);

    if (o.output == "json") {
        std::cout << j.dump(2) << "\n";
    } else if (o.output == "csv") {
        std::cout << csv_state(net, sol.v);
    } else {
        std::cout << "case " << o.case_path << "  lambda " << o.lambda
                  << "  strategy helm\n"
                  << "converged in " << sol.stages << " stage(s); mismatch "
                  << sol.mismatch << "; lagrangian " << sol.lagrangian << "\n"
                  << "verification: " << (ver.pass ? "PASS" : "FAIL") << "\n";
        print_human_state(std::cout, net, sol.v, sol.q, sol.q_net, status);
    }
    return kOk;
}

int run_solve_nr(const RunOptions& o, const Network& net) {
    NRStrategy strat = o.strategy == "nr1" ? NRStrategy::switch_all : NRStrategy::switch_one;
    if (!o.qlims) strat = NRStrategy::none;
    NROptions no;
    no.tol = o.tol_mismatch;
    NRReport rep = newton_solve(net, strat, no);

    std::vector<double> q_net = nr_q_net(net, rep.q);
    std::vector<std::string> status;
    for (ControlMode m : rep.assignment) status.emplace_back(to_string(m));

    json j{{"command", "solve"},       {"case", o.case_path},
           {"lambda", o.lambda},       {"strategy", o.strategy},
           {"qlims", o.qlims},         {"converged", rep.converged},
           {"outcome", outcome_name(rep.outcome)},
           {"iterations", rep.iterations}, {"rounds", rep.rounds}};

    if (!rep.converged) {
        j["exit_code"] = kInfeasible;
        if (o.output == "json")
            std::cout << j.dump(2) << "\n";
        else
            std::cout << "not converged: " << outcome_name(rep.outcome) << "\n";
        return kInfeasible;
    }

    double lag;
    try {
        Eigen::VectorXd qn(static_cast<Eigen::Index>(q_net.size()));
        for (size_t c = 0; c < q_net.size(); ++c) qn(static_cast<Eigen::Index>(c)) = q_net[c];
        lag = lagrangian_value(net, rep.v, qn);
    } catch (const std::domain_error&) {
        lag = std::numeric_limits<double>::quiet_NaN();
    }
    auto checks = complementarity_check(net, rep.v, rep.q);
    bool checks_pass = true;
    json jchecks = json::array();
    for (const ControlCheck& c : checks) {
        checks_pass = checks_pass && c.pass;
        jchecks.push_back(to_json(c));
    }

    j["exit_code"] = kOk;
    j["mismatch"] = rep.mismatch;
    set_number_or_null(j, "lagrangian", lag);
    j["buses"] = bus_array(net, rep.v);
    j["controls"] = control_array(net, rep.q, q_net, status);
    j["verification"] = json{{"mismatch", rep.mismatch},
                             {"controls", jchecks},
                             {"pass", checks_pass && rep.mismatch <= o.tol_mismatch}};

    if (o.output == "json") {
        std::cout << j.dump(2) << "\n";
    } else if (o.output == "csv") {
        std::cout << csv_state(net, rep.v);
    } else {
        std::cout << "case " << o.case_path << "  lambda " << o.lambda << "  strategy "
                  << o.strategy << "\n"
                  << "converged in " << rep.iterations << " Newton step(s), "
                  << rep.rounds << " round(s); mismatch " << rep.mismatch << "\n";
        print_human_state(std::cout, net, rep.v, rep.q, q_net, status);
    }
    return kOk;
}

int run_solve(const RunOptions& o) {
    Network net = load_network(o);
    if (o.strategy == "helm") return run_solve_helm(o, net);
    return run_solve_nr(o, net);
}

// ---------------------------------------------------------------------------
// collapse
// ---------------------------------------------------------------------------

int run_collapse(const RunOptions& o) {
    Network net = load_network(o);  // lambda applied as the search base
    PWOptions po = pw_options(o);

    auto feasible = [&](double lambda) {
        try {
            return solve_pw(scaled(net, lambda), po).converged;
        } catch (const PWError&) {
            return false;
        } catch (const StageError&) {
            return false;
        }
    };

    if (!feasible(1.0)) {
        std::cerr << "error: case is infeasible at its base loading\n";
        return kError;
    }
    if (feasible(o.lambda_max)) {
        if (o.output == "json") {
            json j{{"command", "collapse"}, {"case", o.case_path},
                   {"unbounded", true},     {"lambda_max", o.lambda_max},
                   {"exit_code", kOk}};
            std::cout << j.dump(2) << "\n";
        } else {
            std::cout << "no collapse found: still feasible at lambda_max = "
                      << o.lambda_max << "\n";
        }
        return kOk;
    }

    CollapseResult r = collapse_search(net, 1.0, o.lambda_max, o.precision, po);
    double window = r.lambda_infeasible - r.lambda_feasible;
    if (o.output == "json") {
        json j{{"command", "collapse"},
               {"case", o.case_path},
               {"unbounded", false},
               {"lambda_crit", r.lambda_crit},
               {"lambda_feasible", r.lambda_feasible},
               {"lambda_infeasible", r.lambda_infeasible},
               {"window", window},
               {"solves", r.solves + 2},
               {"stages_at_feasible", r.at_feasible.stages},
               {"exit_code", kOk}};
        std::cout << j.dump(2) << "\n";
    } else if (o.output == "csv") {
        std::ostringstream os;
        os << std::setprecision(17);
        os << "lambda_crit,window,solves\n"
           << r.lambda_crit << ',' << window << ',' << r.solves + 2 << '\n';
        std::cout << os.str();
    } else {
        std::cout << std::setprecision(10) << "lambda_crit = " << r.lambda_crit
                  << " +/- " << std::setprecision(3) << 0.5 * window << " ("
                  << r.solves + 2 << " solves)\n";
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

struct MethodCounts {
    bool converged = false;
    int qmin = 0, qmax = 0;
    int stages = 0;       // helm stages / nr iterations
    double max_vm_diff = std::numeric_limits<double>::quiet_NaN();
};

std::string counts_str(const MethodCounts& m) {
    if (!m.converged) return "NC";
    return std::to_string(m.qmin) + "/" + std::to_string(m.qmax);
}

std::string marker(const MethodCounts& helm, const MethodCounts& nr) {
    if (!nr.converged) return "NC";
    if (helm.converged && helm.qmin == nr.qmin && helm.qmax == nr.qmax) return "=";
    return counts_str(nr);
}

int run_compare(const RunOptions& o) {
    Network net = load_network(o);
    const size_t nc = net.controls.size();

    MethodCounts helm;
    Solution sol;
    try {
        sol = solve_pw(net, pw_options(o));
        helm.converged = sol.converged;
    } catch (const PWError&) {
        helm.converged = false;
    }
    if (helm.converged) {
        helm.stages = sol.stages;
        for (SaturationStatus s : sol.sat) {
            if (s == SaturationStatus::at_qmin) ++helm.qmin;
            if (s == SaturationStatus::at_qmax) ++helm.qmax;
        }
    }

    NROptions no;
    no.tol = o.tol_mismatch;
    auto run_nr = [&](NRStrategy strat) {
        MethodCounts m;
        NRReport rep = newton_solve(net, o.qlims ? strat : NRStrategy::none, no);
        m.converged = rep.converged;
        if (!m.converged) return m;
        m.stages = rep.iterations;
        for (ControlMode cm : rep.assignment) {
            if (cm == ControlMode::at_qmin) ++m.qmin;
            if (cm == ControlMode::at_qmax) ++m.qmax;
        }
        if (helm.converged)
            m.max_vm_diff = (rep.v.cwiseAbs() - sol.v.cwiseAbs()).cwiseAbs().maxCoeff();
        return m;
    };
    MethodCounts nr1 = run_nr(NRStrategy::switch_all);
    MethodCounts nr2 = run_nr(NRStrategy::switch_one);

    double pct = nc == 0 || !helm.converged
                     ? 0.0
                     : 100.0 * static_cast<double>(helm.qmin + helm.qmax) /
                           static_cast<double>(nc);

    auto method_json = [&](const MethodCounts& m, bool is_nr) {
        json j{{"converged", m.converged}};
        if (m.converged) {
            j["qmin"] = m.qmin;
            j["qmax"] = m.qmax;
            j["counts"] = counts_str(m);
            j[is_nr ? "iterations" : "stages"] = m.stages;
            if (is_nr) {
                j["marker"] = marker(helm, m);
                if (std::isfinite(m.max_vm_diff)) j["max_vm_diff"] = m.max_vm_diff;
            }
        }
        return j;
    };

    if (o.output == "json") {
        json j{{"command", "compare"},
               {"case", o.case_path},
               {"lambda", o.lambda},
               {"qlims", o.qlims},
               {"controls", nc},
               {"pct_pv_saturated", pct},
               {"helm", method_json(helm, false)},
               {"nr1", method_json(nr1, true)},
               {"nr2", method_json(nr2, true)},
               {"exit_code", helm.converged ? kOk : kInfeasible}};
        std::cout << j.dump(2) << "\n";
    } else if (o.output == "csv") {
        std::ostringstream os;
        os << "case,pw_steps,helm,nr1,nr2,pct_pv\n"
           << o.case_path << ',' << helm.stages << ',' << counts_str(helm) << ','
           << marker(helm, nr1) << ',' << marker(helm, nr2) << ','
           << std::setprecision(3) << pct << '\n';
        std::cout << os.str();
    } else {
        std::cout << std::left << std::setw(16) << o.case_path << std::setw(7)
                  << helm.stages << std::setw(10) << counts_str(helm) << std::setw(10)
                  << marker(helm, nr1) << std::setw(10) << marker(helm, nr2)
                  << std::setprecision(3) << pct << "\n";
    }
    return helm.converged ? kOk : kInfeasible;
}

// ---------------------------------------------------------------------------
// convergence
// ---------------------------------------------------------------------------

int run_convergence(const RunOptions& o) {
    Network net = load_network(o);
    Solution sol;
    bool feasible = true;
    try {
        sol = solve_pw(net, pw_options(o, /*keep_germs=*/true));
        feasible = sol.converged;
    } catch (const PWError& e) {
        std::cerr << "infeasible: " << e.what() << "\n";
        return kInfeasible;
    }

    auto rows = convergence_trace(sol.stage_data);
    std::string csv = trace_csv(rows);

    if (!o.out_path.empty()) {
        std::ofstream out(o.out_path);
        if (!out) throw std::runtime_error("cannot write " + o.out_path);
        out << csv;
    } else if (o.output == "json") {
        json arr = json::array();
        for (const TraceRow& r : rows)
            arr.push_back({{"stage", r.stage}, {"N", r.order}, {"error", r.error}});
        json j{{"command", "convergence"},
               {"case", o.case_path},
               {"lambda", o.lambda},
               {"converged", feasible},
               {"trace", arr},
               {"exit_code", feasible ? kOk : kInfeasible}};
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << csv;
    }
    return feasible ? kOk : kInfeasible;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Holomorphically embedded power flow with staged analytic continuation"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from a key=value file ([section] per subcommand)");

    RunOptions o;
    CLI::App* solve = app.add_subcommand("solve", "Solve one case and report the state");
    add_common(solve, o, /*with_strategy=*/true);
    solve->add_option("--stage-trace", o.stage_trace_path,
                      "Also write the stage trace as JSON to this file");

    CLI::App* compare = app.add_subcommand(
        "compare", "Cross-check saturation counts: embedding vs both Newton strategies");
    add_common(compare, o, /*with_strategy=*/false);

    CLI::App* collapse =
        app.add_subcommand("collapse", "Bisect the loadability limit lambda_crit");
    add_common(collapse, o, /*with_strategy=*/false);
    collapse->add_option("--precision", o.precision, "Target lambda window")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    collapse->add_option("--lambda-max", o.lambda_max, "Search ceiling")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    CLI::App* convergence = app.add_subcommand(
        "convergence", "Export the per-order update-error trace as CSV");
    add_common(convergence, o, /*with_strategy=*/false);
    convergence->add_option("--out", o.out_path, "Write the CSV here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (solve->parsed()) return run_solve(o);
        if (compare->parsed()) return run_compare(o);
        if (collapse->parsed()) return run_collapse(o);
        return run_convergence(o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kError;
    }
}
