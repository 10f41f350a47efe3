#pragma once

#include <json.hpp>

#include <helmpw/netmodel.hpp>
#include <helmpw/pw.hpp>

#include <cmath>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace helmpw {

// ---------------------------------------------------------------------------
// current mismatch
// ---------------------------------------------------------------------------

/// Infinity-norm nodal current residual of the original power flow equations,
/// |Y V + Ysh V - I - conj(S)/conj(V)|, over all non-swing buses. Controlled
/// buses take their solved net reactive injection (one entry of `q_ctrl_net`
/// per control, same order as net.controls); everything else comes from the
/// case data. Throws std::domain_error on a zero voltage anywhere.
inline double mismatch(const Network& net, const Eigen::VectorXcd& v,
                       const Eigen::VectorXd& q_ctrl_net) {
    const int n = net.n();
    if (v.size() != n) throw std::invalid_argument("voltage length mismatch");
    if (q_ctrl_net.size() != static_cast<Eigen::Index>(net.controls.size()))
        throw std::invalid_argument("one net reactive injection per control required");
    for (int i = 0; i < n; ++i)
        if (std::abs(v(i)) == 0.0)
            throw std::domain_error("zero voltage at bus " +
                                    std::to_string(net.buses[static_cast<size_t>(i)].id));

    Eigen::VectorXcd s_inj(n);
    for (int i = 0; i < n; ++i) {
        const Bus& b = net.buses[static_cast<size_t>(i)];
        s_inj(i) = cd(b.pg_fixed - b.pd, b.qg_fixed - b.qd);
    }
    for (size_t c = 0; c < net.controls.size(); ++c) {
        const ControlSet& cs = net.controls[c];
        int a = net.bus_index(cs.ctrl_bus);
        const Bus& ba = net.buses[static_cast<size_t>(a)];
        s_inj(a) = cd(cs.pg + ba.pg_fixed - ba.pd, q_ctrl_net(static_cast<Eigen::Index>(c)));
    }

    Eigen::VectorXcd yv = net.y * v;
    double worst = 0.0;
    for (int i = 0; i < n; ++i) {
        if (i == net.swing) continue;
        const Bus& b = net.buses[static_cast<size_t>(i)];
        cd res = yv(i) + net.ysh(i) * v(i) - b.iconst - std::conj(s_inj(i)) / std::conj(v(i));
        worst = std::max(worst, std::abs(res));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// complementarity / saturation-consistency report
// ---------------------------------------------------------------------------

struct CheckTols {
    double product = 1e-6;   // |triple product| ceiling, mixed pu units
    double slack = 1e-8;     // allowed negative excursion of the limit slacks, pu
    double setpoint = 1e-6;  // interior |W - Wsp| window, pu^2
    double q_window = 1e-6;  // |Q - Qlim| window that marks a control "at limit", pu
    double v_slack = 1e-8;   // allowed voltage overshoot on the saturated side, pu
};

struct ControlCheck {
    int control = 0;              // index into net.controls
    int ctrl_bus = 0, reg_bus = 0;  // external ids
    double q = 0.0;               // aggregate generator reactive injection, pu
    double w = 0.0;               // |V_reg|^2, pu^2
    double wsp = 1.0;             // setpoint squared, pu^2
    double product = 0.0;         // product of (W - Wsp) and the existing limit slacks
    double slack_max = std::numeric_limits<double>::infinity();  // Qmax - Q
    double slack_min = std::numeric_limits<double>::infinity();  // Q - Qmin
    double setpoint_dev = 0.0;    // W - Wsp
    bool at_qmin = false, at_qmax = false;
    bool product_ok = false, slacks_ok = false, sensitivity_ok = false;
    bool pass = false;
};

/// Evaluate the complementarity product, both inequality slacks, and the
/// voltage-sign implications of saturation for every control. Report-only:
/// never throws on a violation.
inline std::vector<ControlCheck>
complementarity_check(const Network& net, const Eigen::VectorXcd& v,
                      const std::vector<double>& q_gen, const CheckTols& t = {}) {
    if (q_gen.size() != net.controls.size())
        throw std::invalid_argument("one generator reactive injection per control required");
    std::vector<ControlCheck> out;
    out.reserve(net.controls.size());
    for (size_t c = 0; c < net.controls.size(); ++c) {
        const ControlSet& cs = net.controls[c];
        ControlCheck r;
        r.control = static_cast<int>(c);
        r.ctrl_bus = cs.ctrl_bus;
        r.reg_bus = cs.reg_bus;
        r.q = q_gen[c];
        int b = net.bus_index(cs.reg_bus);
        double vb = std::abs(v(b));
        r.w = vb * vb;
        r.wsp = cs.wsp;
        r.setpoint_dev = r.w - cs.wsp;

        r.product = r.setpoint_dev;
        if (cs.qmax) {
            r.slack_max = *cs.qmax - r.q;
            r.product *= r.slack_max;
            r.at_qmax = std::abs(r.slack_max) <= t.q_window;
        }
        if (cs.qmin) {
            r.slack_min = r.q - *cs.qmin;
            r.product *= r.slack_min;
            r.at_qmin = std::abs(r.slack_min) <= t.q_window;
        }

        r.product_ok = std::abs(r.product) <= t.product;
        r.slacks_ok = (!cs.qmax || r.slack_max >= -t.slack) &&
                      (!cs.qmin || r.slack_min >= -t.slack);
        // saturation must depress (raise) the regulated voltage, never the
        // reverse; interior controls must hold the setpoint
        if (r.at_qmax)
            r.sensitivity_ok = vb <= cs.vsp + t.v_slack;
        else if (r.at_qmin)
            r.sensitivity_ok = vb >= cs.vsp - t.v_slack;
        else
            r.sensitivity_ok = std::abs(r.setpoint_dev) <= t.setpoint;
        r.pass = r.product_ok && r.slacks_ok && r.sensitivity_ok;
        out.push_back(r);
    }
    return out;
}

inline std::vector<ControlCheck>
complementarity_check(const Network& net, const Solution& sol, const CheckTols& t = {}) {
    return complementarity_check(net, sol.v, sol.q, t);
}

// ---------------------------------------------------------------------------
// Lagrangian / energy values
// ---------------------------------------------------------------------------

namespace detail {

inline void require_nonzero(const Eigen::VectorXcd& v, const Network& net) {
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (std::abs(v(i)) == 0.0)
            throw std::domain_error("zero voltage at bus " +
                                    std::to_string(net.buses[static_cast<size_t>(i)].id));
}

/// Principal-branch bus angles; rejects states too close to the branch cut,
/// where the arctan term of the Lagrangian stops being single-valued.
inline Eigen::VectorXd principal_angles(const Eigen::VectorXcd& v, const Network& net) {
    constexpr double cut_guard = 0.05;
    Eigen::VectorXd th(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        th(i) = std::arg(v(i));
        if (std::abs(th(i)) >= M_PI - cut_guard)
            throw std::domain_error(
                "bus " + std::to_string(net.buses[static_cast<size_t>(i)].id) +
                " angle lies near the principal-branch cut; Lagrangian value undefined");
    }
    return th;
}

/// Shared quadratic part: branch, shunt, and constant-current terms. The
/// branch sum runs over every branch (swing included); the bus sums skip the
/// swing. Branch susceptances are taken per series element; off-nominal taps
/// and phase shifts are outside the model this value is exact for.
inline double quadratic_terms(const Network& net, const Eigen::VectorXcd& v) {
    double acc = 0.0;
    for (const Branch& br : net.branches) {
        int f = net.bus_index(br.from), t = net.bus_index(br.to);
        acc += -0.5 * br.y.imag() * std::norm(v(f) - v(t));
    }
    for (int i = 0; i < net.n(); ++i) {
        if (i == net.swing) continue;
        const cd ic = net.buses[static_cast<size_t>(i)].iconst;
        acc += -0.5 * net.ysh(i).imag() * std::norm(v(i));
        acc += -0.5 * (ic.real() * v(i).imag() - ic.imag() * v(i).real());
    }
    return acc;
}

}  // namespace detail

/// Full AC Lagrangian: reactive branch quadratic, shunt quadratic, the
/// current-injection cross term, the Q ln|V|^2 barrier-free term over every
/// non-swing bus, and the P theta term. Controlled buses take their solved
/// net reactive injection. For lossy or off-nominal-tap networks the value is
/// still computed but is no longer the exact potential of the flow equations.
inline double lagrangian_value(const Network& net, const Eigen::VectorXcd& v,
                               const Eigen::VectorXd& q_ctrl_net) {
    if (v.size() != net.n()) throw std::invalid_argument("voltage length mismatch");
    if (q_ctrl_net.size() != static_cast<Eigen::Index>(net.controls.size()))
        throw std::invalid_argument("one net reactive injection per control required");
    detail::require_nonzero(v, net);
    Eigen::VectorXd th = detail::principal_angles(v, net);

    Eigen::VectorXd p_net(net.n()), q_net(net.n());
    for (int i = 0; i < net.n(); ++i) {
        const Bus& b = net.buses[static_cast<size_t>(i)];
        p_net(i) = b.pg_fixed - b.pd;
        q_net(i) = b.qg_fixed - b.qd;
    }
    for (size_t c = 0; c < net.controls.size(); ++c) {
        const ControlSet& cs = net.controls[c];
        int a = net.bus_index(cs.ctrl_bus);
        p_net(a) += cs.pg;
        q_net(a) = q_ctrl_net(static_cast<Eigen::Index>(c));
    }

    double acc = detail::quadratic_terms(net, v);
    for (int i = 0; i < net.n(); ++i) {
        if (i == net.swing) continue;
        acc += -0.5 * q_net(i) * std::log(std::norm(v(i)));
        acc += -p_net(i) * th(i);
    }
    return acc;
}

/// Energy function: the Lagrangian with the Q ln|V|^2 terms of controlling
/// buses removed (their reactive injections are multipliers, not data).
/// Depends on the voltage state alone, so values are comparable across
/// saturation assignments; the complementarity-consistent solution minimizes
/// it on lossless networks.
inline double energy_value(const Network& net, const Eigen::VectorXcd& v) {
    if (v.size() != net.n()) throw std::invalid_argument("voltage length mismatch");
    detail::require_nonzero(v, net);
    Eigen::VectorXd th = detail::principal_angles(v, net);

    std::vector<char> is_ctrl(static_cast<size_t>(net.n()), 0);
    Eigen::VectorXd p_net(net.n());
    for (int i = 0; i < net.n(); ++i) {
        const Bus& b = net.buses[static_cast<size_t>(i)];
        p_net(i) = b.pg_fixed - b.pd;
    }
    for (const ControlSet& cs : net.controls) {
        int a = net.bus_index(cs.ctrl_bus);
        is_ctrl[static_cast<size_t>(a)] = 1;
        p_net(a) += cs.pg;
    }

    double acc = detail::quadratic_terms(net, v);
    for (int i = 0; i < net.n(); ++i) {
        if (i == net.swing) continue;
        const Bus& b = net.buses[static_cast<size_t>(i)];
        if (!is_ctrl[static_cast<size_t>(i)])
            acc += -0.5 * (b.qg_fixed - b.qd) * std::log(std::norm(v(i)));
        acc += -p_net(i) * th(i);
    }
    return acc;
}

/// Conductance-network Lagrangian over real voltages: resistive branch
/// quadratic, shunt quadratic, current term, and the P ln V potential term.
/// Stationary in each free (non-swing) voltage exactly at a solution of the
/// real power flow equations.
inline double lagrangian_dc(const Network& net, const Eigen::VectorXd& v) {
    if (v.size() != net.n()) throw std::invalid_argument("voltage length mismatch");
    for (int i = 0; i < net.n(); ++i)
        if (!(v(i) > 0.0))
            throw std::domain_error("non-positive voltage at bus " +
                                    std::to_string(net.buses[static_cast<size_t>(i)].id));
    double acc = 0.0;
    for (const Branch& br : net.branches) {
        int f = net.bus_index(br.from), t = net.bus_index(br.to);
        double dv = v(f) - v(t);
        acc += 0.5 * br.y.real() * dv * dv;
    }
    for (int i = 0; i < net.n(); ++i) {
        if (i == net.swing) continue;
        const Bus& b = net.buses[static_cast<size_t>(i)];
        double p = b.pg_fixed - b.pd;
        acc += 0.5 * net.ysh(i).real() * v(i) * v(i);
        acc += -b.iconst.real() * v(i);
        acc += -p * std::log(v(i));
    }
    for (const ControlSet& cs : net.controls) {
        int a = net.bus_index(cs.ctrl_bus);
        if (a != net.swing) acc += -cs.pg * std::log(v(a));
    }
    return acc;
}

// ---------------------------------------------------------------------------
// convergence-rate instrumentation
// ---------------------------------------------------------------------------

struct TraceRow {
    int stage = 0;
    int order = 0;     // total series order N at which the update was measured
    double error = 0;  // aggregate staircase update error at s = 1
};

/// Replay the per-order update errors of each stored stage germ: the same
/// incremental staircase walk the stage runner performs, aggregated over all
/// non-swing buses and control injections. Requires germs (solve with
/// keep_germs); rows reproduce the runner's error history exactly.
inline std::vector<TraceRow> convergence_trace(const std::vector<PWStage>& stages) {
    std::vector<TraceRow> rows;
    for (const PWStage& st : stages) {
        if (!st.germ)
            throw std::invalid_argument("stage " + std::to_string(st.k) +
                                        " carries no germ; solve with keep_germs");
        const Germ& g = *st.germ;
        const int n = static_cast<int>(g.v.size());
        const int swing = st.params.swing;
        std::vector<helmpw::detail::SeriesTracker> bus_tr(static_cast<size_t>(n));
        std::vector<helmpw::detail::SeriesTracker> q_tr(g.q.size());
        for (int ord = 1; ord <= g.order; ++ord) {
            bool any_diff = false;
            for (int i = 0; i < n; ++i) {
                if (i == swing) continue;
                if (bus_tr[static_cast<size_t>(i)].feed(g.v[static_cast<size_t>(i)], ord))
                    any_diff = true;
            }
            for (size_t c = 0; c < g.q.size(); ++c)
                if (q_tr[c].feed(g.q[c], ord)) any_diff = true;

            double worst = 0.0;
            bool all_have = true;
            for (int i = 0; i < n; ++i) {
                if (i == swing) continue;
                const auto& tr = bus_tr[static_cast<size_t>(i)];
                if (tr.terminated && tr.have_value) continue;
                if (!tr.have_value || tr.last_diff == std::numeric_limits<double>::infinity())
                    all_have = false;
                else
                    worst = std::max(worst, tr.last_diff);
            }
            for (const auto& tr : q_tr) {
                if (tr.terminated && tr.have_value) continue;
                if (!tr.have_value || tr.last_diff == std::numeric_limits<double>::infinity())
                    all_have = false;
                else
                    worst = std::max(worst, tr.last_diff);
            }
            if (any_diff && all_have) rows.push_back({st.k, ord, worst});
        }
    }
    return rows;
}

inline std::string trace_csv(const std::vector<TraceRow>& rows) {
    std::ostringstream os;
    os << "stage,N,error\n";
    os << std::setprecision(17);
    for (const TraceRow& r : rows) os << r.stage << ',' << r.order << ',' << r.error << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// assembled verification report
// ---------------------------------------------------------------------------

struct Verification {
    double mismatch = 0.0;
    std::optional<double> lagrangian;  // absent when the angle state rejects evaluation
    std::vector<ControlCheck> controls;
    std::vector<TraceRow> trace;  // per-order replay; empty without stage germs
    bool pass = false;
};

inline Verification verify_solution(const Network& net, const Solution& sol,
                                    double mismatch_tol = 1e-8, const CheckTols& t = {}) {
    Verification ver;
    Eigen::VectorXd q_net(static_cast<Eigen::Index>(sol.q_net.size()));
    for (size_t c = 0; c < sol.q_net.size(); ++c)
        q_net(static_cast<Eigen::Index>(c)) = sol.q_net[c];
    ver.mismatch = mismatch(net, sol.v, q_net);
    try {
        ver.lagrangian = lagrangian_value(net, sol.v, q_net);
    } catch (const std::domain_error&) {
        ver.lagrangian.reset();
    }
    ver.controls = complementarity_check(net, sol.v, sol.q, t);
    bool controls_ok = true;
    for (const ControlCheck& c : ver.controls) controls_ok = controls_ok && c.pass;
    if (!sol.stage_data.empty() && sol.stage_data.front().germ)
        ver.trace = convergence_trace(sol.stage_data);
    ver.pass = sol.converged && ver.mismatch <= mismatch_tol && controls_ok;
    return ver;
}

inline nlohmann::json to_json(const ControlCheck& c) {
    nlohmann::json j{{"control", c.control},
                     {"ctrl_bus", c.ctrl_bus},
                     {"reg_bus", c.reg_bus},
                     {"q", c.q},
                     {"w", c.w},
                     {"wsp", c.wsp},
                     {"product", c.product},
                     {"setpoint_dev", c.setpoint_dev},
                     {"at_qmin", c.at_qmin},
                     {"at_qmax", c.at_qmax},
                     {"product_ok", c.product_ok},
                     {"slacks_ok", c.slacks_ok},
                     {"sensitivity_ok", c.sensitivity_ok},
                     {"pass", c.pass}};
    if (std::isfinite(c.slack_max)) j["slack_max"] = c.slack_max;
    if (std::isfinite(c.slack_min)) j["slack_min"] = c.slack_min;
    return j;
}

inline nlohmann::json to_json(const Verification& v) {
    nlohmann::json controls = nlohmann::json::array();
    for (const ControlCheck& c : v.controls) controls.push_back(to_json(c));
    nlohmann::json trace = nlohmann::json::array();
    for (const TraceRow& r : v.trace)
        trace.push_back({{"stage", r.stage}, {"N", r.order}, {"error", r.error}});
    nlohmann::json j{{"mismatch", v.mismatch},
                     {"controls", controls},
                     {"pass", v.pass}};
    if (v.lagrangian)
        j["lagrangian"] = *v.lagrangian;
    else
        j["lagrangian"] = nullptr;
    if (!v.trace.empty()) j["trace"] = trace;
    return j;
}

}  // namespace helmpw
