// Staged analytic continuation: advance-point search, stage transformation,
// stall/infeasibility detection, and the unwind back to original variables.
#pragma once

#include <helmpw/helm.hpp>

#include <cmath>
#include <utility>

namespace helmpw {

struct PWStageRecord {
    int k = 0;
    double s0 = 0.0;           // advance point in the stage's own parameter
    int orders = 0;            // series orders computed
    double update_error = 0.0; // aggregate staircase update error at stop
    double accumulated = 0.0;  // position in original s-space after this stage
};

struct PWError : std::runtime_error {
    explicit PWError(const std::string& what, std::vector<PWStageRecord> tr = {})
        : std::runtime_error(what), trace(std::move(tr)) {}
    std::vector<PWStageRecord> trace;
};

/// One completed continuation stage.
struct PWStage {
    int k = 0;
    double s0 = 0.0;
    Eigen::VectorXcd v_partial;   // V^(k)(s0) per bus
    Eigen::VectorXd q_partial;    // Q^(k)(s0) per control
    StageParams params;           // the stage's own embedded problem
    double accumulated = 0.0;
    std::optional<Germ> germ;     // retained when PWOptions::keep_germs
};

enum class SaturationStatus { interior, at_qmin, at_qmax, inconsistent };

inline const char* to_string(SaturationStatus s) {
    switch (s) {
        case SaturationStatus::interior: return "interior";
        case SaturationStatus::at_qmin: return "at-qmin";
        case SaturationStatus::at_qmax: return "at-qmax";
        default: return "inconsistent";
    }
}

struct Solution {
    Eigen::VectorXcd v;                  // per-bus voltage
    std::vector<double> q;               // per-control aggregate generator Q, pu
    std::vector<double> q_net;           // per-control net bus injection, pu
    std::vector<SaturationStatus> sat;
    int stages = 0;
    double mismatch = std::numeric_limits<double>::infinity();
    bool converged = false;
    std::optional<double> s_crit;        // filled on infeasibility
    double lagrangian = std::numeric_limits<double>::quiet_NaN();
    std::vector<PWStageRecord> trace;
    std::vector<PWStage> stage_data;     // populated when keep_stages
};

struct PWOptions {
    bool enforce_qlims = true;
    double tol_update = 1e-11;      // per-stage staircase tolerance, pu
    double mismatch_tol = 1e-8;     // final physical gate, pu
    int nmax = 32;                  // series orders per stage
    int stage_cap = 80;
    double s_floor = 0.01;
    int consecutive_stall = 3;
    double beta = 0.95;             // advance-point safety factor
    bool keep_stages = false;       // retain full per-stage data in the Solution
    bool keep_germs = false;        // additionally retain each stage's germ
    EmbeddingDefaults embed;
};

// ---------------------------------------------------------------------------
// advance-point search
// ---------------------------------------------------------------------------

namespace detail {

/// Exact value of the (linear) swing series; all other series go through
/// their staircase tables.
inline bool all_converge_at(const RunResult& run, const StageParams& p, double s,
                            double tol) {
    for (int i = 0; i < p.n(); ++i) {
        if (i == p.swing) continue;
        if (!run.bus_tables[static_cast<size_t>(i)].verdict_at(s, tol).converged)
            return false;
    }
    for (const StaircaseTable& t : run.q_tables)
        if (!t.verdict_at(s, tol).converged) return false;
    return true;
}

}  // namespace detail

/// Largest parameter value where every per-bus and per-injection staircase
/// verdict converges, shrunk by the safety factor. Returns exactly 1 when the
/// whole stage converges there; nullopt when nothing at or above s_floor does.
inline std::optional<double> find_advance_point(const RunResult& run,
                                                const StageParams& p, double tol,
                                                double s_hint = 1.0,
                                                double beta = 0.95,
                                                double s_floor = 0.01) {
    if (run.orders < 4) throw PWError("find_advance_point: germ shallower than 4 orders");
    if (s_hint >= 1.0 && detail::all_converge_at(run, p, 1.0, tol)) return 1.0;

    static constexpr double grid[] = {0.99, 0.95, 0.9, 0.8, 0.7, 0.6,
                                      0.5,  0.4,  0.3, 0.2, 0.1, 0.05};
    double lo = -1.0, hi = 1.0;
    for (double g : grid) {
        if (g > s_hint) continue;
        if (detail::all_converge_at(run, p, g, tol)) {
            lo = g;
            break;
        }
        hi = g;
    }
    if (lo < 0.0) {
        if (!detail::all_converge_at(run, p, s_floor, tol)) return std::nullopt;
        lo = s_floor;
    }
    for (int it = 0; it < 20; ++it) {
        double mid = 0.5 * (lo + hi);
        if (detail::all_converge_at(run, p, mid, tol))
            lo = mid;
        else
            hi = mid;
    }
    return beta * lo;
}

inline std::optional<double> find_advance_point(const Germ& g, const StageParams& p,
                                                double tol, double s_hint = 1.0) {
    RunResult run;
    run.orders = g.order;
    run.bus_tables.reserve(g.v.size());
    for (const Series& s : g.v) run.bus_tables.emplace_back(s);
    for (const Series& s : g.q) run.q_tables.emplace_back(s);
    return find_advance_point(run, p, tol, s_hint);
}

// ---------------------------------------------------------------------------
// partial evaluation and the stage transform
// ---------------------------------------------------------------------------

struct DegenerateVoltageError : StageError {
    using StageError::StageError;
};

/// Evaluate the stage solution at s0 from the staircase tables. Every verdict
/// must converge; the swing value is exact.
inline std::pair<Eigen::VectorXcd, Eigen::VectorXd>
evaluate_partial(const RunResult& run, const StageParams& p, double s0, double tol) {
    Eigen::VectorXcd v(p.n());
    for (int i = 0; i < p.n(); ++i) {
        if (i == p.swing) {
            v(i) = cd(1.0, 0.0) + s0 * p.swing_v1;
            continue;
        }
        PadeVerdict pv = run.bus_tables[static_cast<size_t>(i)].verdict_at(s0, tol);
        if (!pv.converged)
            throw DegenerateVoltageError("partial evaluation not converged at s0 = " +
                                         std::to_string(s0));
        v(i) = pv.value;
    }
    Eigen::VectorXd q(static_cast<Eigen::Index>(p.controls.size()));
    for (size_t c = 0; c < p.controls.size(); ++c) {
        PadeVerdict pv = run.q_tables[c].verdict_at(s0, tol);
        if (!pv.converged)
            throw DegenerateVoltageError("partial injection not converged at s0 = " +
                                         std::to_string(s0));
        q(static_cast<Eigen::Index>(c)) = pv.value.real();
    }
    return {std::move(v), std::move(q)};
}

/// Renormalize the embedded problem around the partial solution at s0. The
/// new transmission matrix is Yhat off-diagonal with diagonals set so each
/// row cancels exactly; shunts, powers, barrier weights, setpoints, and limit
/// series pick up their primed values.
inline StageParams transform_stage(const StageParams& p, const Eigen::VectorXcd& vs,
                                   const Eigen::VectorXd& qs, double s0) {
    const int n = p.n();
    for (int j = 0; j < n; ++j)
        if (std::abs(vs(j)) < 1e-6)
            throw DegenerateVoltageError("partial voltage collapsed at bus " +
                                         std::to_string(j));
    StageParams r;
    std::vector<Eigen::Triplet<cd>> trip;
    Eigen::VectorXcd diag = Eigen::VectorXcd::Zero(n);
    for (int j = 0; j < p.y.outerSize(); ++j) {
        for (Eigen::SparseMatrix<cd>::InnerIterator it(p.y, j); it; ++it) {
            int i = static_cast<int>(it.row());
            if (i == j) continue;
            cd yhat = std::conj(vs(i)) * it.value() * vs(j);
            trip.emplace_back(i, j, yhat);
            diag(i) -= yhat;  // row-sum correction
        }
    }
    for (int i = 0; i < n; ++i) trip.emplace_back(i, i, diag(i));
    r.y.resize(n, n);
    r.y.setFromTriplets(trip.begin(), trip.end());
    r.y.makeCompressed();

    r.ysh = Eigen::VectorXcd(n);
    r.gamma = Eigen::VectorXcd(n);
    r.sfix = Eigen::VectorXcd(n);
    for (int i = 0; i < n; ++i) {
        double w = std::norm(vs(i));
        r.ysh(i) = (1.0 - s0) * w * p.ysh(i);
        r.gamma(i) = p.gamma(i) + s0 * std::conj(p.sfix(i));
        r.sfix(i) = (1.0 - s0) * p.sfix(i);
    }
    r.swing = p.swing;
    r.gamma(p.swing) = cd(0, 0);
    r.sfix(p.swing) = cd(0, 0);
    r.swing_v1 = (1.0 - s0) * p.swing_v1 / (cd(1.0, 0.0) + s0 * p.swing_v1);

    r.controls = p.controls;
    for (size_t c = 0; c < r.controls.size(); ++c) {
        ControlParams& cp = r.controls[c];
        double qc = qs(static_cast<Eigen::Index>(c));
        double wb = std::norm(vs(cp.b));
        // controlling-bus gamma collects the reactive partial as well
        r.gamma(cp.a) = p.gamma(cp.a) + s0 * std::conj(p.sfix(cp.a)) - cd(0.0, qc);
        cp.mu = (1.0 - s0) * cp.mu / wb;
        cp.wsp = {(cp.wsp.c0 + s0 * cp.wsp.c1) / wb, (1.0 - s0) * cp.wsp.c1 / wb};
        if (cp.qmin) *cp.qmin = {cp.qmin->c0 + s0 * cp.qmin->c1 - qc, (1.0 - s0) * cp.qmin->c1};
        if (cp.qmax) *cp.qmax = {cp.qmax->c0 + s0 * cp.qmax->c1 - qc, (1.0 - s0) * cp.qmax->c1};
        // The germ of the new stage assumes W(0) = 1 - B[0] exactly, but the
        // transported constants satisfy that identity only to the partial
        // evaluation's accuracy -- and the barrier slope near a wall amplifies
        // that noise far beyond it. Re-pin W[0] from the transported barrier
        // and re-anchor W[1] so W(1) still lands on the true setpoint target.
        double target = cp.wsp.c0 + cp.wsp.c1;
        double b0 = 0.0;
        if (cp.qmax) b0 -= cp.mu / cp.qmax->c0;
        if (cp.qmin) b0 -= cp.mu / cp.qmin->c0;
        cp.wsp.c0 = 1.0 - b0;
        cp.wsp.c1 = target - cp.wsp.c0;
    }
    r.validate();
    return r;
}

// ---------------------------------------------------------------------------
// unwind
// ---------------------------------------------------------------------------

/// Compose the per-stage partials with the final stage's values at s = 1:
/// voltages multiply, injections add.
inline std::pair<Eigen::VectorXcd, Eigen::VectorXd>
unwind(const std::vector<PWStage>& stages, const Eigen::VectorXcd& v_final,
       const Eigen::VectorXd& q_final) {
    Eigen::VectorXcd v = v_final;
    Eigen::VectorXd q = q_final;
    for (const PWStage& st : stages) {
        v = v.cwiseProduct(st.v_partial);
        q += st.q_partial;
    }
    return {std::move(v), std::move(q)};
}

// ---------------------------------------------------------------------------
// saturation classification
// ---------------------------------------------------------------------------

struct SaturationTols {
    double q = 1e-6;        // |Q - Qlim| window, pu
    double w = 1e-6;        // interior setpoint window, pu^2
    double slack = 1e-8;    // allowed voltage-side overshoot, pu
};

/// Classify each control against its limits and the voltage sign rules:
/// at Qmax the regulated magnitude must not exceed the setpoint, at Qmin it
/// must not fall below, interior must hold the setpoint. A near-limit control
/// with the wrong voltage sign is flagged, never silently accepted.
inline std::vector<SaturationStatus>
saturation_status(const Eigen::VectorXcd& v, const std::vector<double>& q_gen,
                  const std::vector<ControlSet>& controls, const Network& net,
                  const SaturationTols& tol = {}) {
    std::vector<SaturationStatus> out;
    out.reserve(controls.size());
    for (size_t c = 0; c < controls.size(); ++c) {
        const ControlSet& cs = controls[c];
        double vb = std::abs(v(net.bus_index(cs.reg_bus)));
        double q = q_gen[c];
        SaturationStatus s;
        if (cs.qmax && std::abs(q - *cs.qmax) <= tol.q)
            s = vb <= cs.vsp + tol.slack ? SaturationStatus::at_qmax
                                         : SaturationStatus::inconsistent;
        else if (cs.qmin && std::abs(q - *cs.qmin) <= tol.q)
            s = vb >= cs.vsp - tol.slack ? SaturationStatus::at_qmin
                                         : SaturationStatus::inconsistent;
        else
            s = std::abs(vb * vb - cs.wsp) <= tol.w ? SaturationStatus::interior
                                                    : SaturationStatus::inconsistent;
        out.push_back(s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// full solve
// ---------------------------------------------------------------------------

namespace detail {

/// Current-balance mismatch of the original (un-embedded) equations, with the
/// controls' net reactive injections substituted in.
inline double physical_mismatch(const Network& net, const StageParams& p0,
                                const Eigen::VectorXcd& v,
                                const Eigen::VectorXd& q_net) {
    Eigen::VectorXcd s_inj = p0.sfix;
    for (size_t c = 0; c < p0.controls.size(); ++c)
        s_inj(p0.controls[c].a) += cd(0.0, q_net(static_cast<Eigen::Index>(c)));
    Eigen::VectorXcd yv = net.y * v;
    double worst = 0.0;
    for (int i = 0; i < net.n(); ++i) {
        if (i == net.swing) continue;
        cd res = yv(i) + net.ysh(i) * v(i) - std::conj(s_inj(i)) / std::conj(v(i));
        worst = std::max(worst, std::abs(res));
    }
    return worst;
}

}  // namespace detail

/// Solve the network by staged continuation. Returns a converged Solution or
/// an infeasibility record with the critical-s estimate; throws PWError (with
/// the stage trace) when the stage cap is exceeded or the final mismatch gate
/// fails.
inline Solution solve_pw(const Network& net, const PWOptions& opts = {}) {
    StageParams p0 = stage0_params(net, opts.enforce_qlims, opts.embed);
    StageParams params = p0;

    // Each stage's evaluation noise re-enters the current balance amplified by
    // the stiffest row of Y, once per stage. Tighten the verdict tolerance so
    // the composed error stays an order under the mismatch gate; never loosen
    // past tol_update, never chase below what the staircase can resolve.
    Eigen::VectorXd row_mag = net.ysh.cwiseAbs();
    for (int j = 0; j < net.y.outerSize(); ++j)
        for (Eigen::SparseMatrix<cd>::InnerIterator it(net.y, j); it; ++it)
            row_mag(it.row()) += std::abs(it.value());
    double y_scale = std::max(1.0, row_mag.maxCoeff());
    double eval_tol = std::min(opts.tol_update,
                               std::max(0.1 * opts.mismatch_tol / y_scale, 1e-14));

    Solution sol;
    std::vector<PWStage> stages;
    double accumulated = 0.0;
    int stall_count = 0;

    for (int k = 0; k <= opts.stage_cap; ++k) {
        StageSystem sys(params);
        Germ germ = make_germ(params);
        RunResult run = run_stage(sys, germ, eval_tol, opts.nmax);

        if (run.converged) {
            sol.trace.push_back({k, 1.0, run.orders, run.final_error, 1.0});
            auto [v, q_net] = unwind(stages, run.v1, run.q1);
            sol.v = v;
            sol.stages = k + 1;
            sol.q_net.assign(q_net.data(), q_net.data() + q_net.size());
            sol.q.resize(sol.q_net.size());
            for (size_t c = 0; c < net.controls.size(); ++c) {
                const Bus& ba = net.buses[static_cast<size_t>(
                    net.bus_index(net.controls[c].ctrl_bus))];
                sol.q[c] = sol.q_net[c] - (ba.qg_fixed - ba.qd);
            }
            sol.mismatch = detail::physical_mismatch(net, p0, v, q_net);
            if (opts.keep_stages || opts.keep_germs) {
                PWStage fin;
                fin.k = k;
                fin.s0 = 1.0;
                fin.v_partial = run.v1;
                fin.q_partial = run.q1;
                fin.params = params;
                fin.accumulated = 1.0;
                if (opts.keep_germs) fin.germ = germ;
                stages.push_back(std::move(fin));
                sol.stage_data = std::move(stages);
            }
            if (!(sol.mismatch <= opts.mismatch_tol))
                throw PWError("stages converged but final mismatch " +
                                  std::to_string(sol.mismatch) + " exceeds gate",
                              sol.trace);
            sol.converged = true;
            sol.sat = saturation_status(sol.v, sol.q, net.controls, net);
            return sol;
        }

        // continuation: pick an advance point, evaluate, renormalize
        std::optional<double> s0 =
            find_advance_point(run, params, eval_tol, 1.0, opts.beta, opts.s_floor);
        bool advanced = false;
        if (s0) {
            double s = *s0;
            for (int attempt = 0; attempt < 10 && !advanced; ++attempt) {
                try {
                    auto [vs, qs] = evaluate_partial(run, params, s, eval_tol);
                    StageParams next = transform_stage(params, vs, qs, s);
                    accumulated = accumulated + s * (1.0 - accumulated);
                    PWStage st;
                    st.k = k;
                    st.s0 = s;
                    st.v_partial = std::move(vs);
                    st.q_partial = std::move(qs);
                    st.params = std::move(params);
                    st.accumulated = accumulated;
                    if (opts.keep_germs) st.germ = germ;
                    stages.push_back(std::move(st));
                    sol.trace.push_back({k, s, run.orders, run.final_error, accumulated});
                    params = std::move(next);
                    advanced = true;
                } catch (const StageError&) {
                    s *= 0.8;  // shrink and retry on degenerate evaluations
                    if (s < opts.s_floor / 10.0) break;
                }
            }
            if (advanced) {
                stall_count = stages.back().s0 < opts.s_floor ? stall_count + 1 : 0;
                if (stall_count >= opts.consecutive_stall) {
                    sol.converged = false;
                    sol.s_crit = accumulated;
                    sol.stages = k + 1;
                    if (opts.keep_stages || opts.keep_germs) sol.stage_data = std::move(stages);
                    return sol;
                }
                continue;
            }
        }
        // no usable advance point at all: hard stall
        sol.converged = false;
        sol.s_crit = accumulated;
        sol.stages = k + 1;
        sol.trace.push_back({k, 0.0, run.orders, run.final_error, accumulated});
        if (opts.keep_stages || opts.keep_germs) sol.stage_data = std::move(stages);
        return sol;
    }
    throw PWError("stage cap exceeded after " + std::to_string(opts.stage_cap) +
                      " continuation stages",
                  sol.trace);
}

// ---------------------------------------------------------------------------
// loadability search
// ---------------------------------------------------------------------------

struct CollapseResult {
    double lambda_crit = 0.0;
    double lambda_feasible = 0.0;    // last λ that solved
    double lambda_infeasible = 0.0;  // first λ that failed
    Solution at_feasible;            // solution at lambda_feasible
    int solves = 0;
};

/// Bisect the loading factor between a feasible and an infeasible bracket.
/// Any non-converged outcome (infeasibility record, stall, stage cap) counts
/// as the infeasible side.
inline CollapseResult collapse_search(const Network& net, double lo, double hi,
                                      double tol_lambda, const PWOptions& opts = {}) {
    auto feasible = [&](double lambda, Solution* out) {
        Network scaled_net = scaled(net, lambda);
        try {
            Solution s = solve_pw(scaled_net, opts);
            if (s.converged && out) *out = s;
            return s.converged;
        } catch (const PWError&) {
            return false;
        } catch (const StageError&) {
            return false;  // singular/degenerate stages past the nose
        }
    };
    CollapseResult r;
    Solution best;
    if (!feasible(lo, &best)) throw PWError("collapse_search: lower bracket infeasible");
    ++r.solves;
    if (feasible(hi, &best)) throw PWError("collapse_search: upper bracket feasible");
    ++r.solves;
    while (hi - lo > tol_lambda) {
        double mid = 0.5 * (lo + hi);
        if (feasible(mid, &best))
            lo = mid;
        else
            hi = mid;
        ++r.solves;
    }
    r.lambda_feasible = lo;
    r.lambda_infeasible = hi;
    r.lambda_crit = 0.5 * (lo + hi);
    r.at_feasible = std::move(best);
    return r;
}

}  // namespace helmpw
