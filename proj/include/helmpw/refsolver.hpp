// Newton-Raphson power-flow oracle with the two classical Q-limit
// type-switching strategies, plus brute-force saturation enumeration.
#pragma once

#include <helmpw/linsys.hpp>
#include <helmpw/netmodel.hpp>

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace helmpw {

/// Prescribed (or settled) regulation mode of one control set.
enum class ControlMode { interior, at_qmin, at_qmax };

inline const char* to_string(ControlMode m) {
    switch (m) {
        case ControlMode::interior: return "interior";
        case ControlMode::at_qmin: return "at-qmin";
        default: return "at-qmax";
    }
}

enum class NRStrategy { none, switch_all, switch_one };

enum class NROutcome { ok, diverged, cycled };

struct NROptions {
    double tol = 1e-8;       // infinity-norm current mismatch gate, pu
    int max_inner = 30;      // Newton steps per switching round
    int max_outer = 50;      // switching rounds
    double q_slack = 1e-8;   // limit-violation hysteresis, pu
    double v_slack = 1e-9;   // reversion/sensitivity hysteresis, pu
};

struct NRReport {
    bool converged = false;
    NROutcome outcome = NROutcome::diverged;
    int iterations = 0;  // total Newton steps across rounds
    int rounds = 0;
    Eigen::VectorXd vm, va;
    Eigen::VectorXcd v;
    std::vector<double> q;  // per-control aggregate generator Q, pu
    std::vector<ControlMode> assignment;
    std::vector<std::vector<ControlMode>> history;  // assignment per round
    double mismatch = std::numeric_limits<double>::infinity();
};

namespace detail {

struct NRContext {
    const Network* net = nullptr;
    Eigen::SparseMatrix<cd, Eigen::RowMajor> ybus;  // series + shunt
    Eigen::VectorXd p_spec;                          // fixed active injection
    Eigen::VectorXd q_base;                          // qg_fixed - qd
    std::vector<int> ctrl_at;                        // bus -> control index or -1
};

inline NRContext make_context(const Network& net) {
    NRContext cx;
    cx.net = &net;
    Eigen::SparseMatrix<cd> full = net.y;
    for (int i = 0; i < net.n(); ++i) full.coeffRef(i, i) += net.ysh(i);
    full.makeCompressed();
    cx.ybus = full;
    cx.p_spec = Eigen::VectorXd::Zero(net.n());
    cx.q_base = Eigen::VectorXd::Zero(net.n());
    for (int i = 0; i < net.n(); ++i) {
        const Bus& b = net.buses[static_cast<size_t>(i)];
        if (b.iconst != cd(0.0, 0.0))
            throw ValidationError("reference solver does not support constant-current injections");
        cx.p_spec(i) = b.pg_fixed - b.pd;
        cx.q_base(i) = b.qg_fixed - b.qd;
    }
    cx.ctrl_at.assign(static_cast<size_t>(net.n()), -1);
    for (size_t c = 0; c < net.controls.size(); ++c) {
        int a = net.bus_index(net.controls[c].ctrl_bus);
        cx.p_spec(a) += net.controls[c].pg;
        cx.ctrl_at[static_cast<size_t>(a)] = static_cast<int>(c);
    }
    return cx;
}

/// Calculated complex injection S_i = V_i * conj((Y V)_i) at every bus.
inline Eigen::VectorXcd calc_injection(const NRContext& cx, const Eigen::VectorXcd& v) {
    Eigen::VectorXcd yv = cx.ybus * v;
    return v.cwiseProduct(yv.conjugate());
}

/// Infinity-norm current mismatch over non-swing buses; interior-control
/// buses contribute only their active part (their Q is a free variable).
inline double current_mismatch(const NRContext& cx, const std::vector<ControlMode>& modes,
                               const Eigen::VectorXcd& v) {
    const Network& net = *cx.net;
    Eigen::VectorXcd yv = cx.ybus * v;
    Eigen::VectorXcd s_calc = v.cwiseProduct(yv.conjugate());
    double worst = 0.0;
    for (int i = 0; i < net.n(); ++i) {
        if (i == net.swing) continue;
        double q_spec;
        int c = cx.ctrl_at[static_cast<size_t>(i)];
        if (c >= 0 && modes[static_cast<size_t>(c)] == ControlMode::interior) {
            q_spec = s_calc(i).imag();
        } else {
            q_spec = cx.q_base(i);
            if (c >= 0) {
                const ControlSet& cs = net.controls[static_cast<size_t>(c)];
                q_spec += modes[static_cast<size_t>(c)] == ControlMode::at_qmin ? *cs.qmin
                                                                                 : *cs.qmax;
            }
        }
        cd s_spec(cx.p_spec(i), q_spec);
        double err = std::abs(std::conj(s_spec / v(i)) - yv(i));
        worst = std::max(worst, err);
    }
    return worst;
}

/// One Newton solve at a fixed type assignment. Mutates vm/va in place
/// (warm restart across switching rounds). Returns steps taken, or -1 on
/// divergence / singular Jacobian.
inline int nr_fixed(const NRContext& cx, const std::vector<ControlMode>& modes,
                    Eigen::VectorXd& vm, Eigen::VectorXd& va, const NROptions& opts,
                    double* out_mismatch) {
    const Network& net = *cx.net;
    const int n = net.n();

    // regulated buses with an interior control hold their magnitude
    std::vector<char> pinned(static_cast<size_t>(n), 0);
    for (size_t c = 0; c < net.controls.size(); ++c)
        if (modes[c] == ControlMode::interior) {
            int b = net.bus_index(net.controls[c].reg_bus);
            pinned[static_cast<size_t>(b)] = 1;
            vm(b) = net.controls[c].vsp;
        }

    std::vector<int> th_col(static_cast<size_t>(n), -1), vm_col(static_cast<size_t>(n), -1);
    std::vector<int> p_row(static_cast<size_t>(n), -1), q_row(static_cast<size_t>(n), -1);
    int nth = 0, nvm = 0, np = 0, nq = 0;
    for (int i = 0; i < n; ++i) {
        if (i == net.swing) continue;
        th_col[static_cast<size_t>(i)] = nth++;
        p_row[static_cast<size_t>(i)] = np++;
    }
    for (int i = 0; i < n; ++i) {
        if (i == net.swing || pinned[static_cast<size_t>(i)]) continue;
        vm_col[static_cast<size_t>(i)] = nvm++;
    }
    for (int i = 0; i < n; ++i) {
        if (i == net.swing) continue;
        int c = cx.ctrl_at[static_cast<size_t>(i)];
        if (c >= 0 && modes[static_cast<size_t>(c)] == ControlMode::interior) continue;
        q_row[static_cast<size_t>(i)] = nq++;
    }
    const int dim = nth + nvm;

    Eigen::VectorXcd v(n);
    std::vector<Eigen::Triplet<double>> trip;
    for (int it = 0; it < opts.max_inner; ++it) {
        for (int i = 0; i < n; ++i) v(i) = std::polar(vm(i), va(i));
        double gate = current_mismatch(cx, modes, v);
        if (out_mismatch) *out_mismatch = gate;
        if (gate <= opts.tol) return it;

        Eigen::VectorXcd s_calc = calc_injection(cx, v);
        Eigen::VectorXd f(dim);
        for (int i = 0; i < n; ++i) {
            if (p_row[static_cast<size_t>(i)] >= 0)
                f(p_row[static_cast<size_t>(i)]) = cx.p_spec(i) - s_calc(i).real();
            if (q_row[static_cast<size_t>(i)] >= 0) {
                double q_spec = cx.q_base(i);
                int c = cx.ctrl_at[static_cast<size_t>(i)];
                if (c >= 0) {
                    const ControlSet& cs = net.controls[static_cast<size_t>(c)];
                    q_spec += modes[static_cast<size_t>(c)] == ControlMode::at_qmin
                                  ? *cs.qmin
                                  : *cs.qmax;
                }
                f(np + q_row[static_cast<size_t>(i)]) = q_spec - s_calc(i).imag();
            }
        }

        trip.clear();
        for (int i = 0; i < n; ++i) {
            const int pr = p_row[static_cast<size_t>(i)];
            const int qr = q_row[static_cast<size_t>(i)];
            if (pr < 0 && qr < 0) continue;
            const double pi = s_calc(i).real(), qi = s_calc(i).imag();
            for (Eigen::SparseMatrix<cd, Eigen::RowMajor>::InnerIterator jt(cx.ybus, i); jt;
                 ++jt) {
                const int k = static_cast<int>(jt.col());
                const double g = jt.value().real(), b = jt.value().imag();
                double aik, bik;  // Vm_i Vm_k (G cos +- B sin theta_ik)
                if (k == i) {
                    aik = vm(i) * vm(i) * g;
                    bik = -vm(i) * vm(i) * b;
                } else {
                    const double th = va(i) - va(k);
                    const double ct = std::cos(th), st = std::sin(th);
                    aik = vm(i) * vm(k) * (g * ct + b * st);
                    bik = vm(i) * vm(k) * (g * st - b * ct);
                }
                const int tc = th_col[static_cast<size_t>(k)];
                const int vc = vm_col[static_cast<size_t>(k)];
                if (k == i) {
                    if (pr >= 0) {
                        if (tc >= 0) trip.emplace_back(pr, tc, -qi - vm(i) * vm(i) * b);
                        if (vc >= 0)
                            trip.emplace_back(pr, nth + vc, (pi + vm(i) * vm(i) * g) / vm(i));
                    }
                    if (qr >= 0) {
                        if (tc >= 0) trip.emplace_back(np + qr, tc, pi - vm(i) * vm(i) * g);
                        if (vc >= 0)
                            trip.emplace_back(np + qr, nth + vc,
                                              (qi - vm(i) * vm(i) * b) / vm(i));
                    }
                } else {
                    if (pr >= 0) {
                        if (tc >= 0) trip.emplace_back(pr, tc, bik);
                        if (vc >= 0) trip.emplace_back(pr, nth + vc, aik / vm(k));
                    }
                    if (qr >= 0) {
                        if (tc >= 0) trip.emplace_back(np + qr, tc, -aik);
                        if (vc >= 0) trip.emplace_back(np + qr, nth + vc, bik / vm(k));
                    }
                }
            }
        }
        Eigen::SparseMatrix<double> jac(dim, dim);
        jac.setFromTriplets(trip.begin(), trip.end());

        Eigen::VectorXd dx;
        try {
            dx = FactoredSystem::factorize(jac).solve(f);
        } catch (const SingularMatrixError&) {
            return -1;
        }
        if (!dx.allFinite()) return -1;
        for (int i = 0; i < n; ++i) {
            if (th_col[static_cast<size_t>(i)] >= 0) va(i) += dx(th_col[static_cast<size_t>(i)]);
            if (vm_col[static_cast<size_t>(i)] >= 0)
                vm(i) += dx(nth + vm_col[static_cast<size_t>(i)]);
        }
        if (!vm.allFinite() || vm.minCoeff() <= 0.0) return -1;
    }
    // out of iterations: re-test the gate at the final point
    for (int i = 0; i < n; ++i) v(i) = std::polar(vm(i), va(i));
    double gate = current_mismatch(cx, modes, v);
    if (out_mismatch) *out_mismatch = gate;
    return gate <= opts.tol ? opts.max_inner : -1;
}

/// Aggregate generator Q per control at the solved point.
inline std::vector<double> control_q(const NRContext& cx, const std::vector<ControlMode>& modes,
                                     const Eigen::VectorXcd& v) {
    const Network& net = *cx.net;
    Eigen::VectorXcd s_calc = calc_injection(cx, v);
    std::vector<double> q(net.controls.size());
    for (size_t c = 0; c < net.controls.size(); ++c) {
        const ControlSet& cs = net.controls[c];
        if (modes[c] == ControlMode::at_qmin)
            q[c] = *cs.qmin;
        else if (modes[c] == ControlMode::at_qmax)
            q[c] = *cs.qmax;
        else
            q[c] = s_calc(net.bus_index(cs.ctrl_bus)).imag() -
                   cx.q_base(net.bus_index(cs.ctrl_bus));
    }
    return q;
}

inline std::string mode_key(const std::vector<ControlMode>& modes) {
    std::string k;
    k.reserve(modes.size());
    for (ControlMode m : modes) k.push_back(static_cast<char>('0' + static_cast<int>(m)));
    return k;
}

}  // namespace detail

/// Polar Newton-Raphson solve with the selected Q-limit strategy.
inline NRReport newton_solve(const Network& net, NRStrategy strategy, const NROptions& opts = {}) {
    detail::NRContext cx = detail::make_context(net);
    const int n = net.n();

    NRReport rep;
    rep.vm.resize(n);
    rep.va.resize(n);
    for (int i = 0; i < n; ++i) {
        rep.vm(i) = net.buses[static_cast<size_t>(i)].vm0;
        rep.va(i) = net.buses[static_cast<size_t>(i)].va0;
    }
    rep.vm(net.swing) = net.buses[static_cast<size_t>(net.swing)].vsp;
    rep.va(net.swing) = net.buses[static_cast<size_t>(net.swing)].va;

    rep.assignment.assign(net.controls.size(), ControlMode::interior);
    rep.history.push_back(rep.assignment);
    std::set<std::string> seen{detail::mode_key(rep.assignment)};

    for (int round = 0; round < opts.max_outer; ++round) {
        rep.rounds = round + 1;
        int steps = detail::nr_fixed(cx, rep.assignment, rep.vm, rep.va, opts, &rep.mismatch);
        if (steps < 0) {
            rep.outcome = NROutcome::diverged;
            return rep;
        }
        rep.iterations += steps;
        Eigen::VectorXcd v(n);
        for (int i = 0; i < n; ++i) v(i) = std::polar(rep.vm(i), rep.va(i));
        rep.v = v;
        rep.q = detail::control_q(cx, rep.assignment, v);

        if (strategy == NRStrategy::none) {
            rep.converged = true;
            rep.outcome = NROutcome::ok;
            return rep;
        }

        // violated interior controls and sign-flipped saturated controls
        struct Change {
            size_t c;
            ControlMode to;
            double magnitude;
            bool violation;  // violations outrank reversions
        };
        std::vector<Change> changes;
        for (size_t c = 0; c < net.controls.size(); ++c) {
            const ControlSet& cs = net.controls[c];
            double vb = rep.vm(net.bus_index(cs.reg_bus));
            switch (rep.assignment[c]) {
                case ControlMode::interior:
                    if (cs.qmax && rep.q[c] > *cs.qmax + opts.q_slack)
                        changes.push_back({c, ControlMode::at_qmax, rep.q[c] - *cs.qmax, true});
                    else if (cs.qmin && rep.q[c] < *cs.qmin - opts.q_slack)
                        changes.push_back({c, ControlMode::at_qmin, *cs.qmin - rep.q[c], true});
                    break;
                case ControlMode::at_qmax:
                    if (vb > cs.vsp + opts.v_slack)
                        changes.push_back({c, ControlMode::interior, vb - cs.vsp, false});
                    break;
                case ControlMode::at_qmin:
                    if (vb < cs.vsp - opts.v_slack)
                        changes.push_back({c, ControlMode::interior, cs.vsp - vb, false});
                    break;
            }
        }
        if (changes.empty()) {
            rep.converged = true;
            rep.outcome = NROutcome::ok;
            return rep;
        }

        if (strategy == NRStrategy::switch_all) {
            for (const Change& ch : changes) rep.assignment[ch.c] = ch.to;
        } else {
            auto best = std::max_element(
                changes.begin(), changes.end(), [](const Change& x, const Change& y) {
                    if (x.violation != y.violation) return !x.violation && y.violation;
                    return x.magnitude < y.magnitude;
                });
            rep.assignment[best->c] = best->to;
        }
        std::string key = detail::mode_key(rep.assignment);
        if (!seen.insert(key).second) {
            rep.outcome = NROutcome::cycled;
            return rep;
        }
        rep.history.push_back(rep.assignment);
    }
    rep.outcome = NROutcome::cycled;  // no fixed point within the round budget
    return rep;
}

struct AssignmentResult {
    std::vector<ControlMode> assignment;
    bool feasible = false;
    NRReport report;
};

/// Solve every saturation assignment (interior / at-qmin / at-qmax per
/// control, existing sides only) with fixed types. Feasibility requires
/// convergence, limit slacks, and the voltage sensitivity signs.
inline std::vector<AssignmentResult> enumerate_assignments(const Network& net,
                                                           const NROptions& opts = {},
                                                           int max_controls = 12) {
    const size_t k = net.controls.size();
    if (static_cast<int>(k) > max_controls)
        throw std::invalid_argument("enumerate_assignments: " + std::to_string(k) +
                                    " controls exceed the enumeration cap of " +
                                    std::to_string(max_controls));
    detail::NRContext cx = detail::make_context(net);
    const int n = net.n();

    std::vector<std::vector<ControlMode>> options(k);
    for (size_t c = 0; c < k; ++c) {
        options[c].push_back(ControlMode::interior);
        if (net.controls[c].qmin) options[c].push_back(ControlMode::at_qmin);
        if (net.controls[c].qmax) options[c].push_back(ControlMode::at_qmax);
    }

    std::vector<AssignmentResult> out;
    std::vector<size_t> idx(k, 0);
    while (true) {
        AssignmentResult r;
        r.assignment.resize(k);
        for (size_t c = 0; c < k; ++c) r.assignment[c] = options[c][idx[c]];

        NRReport& rep = r.report;
        rep.assignment = r.assignment;
        rep.vm.resize(n);
        rep.va.resize(n);
        for (int i = 0; i < n; ++i) {
            rep.vm(i) = net.buses[static_cast<size_t>(i)].vm0;
            rep.va(i) = net.buses[static_cast<size_t>(i)].va0;
        }
        rep.vm(net.swing) = net.buses[static_cast<size_t>(net.swing)].vsp;
        rep.va(net.swing) = net.buses[static_cast<size_t>(net.swing)].va;
        int steps = detail::nr_fixed(cx, r.assignment, rep.vm, rep.va, opts, &rep.mismatch);
        if (steps >= 0) {
            rep.iterations = steps;
            rep.rounds = 1;
            rep.converged = true;
            rep.outcome = NROutcome::ok;
            Eigen::VectorXcd v(n);
            for (int i = 0; i < n; ++i) v(i) = std::polar(rep.vm(i), rep.va(i));
            rep.v = v;
            rep.q = detail::control_q(cx, r.assignment, v);

            bool ok = true;
            for (size_t c = 0; c < k && ok; ++c) {
                const ControlSet& cs = net.controls[c];
                double vb = rep.vm(net.bus_index(cs.reg_bus));
                switch (r.assignment[c]) {
                    case ControlMode::interior:
                        if (cs.qmax && rep.q[c] > *cs.qmax + opts.q_slack) ok = false;
                        if (cs.qmin && rep.q[c] < *cs.qmin - opts.q_slack) ok = false;
                        break;
                    case ControlMode::at_qmax:
                        if (vb > cs.vsp + opts.v_slack) ok = false;
                        break;
                    case ControlMode::at_qmin:
                        if (vb < cs.vsp - opts.v_slack) ok = false;
                        break;
                }
            }
            r.feasible = ok;
        }
        out.push_back(std::move(r));

        size_t c = 0;
        while (c < k && ++idx[c] == options[c].size()) idx[c++] = 0;
        if (c == k) break;
    }
    return out;
}

}  // namespace helmpw
