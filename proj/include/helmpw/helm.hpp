// One embedded HELM problem (one continuation stage): embedding constants,
// germ initialization, the N-th order recurrence with complementarity
// elimination, and update-error tracking at s = 1.
#pragma once

#include <helmpw/linsys.hpp>
#include <helmpw/netmodel.hpp>
#include <helmpw/pade.hpp>
#include <helmpw/series.hpp>

#include <optional>
#include <vector>

namespace helmpw {

struct StageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Two-coefficient embedded quantity q(s) = c0 + c1 s.
struct LinearCoeff {
    double c0 = 0.0, c1 = 0.0;
    double at(double s) const { return c0 + c1 * s; }
};

/// Embedding data of one control set within a stage.
struct ControlParams {
    int a = -1;                       // controlling bus (position index)
    int b = -1;                       // regulated bus
    double mu = 0.0;                  // barrier weight; 0 iff unlimited
    LinearCoeff wsp;                  // embedded setpoint W(s)
    std::optional<LinearCoeff> qmin, qmax;

    bool limited() const { return qmin.has_value() || qmax.has_value(); }

    /// Elimination pivot pi = mu (1/Qmin[0]^2 + 1/Qmax[0]^2) over present sides.
    double pivot() const {
        double p = 0.0;
        if (qmin) p += mu / (qmin->c0 * qmin->c0);
        if (qmax) p += mu / (qmax->c0 * qmax->c0);
        return p;
    }
};

struct EmbeddingDefaults {
    double wsp0_lower = 0.9;   // W[0] when only a lower limit exists
    double wsp0_upper = 1.1;   // W[0] when only an upper limit exists
    double qlim0 = 10.0;       // |Qlim[0]| for one-sided embeddings, pu
};

/// Zero/first-order embedding constants for one control set.
/// Two-sided limits use the symmetrizing choice (mu = 1, Qmax[0] = -Qmin[0]);
/// one-sided limits pin W[0] off the setpoint so that mu = Qlim[0](W[0]-1) > 0;
/// without limits the constraint embeds the setpoint alone.
inline ControlParams embedding_constants(const ControlSet& cs,
                                         const EmbeddingDefaults& d = {}) {
    ControlParams p;
    if (cs.qmin && cs.qmax) {
        double half_width = (*cs.qmax - *cs.qmin) / 2.0;
        double mid = (*cs.qmax + *cs.qmin) / 2.0;
        p.mu = 1.0;
        p.qmax = LinearCoeff{half_width, mid};
        p.qmin = LinearCoeff{-half_width, mid};
        p.wsp = {1.0, cs.wsp - 1.0};
    } else if (cs.qmin) {
        double w0 = d.wsp0_lower;
        double q0 = -d.qlim0;
        p.mu = q0 * (w0 - 1.0);
        p.qmin = LinearCoeff{q0, *cs.qmin - q0};
        p.wsp = {w0, cs.wsp - w0};
    } else if (cs.qmax) {
        double w0 = d.wsp0_upper;
        double q0 = d.qlim0;
        p.mu = q0 * (w0 - 1.0);
        p.qmax = LinearCoeff{q0, *cs.qmax - q0};
        p.wsp = {w0, cs.wsp - w0};
    } else {
        p.mu = 0.0;
        p.wsp = {1.0, cs.wsp - 1.0};
    }
    return p;
}

/// Everything defining one stage's embedded problem.
struct StageParams {
    Eigen::SparseMatrix<cd> y;        // stage transmission matrix, all buses
    Eigen::VectorXcd ysh;             // embedded shunts
    Eigen::VectorXcd gamma;           // zero at stage 0
    Eigen::VectorXcd sfix;            // fixed power: S_i for PQ, P_a + j0 for PV
    int swing = 0;
    cd swing_v1{0.0, 0.0};            // V0(s) = 1 + s V0[1]
    std::vector<ControlParams> controls;

    int n() const { return static_cast<int>(ysh.size()); }
    int nunk() const { return n() - 1; }

    /// Interior-point and consistency conditions; violated = broken embedding.
    void validate() const {
        auto sgn = [](double x) { return x > 1e-12 ? 1 : (x < -1e-12 ? -1 : 0); };
        for (const ControlParams& c : controls) {
            if (!c.limited()) continue;
            if (!(c.mu > 0.0))
                throw StageError("stage embedding: mu <= 0 at control bus " +
                                 std::to_string(c.a));
            if (c.qmin && !(c.qmin->c0 < 0.0))
                throw StageError("stage embedding: Qmin[0] >= 0 at control bus " +
                                 std::to_string(c.a));
            if (c.qmax && !(c.qmax->c0 > 0.0))
                throw StageError("stage embedding: Qmax[0] <= 0 at control bus " +
                                 std::to_string(c.a));
            if (c.qmin && c.qmax) {
                int lhs = sgn(1.0 - c.wsp.c0);
                int rhs = sgn(c.qmax->c0 + c.qmin->c0);
                if (lhs != rhs && !(std::abs(1.0 - c.wsp.c0) < 1e-9))
                    throw StageError("stage embedding: setpoint/limit sign condition "
                                     "violated at control bus " + std::to_string(c.a));
                // zero-order consistency: 1 - W[0] = B_up[0] + B_lo[0]
                double b0 = -c.mu / c.qmax->c0 - c.mu / c.qmin->c0;
                if (std::abs((1.0 - c.wsp.c0) - b0) > 1e-8)
                    throw StageError("stage embedding: zero-order inconsistency at "
                                     "control bus " + std::to_string(c.a));
            }
        }
    }
};

/// Coefficients of the embedded solution, advanced order by order.
struct Germ {
    std::vector<Series> v, vinv;      // per bus (swing kept for uniformity)
    std::vector<Series> q, bup, blo;  // per control; real-flagged
    int order = 0;
};

inline Germ make_germ(const StageParams& p) {
    Germ g;
    g.v.reserve(static_cast<size_t>(p.n()));
    g.vinv.reserve(static_cast<size_t>(p.n()));
    for (int i = 0; i < p.n(); ++i) {
        g.v.push_back(Series::constant(cd(1.0, 0.0)));
        g.vinv.push_back(Series::constant(cd(1.0, 0.0)));
    }
    for (const ControlParams& c : p.controls) {
        g.q.push_back(Series::constant(0.0, true));
        Series up(true), lo(true);
        if (c.qmax) up.push(-c.mu / c.qmax->c0);
        if (c.qmin) lo.push(-c.mu / c.qmin->c0);
        g.bup.push_back(std::move(up));
        g.blo.push_back(std::move(lo));
    }
    return g;
}

// ---------------------------------------------------------------------------
// stage system assembly
// ---------------------------------------------------------------------------

/// Factorized real stage matrix plus the index bookkeeping needed to advance
/// a germ. The matrix is identical for every series order.
class StageSystem {
public:
    explicit StageSystem(const StageParams& p)
        : p_(&p), f_(assemble(p, unk_, ctrl_at_, y_swing_)) {}

    const StageParams& params() const { return *p_; }
    const FactoredSystem& matrix() const { return f_; }
    int unknown_of(int bus) const { return unk_[static_cast<size_t>(bus)]; }

    /// Advance the germ by one order.
    void advance(Germ& g) const {
        const StageParams& p = *p_;
        const int n = p.n();
        const int nu = p.nunk();
        const int ord = g.order + 1;

        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(2 * nu);
        std::vector<cd> rbus(static_cast<size_t>(n), cd(0, 0));  // R_i[ord-1]
        for (int i = 0; i < n; ++i) {
            if (i == p.swing) continue;
            const Series& vi = g.v[static_cast<size_t>(i)];
            const Series& wi = g.vinv[static_cast<size_t>(i)];
            cd r = std::conj(p.sfix(i)) * std::conj(wi[ord - 1]) - p.ysh(i) * vi[ord - 1];
            if (ord >= 2)
                r -= p.gamma(i) * std::conj(convolve_at(vi, wi, ord, 1, ord - 1));
            int ci = ctrl_at_[static_cast<size_t>(i)];
            if (ci >= 0 && ord >= 2) {
                const Series& qa = g.q[static_cast<size_t>(ci)];
                cd qconv(0, 0);
                for (int m = 1; m <= ord - 1; ++m)
                    qconv += qa[m] * std::conj(wi[ord - m]);
                r -= cd(0, 1) * qconv;
            }
            if (ord == 1) r -= y_swing_(i) * p.swing_v1;
            rbus[static_cast<size_t>(i)] = r;
            int ui = unk_[static_cast<size_t>(i)];
            rhs(ui) = r.real();
            rhs(nu + ui) = r.imag();
        }

        std::vector<double> tvals(p.controls.size(), 0.0);
        for (size_t c = 0; c < p.controls.size(); ++c) {
            const ControlParams& cp = p.controls[c];
            double t = constraint_rhs(g, static_cast<int>(c), ord);
            tvals[c] = t;
            int ua = unk_[static_cast<size_t>(cp.a)];
            if (cp.limited())
                rhs(nu + ua) -= t / cp.pivot();
            else
                rhs(nu + ua) = t;
        }

        Eigen::VectorXd x = f_.solve(rhs);

        Eigen::VectorXcd vn(n);
        for (int i = 0; i < n; ++i) {
            if (i == p.swing) {
                vn(i) = ord == 1 ? p.swing_v1 : cd(0, 0);
                continue;
            }
            int ui = unk_[static_cast<size_t>(i)];
            vn(i) = cd(x(ui), x(nu + ui));
        }

        // Q recovery: elimination relation when limited, Im-row residual when
        // the constraint replaced that row
        Eigen::VectorXcd yv = p.y * vn;
        for (size_t c = 0; c < p.controls.size(); ++c) {
            const ControlParams& cp = p.controls[c];
            double qn;
            if (cp.limited()) {
                qn = (tvals[c] - 2.0 * vn(cp.b).real()) / cp.pivot();
            } else {
                cd r = rbus[static_cast<size_t>(cp.a)];
                if (ord == 1) r += y_swing_(cp.a) * p.swing_v1;  // yv already holds it
                qn = r.imag() - yv(cp.a).imag() -
                     2.0 * p.gamma(cp.a).imag() * vn(cp.a).real();
            }
            g.q[c].push(qn);
        }

        for (int i = 0; i < n; ++i) {
            g.v[static_cast<size_t>(i)].push(vn(i));
            g.vinv[static_cast<size_t>(i)].push(
                invert_next(g.v[static_cast<size_t>(i)], g.vinv[static_cast<size_t>(i)]));
        }

        // barrier series last: their order-N update consumes Q[N]
        for (size_t c = 0; c < p.controls.size(); ++c) {
            const ControlParams& cp = p.controls[c];
            if (!cp.limited()) continue;
            const Series& qa = g.q[c];
            if (cp.qmax) {
                double acc = (ord == 1) ? cp.mu : 0.0;
                for (int m = 0; m <= ord - 1; ++m)
                    acc += g.bup[c].real_at(m) * qa.real_at(ord - m);
                acc -= g.bup[c].real_at(ord - 1) * cp.qmax->c1;
                g.bup[c].push(acc / cp.qmax->c0);
            }
            if (cp.qmin) {
                double acc = (ord == 1) ? cp.mu : 0.0;
                for (int m = 0; m <= ord - 1; ++m)
                    acc += g.blo[c].real_at(m) * qa.real_at(ord - m);
                acc -= g.blo[c].real_at(ord - 1) * cp.qmin->c1;
                g.blo[c].push(acc / cp.qmin->c0);
            }
        }
        g.order = ord;
    }

    /// Constraint right-hand side T_a[ord-1]: the order-ord coefficient
    /// identity of the complementarity (or plain setpoint) constraint with
    /// the 2 Re V_b[ord] and pivot terms removed.
    double constraint_rhs(const Germ& g, int c, int ord) const {
        const ControlParams& cp = p_->controls[static_cast<size_t>(c)];
        const Series& vb = g.v[static_cast<size_t>(cp.b)];
        cd vconv(0, 0);
        if (ord >= 2) vconv = convolve_conj_at(vb, vb, ord, 1, ord - 1);
        if (std::abs(vconv.imag()) > 1e-12 * std::max(1.0, std::abs(vconv)))
            throw StageError("constraint convolution lost realness at control bus " +
                             std::to_string(cp.a));
        double t = (ord == 1 ? cp.wsp.c1 : 0.0) - vconv.real();
        if (!cp.limited()) return t;
        const Series& qa = g.q[static_cast<size_t>(c)];
        if (cp.qmin) {
            double acc = (ord == 1) ? cp.mu : 0.0;
            for (int m = 1; m <= ord - 1; ++m)
                acc += g.blo[static_cast<size_t>(c)].real_at(m) * qa.real_at(ord - m);
            acc -= g.blo[static_cast<size_t>(c)].real_at(ord - 1) * cp.qmin->c1;
            t += acc / cp.qmin->c0;
        }
        if (cp.qmax) {
            double acc = (ord == 1) ? cp.mu : 0.0;
            for (int m = 1; m <= ord - 1; ++m)
                acc += g.bup[static_cast<size_t>(c)].real_at(m) * qa.real_at(ord - m);
            acc -= g.bup[static_cast<size_t>(c)].real_at(ord - 1) * cp.qmax->c1;
            t += acc / cp.qmax->c0;
        }
        return t;
    }

    const Eigen::VectorXcd& swing_column() const { return y_swing_; }

private:
    const StageParams* p_;
    std::vector<int> unk_;      // bus -> unknown slot, -1 at swing
    std::vector<int> ctrl_at_;  // bus -> control index when it is a controlling bus
    Eigen::VectorXcd y_swing_;  // Y column of the swing bus
    FactoredSystem f_;          // must follow the maps: assemble() fills them

    static FactoredSystem assemble(const StageParams& p, std::vector<int>& unk,
                                   std::vector<int>& ctrl_at, Eigen::VectorXcd& y_swing) {
        p.validate();
        const int n = p.n();
        const int nu = p.nunk();
        unk.assign(static_cast<size_t>(n), -1);
        int u = 0;
        for (int i = 0; i < n; ++i)
            if (i != p.swing) unk[static_cast<size_t>(i)] = u++;
        ctrl_at.assign(static_cast<size_t>(n), -1);
        for (size_t c = 0; c < p.controls.size(); ++c)
            ctrl_at[static_cast<size_t>(p.controls[c].a)] = static_cast<int>(c);

        y_swing = Eigen::VectorXcd::Zero(n);
        std::vector<Eigen::Triplet<double>> trip;
        for (int j = 0; j < p.y.outerSize(); ++j) {
            for (Eigen::SparseMatrix<cd>::InnerIterator it(p.y, j); it; ++it) {
                int i = static_cast<int>(it.row());
                if (i == p.swing) continue;      // swing has no equation row
                if (j == p.swing) {              // known column -> RHS template
                    y_swing(i) = it.value();
                    continue;
                }
                int ui = unk[static_cast<size_t>(i)], uj = unk[static_cast<size_t>(j)];
                int ci = ctrl_at[static_cast<size_t>(i)];
                bool im_row_replaced = ci >= 0 && !p.controls[static_cast<size_t>(ci)].limited();
                double re = it.value().real(), im = it.value().imag();
                trip.emplace_back(ui, uj, re);
                trip.emplace_back(ui, nu + uj, -im);
                if (!im_row_replaced) {
                    trip.emplace_back(nu + ui, uj, im);
                    trip.emplace_back(nu + ui, nu + uj, re);
                }
            }
        }
        for (int i = 0; i < n; ++i) {
            if (i == p.swing) continue;
            int ui = unk[static_cast<size_t>(i)];
            cd g2 = 2.0 * p.gamma(i);
            int ci = ctrl_at[static_cast<size_t>(i)];
            bool im_row_replaced = ci >= 0 && !p.controls[static_cast<size_t>(ci)].limited();
            if (g2.real() != 0.0) trip.emplace_back(ui, ui, g2.real());
            if (!im_row_replaced && g2.imag() != 0.0) trip.emplace_back(nu + ui, ui, g2.imag());
        }
        for (const ControlParams& c : p.controls) {
            int ua = unk[static_cast<size_t>(c.a)];
            int ub = unk[static_cast<size_t>(c.b)];
            if (c.limited()) {
                // Q_a[N] elimination leaves -2/pi times Re V_b on the Im row
                trip.emplace_back(nu + ua, ub, -2.0 / c.pivot());
            } else {
                // setpoint constraint replaces the Im row: 2 Re V_b[N] = T
                trip.emplace_back(nu + ua, ub, 2.0);
            }
        }
        Eigen::SparseMatrix<double> a(2 * nu, 2 * nu);
        a.setFromTriplets(trip.begin(), trip.end());
        try {
            return FactoredSystem::factorize(a);
        } catch (const SingularMatrixError& e) {
            throw StageError(std::string("stage matrix singular: ") + e.what());
        }
    }
};

inline StageSystem build_stage_system(const StageParams& p) { return StageSystem(p); }

inline void advance_order(Germ& g, const StageSystem& sys) { sys.advance(g); }

// ---------------------------------------------------------------------------
// stage driver: advance orders, watch the staircase at s = 1
// ---------------------------------------------------------------------------

struct RunResult {
    bool converged = false;
    bool oscillating = false;
    double final_error = std::numeric_limits<double>::infinity();
    int orders = 0;
    std::vector<std::pair<int, double>> err_history;  // (order, aggregate update error)
    Eigen::VectorXcd v1;          // continuation values at s = 1
    Eigen::VectorXd q1;
    std::vector<StaircaseTable> bus_tables;   // staircases over the germ series
    std::vector<StaircaseTable> q_tables;
};

namespace detail {

/// Incremental staircase tracker for one series evaluated at s = 1.
struct SeriesTracker {
    bool have_value = false;
    bool terminated = true;       // all coefficients beyond order 0 negligible
    cd value{0, 0};
    double last_diff = std::numeric_limits<double>::infinity();
    double min_diff = std::numeric_limits<double>::infinity();
    int since_min = 0;

    /// Feed order `ord`; returns the fresh update error if one was computed.
    std::optional<double> feed(const Series& s, int ord) {
        if (std::abs(s[ord]) > 1e-15) terminated = false;
        std::optional<cd> fresh;
        if (terminated) {
            fresh = eval_horner(s, 1.0);
        } else if (ord >= 2) {
            auto entry = pade_build(s, (ord + 1) / 2, ord / 2);
            if (entry && !entry->pole_at(1.0)) fresh = entry->eval(1.0);
        }
        if (!fresh) return std::nullopt;
        std::optional<double> diff;
        if (have_value) {
            diff = std::abs(*fresh - value);
            last_diff = *diff;
            if (*diff < min_diff) {
                min_diff = *diff;
                since_min = 0;
            } else {
                ++since_min;
            }
        }
        value = *fresh;
        have_value = true;
        return diff;
    }
};

}  // namespace detail

/// Advance a stage until the per-bus staircase verdicts at s = 1 all converge
/// (infinity-norm aggregation over buses and control injections) or Nmax is
/// reached. The germ is left at the last computed order.
inline RunResult run_stage(const StageSystem& sys, Germ& g, double tol, int nmax) {
    const StageParams& p = sys.params();
    const int n = p.n();
    std::vector<detail::SeriesTracker> bus_tr(static_cast<size_t>(n));
    std::vector<detail::SeriesTracker> q_tr(p.controls.size());

    RunResult r;
    int osc_window = 0;
    double min_agg = std::numeric_limits<double>::infinity();
    while (g.order < nmax) {
        sys.advance(g);
        int ord = g.order;
        bool any_diff = false;
        double agg = 0.0;
        for (int i = 0; i < n; ++i) {
            if (i == p.swing) continue;
            auto d = bus_tr[static_cast<size_t>(i)].feed(g.v[static_cast<size_t>(i)], ord);
            if (d) any_diff = true;
        }
        for (size_t c = 0; c < p.controls.size(); ++c) {
            auto d = q_tr[c].feed(g.q[c], ord);
            if (d) any_diff = true;
        }
        // convergence demands every tracked series' latest update below tol
        double worst = 0.0;
        bool all_have = true;
        for (int i = 0; i < n; ++i) {
            if (i == p.swing) continue;
            const auto& tr = bus_tr[static_cast<size_t>(i)];
            if (tr.terminated && tr.have_value) continue;  // exact polynomial
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
        agg = all_have ? worst : std::numeric_limits<double>::infinity();
        if (any_diff && all_have) r.err_history.emplace_back(ord, agg);
        if (all_have && agg <= tol) {
            r.converged = true;
            r.final_error = agg;
            break;
        }
        // oscillation: six orders without a new aggregate minimum, all > tol;
        // recorded but the order loop continues so the staircase stays deep
        // enough for the advance-point search
        if (all_have && agg != std::numeric_limits<double>::infinity()) {
            if (agg < min_agg) {
                min_agg = agg;
                osc_window = 0;
            } else if (++osc_window >= 6) {
                r.oscillating = true;
            }
            r.final_error = agg;
        }
    }
    r.orders = g.order;

    r.v1 = Eigen::VectorXcd::Zero(n);
    for (int i = 0; i < n; ++i) {
        if (i == p.swing) {
            r.v1(i) = cd(1.0, 0.0) + p.swing_v1;
            continue;
        }
        const auto& tr = bus_tr[static_cast<size_t>(i)];
        r.v1(i) = tr.value;
    }
    r.q1 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.controls.size()));
    for (size_t c = 0; c < p.controls.size(); ++c) r.q1(static_cast<Eigen::Index>(c)) = q_tr[c].value.real();

    r.bus_tables.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) r.bus_tables.emplace_back(g.v[static_cast<size_t>(i)]);
    for (size_t c = 0; c < p.controls.size(); ++c) r.q_tables.emplace_back(g.q[c]);
    return r;
}

inline std::pair<Germ, RunResult> run_stage(const StageParams& p, double tol, int nmax) {
    StageSystem sys(p);
    Germ g = make_germ(p);
    RunResult r = run_stage(sys, g, tol, nmax);
    return {std::move(g), std::move(r)};
}

// ---------------------------------------------------------------------------
// stage-0 construction from a parsed network
// ---------------------------------------------------------------------------

/// Build the stage-0 embedded problem. Reactive variables are *net* bus
/// injections: fixed reactive parts at controlling buses shift the limit and
/// setpoint series' linear coefficients only, which keeps the zero-order
/// interior conditions untouched and stays algebraically exact.
inline StageParams stage0_params(const Network& net, bool enforce_qlims,
                                 const EmbeddingDefaults& d = {}) {
    for (const Bus& b : net.buses)
        if (std::abs(b.iconst) != 0.0)
            throw ValidationError("constant-current injections are not supported by "
                                  "the embedded solver (bus " + std::to_string(b.id) + ")");
    StageParams p;
    p.y = net.y;
    p.ysh = net.ysh;
    const int n = net.n();
    p.gamma = Eigen::VectorXcd::Zero(n);
    p.sfix = Eigen::VectorXcd::Zero(n);
    p.swing = net.swing;
    const Bus& sw = net.buses[static_cast<size_t>(net.swing)];
    p.swing_v1 = std::polar(sw.vsp, sw.va) - cd(1.0, 0.0);

    std::vector<char> is_ctrl(static_cast<size_t>(n), 0);
    for (const ControlSet& cs : net.controls)
        is_ctrl[static_cast<size_t>(net.bus_index(cs.ctrl_bus))] = 1;

    for (int i = 0; i < n; ++i) {
        if (i == net.swing) continue;
        const Bus& b = net.buses[static_cast<size_t>(i)];
        if (!is_ctrl[static_cast<size_t>(i)])
            p.sfix(i) = cd(b.pg_fixed - b.pd, b.qg_fixed - b.qd);
    }

    for (const ControlSet& cs : net.controls) {
        int a = net.bus_index(cs.ctrl_bus);
        int b = net.bus_index(cs.reg_bus);
        const Bus& ba = net.buses[static_cast<size_t>(a)];
        p.sfix(a) = cd(cs.pg + ba.pg_fixed - ba.pd, 0.0);
        ControlSet eff = cs;
        if (!enforce_qlims) {
            eff.qmin.reset();
            eff.qmax.reset();
        }
        ControlParams cp = embedding_constants(eff, d);
        cp.a = a;
        cp.b = b;
        double qfix = ba.qg_fixed - ba.qd;  // net limits: Qlim_net(s) = Qlim(s) + s qfix
        if (cp.qmin) cp.qmin->c1 += qfix;
        if (cp.qmax) cp.qmax->c1 += qfix;
        p.controls.push_back(cp);
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// coefficient-level residual oracle
// ---------------------------------------------------------------------------

/// Largest relative residual of the embedded equations' coefficient
/// identities over orders 1..germ.order: bus rows (scaled by the row's
/// admittance magnitude), complementarity/setpoint constraints, reciprocal
/// identities, and the barrier-product identities.
inline double stage_residual(const StageParams& p, const Germ& g) {
    const int n = p.n();
    double worst = 0.0;
    double coeff_scale = 1.0;
    for (int i = 0; i < n; ++i)
        for (int k = 0; k <= g.order; ++k)
            coeff_scale = std::max(coeff_scale, std::abs(g.v[static_cast<size_t>(i)][k]));
    for (const Series& qs : g.q)
        for (int k = 0; k <= qs.order(); ++k)
            coeff_scale = std::max(coeff_scale, std::abs(qs[k]));

    std::vector<int> ctrl_at(static_cast<size_t>(n), -1);
    for (size_t c = 0; c < p.controls.size(); ++c)
        ctrl_at[static_cast<size_t>(p.controls[c].a)] = static_cast<int>(c);

    Eigen::VectorXd row_scale = Eigen::VectorXd::Ones(n);
    for (int j = 0; j < p.y.outerSize(); ++j)
        for (Eigen::SparseMatrix<cd>::InnerIterator it(p.y, j); it; ++it)
            row_scale(it.row()) = std::max(row_scale(it.row()), std::abs(it.value()));

    for (int k = 1; k <= g.order; ++k) {
        Eigen::VectorXcd vk(n);
        for (int i = 0; i < n; ++i) vk(i) = g.v[static_cast<size_t>(i)][k];
        Eigen::VectorXcd yv = p.y * vk;
        for (int i = 0; i < n; ++i) {
            if (i == p.swing) continue;
            const Series& vi = g.v[static_cast<size_t>(i)];
            const Series& wi = g.vinv[static_cast<size_t>(i)];
            // LHS_k - RHS_k of the embedded bus equation
            cd res = yv(i) + p.ysh(i) * vi[k - 1];
            res -= std::conj(p.sfix(i)) * std::conj(wi[k - 1]);
            res -= p.gamma(i) * (std::conj(wi[k]) - vi[k]);
            int c = ctrl_at[static_cast<size_t>(i)];
            if (c >= 0) {
                const Series& qa = g.q[static_cast<size_t>(c)];
                cd qconv(0, 0);
                for (int m = 1; m <= k; ++m) qconv += qa[m] * std::conj(wi[k - m]);
                res += cd(0, 1) * qconv;
            }
            worst = std::max(worst, std::abs(res) / (row_scale(i) * coeff_scale));

            // reciprocal identity (V * Vinv)[k] = 0
            cd rec = convolve_at(vi, wi, k);
            worst = std::max(worst, std::abs(rec) / coeff_scale);
        }
        for (size_t c = 0; c < p.controls.size(); ++c) {
            const ControlParams& cp = p.controls[c];
            const Series& vb = g.v[static_cast<size_t>(cp.b)];
            const Series& qa = g.q[c];
            cd vv = convolve_conj_at(vb, vb, k);
            double wk = (k == 1) ? cp.wsp.c1 : 0.0;
            double bsum = 0.0;
            if (cp.qmax) bsum += g.bup[c].real_at(k);
            if (cp.qmin) bsum += g.blo[c].real_at(k);
            double cres = vv.real() - wk - bsum;
            worst = std::max(worst, std::abs(cres) / coeff_scale);
            worst = std::max(worst, std::abs(vv.imag()) / coeff_scale);

            // barrier product identities: B * (Q - Qlim) = mu (1 - s)
            auto product_residual = [&](const Series& bs, const LinearCoeff& lim) {
                double acc = 0.0;
                for (int m = 0; m <= k; ++m) {
                    double qml = qa.real_at(k - m);
                    if (k - m == 0) qml -= lim.c0;
                    if (k - m == 1) qml -= lim.c1;
                    acc += bs.real_at(m) * qml;
                }
                if (k == 1) acc += cp.mu;
                return std::abs(acc);
            };
            if (cp.qmax) worst = std::max(worst, product_residual(g.bup[c], *cp.qmax) / coeff_scale);
            if (cp.qmin) worst = std::max(worst, product_residual(g.blo[c], *cp.qmin) / coeff_scale);
        }
    }
    return worst;
}

}  // namespace helmpw
