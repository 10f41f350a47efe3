// Pade approximants and the near-diagonal staircase used to continue
// voltage series beyond their radius of convergence.
#pragma once

#include <Eigen/Dense>

#include <helmpw/series.hpp>

#include <limits>
#include <optional>
#include <vector>

namespace helmpw {

/// Rational approximant num/den with den[0] = 1.
struct RationalApprox {
    std::vector<cd> num, den;

    cd eval_num(double s) const { return horner(num, s); }
    cd eval_den(double s) const { return horner(den, s); }

    /// Denominator vanishes (to scale) at s.
    bool pole_at(double s) const {
        double scale = 0.0;
        for (const cd& b : den) scale = std::max(scale, std::abs(b));
        return std::abs(eval_den(s)) < 1e-12 * std::max(1.0, scale);
    }

    cd eval(double s) const { return eval_num(s) / eval_den(s); }

private:
    static cd horner(const std::vector<cd>& c, double s) {
        cd acc(0.0, 0.0);
        for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * s + *it;
        return acc;
    }
};

/// Build the [L/M] approximant of S. Denominator coefficients solve the
/// M x M Toeplitz system  sum_{m=0..M} b_m c_{L+k-m} = 0, k = 1..M, b_0 = 1,
/// by full-pivot elimination; a pivot below 1e-13 of the largest marks the
/// table entry degenerate (nullopt) and the staircase skips it.
inline std::optional<RationalApprox> pade_build(const Series& s, int L, int M) {
    if (s.order() < L + M)
        throw std::out_of_range("pade_build: series shorter than L+M");
    auto c = [&](int j) -> cd { return j < 0 ? cd(0.0, 0.0) : s[j]; };

    RationalApprox r;
    r.den.assign(static_cast<size_t>(M) + 1, cd(0.0, 0.0));
    r.den[0] = cd(1.0, 0.0);
    if (M > 0) {
        Eigen::MatrixXcd T(M, M);
        Eigen::VectorXcd rhs(M);
        for (int k = 1; k <= M; ++k) {
            for (int m = 1; m <= M; ++m) T(k - 1, m - 1) = c(L + k - m);
            rhs(k - 1) = -c(L + k);
        }
        Eigen::FullPivLU<Eigen::MatrixXcd> lu(T);
        double maxpiv = lu.maxPivot();
        double minpiv = maxpiv;
        for (int i = 0; i < M; ++i)
            minpiv = std::min(minpiv, std::abs(lu.matrixLU()(i, i)));
        if (maxpiv <= 0.0 || minpiv < 1e-13 * maxpiv) return std::nullopt;
        Eigen::VectorXcd b = lu.solve(rhs);
        for (int m = 1; m <= M; ++m) r.den[static_cast<size_t>(m)] = b(m - 1);
    }
    r.num.assign(static_cast<size_t>(L) + 1, cd(0.0, 0.0));
    for (int i = 0; i <= L; ++i) {
        cd acc(0.0, 0.0);
        for (int m = 0; m <= std::min(i, M); ++m) acc += r.den[static_cast<size_t>(m)] * c(i - m);
        r.num[static_cast<size_t>(i)] = acc;
    }
    return r;
}

enum class PadeStatus { ok, degenerate, pole };

struct PadeValue {
    cd value{0.0, 0.0};
    PadeStatus status = PadeStatus::ok;
};

/// One-shot [L/M] evaluation at s.
inline PadeValue pade_eval(const Series& series, int L, int M, double s) {
    auto r = pade_build(series, L, M);
    if (!r) return {cd(0.0, 0.0), PadeStatus::degenerate};
    if (r->pole_at(s)) return {cd(0.0, 0.0), PadeStatus::pole};
    return {r->eval(s), PadeStatus::ok};
}

/// Outcome of walking the staircase at a fixed evaluation point.
struct PadeVerdict {
    cd value{0.0, 0.0};       // best available continuation value
    bool converged = false;   // two successive entries agreed within tol
    bool oscillating = false; // update sequence stopped improving while above tol
    double error_estimate = std::numeric_limits<double>::infinity();
    int orders_used = 0;      // total order L+M of the deciding entry
};

/// Near-diagonal staircase [1/1],[2/1],[2/2],[3/2],... of a series: entry at
/// total order t is [ceil(t/2)/floor(t/2)]. Built once per germ so that
/// evaluations at many candidate s are cheap.
class StaircaseTable {
public:
    StaircaseTable() = default;

    explicit StaircaseTable(const Series& s) : max_t_(s.order()) {
        coef_.reserve(static_cast<size_t>(s.order() + 1));
        double scale = std::max(1.0, std::abs(s[0]));
        terminated_ = true;
        for (int k = 0; k <= s.order(); ++k) {
            coef_.push_back(s[k]);
            if (k >= 1 && std::abs(s[k]) > 1e-15 * scale) terminated_ = false;
        }
        for (int t = 2; t <= max_t_; ++t)
            entries_.push_back(pade_build(s, (t + 1) / 2, t / 2));
    }

    int max_order() const { return max_t_; }

    /// Series tail is negligible: the polynomial sum is already exact and the
    /// Toeplitz blocks are all degenerate by construction.
    bool terminated() const { return terminated_; }

    const std::optional<RationalApprox>& entry(int t) const {
        return entries_[static_cast<size_t>(t - 2)];
    }

    /// Walk entries in order; converged at the first successive pair agreeing
    /// within tol. Six entries without a new minimum of the update sequence,
    /// all above tol, is the oscillation (non-convergence) signal.
    PadeVerdict verdict_at(double s, double tol) const {
        PadeVerdict v;
        if (terminated_) {
            cd acc(0.0, 0.0);
            for (auto it = coef_.rbegin(); it != coef_.rend(); ++it) acc = acc * s + *it;
            v.value = acc;
            v.converged = true;
            v.error_estimate = 0.0;
            v.orders_used = max_t_;
            return v;
        }
        bool have_prev = false;
        cd prev(0.0, 0.0);
        double min_diff = std::numeric_limits<double>::infinity();
        int since_min = 0;
        for (int t = 2; t <= max_t_; ++t) {
            const auto& e = entry(t);
            if (!e || e->pole_at(s)) continue;
            cd val = e->eval(s);
            if (have_prev) {
                double diff = std::abs(val - prev);
                if (diff < min_diff) {
                    // the verdict reports the deepest settled entry -- walking
                    // past the first below-tol pair milks the staircase to its
                    // floor, and late noisy entries cannot pollute the value
                    min_diff = diff;
                    v.value = val;
                    v.error_estimate = diff;
                    v.orders_used = t;
                    since_min = 0;
                } else if (++since_min >= 6) {
                    break;
                }
            } else {
                v.value = val;
                v.orders_used = t;
            }
            prev = val;
            have_prev = true;
        }
        v.converged = min_diff <= tol;
        v.oscillating = have_prev && !v.converged;
        return v;
    }

private:
    std::vector<std::optional<RationalApprox>> entries_;
    std::vector<cd> coef_;
    int max_t_ = 0;
    bool terminated_ = false;
};

/// Staircase verdict for a single series (table built ad hoc).
inline PadeVerdict staircase_verdict(const Series& s, double at, double tol) {
    if (s.size() < 4)
        throw std::invalid_argument("staircase_verdict: need at least 4 coefficients");
    return StaircaseTable(s).verdict_at(at, tol);
}

}  // namespace helmpw
