// Power-series coefficient containers and Cauchy-product helpers.
#pragma once

#include <complex>
#include <span>
#include <stdexcept>
#include <vector>

namespace helmpw {

using cd = std::complex<double>;

/// Dense power series in one embedding variable, coefficients by ascending
/// order. A series flagged real-valued rejects coefficients whose imaginary
/// part exceeds 1e-12 relative to the running coefficient scale; this catches
/// assembly bugs (reactive-power and barrier series must stay real).
class Series {
public:
    explicit Series(bool is_real = false) : real_(is_real) {}

    static Series constant(cd c0, bool is_real = false) {
        Series s(is_real);
        s.push(c0);
        return s;
    }

    /// Highest defined order; -1 when empty.
    int order() const { return static_cast<int>(c_.size()) - 1; }
    int size() const { return static_cast<int>(c_.size()); }
    bool empty() const { return c_.empty(); }
    bool is_real() const { return real_; }

    void push(cd v) {
        if (real_) {
            double tol = 1e-12 * std::max(1.0, scale_);
            if (std::abs(v.imag()) > tol)
                throw std::logic_error("Series: coefficient of real-flagged series has imaginary part " +
                                       std::to_string(v.imag()));
            v = cd(v.real(), 0.0);
        }
        scale_ = std::max(scale_, std::abs(v));
        c_.push_back(v);
    }

    cd operator[](int n) const {
        if (n < 0 || n >= size())
            throw std::out_of_range("Series: coefficient order " + std::to_string(n) +
                                    " exceeds available " + std::to_string(order()));
        return c_[static_cast<size_t>(n)];
    }

    double real_at(int n) const { return (*this)[n].real(); }

    std::span<const cd> coeffs() const { return c_; }

    void clear() {
        c_.clear();
        scale_ = 0.0;
    }

private:
    std::vector<cd> c_;
    bool real_ = false;
    double scale_ = 0.0;  // running max |coeff|, basis of the realness tolerance
};

/// Cauchy-product coefficient restricted to m in [m_lo, m_hi]:
/// sum A[m] * B[N-m]. Both series must be defined through the orders touched.
inline cd convolve_at(const Series& a, const Series& b, int n, int m_lo, int m_hi) {
    cd acc(0.0, 0.0);
    for (int m = m_lo; m <= m_hi; ++m) acc += a[m] * b[n - m];
    return acc;
}

/// Full Cauchy-product coefficient: sum_{m=0..N} A[m] * B[N-m].
inline cd convolve_at(const Series& a, const Series& b, int n) {
    return convolve_at(a, b, n, 0, n);
}

/// Conjugated product coefficient: sum A[m] * conj(B[N-m]), m in [m_lo, m_hi].
/// This is the coefficient pattern of terms in V(s) V*(s*).
inline cd convolve_conj_at(const Series& a, const Series& b, int n, int m_lo, int m_hi) {
    cd acc(0.0, 0.0);
    for (int m = m_lo; m <= m_hi; ++m) acc += a[m] * std::conj(b[n - m]);
    return acc;
}

inline cd convolve_conj_at(const Series& a, const Series& b, int n) {
    return convolve_conj_at(a, b, n, 0, n);
}

/// Next coefficient of the reciprocal series W = 1/V given W through order
/// N-1: from (V*W)[N] = 0, W[N] = -(1/V[0]) * sum_{m=1..N} V[m] W[N-m].
inline cd invert_next(const Series& v, const Series& vinv) {
    int n = vinv.order() + 1;
    if (v.order() < n)
        throw std::out_of_range("invert_next: V not defined through required order");
    if (std::abs(v[0]) < 1e-300)
        throw std::domain_error("invert_next: V[0] is zero");
    cd acc(0.0, 0.0);
    for (int m = 1; m <= n; ++m) acc += v[m] * vinv[n - m];
    return -acc / v[0];
}

/// Horner evaluation of the raw truncated series. Diagnostics only -- the
/// solver path continues series through Pade approximants, never this.
inline cd eval_horner(const Series& s, cd z) {
    if (s.empty()) return {0.0, 0.0};
    cd acc = s[s.order()];
    for (int n = s.order() - 1; n >= 0; --n) acc = acc * z + s[n];
    return acc;
}

inline cd eval_horner(const Series& s, double z) { return eval_horner(s, cd(z, 0.0)); }

}  // namespace helmpw
