#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>

#include "bnnser/errors.hpp"

namespace bnnser::stats {

namespace detail {

// Continued fraction for the incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 1e-15;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0 && b > 0.0)) throw ValidationError("incomplete_beta needs a, b > 0");
    if (x < 0.0 || x > 1.0) throw ValidationError("incomplete_beta needs x in [0, 1]");
    if (x == 0.0 || x == 1.0) return x;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    // The fraction converges fast on the side where x < (a+1)/(a+b+2).
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
    return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

/// P(T > t) for Student's t with `dof` degrees of freedom.
inline double student_t_upper_tail(double t, double dof) {
    if (!(dof > 0.0)) throw ValidationError("degrees of freedom must be positive");
    if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
    // Two equivalent forms; pick the one whose argument is not close to 1.
    const double y = t * t / (dof + t * t);
    const double tail = y < 0.5 ? 0.5 * (1.0 - incomplete_beta(0.5, 0.5 * dof, y))
                                : 0.5 * incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
    return t >= 0.0 ? tail : 1.0 - tail;
}

struct TTestResult {
    double t = 0.0;
    double p_value = 1.0;
    std::size_t dof = 0;
    bool degenerate = false;  // zero variance of the differences
    std::string note;
};

/// One-tailed paired test of H1: mean(a - b) > 0.
/// Zero-variance differences: all zero gives p = 1; a constant positive
/// shift gives p = 0 (t = +inf); a constant negative shift gives p = 1.
inline TTestResult paired_t_test_one_tailed(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ValidationError("paired t-test: length mismatch");
    const std::size_t k = a.size();
    if (k < 2) throw ValidationError("paired t-test needs at least two pairs");
    double mean = 0.0;
    for (std::size_t i = 0; i < k; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(k);
    double ss = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double d = a[i] - b[i] - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(k - 1));
    double scale = 0.0;
    for (std::size_t i = 0; i < k; ++i) scale = std::max(scale, std::abs(a[i] - b[i]));
    TTestResult r;
    r.dof = k - 1;
    // Spread at rounding level (e.g. a constant shift) counts as zero variance.
    if (sd <= 1e-12 * scale || sd == 0.0) {
        r.degenerate = true;
        if (mean > 0.0) {
            r.t = std::numeric_limits<double>::infinity();
            r.p_value = 0.0;
            r.note = "zero-variance positive differences; p < 1e-12";
        } else {
            r.t = mean == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
            r.p_value = 1.0;
            r.note = mean == 0.0 ? "all differences zero; no evidence" : "zero-variance negative differences";
        }
        return r;
    }
    r.t = mean / (sd / std::sqrt(static_cast<double>(k)));
    r.p_value = student_t_upper_tail(r.t, static_cast<double>(r.dof));
    return r;
}

}  // namespace bnnser::stats
