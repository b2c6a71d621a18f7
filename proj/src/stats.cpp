#include "adafuse/stats.hpp"

#include <cmath>
#include <string>

#include "adafuse/errors.hpp"

namespace adafuse {

namespace {

double beta_continued_fraction(double a, double b, double x) {
    constexpr int max_iter = 500;
    constexpr double eps = 1e-16;
    constexpr double fpmin = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, int dof) {
    if (dof < 1) throw DataError("student_t_cdf: dof must be >= 1");
    const double nu = static_cast<double>(dof);
    const double x = nu / (nu + t * t);
    const double tail = 0.5 * regularized_incomplete_beta(nu / 2.0, 0.5, x);
    return t >= 0.0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DataError("paired_t_test: length mismatch");
    const int n = static_cast<int>(a.size());
    if (n < 2) throw DataError("paired_t_test: need at least 2 pairs");
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = a[i] - b[i] - mean;
        var += d * d;
    }
    var /= (n - 1);
    if (var == 0.0) throw DataError("paired_t_test: degenerate: zero variance");
    TTestResult result;
    result.dof = n - 1;
    result.t = mean / std::sqrt(var / n);
    result.p_two_sided = 2.0 * (1.0 - student_t_cdf(std::abs(result.t), result.dof));
    return result;
}

}  // namespace adafuse
