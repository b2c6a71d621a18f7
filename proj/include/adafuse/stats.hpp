#pragma once

#include <vector>

namespace adafuse {

// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction.
double regularized_incomplete_beta(double a, double b, double x);

// P(T <= t) for Student's t with dof degrees of freedom.
double student_t_cdf(double t, int dof);

struct TTestResult {
    double t = 0.0;
    double p_two_sided = 1.0;
    int dof = 0;
};

// Paired t-test over equal-length samples; errors when all differences are
// identical (zero variance).
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace adafuse
