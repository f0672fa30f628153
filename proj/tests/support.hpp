// Shared fixtures and reference implementations for the test suites.
#pragma once

#include "s4cf/linalg.hpp"
#include "s4cf/ssm.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>
#include <vector>

namespace testing {

using s4cf::Matrix;
using s4cf::Vector;

inline Matrix randn(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
    return m;
}

inline std::vector<double> randn_seq(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

/// Random A with every eigenvalue's real part <= -0.25.
inline s4cf::ssm::ContinuousSsm random_stable(std::mt19937_64& rng, int n) {
    s4cf::ssm::ContinuousSsm s;
    Matrix m = randn(rng, n, n, 1.0 / std::sqrt(static_cast<double>(n)));
    Eigen::EigenSolver<Matrix> es(m);
    const double shift = es.eigenvalues().real().maxCoeff() + 0.25;
    s.A = m - shift * Matrix::Identity(n, n);
    s.B = randn(rng, n, 1);
    s.C = randn(rng, 1, n);
    return s;
}

/// Discrete system with spectral radius well below one.
inline s4cf::ssm::DiscreteSsm random_discrete(std::mt19937_64& rng, int n, double radius = 0.9) {
    s4cf::ssm::DiscreteSsm d;
    Matrix m = randn(rng, n, n);
    Eigen::EigenSolver<Matrix> es(m);
    const double rho = es.eigenvalues().cwiseAbs().maxCoeff();
    d.Abar = m * (radius / rho);
    d.Bbar = randn(rng, n, 1);
    d.C = randn(rng, 1, n);
    d.delta = 1.0;
    return d;
}

/// Independent reference for the recurrence x_k = A x_{k-1} + B u_k, y_k = C x_k.
inline std::vector<double> reference_scan(const Matrix& A, const Matrix& B, const Matrix& C,
                                          const std::vector<double>& u) {
    const Eigen::Index n = A.rows();
    std::vector<double> x(static_cast<std::size_t>(n), 0.0), next(x.size());
    std::vector<double> y;
    for (double uk : u) {
        for (Eigen::Index i = 0; i < n; ++i) {
            double s = B(i, 0) * uk;
            for (Eigen::Index j = 0; j < n; ++j) s += A(i, j) * x[static_cast<std::size_t>(j)];
            next[static_cast<std::size_t>(i)] = s;
        }
        x.swap(next);
        double out = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) out += C(0, j) * x[static_cast<std::size_t>(j)];
        y.push_back(out);
    }
    return y;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return a.size() == b.size() ? m : INFINITY;
}

}  // namespace testing
