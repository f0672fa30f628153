// Dense linear-algebra helpers shared by the SSM core and the autodiff tape.
#pragma once

#include <Eigen/Dense>

#include <complex>
#include <stdexcept>
#include <string>

namespace s4cf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ComplexScalar = std::complex<double>;
using ComplexMatrix = Eigen::MatrixXcd;
using ComplexVector = Eigen::VectorXcd;

/// Raised when a pivot falls below the singularity tolerance.
class SingularMatrixError : public std::runtime_error {
public:
    explicit SingularMatrixError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised on incompatible shapes.
class DimensionError : public std::invalid_argument {
public:
    explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

inline constexpr double kPivotTolerance = 1e-12;

/// Partial-pivot LU factorization of a square matrix, PA = LU.
///
/// Singularity is declared when the largest available pivot in a column has
/// magnitude below `pivot_tolerance`.
class LuFactorization {
public:
    explicit LuFactorization(const Matrix& a, double pivot_tolerance = kPivotTolerance);

    Matrix solve(const Matrix& rhs) const;
    /// Solves A^T X = rhs with the same factors.
    Matrix solve_transpose(const Matrix& rhs) const;

    Eigen::Index size() const { return lu_.rows(); }
    double determinant() const;
    double min_abs_pivot() const;

private:
    Matrix lu_;
    Eigen::VectorXi perm_;  // row i of PA is row perm_[i] of A
    int swaps_ = 0;
};

inline Matrix lu_solve(const Matrix& a, const Matrix& rhs) {
    return LuFactorization(a).solve(rhs);
}

/// 2-norm condition number via singular values.
double condition_number(const Matrix& a);

/// exp(A) by scaling and squaring with a truncated Taylor series.
Matrix expm_taylor(const Matrix& a, int terms = 24);

}  // namespace s4cf
