#include "s4cf/linalg.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace s4cf {

LuFactorization::LuFactorization(const Matrix& a, double pivot_tolerance) : lu_(a) {
    if (a.rows() != a.cols()) {
        throw DimensionError("LU factorization needs a square matrix");
    }
    const Eigen::Index n = a.rows();
    perm_.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) perm_[i] = static_cast<int>(i);

    for (Eigen::Index k = 0; k < n; ++k) {
        Eigen::Index pivot_row = k;
        double best = std::abs(lu_(k, k));
        for (Eigen::Index i = k + 1; i < n; ++i) {
            const double v = std::abs(lu_(i, k));
            if (v > best) {
                best = v;
                pivot_row = i;
            }
        }
        if (best < pivot_tolerance) {
            std::ostringstream msg;
            msg << "singular matrix: pivot " << best << " in column " << k
                << " is below tolerance " << pivot_tolerance;
            throw SingularMatrixError(msg.str());
        }
        if (pivot_row != k) {
            lu_.row(k).swap(lu_.row(pivot_row));
            std::swap(perm_[k], perm_[pivot_row]);
            ++swaps_;
        }
        const double inv_pivot = 1.0 / lu_(k, k);
        for (Eigen::Index i = k + 1; i < n; ++i) {
            const double factor = lu_(i, k) * inv_pivot;
            lu_(i, k) = factor;
            if (factor == 0.0) continue;
            for (Eigen::Index j = k + 1; j < n; ++j) lu_(i, j) -= factor * lu_(k, j);
        }
    }
}

Matrix LuFactorization::solve(const Matrix& rhs) const {
    const Eigen::Index n = lu_.rows();
    if (rhs.rows() != n) throw DimensionError("LU solve: right-hand side row mismatch");
    Matrix x(n, rhs.cols());
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = rhs.row(perm_[i]);
    // forward substitution with unit-lower L
    for (Eigen::Index i = 1; i < n; ++i) {
        for (Eigen::Index k = 0; k < i; ++k) x.row(i) -= lu_(i, k) * x.row(k);
    }
    for (Eigen::Index i = n - 1; i >= 0; --i) {
        for (Eigen::Index k = i + 1; k < n; ++k) x.row(i) -= lu_(i, k) * x.row(k);
        x.row(i) /= lu_(i, i);
    }
    return x;
}

Matrix LuFactorization::solve_transpose(const Matrix& rhs) const {
    // A^T = U^T L^T P, so solve U^T w = rhs, L^T z = w, then x = P^T z.
    const Eigen::Index n = lu_.rows();
    if (rhs.rows() != n) throw DimensionError("LU solve: right-hand side row mismatch");
    Matrix w = rhs;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < i; ++k) w.row(i) -= lu_(k, i) * w.row(k);
        w.row(i) /= lu_(i, i);
    }
    for (Eigen::Index i = n - 1; i >= 0; --i) {
        for (Eigen::Index k = i + 1; k < n; ++k) w.row(i) -= lu_(k, i) * w.row(k);
    }
    Matrix x(n, rhs.cols());
    for (Eigen::Index i = 0; i < n; ++i) x.row(perm_[i]) = w.row(i);
    return x;
}

double LuFactorization::determinant() const {
    double det = (swaps_ % 2 == 0) ? 1.0 : -1.0;
    for (Eigen::Index i = 0; i < lu_.rows(); ++i) det *= lu_(i, i);
    return det;
}

double LuFactorization::min_abs_pivot() const {
    return lu_.diagonal().cwiseAbs().minCoeff();
}

double condition_number(const Matrix& a) {
    Eigen::JacobiSVD<Matrix> svd(a);
    const auto& s = svd.singularValues();
    if (s.size() == 0) return 1.0;
    const double smallest = s(s.size() - 1);
    if (smallest == 0.0) return std::numeric_limits<double>::infinity();
    return s(0) / smallest;
}

Matrix expm_taylor(const Matrix& a, int terms) {
    const double norm = a.cwiseAbs().rowwise().sum().maxCoeff();
    int squarings = 0;
    if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
    const Matrix scaled = a / std::ldexp(1.0, squarings);

    const Eigen::Index n = a.rows();
    Matrix result = Matrix::Identity(n, n);
    Matrix term = Matrix::Identity(n, n);
    for (int k = 1; k <= terms; ++k) {
        term = term * scaled / static_cast<double>(k);
        result += term;
    }
    for (int i = 0; i < squarings; ++i) result = result * result;
    return result;
}

}  // namespace s4cf
