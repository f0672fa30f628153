#include "s4cf/ssm.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace s4cf::ssm {

namespace {

std::string shape(const Matrix& m) {
    std::ostringstream s;
    s << m.rows() << "x" << m.cols();
    return s.str();
}

}  // namespace

void ContinuousSsm::validate() const {
    const auto n = A.rows();
    if (n < 1 || A.cols() != n) throw DimensionError("ContinuousSsm: A must be square with N >= 1, got " + shape(A));
    if (B.rows() != n || B.cols() != 1) throw DimensionError("ContinuousSsm: B must be Nx1, got " + shape(B));
    if (C.rows() != 1 || C.cols() != n) throw DimensionError("ContinuousSsm: C must be 1xN, got " + shape(C));
}

void DiscreteSsm::validate() const {
    const auto n = Abar.rows();
    if (n < 1 || Abar.cols() != n) throw DimensionError("DiscreteSsm: Abar must be square with N >= 1, got " + shape(Abar));
    if (Bbar.rows() != n || Bbar.cols() != 1) throw DimensionError("DiscreteSsm: Bbar must be Nx1, got " + shape(Bbar));
    if (C.rows() != 1 || C.cols() != n) throw DimensionError("DiscreteSsm: C must be 1xN, got " + shape(C));
}

Matrix NplrForm::reconstruct() const {
    const ComplexMatrix Vh = V.adjoint();
    const ComplexMatrix VP = Vh * P.cast<ComplexScalar>();
    const ComplexMatrix VQ = Vh * Q.cast<ComplexScalar>();
    ComplexMatrix inner = -VP * VQ.adjoint();
    inner.diagonal() += Lambda;
    const ComplexMatrix full = V * inner * Vh;
    return full.real();
}

ContinuousSsm hippo_legs(int state_size) {
    if (state_size < 1) throw std::invalid_argument("hippo_legs: state size must be >= 1");
    const int n = state_size;
    ContinuousSsm ssm;
    ssm.A = Matrix::Zero(n, n);
    ssm.B = Matrix::Zero(n, 1);
    ssm.C = Matrix::Zero(1, n);
    for (int row = 0; row < n; ++row) {
        for (int col = 0; col < row; ++col) {
            ssm.A(row, col) = -std::sqrt(2.0 * row + 1.0) * std::sqrt(2.0 * col + 1.0);
        }
        ssm.A(row, row) = -(row + 1.0);
        ssm.B(row, 0) = std::sqrt(2.0 * row + 1.0);
    }
    return ssm;
}

NplrForm nplr_decompose(const ContinuousSsm& ssm, double normality_tolerance) {
    ssm.validate();
    const Eigen::Index n = ssm.state_size();

    Matrix P(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) P(i, 0) = std::sqrt(static_cast<double>(i) + 0.5);

    const Matrix normal = ssm.A + P * P.transpose();
    const double scale = std::max(normal.squaredNorm(), 1e-300);
    const double commutator =
        (normal * normal.transpose() - normal.transpose() * normal).norm() / scale;
    if (commutator > normality_tolerance) {
        std::ostringstream msg;
        msg << "nplr_decompose: A + PP^T is not normal (relative commutator " << commutator
            << " > " << normality_tolerance << ")";
        throw NplrError(msg.str());
    }
    const Matrix skew = 0.5 * (normal - normal.transpose());
    const Matrix sym = 0.5 * (normal + normal.transpose());
    const double shift = sym.trace() / static_cast<double>(n);
    const double sym_residual =
        (sym - shift * Matrix::Identity(n, n)).norm() / std::sqrt(scale);
    if (sym_residual > normality_tolerance) {
        std::ostringstream msg;
        msg << "nplr_decompose: A + PP^T is not skew-symmetric plus a scaled identity "
               "(relative residual "
            << sym_residual << ")";
        throw NplrError(msg.str());
    }

    // i*S is Hermitian; i S v = w v gives (shift*I + S) v = (shift - i w) v.
    const ComplexMatrix hermitian = ComplexScalar(0.0, 1.0) * skew.cast<ComplexScalar>();
    Eigen::SelfAdjointEigenSolver<ComplexMatrix> solver(hermitian);
    if (solver.info() != Eigen::Success) throw NplrError("nplr_decompose: eigensolver failed");
    const Vector& w = solver.eigenvalues();
    const ComplexMatrix& vecs = solver.eigenvectors();

    const double zero_tol = 1e-9 * std::max(1.0, w.cwiseAbs().maxCoeff());
    std::vector<Eigen::Index> positive;
    std::vector<Eigen::Index> zero;
    Eigen::Index negative_count = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (w(i) > zero_tol) positive.push_back(i);
        else if (w(i) < -zero_tol) ++negative_count;
        else zero.push_back(i);
    }
    if (static_cast<Eigen::Index>(positive.size()) != negative_count) {
        throw NplrError("nplr_decompose: skew spectrum is not symmetric");
    }
    // Largest frequencies first.
    std::sort(positive.begin(), positive.end(), [&](auto a, auto b) { return w(a) > w(b); });

    NplrForm form;
    form.rank = 1;
    form.P = P;
    form.Q = P;
    form.V = ComplexMatrix::Zero(n, n);
    form.Lambda = ComplexVector::Zero(n);

    Eigen::Index col = 0;
    for (auto idx : positive) {
        const ComplexVector v = vecs.col(idx);
        form.V.col(col) = v;
        form.Lambda(col) = ComplexScalar(shift, -w(idx));
        form.V.col(col + 1) = v.conjugate();
        form.Lambda(col + 1) = ComplexScalar(shift, w(idx));
        col += 2;
    }
    if (!zero.empty()) {
        // Real orthonormal basis of the kernel of S.
        Matrix parts(n, 2 * static_cast<Eigen::Index>(zero.size()));
        for (std::size_t k = 0; k < zero.size(); ++k) {
            parts.col(2 * k) = vecs.col(zero[k]).real();
            parts.col(2 * k + 1) = vecs.col(zero[k]).imag();
        }
        Eigen::JacobiSVD<Matrix> svd(parts, Eigen::ComputeThinU);
        for (std::size_t k = 0; k < zero.size(); ++k) {
            form.V.col(col) = svd.matrixU().col(static_cast<Eigen::Index>(k)).cast<ComplexScalar>();
            form.Lambda(col) = ComplexScalar(shift, 0.0);
            ++col;
        }
    }
    return form;
}

RealNplrBasis real_nplr_basis(const NplrForm& form, double pair_tolerance) {
    const Eigen::Index n = form.V.rows();
    RealNplrBasis out;
    out.basis = Matrix::Zero(n * n, n);
    out.params = Vector::Zero(n);

    auto store = [&](Eigen::Index j, const Matrix& m) {
        for (Eigen::Index r = 0; r < n; ++r)
            for (Eigen::Index c = 0; c < n; ++c) out.basis(r * n + c, j) = m(r, c);
    };

    Eigen::Index j = 0;
    Eigen::Index k = 0;
    while (k < n) {
        const ComplexVector v = form.V.col(k);
        const bool is_real = v.imag().norm() <= pair_tolerance &&
                             std::abs(form.Lambda(k).imag()) <= pair_tolerance;
        if (is_real) {
            const Vector a = v.real();
            store(j, a * a.transpose());
            out.params(j) = form.Lambda(k).real();
            ++j;
            ++k;
            continue;
        }
        if (k + 1 >= n || (form.V.col(k + 1) - v.conjugate()).norm() > pair_tolerance ||
            std::abs(form.Lambda(k + 1) - std::conj(form.Lambda(k))) > pair_tolerance) {
            throw NplrError("real_nplr_basis: eigenvectors are not arranged in conjugate pairs");
        }
        const Vector a = v.real();
        const Vector b = v.imag();
        store(j, 2.0 * (a * a.transpose() + b * b.transpose()));
        store(j + 1, 2.0 * (a * b.transpose() - b * a.transpose()));
        out.params(j) = form.Lambda(k).real();
        out.params(j + 1) = form.Lambda(k).imag();
        j += 2;
        k += 2;
    }
    return out;
}

Matrix assemble_state_matrix(const Matrix& basis, const Vector& params, const Matrix& P,
                             const Matrix& Q) {
    const Eigen::Index n = P.rows();
    if (basis.rows() != n * n || basis.cols() != params.size()) {
        throw DimensionError("assemble_state_matrix: basis/params shape mismatch");
    }
    const Vector flat = basis * params;
    Matrix A(n, n);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < n; ++c) A(r, c) = flat(r * n + c);
    A -= P * Q.transpose();
    return A;
}

DiscreteSsm discretize_bilinear(const ContinuousSsm& ssm, double delta) {
    ssm.validate();
    if (!(delta > 0.0)) throw std::invalid_argument("discretize_bilinear: delta must be > 0");
    const Eigen::Index n = ssm.state_size();
    const Matrix I = Matrix::Identity(n, n);
    const LuFactorization lu(I - 0.5 * delta * ssm.A);
    DiscreteSsm out;
    out.Abar = lu.solve(I + 0.5 * delta * ssm.A);
    out.Bbar = lu.solve(delta * ssm.B);
    out.C = ssm.C;
    out.delta = delta;
    return out;
}

std::vector<double> ssm_scan(const DiscreteSsm& ssm, std::span<const double> u,
                             const std::optional<Vector>& x0) {
    ssm.validate();
    const Eigen::Index n = ssm.state_size();
    Vector x = x0.value_or(Vector::Zero(n));
    if (x.size() != n) throw DimensionError("ssm_scan: initial state has wrong size");
    std::vector<double> y(u.size());
    Vector next(n);
    for (std::size_t k = 0; k < u.size(); ++k) {
        next.noalias() = ssm.Abar * x;
        next += ssm.Bbar.col(0) * u[k];
        x.swap(next);
        y[k] = ssm.C.row(0).dot(x);
    }
    return y;
}

std::vector<double> ssm_kernel(const DiscreteSsm& ssm, std::size_t length) {
    ssm.validate();
    std::vector<double> kernel(length);
    Vector v = ssm.Bbar.col(0);
    Vector next(v.size());
    for (std::size_t i = 0; i < length; ++i) {
        kernel[i] = ssm.C.row(0).dot(v);
        next.noalias() = ssm.Abar * v;
        v.swap(next);
    }
    return kernel;
}

std::vector<double> ssm_conv(std::span<const double> kernel, std::span<const double> u) {
    if (kernel.size() != u.size()) throw DimensionError("ssm_conv: kernel and input lengths differ");
    std::vector<double> y(u.size(), 0.0);
    for (std::size_t k = 0; k < u.size(); ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i <= k; ++i) acc += kernel[i] * u[k - i];
        y[k] = acc;
    }
    return y;
}

ContinuousSsm conjugate_ssm(const ContinuousSsm& ssm, const Matrix& V) {
    ssm.validate();
    if (V.rows() != ssm.state_size() || V.cols() != ssm.state_size()) {
        throw DimensionError("conjugate_ssm: V must be NxN");
    }
    const LuFactorization lu(V);
    ContinuousSsm out;
    out.A = lu.solve(ssm.A * V);
    out.B = lu.solve(ssm.B);
    out.C = ssm.C * V;
    out.D = ssm.D;
    return out;
}

double spectral_radius(const Matrix& a) {
    Eigen::EigenSolver<Matrix> solver(a, false);
    return solver.eigenvalues().cwiseAbs().maxCoeff();
}

DiscretizationCache::DiscretizationCache(ContinuousSsm ssm, double delta)
    : ssm_(std::move(ssm)), delta_(delta) {}

void DiscretizationCache::set_system(ContinuousSsm ssm) {
    ssm_ = std::move(ssm);
    discrete_.reset();
}

void DiscretizationCache::set_delta(double delta) {
    delta_ = delta;
    discrete_.reset();
}

const DiscreteSsm& DiscretizationCache::discrete() {
    if (!discrete_) discrete_ = discretize_bilinear(ssm_, delta_);
    return *discrete_;
}

}  // namespace s4cf::ssm
