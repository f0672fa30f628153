// Single-channel linear state-space models: HiPPO-LegS construction, the
// normal-plus-low-rank (NPLR) decomposition, bilinear discretization, and
// execution in recurrent (scan) and convolutional (kernel) modes.
//
// Everything here is a pure function over immutable values.
#pragma once

#include "s4cf/linalg.hpp"

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace s4cf::ssm {

/// x'(t) = A x(t) + B u(t),  y(t) = C x(t) + D u(t).
struct ContinuousSsm {
    Matrix A;  // N x N
    Matrix B;  // N x 1
    Matrix C;  // 1 x N
    double D = 0.0;

    Eigen::Index state_size() const { return A.rows(); }
    /// Throws DimensionError unless shapes agree with N = A.rows() >= 1.
    void validate() const;
};

/// x_k = Abar x_{k-1} + Bbar u_k,  y_k = C x_k.
struct DiscreteSsm {
    Matrix Abar;  // N x N
    Matrix Bbar;  // N x 1
    Matrix C;     // 1 x N
    double delta = 0.0;

    Eigen::Index state_size() const { return Abar.rows(); }
    void validate() const;
};

/// A = V (Lambda - (V* P)(V* Q)*) V* = V Lambda V* - P Q^T.
struct NplrForm {
    ComplexVector Lambda;  // N
    Matrix P;              // N x r
    Matrix Q;              // N x r
    ComplexMatrix V;       // N x N, unitary
    int rank = 1;

    Matrix reconstruct() const;
};

class NplrError : public std::runtime_error {
public:
    explicit NplrError(const std::string& what) : std::runtime_error(what) {}
};

/// HiPPO-LegS: A[n][k] = -sqrt(2n+1) sqrt(2k+1) (n > k), -(n+1) (n = k), 0 (n < k);
/// B[n] = sqrt(2n+1). C is left zero for the caller to fill.
ContinuousSsm hippo_legs(int state_size);

/// Rank-1 NPLR decomposition of a LegS matrix. P = Q with P[n] = sqrt(n + 1/2);
/// A + P P^T must be skew-symmetric plus a multiple of the identity.
NplrForm nplr_decompose(const ContinuousSsm& ssm, double normality_tolerance = 1e-10);

/// Real parameterization of the normal part V Lambda V^T used for training.
///
/// Each conjugate pair (lambda, conj lambda) with eigenvector a + ib contributes
/// re(lambda) * 2(aa^T + bb^T) + im(lambda) * 2(ab^T - ba^T); a real eigenvalue
/// with real eigenvector v contributes lambda * vv^T. `basis` stores these N
/// matrices flattened row-major as columns, so reshape(basis * params) equals
/// the normal part.
struct RealNplrBasis {
    Matrix basis;   // N^2 x N
    Vector params;  // N reals: (re, im) per pair, then re for a real eigenvalue
};

RealNplrBasis real_nplr_basis(const NplrForm& form, double pair_tolerance = 1e-9);

/// reshape(basis * params) - P Q^T as an N x N matrix.
Matrix assemble_state_matrix(const Matrix& basis, const Vector& params, const Matrix& P,
                             const Matrix& Q);

/// Abar = (I - d/2 A)^{-1} (I + d/2 A),  Bbar = (I - d/2 A)^{-1} d B.
DiscreteSsm discretize_bilinear(const ContinuousSsm& ssm, double delta);

/// Literal recurrence. `x0` defaults to zero.
std::vector<double> ssm_scan(const DiscreteSsm& ssm, std::span<const double> u,
                             const std::optional<Vector>& x0 = std::nullopt);

/// K[i] = C Abar^i Bbar for i = 0..L-1.
std::vector<double> ssm_kernel(const DiscreteSsm& ssm, std::size_t length);

/// y_k = sum_{i <= k} K[i] u[k - i]; direct O(L^2).
std::vector<double> ssm_conv(std::span<const double> kernel, std::span<const double> u);

/// (A, B, C) -> (V^{-1} A V, V^{-1} B, C V).
ContinuousSsm conjugate_ssm(const ContinuousSsm& ssm, const Matrix& V);

/// Spectral radius via the real Schur form eigenvalues.
double spectral_radius(const Matrix& a);

/// Holds a continuous system and step and materializes the discrete system on
/// first use. Setting either input drops the cached matrices.
class DiscretizationCache {
public:
    DiscretizationCache() = default;
    DiscretizationCache(ContinuousSsm ssm, double delta);

    void set_system(ContinuousSsm ssm);
    void set_delta(double delta);

    const ContinuousSsm& system() const { return ssm_; }
    double delta() const { return delta_; }
    bool cached() const { return discrete_.has_value(); }

    /// Not thread-safe: may populate the cache.
    const DiscreteSsm& discrete();

private:
    ContinuousSsm ssm_;
    double delta_ = 0.0;
    std::optional<DiscreteSsm> discrete_;
};

}  // namespace s4cf::ssm
