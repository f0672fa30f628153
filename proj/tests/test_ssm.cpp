#include "doctest.h"
#include "support.hpp"

#include <unsupported/Eigen/MatrixFunctions>

using namespace s4cf;
using namespace s4cf::ssm;
using testing::randn;

namespace {

DiscreteSsm scalar_discrete(double a, double b, double c) {
    DiscreteSsm d;
    d.Abar = Matrix::Constant(1, 1, a);
    d.Bbar = Matrix::Constant(1, 1, b);
    d.C = Matrix::Constant(1, 1, c);
    d.delta = 1.0;
    return d;
}

ContinuousSsm scalar_continuous(double a, double b) {
    ContinuousSsm s;
    s.A = Matrix::Constant(1, 1, a);
    s.B = Matrix::Constant(1, 1, b);
    s.C = Matrix::Ones(1, 1);
    return s;
}

std::vector<double> conv_path(const DiscreteSsm& d, const std::vector<double>& u) {
    return ssm_conv(ssm_kernel(d, u.size()), u);
}

}  // namespace

TEST_CASE("hippo_legs entries") {
    CHECK(hippo_legs(1).A(0, 0) == -1.0);
    const Matrix a2 = hippo_legs(2).A;
    CHECK(a2(0, 0) == -1.0);
    CHECK(a2(0, 1) == 0.0);
    CHECK(a2(1, 0) == doctest::Approx(-std::sqrt(3.0)).epsilon(1e-15));
    CHECK(a2(1, 1) == -2.0);
    CHECK_THROWS(hippo_legs(0));

    for (int n : {1, 3, 16, 64}) {
        const ContinuousSsm s = hippo_legs(n);
        for (int i = 0; i < n; ++i) {
            CHECK(s.A(i, i) < 0.0);
            CHECK(s.B(i, 0) == doctest::Approx(std::sqrt(2.0 * i + 1)));
            for (int k = i + 1; k < n; ++k) CHECK(s.A(i, k) == 0.0);
        }
        CHECK(s.D == 0.0);
    }
}

TEST_CASE("hippo spectrum lies left of -1/2") {
    for (int n : {1, 2, 8, 32, 64}) {
        Eigen::EigenSolver<Matrix> es(hippo_legs(n).A);
        CHECK(es.eigenvalues().real().maxCoeff() <= -0.5 + 1e-9);
    }
}

TEST_CASE("nplr reconstruction") {
    for (int n : {2, 4, 8, 16, 32, 64}) {
        const ContinuousSsm s = hippo_legs(n);
        const NplrForm f = nplr_decompose(s);
        CHECK(f.rank == 1);
        CHECK((f.reconstruct() - s.A).norm() <= 1e-8);
        const ComplexMatrix vv = f.V.adjoint() * f.V;
        CHECK((vv - ComplexMatrix::Identity(n, n)).norm() <= 1e-9);
        for (int i = 0; i < n; ++i) CHECK(f.P(i, 0) == doctest::Approx(std::sqrt(i + 0.5)));
    }
}

TEST_CASE("nplr eigenvalues of the normal part") {
    const NplrForm f = nplr_decompose(hippo_legs(4));
    std::vector<ComplexScalar> lam(f.Lambda.data(), f.Lambda.data() + f.Lambda.size());
    for (const auto& l : lam) {
        CHECK(l.real() == doctest::Approx(-0.5).epsilon(1e-10));
        const bool has_conjugate = std::any_of(lam.begin(), lam.end(), [&](const ComplexScalar& o) {
            return std::abs(o - std::conj(l)) < 1e-9;
        });
        CHECK(has_conjugate);
    }
}

TEST_CASE("nplr at N = 1") {
    // A + P P^T = -1 + 1/2, so the single eigenvalue is -1/2.
    const NplrForm f = nplr_decompose(hippo_legs(1));
    CHECK(f.P(0, 0) == doctest::Approx(std::sqrt(0.5)));
    CHECK(f.Lambda(0).real() == doctest::Approx(-0.5));
    CHECK(f.Lambda(0).imag() == doctest::Approx(0.0));
    CHECK(std::abs(f.reconstruct()(0, 0) + 1.0) < 1e-12);
}

TEST_CASE("nplr rejects matrices without the LegS structure") {
    std::mt19937_64 rng(3);
    ContinuousSsm s = hippo_legs(6);
    s.A(0, 5) = 0.3;
    CHECK_THROWS_AS(nplr_decompose(s), NplrError);
    s = testing::random_stable(rng, 5);
    CHECK_THROWS_AS(nplr_decompose(s), NplrError);
}

TEST_CASE("real parameterization reproduces the normal part") {
    for (int n : {1, 2, 5, 16}) {
        const ContinuousSsm s = hippo_legs(n);
        const NplrForm f = nplr_decompose(s);
        const RealNplrBasis rb = real_nplr_basis(f);
        CHECK(rb.basis.rows() == n * n);
        CHECK(rb.basis.cols() == n);
        CHECK((assemble_state_matrix(rb.basis, rb.params, f.P, f.Q) - s.A).norm() <= 1e-8);
    }
}

TEST_CASE("bilinear discretization examples") {
    const DiscreteSsm z = discretize_bilinear(scalar_continuous(0.0, 1.0), 0.1);
    CHECK(z.Abar(0, 0) == doctest::Approx(1.0));
    CHECK(z.Bbar(0, 0) == doctest::Approx(0.1));
    CHECK(z.delta == 0.1);

    const DiscreteSsm h = discretize_bilinear(scalar_continuous(-1.0, 1.0), 1.0);
    CHECK(h.Abar(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(h.Bbar(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));

    ContinuousSsm s = hippo_legs(8);
    s.C = Matrix::Ones(1, 8);
    double prev = INFINITY;
    for (double d : {1e-1, 1e-2, 1e-3, 1e-4}) {
        const DiscreteSsm ds = discretize_bilinear(s, d);
        const double err = (ds.Abar - Matrix::Identity(8, 8)).norm();
        CHECK(err < prev);
        prev = err;
        CHECK(ds.C == s.C);
    }
    CHECK(prev < 1e-2);

    CHECK_THROWS(discretize_bilinear(s, 0.0));
    CHECK_THROWS(discretize_bilinear(s, -1.0));
    // I - A/2 is singular for A = 2.
    CHECK_THROWS_AS(discretize_bilinear(scalar_continuous(2.0, 1.0), 1.0), SingularMatrixError);
}

TEST_CASE("bilinear local error is third order") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 2 + trial % 7;
        const ContinuousSsm s = testing::random_stable(rng, n);
        auto err = [&](double d) {
            return (discretize_bilinear(s, d).Abar - (d * s.A).exp()).norm();
        };
        // Same check against the in-house Taylor exponential.
        auto err_taylor = [&](double d) {
            return (discretize_bilinear(s, d).Abar - expm_taylor(d * s.A)).norm();
        };
        const double r1 = err(1e-2) / err(5e-3);
        const double r2 = err_taylor(1e-2) / err_taylor(5e-3);
        CHECK(r1 >= 6.0);
        CHECK(r1 <= 10.0);
        CHECK(r2 == doctest::Approx(r1).epsilon(1e-3));
    }
}

TEST_CASE("hippo discretization is stable") {
    for (int n : {1, 4, 16, 64})
        for (double d : {1e-3, 1e-2, 1e-1, 1.0})
            CHECK(spectral_radius(discretize_bilinear(hippo_legs(n), d).Abar) < 1.0);
}

TEST_CASE("scan examples") {
    const std::vector<double> ones{1, 1, 1};
    CHECK(ssm_scan(scalar_discrete(1, 1, 1), ones) == std::vector<double>{1, 2, 3});
    const std::vector<double> u{0.3, -2.0, 7.5, 0.0};
    CHECK(ssm_scan(scalar_discrete(0, 1, 1), u) == u);

    // Nonzero initial state: y_1 = C (Abar x0 + Bbar u_1).
    const auto y = ssm_scan(scalar_discrete(0.5, 1, 1), std::vector<double>{0.0, 0.0},
                            Vector::Constant(1, 4.0));
    CHECK(y[0] == doctest::Approx(2.0));
    CHECK(y[1] == doctest::Approx(1.0));

    CHECK(ssm_scan(scalar_discrete(1, 1, 1), std::vector<double>{}).empty());
    DiscreteSsm bad = scalar_discrete(1, 1, 1);
    bad.C = Matrix::Ones(1, 2);
    CHECK_THROWS_AS(ssm_scan(bad, ones), DimensionError);
}

TEST_CASE("scan matches an independent reference loop") {
    std::mt19937_64 rng(22);
    for (int n : {1, 3, 8}) {
        const DiscreteSsm d = testing::random_discrete(rng, n);
        const auto u = testing::randn_seq(rng, 50);
        CHECK(testing::max_abs_diff(ssm_scan(d, u), testing::reference_scan(d.Abar, d.Bbar, d.C, u)) < 1e-12);
    }
}

TEST_CASE("kernel examples") {
    const auto k = ssm_kernel(scalar_discrete(0.5, 1, 2), 3);
    REQUIRE(k.size() == 3);
    CHECK(k[0] == doctest::Approx(2.0));
    CHECK(k[1] == doctest::Approx(1.0));
    CHECK(k[2] == doctest::Approx(0.5));

    std::mt19937_64 rng(23);
    DiscreteSsm d = testing::random_discrete(rng, 4);
    d.Abar.setZero();
    const auto k0 = ssm_kernel(d, 5);
    CHECK(k0[0] == doctest::Approx((d.C * d.Bbar)(0, 0)));
    for (std::size_t i = 1; i < k0.size(); ++i) CHECK(k0[i] == 0.0);
}

TEST_CASE("conv examples") {
    const std::vector<double> u{2.5, -1.0, 4.0};
    CHECK(ssm_conv(std::vector<double>{1, 0, 0}, u) == u);
    CHECK(ssm_conv(std::vector<double>{1, 1, 1}, std::vector<double>{1, 1, 1}) == std::vector<double>{1, 2, 3});
    CHECK(ssm_conv(std::vector<double>{0.3, 9, -2}, std::vector<double>{0, 0, 0}) == std::vector<double>{0, 0, 0});
    CHECK_THROWS(ssm_conv(std::vector<double>{1, 2}, u));
}

TEST_CASE("recurrent and convolutional modes agree") {
    std::mt19937_64 rng(24);
    const DiscreteSsm small = testing::random_discrete(rng, 4);
    const auto u64 = testing::randn_seq(rng, 64);
    CHECK(testing::max_abs_diff(ssm_scan(small, u64), conv_path(small, u64)) <= 1e-10);

    ContinuousSsm h = hippo_legs(16);
    h.C = randn(rng, 1, 16);
    const DiscreteSsm hd = discretize_bilinear(h, 0.01);
    const auto u128 = testing::randn_seq(rng, 128);
    CHECK(testing::max_abs_diff(ssm_scan(hd, u128), conv_path(hd, u128)) <= 1e-10);

    std::uniform_int_distribution<int> nd(1, 32), ld(1, 256);
    for (int trial = 0; trial < 40; ++trial) {
        const DiscreteSsm d = testing::random_discrete(rng, nd(rng), 0.95);
        const auto u = testing::randn_seq(rng, static_cast<std::size_t>(ld(rng)));
        CHECK(testing::max_abs_diff(ssm_scan(d, u), conv_path(d, u)) <= 1e-10);
    }
}

TEST_CASE("conjugation preserves input-output behaviour") {
    std::mt19937_64 rng(25);
    ContinuousSsm s = testing::random_stable(rng, 4);
    const ContinuousSsm same = conjugate_ssm(s, Matrix::Identity(4, 4));
    CHECK((same.A - s.A).norm() == 0.0);
    CHECK((same.B - s.B).norm() == 0.0);
    CHECK((same.C - s.C).norm() == 0.0);

    const ContinuousSsm two = conjugate_ssm(s, 2.0 * Matrix::Identity(4, 4));
    CHECK((two.A - s.A).norm() < 1e-14);
    CHECK((two.B - 0.5 * s.B).norm() < 1e-14);
    CHECK((two.C - 2.0 * s.C).norm() < 1e-14);

    int checked = 0;
    while (checked < 20) {
        const int n = 2 + checked % 10;
        s = testing::random_stable(rng, n);
        const Matrix v = randn(rng, n, n) + 2.0 * Matrix::Identity(n, n);
        if (condition_number(v) > 1e3) continue;
        ++checked;
        const auto u = testing::randn_seq(rng, 32);
        const auto y0 = ssm_scan(discretize_bilinear(s, 0.1), u);
        const auto y1 = ssm_scan(discretize_bilinear(conjugate_ssm(s, v), 0.1), u);
        CHECK(testing::max_abs_diff(y0, y1) <= 1e-8);
    }
    CHECK_THROWS_AS(conjugate_ssm(s, Matrix::Zero(s.state_size(), s.state_size())), SingularMatrixError);
}

TEST_CASE("discretization cache") {
    ContinuousSsm s = hippo_legs(3);
    s.C = Matrix::Ones(1, 3);
    DiscretizationCache cache(s, 0.1);
    CHECK_FALSE(cache.cached());
    const Matrix first = cache.discrete().Abar;
    CHECK(cache.cached());
    CHECK(first == discretize_bilinear(s, 0.1).Abar);

    cache.set_delta(0.2);
    CHECK_FALSE(cache.cached());
    CHECK(cache.discrete().Abar == discretize_bilinear(s, 0.2).Abar);

    s.A(0, 0) = -3.0;
    cache.set_system(s);
    CHECK_FALSE(cache.cached());
    CHECK(cache.discrete().Abar == discretize_bilinear(s, 0.2).Abar);
}

TEST_CASE("validation of shapes") {
    ContinuousSsm s = hippo_legs(3);
    s.C = Matrix::Ones(1, 3);
    CHECK_NOTHROW(s.validate());
    s.B = Matrix::Ones(2, 1);
    CHECK_THROWS_AS(s.validate(), DimensionError);
}
