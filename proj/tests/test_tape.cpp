#include "doctest.h"
#include "support.hpp"

#include "s4cf/tape.hpp"

#include <functional>

using namespace s4cf;
using namespace s4cf::nn;
using testing::randn;

namespace {

Matrix scalar_m(double x) { return Matrix::Constant(1, 1, x); }

// Central differences of f over every entry of every leaf value, compared with
// the tape adjoints. `build` creates the graph from leaf values and returns the
// scalar output; it is re-run for each perturbation.
struct FdResult {
    double worst = 0.0;
    std::size_t checked = 0;
};

FdResult fd_check(std::vector<Matrix> leaves,
                  const std::function<Var(Tape&, const std::vector<Var>&)>& build, double h = 1e-5) {
    auto eval = [&](const std::vector<Matrix>& vals) {
        Tape t;
        std::vector<Var> v;
        for (const auto& m : vals) v.push_back(t.leaf(m));
        return build(t, v).scalar();
    };
    Tape t;
    std::vector<Var> v;
    for (const auto& m : leaves) v.push_back(t.leaf(m));
    t.backward(build(t, v));

    FdResult r;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        const Matrix g = t.grad(v[k]);
        for (Eigen::Index i = 0; i < leaves[k].size(); ++i) {
            auto plus = leaves, minus = leaves;
            plus[k].data()[i] += h;
            minus[k].data()[i] -= h;
            const double fd = (eval(plus) - eval(minus)) / (2 * h);
            const double an = g.data()[i];
            const double err = std::abs(fd - an) / std::max(1e-6, std::max(std::abs(fd), std::abs(an)));
            if (std::abs(fd - an) > 1e-6) r.worst = std::max(r.worst, err);
            ++r.checked;
        }
    }
    return r;
}

}  // namespace

TEST_CASE("square at three") {
    Tape t;
    Var x = t.leaf(scalar_m(3.0));
    t.backward(square(x));
    CHECK(t.grad(x)(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("sigmoid of a product") {
    Tape t;
    Var x = t.leaf(scalar_m(1.0)), y = t.leaf(scalar_m(0.0));
    t.backward(sigmoid(mul(x, y)));
    CHECK(t.grad(x)(0, 0) == doctest::Approx(0.0));
    CHECK(t.grad(y)(0, 0) == doctest::Approx(0.25));
}

TEST_CASE("non-scalar outputs are rejected") {
    Tape t;
    Var x = t.leaf(Matrix::Ones(2, 2));
    CHECK_THROWS_AS(t.backward(x * 2.0), DimensionError);
}

TEST_CASE("constants receive no gradient") {
    Tape t;
    Var c = t.constant(scalar_m(2.0));
    Var x = t.leaf(scalar_m(5.0));
    t.backward(mul(c, x));
    CHECK(t.grad(x)(0, 0) == doctest::Approx(2.0));
    CHECK_FALSE(t.has_grad(c));
    CHECK(t.grad(c)(0, 0) == 0.0);
}

TEST_CASE("fan-out accumulates adjoints") {
    Tape t;
    Var x = t.leaf(scalar_m(1.5));
    Var y = add(mul(x, x), scale(x, 3.0));
    t.backward(y);
    CHECK(t.grad(x)(0, 0) == doctest::Approx(2 * 1.5 + 3.0));
}

TEST_CASE("backward visits nodes in exact reverse creation order") {
    Tape t;
    Var a = t.leaf(Matrix::Ones(2, 3));
    Var b = t.leaf(Matrix::Ones(3, 1));
    Var c = matmul(a, b);
    Var d = tanh(c);
    Var e = add(d, c);
    Var f = sum(e);
    t.backward(f);
    const auto& order = t.last_visit_order();
    REQUIRE_FALSE(order.empty());
    CHECK(order.front() == f.id);
    for (std::size_t i = 1; i < order.size(); ++i) CHECK(order[i] < order[i - 1]);
}

TEST_CASE("gradient reversal") {
    for (double mu : {0.0, 0.5, 2.0}) {
        Tape t;
        const Matrix xv = Matrix::Constant(2, 2, 0.7);
        Var x = t.leaf(xv);
        Var r = grad_reverse(x, mu);
        CHECK(r.value() == xv);
        Var w = t.constant((Matrix(2, 2) << 1, 2, 3, 4).finished());
        t.backward(sum(mul(r, w)));
        const Matrix g = t.grad(x);
        CHECK(g(0, 0) == doctest::Approx(-mu * 1));
        CHECK(g(1, 1) == doctest::Approx(-mu * 4));
        if (mu == 0.0) CHECK(g.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("elementary operations match finite differences") {
    std::mt19937_64 rng(31);
    const Matrix a = randn(rng, 3, 4), b = randn(rng, 3, 4), m = randn(rng, 4, 2);
    const Matrix pos = randn(rng, 3, 4).cwiseAbs().array() + 0.5;
    Matrix sq = randn(rng, 3, 3) + 3 * Matrix::Identity(3, 3);
    const Matrix rhs = randn(rng, 3, 2);
    const Matrix rowv = randn(rng, 1, 4);

    using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;
    const std::vector<std::pair<const char*, Builder>> cases = {
        {"add", [](Tape&, const std::vector<Var>& v) { return sum(square(add(v[0], v[1]))); }},
        {"sub", [](Tape&, const std::vector<Var>& v) { return sum(square(sub(v[0], v[1]))); }},
        {"mul", [](Tape&, const std::vector<Var>& v) { return sum(mul(v[0], v[1])); }},
        {"matmul", [](Tape&, const std::vector<Var>& v) { return sum(tanh(matmul(v[0], v[2]))); }},
        {"transpose", [](Tape&, const std::vector<Var>& v) { return sum(square(matmul(transpose(v[2]), transpose(v[0])))); }},
        {"sigmoid", [](Tape&, const std::vector<Var>& v) { return mean(sigmoid(v[0])); }},
        {"relu", [](Tape&, const std::vector<Var>& v) { return sum(mul(relu(v[0]), v[1])); }},
        {"gelu", [](Tape&, const std::vector<Var>& v) { return sum(gelu(v[0])); }},
        {"log", [](Tape&, const std::vector<Var>& v) { return sum(log(add_scalar(square(v[0]), 0.5))); }},
        {"clamp", [](Tape&, const std::vector<Var>& v) { return sum(mul(clamp(v[0], -0.3, 0.3), v[1])); }},
        {"reshape", [](Tape&, const std::vector<Var>& v) { return sum(matmul(reshape(v[0], 4, 3), v[0])); }},
        {"row_col", [](Tape&, const std::vector<Var>& v) { return sum(matmul(col(v[0], 1), row(v[1], 2))); }},
        {"add_row", [](Tape&, const std::vector<Var>& v) { return sum(square(add_row(v[0], v[3]))); }},
        {"grad_scale", [](Tape&, const std::vector<Var>& v) { return sum(square(grad_scale(v[0], 1.0))); }},
    };
    for (const auto& [name, build] : cases) {
        INFO(name);
        const FdResult r = fd_check({a, b, m, rowv}, build);
        CHECK(r.worst <= 1e-4);
    }

    INFO("solve");
    const FdResult rs = fd_check({sq, rhs}, [](Tape&, const std::vector<Var>& v) {
        return sum(square(solve(v[0], v[1])));
    });
    CHECK(rs.worst <= 1e-4);
    (void)pos;
}

TEST_CASE("three-layer MLP gradients") {
    std::mt19937_64 rng(32);
    const Matrix x = randn(rng, 5, 3);
    const Matrix y = randn(rng, 5, 1);
    std::vector<Matrix> params = {randn(rng, 3, 8, 0.5), randn(rng, 1, 8, 0.1), randn(rng, 8, 8, 0.4),
                                  randn(rng, 1, 8, 0.1), randn(rng, 8, 1, 0.4), randn(rng, 1, 1, 0.1)};
    const FdResult r = fd_check(params, [&](Tape& t, const std::vector<Var>& p) {
        Var h = t.constant(x);
        h = tanh(add_row(matmul(h, p[0]), p[1]));
        h = gelu(add_row(matmul(h, p[2]), p[3]));
        Var out = add_row(matmul(h, p[4]), p[5]);
        return mean(square(sub(out, t.constant(y))));
    });
    CHECK(r.checked == 3 * 8 + 8 + 64 + 8 + 8 + 1);
    CHECK(r.worst <= 1e-4);
}

TEST_CASE("fused channel scan matches finite differences") {
    std::mt19937_64 rng(33);
    const int h = 3, n = 3, len = 6;
    std::vector<Matrix> leaves;
    for (int c = 0; c < h; ++c) {
        leaves.push_back(testing::random_discrete(rng, n, 0.8).Abar);
        leaves.push_back(randn(rng, n, 1));
        leaves.push_back(randn(rng, 1, n));
    }
    leaves.push_back(randn(rng, len, h));
    const Matrix w = randn(rng, len, h);
    const FdResult r = fd_check(leaves, [&](Tape& t, const std::vector<Var>& v) {
        std::vector<Var> a, b, c;
        for (int k = 0; k < h; ++k) {
            a.push_back(v[3 * k]);
            b.push_back(v[3 * k + 1]);
            c.push_back(v[3 * k + 2]);
        }
        return sum(mul(tanh(ssm_scan_channels(a, b, c, v.back())), t.constant(w)));
    });
    CHECK(r.worst <= 1e-4);

    // Forward values agree with the single-channel scan.
    Tape t;
    std::vector<Var> a, b, c;
    for (int k = 0; k < h; ++k) {
        a.push_back(t.leaf(leaves[3 * k]));
        b.push_back(t.leaf(leaves[3 * k + 1]));
        c.push_back(t.leaf(leaves[3 * k + 2]));
    }
    const Matrix out = ssm_scan_channels(a, b, c, t.leaf(leaves.back())).value();
    for (int k = 0; k < h; ++k) {
        const Matrix uk = leaves.back().col(k);
        const auto ref = testing::reference_scan(leaves[3 * k], leaves[3 * k + 1], leaves[3 * k + 2],
                                                 std::vector<double>(uk.data(), uk.data() + len));
        for (int i = 0; i < len; ++i) CHECK(out(i, k) == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-12));
    }
}

TEST_CASE("random graphs up to ten thousand nodes") {
    std::mt19937_64 rng(34);
    std::uniform_int_distribution<int> pick_op(0, 7);
    for (std::size_t target : {50u, 500u, 10000u}) {
        const int leaves = 6;
        std::vector<Matrix> init;
        for (int i = 0; i < leaves; ++i) init.push_back(randn(rng, 2, 2, 0.5));
        // Fix the random structure once so every re-evaluation builds the same graph.
        std::vector<std::array<std::size_t, 3>> plan;
        {
            std::mt19937_64 prng(target);
            std::size_t count = leaves;
            while (count < target) {
                std::uniform_int_distribution<std::size_t> pick(count > 40 ? count - 40 : 0, count - 1);
                plan.push_back({static_cast<std::size_t>(pick_op(prng)), pick(prng), pick(prng)});
                ++count;
            }
        }
        auto build = [&](Tape&, const std::vector<Var>& v) {
            std::vector<Var> nodes(v.begin(), v.end());
            for (const auto& [op, i, j] : plan) {
                const Var x = nodes[i], y = nodes[j];
                switch (op) {
                    case 0: nodes.push_back(scale(add(x, y), 0.5)); break;
                    case 1: nodes.push_back(scale(sub(x, y), 0.5)); break;
                    case 2: nodes.push_back(tanh(mul(x, y))); break;
                    case 3: nodes.push_back(scale(matmul(x, y), 0.5)); break;
                    case 4: nodes.push_back(sigmoid(x)); break;
                    case 5: nodes.push_back(tanh(x)); break;
                    case 6: nodes.push_back(transpose(x)); break;
                    default: nodes.push_back(gelu(x)); break;
                }
            }
            Var acc = sum(nodes.back());
            return add(acc, scale(sum(nodes[nodes.size() / 2]), 0.1));
        };
        INFO("nodes " << target);
        const FdResult r = fd_check(init, build);
        CHECK(r.worst <= 1e-4);
    }
}
