// Reverse-mode differentiation over dense matrices.
//
// A Tape records every operation in creation order, which is a topological
// order; backward() walks it in exact reverse. Values are Eigen matrices, so a
// scalar is a 1x1 node. A Tape is single-threaded.
#pragma once

#include "s4cf/linalg.hpp"

#include <cstddef>
#include <functional>
#include <vector>

namespace s4cf::nn {

class Tape;

namespace scalar {
double sigmoid(double x);
double gelu(double x);
double gelu_derivative(double x);
}  // namespace scalar

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Var leaf(Matrix value, bool requires_grad = true);
    Var constant(Matrix value) { return leaf(std::move(value), false); }

    /// Appends an interior node; it requires grad iff any parent does.
    Var push(Matrix value, const std::vector<std::size_t>& parents, BackwardFn backward);

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient of the last backward() output w.r.t. this node (zeros if none).
    Matrix grad(Var v) const;
    bool has_grad(Var v) const { return nodes_[v.id].has_grad; }
    const Matrix& grad_ref(std::size_t id) const { return nodes_[id].grad; }
    bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

    /// Adds `g` into the adjoint of node `id` if that node requires grad.
    void accumulate(std::size_t id, const Matrix& g);

    /// Seeds d(output)/d(output) = 1 and propagates. Throws DimensionError for
    /// a non-scalar output.
    void backward(Var output);
    void zero_grad();

    std::size_t size() const { return nodes_.size(); }

    /// Node ids visited by the most recent backward(), in visiting order.
    const std::vector<std::size_t>& last_visit_order() const { return visit_order_; }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool has_grad = false;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::size_t> visit_order_;
};

// Elementwise and linear-algebra primitives.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var matmul(Var a, Var b);
Var transpose(Var a);
/// a (L x H) plus a 1 x H row broadcast over rows.
Var add_row(Var a, Var row);
/// Row-major reshape.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var row(Var a, Eigen::Index i);
Var col(Var a, Eigen::Index j);
/// X = M^{-1} R via partial-pivot LU.
Var solve(Var m, Var r);

// Nonlinearities.
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
/// tanh approximation of GELU.
Var gelu(Var a);
Var log(Var a);
Var square(Var a);
/// Clamp; gradient is zero where the clamp is active.
Var clamp(Var a, double lo, double hi);

// Reductions.
Var sum(Var a);
Var mean(Var a);

/// Identity forward; upstream adjoint multiplied by `factor`.
Var grad_scale(Var a, double factor);
/// Gradient reversal: identity forward, adjoint multiplied by -mu.
Var grad_reverse(Var a, double mu);

/// Runs H independent discrete SSMs over the columns of u (L x H).
/// abar[h] is N x N, bbar[h] is N x 1, c[h] is 1 x N; returns L x H.
Var ssm_scan_channels(const std::vector<Var>& abar, const std::vector<Var>& bbar,
                      const std::vector<Var>& c, Var u);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace s4cf::nn
