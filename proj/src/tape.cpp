#include "s4cf/tape.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace s4cf::nn {

namespace scalar {

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_derivative(double x) {
    const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace scalar

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::leaf(Matrix value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

Var Tape::push(Matrix value, const std::vector<std::size_t>& parents, BackwardFn backward) {
    Node node;
    node.value = std::move(value);
    for (auto p : parents) node.requires_grad = node.requires_grad || nodes_[p].requires_grad;
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

Matrix Tape::grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.has_grad) return n.grad;
    return Matrix::Zero(n.value.rows(), n.value.cols());
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
        throw DimensionError("tape: adjoint shape does not match node value");
    }
    if (n.has_grad) {
        n.grad += g;
    } else {
        n.grad = g;
        n.has_grad = true;
    }
}

void Tape::zero_grad() {
    for (auto& n : nodes_) {
        n.grad.resize(0, 0);
        n.has_grad = false;
    }
}

void Tape::backward(Var output) {
    if (output.tape != this) throw std::invalid_argument("tape: output belongs to another tape");
    const Matrix& out = nodes_[output.id].value;
    if (out.rows() != 1 || out.cols() != 1) {
        throw DimensionError("tape: backward needs a scalar output");
    }
    zero_grad();
    visit_order_.clear();
    accumulate(output.id, Matrix::Ones(1, 1));
    for (std::size_t i = output.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.backward) continue;
        visit_order_.push_back(i);
        n.backward(*this, i);
    }
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(op) + ": shape mismatch");
    }
}

template <class F, class D>
Var unary(Var a, F f, D dfdx) {
    Tape& t = *a.tape;
    Matrix out = t.value(a).unaryExpr(f);
    const std::size_t ia = a.id;
    return t.push(std::move(out), {ia}, [ia, dfdx](Tape& tp, std::size_t self) {
        const Matrix& x = tp.value(ia);
        const Matrix& y = tp.value(self);
        Matrix g = tp.grad_ref(self);
        for (Eigen::Index j = 0; j < g.cols(); ++j)
            for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) *= dfdx(x(i, j), y(i, j));
        tp.accumulate(ia, g);
    });
}

}  // namespace

Var add(Var a, Var b) {
    Tape& t = *a.tape;
    require_same_shape(t.value(a), t.value(b), "add");
    const auto ia = a.id, ib = b.id;
    return t.push(t.value(a) + t.value(b), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
        tp.accumulate(ia, tp.grad_ref(self));
        tp.accumulate(ib, tp.grad_ref(self));
    });
}

Var sub(Var a, Var b) {
    Tape& t = *a.tape;
    require_same_shape(t.value(a), t.value(b), "sub");
    const auto ia = a.id, ib = b.id;
    return t.push(t.value(a) - t.value(b), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
        tp.accumulate(ia, tp.grad_ref(self));
        tp.accumulate(ib, -tp.grad_ref(self));
    });
}

Var mul(Var a, Var b) {
    Tape& t = *a.tape;
    require_same_shape(t.value(a), t.value(b), "mul");
    const auto ia = a.id, ib = b.id;
    return t.push(t.value(a).cwiseProduct(t.value(b)), {ia, ib},
                  [ia, ib](Tape& tp, std::size_t self) {
                      const Matrix& g = tp.grad_ref(self);
                      if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                      if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                  });
}

Var scale(Var a, double s) {
    Tape& t = *a.tape;
    const auto ia = a.id;
    return t.push(t.value(a) * s, {ia}, [ia, s](Tape& tp, std::size_t self) {
        tp.accumulate(ia, tp.grad_ref(self) * s);
    });
}

Var add_scalar(Var a, double s) {
    Tape& t = *a.tape;
    const auto ia = a.id;
    Matrix out = t.value(a).array() + s;
    return t.push(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
        tp.accumulate(ia, tp.grad_ref(self));
    });
}

Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    if (t.value(a).cols() != t.value(b).rows()) throw DimensionError("matmul: inner dimensions differ");
    const auto ia = a.id, ib = b.id;
    Matrix out = t.value(a) * t.value(b);
    return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_ref(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
        if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
    });
}

Var transpose(Var a) {
    Tape& t = *a.tape;
    const auto ia = a.id;
    Matrix out = t.value(a).transpose();
    return t.push(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
        tp.accumulate(ia, tp.grad_ref(self).transpose());
    });
}

Var add_row(Var a, Var r) {
    Tape& t = *a.tape;
    const Matrix& av = t.value(a);
    const Matrix& rv = t.value(r);
    if (rv.rows() != 1 || rv.cols() != av.cols()) throw DimensionError("add_row: row must be 1 x cols");
    Matrix out = av.rowwise() + rv.row(0);
    const auto ia = a.id, ir = r.id;
    return t.push(std::move(out), {ia, ir}, [ia, ir](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_ref(self);
        tp.accumulate(ia, g);
        if (tp.requires_grad(ir)) tp.accumulate(ir, g.colwise().sum());
    });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
    Tape& t = *a.tape;
    const Matrix& av = t.value(a);
    if (av.size() != rows * cols) throw DimensionError("reshape: element count differs");
    const Eigen::Index in_cols = av.cols();
    Matrix out(rows, cols);
    for (Eigen::Index k = 0; k < av.size(); ++k) out(k / cols, k % cols) = av(k / in_cols, k % in_cols);
    const auto ia = a.id;
    const Eigen::Index in_rows = av.rows();
    return t.push(std::move(out), {ia}, [ia, in_rows, in_cols](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_ref(self);
        const Eigen::Index oc = g.cols();
        Matrix back(in_rows, in_cols);
        for (Eigen::Index k = 0; k < g.size(); ++k) back(k / in_cols, k % in_cols) = g(k / oc, k % oc);
        tp.accumulate(ia, back);
    });
}

Var row(Var a, Eigen::Index i) {
    Tape& t = *a.tape;
    const Matrix& av = t.value(a);
    if (i < 0 || i >= av.rows()) throw DimensionError("row: index out of range");
    const auto ia = a.id;
    const Eigen::Index r = av.rows(), c = av.cols();
    Matrix out = av.row(i);
    return t.push(std::move(out), {ia}, [ia, i, r, c](Tape& tp, std::size_t self) {
        Matrix g = Matrix::Zero(r, c);
        g.row(i) = tp.grad_ref(self);
        tp.accumulate(ia, g);
    });
}

Var col(Var a, Eigen::Index j) {
    Tape& t = *a.tape;
    const Matrix& av = t.value(a);
    if (j < 0 || j >= av.cols()) throw DimensionError("col: index out of range");
    const auto ia = a.id;
    const Eigen::Index r = av.rows(), c = av.cols();
    Matrix out = av.col(j);
    return t.push(std::move(out), {ia}, [ia, j, r, c](Tape& tp, std::size_t self) {
        Matrix g = Matrix::Zero(r, c);
        g.col(j) = tp.grad_ref(self);
        tp.accumulate(ia, g);
    });
}

Var solve(Var m, Var r) {
    Tape& t = *m.tape;
    if (t.value(m).rows() != t.value(r).rows()) throw DimensionError("solve: row mismatch");
    auto lu = std::make_shared<LuFactorization>(t.value(m));
    Matrix x = lu->solve(t.value(r));
    const auto im = m.id, ir = r.id;
    return t.push(std::move(x), {im, ir}, [im, ir, lu](Tape& tp, std::size_t self) {
        // X = M^{-1} R:  dR = M^{-T} dX,  dM = -dR X^T.
        const Matrix dr = lu->solve_transpose(tp.grad_ref(self));
        if (tp.requires_grad(im)) tp.accumulate(im, -dr * tp.value(self).transpose());
        tp.accumulate(ir, dr);
    });
}

Var sigmoid(Var a) {
    return unary(a, [](double x) { return scalar::sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
    return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
    return unary(a, [](double x) { return scalar::gelu(x); },
                 [](double x, double) { return scalar::gelu_derivative(x); });
}

Var log(Var a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
    return unary(
        a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Var sum(Var a) {
    Tape& t = *a.tape;
    const auto ia = a.id;
    const Eigen::Index r = t.value(a).rows(), c = t.value(a).cols();
    Matrix out(1, 1);
    out(0, 0) = t.value(a).sum();
    return t.push(std::move(out), {ia}, [ia, r, c](Tape& tp, std::size_t self) {
        tp.accumulate(ia, Matrix::Constant(r, c, tp.grad_ref(self)(0, 0)));
    });
}

Var mean(Var a) {
    const auto n = static_cast<double>(a.value().size());
    if (n == 0) throw DimensionError("mean: empty input");
    return scale(sum(a), 1.0 / n);
}

Var grad_scale(Var a, double factor) {
    Tape& t = *a.tape;
    const auto ia = a.id;
    Matrix out = t.value(a);
    return t.push(std::move(out), {ia}, [ia, factor](Tape& tp, std::size_t self) {
        tp.accumulate(ia, tp.grad_ref(self) * factor);
    });
}

Var grad_reverse(Var a, double mu) { return grad_scale(a, -mu); }

Var ssm_scan_channels(const std::vector<Var>& abar, const std::vector<Var>& bbar,
                      const std::vector<Var>& c, Var u) {
    Tape& t = *u.tape;
    const Matrix& uv = t.value(u);
    const Eigen::Index length = uv.rows();
    const Eigen::Index channels = uv.cols();
    if (static_cast<Eigen::Index>(abar.size()) != channels ||
        static_cast<Eigen::Index>(bbar.size()) != channels ||
        static_cast<Eigen::Index>(c.size()) != channels) {
        throw DimensionError("ssm_scan_channels: one system per input column required");
    }

    // states[h] column k holds x_k for channel h.
    auto states = std::make_shared<std::vector<Matrix>>(channels);
    Matrix y(length, channels);
    std::vector<std::size_t> parents;
    parents.reserve(3 * channels + 1);
    for (Eigen::Index h = 0; h < channels; ++h) {
        const Matrix& A = t.value(abar[h]);
        const Matrix& B = t.value(bbar[h]);
        const Matrix& C = t.value(c[h]);
        const Eigen::Index n = A.rows();
        if (A.cols() != n || B.rows() != n || B.cols() != 1 || C.rows() != 1 || C.cols() != n) {
            throw DimensionError("ssm_scan_channels: inconsistent system shapes");
        }
        Matrix& X = (*states)[h];
        X.resize(n, length);
        Vector x = Vector::Zero(n);
        for (Eigen::Index k = 0; k < length; ++k) {
            X.col(k).noalias() = A * x;
            X.col(k) += B.col(0) * uv(k, h);
            x = X.col(k);
            y(k, h) = C.row(0).dot(x);
        }
        parents.push_back(abar[h].id);
        parents.push_back(bbar[h].id);
        parents.push_back(c[h].id);
    }
    parents.push_back(u.id);

    std::vector<std::size_t> ia, ib, ic;
    for (Eigen::Index h = 0; h < channels; ++h) {
        ia.push_back(abar[h].id);
        ib.push_back(bbar[h].id);
        ic.push_back(c[h].id);
    }
    const std::size_t iu = u.id;

    return t.push(std::move(y), parents,
                  [states, ia, ib, ic, iu](Tape& tp, std::size_t self) {
                      const Matrix& dy = tp.grad_ref(self);
                      const Matrix& uv = tp.value(iu);
                      const Eigen::Index length = dy.rows();
                      const Eigen::Index channels = dy.cols();
                      const bool need_u = tp.requires_grad(iu);
                      Matrix du = need_u ? Matrix::Zero(length, channels) : Matrix();
                      for (Eigen::Index h = 0; h < channels; ++h) {
                          const Matrix& A = tp.value(ia[h]);
                          const Matrix& B = tp.value(ib[h]);
                          const Matrix& C = tp.value(ic[h]);
                          const Matrix& X = (*states)[h];
                          const Eigen::Index n = A.rows();
                          Matrix dA = Matrix::Zero(n, n);
                          Vector dB = Vector::Zero(n);
                          Vector dC = Vector::Zero(n);
                          Vector adj = Vector::Zero(n);
                          Vector tmp(n);
                          for (Eigen::Index k = length; k-- > 0;) {
                              // adj_k = C^T dy_k + A^T adj_{k+1}
                              tmp.noalias() = A.transpose() * adj;
                              adj = tmp + C.row(0).transpose() * dy(k, h);
                              dC += X.col(k) * dy(k, h);
                              if (k > 0) dA.noalias() += adj * X.col(k - 1).transpose();
                              dB += adj * uv(k, h);
                              if (need_u) du(k, h) = B.col(0).dot(adj);
                          }
                          tp.accumulate(ia[h], dA);
                          tp.accumulate(ib[h], dB);
                          tp.accumulate(ic[h], dC.transpose());
                      }
                      if (need_u) tp.accumulate(iu, du);
                  });
}

}  // namespace s4cf::nn
