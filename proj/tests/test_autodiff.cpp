#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "condtok/autodiff.hpp"

using condtok::Matrix;
using condtok::Tape;
using condtok::Var;

namespace {

// Central-difference gradient of a scalar function of one matrix.
Matrix numeric_grad(const std::function<double(const Matrix&)>& f, Matrix x, double h = 1e-6) {
    Matrix g(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x.data()[i];
        x.data()[i] = saved + h;
        const double up = f(x);
        x.data()[i] = saved - h;
        const double down = f(x);
        x.data()[i] = saved;
        g.data()[i] = (up - down) / (2 * h);
    }
    return g;
}

double weighted_sum(const Matrix& y, const Matrix& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * w.data()[i];
    return s;
}

// Checks d/dx <w, op(x)> from the tape against finite differences. The inner
// product is taped as n * (mse(y, y0 - w/2) - mse(y, y0)) = <w, y> + const.
void check_unary(const std::function<Var(Tape&, Var)>& op, const std::function<Matrix(const Matrix&)>& plain,
                 const Matrix& x0, double tol = 1e-7) {
    const Matrix y0 = plain(x0);
    condtok::Rng rng(77);
    const Matrix w = Matrix::random_uniform(y0.rows(), y0.cols(), -1, 1, rng);

    Tape tape;
    const Var x = tape.leaf(x0, true);
    const Var y = op(tape, x);
    const Var diff = tape.add(tape.mse(y, y0 - w * 0.5), tape.scale(tape.mse(y, y0), -1.0));
    tape.backward(tape.scale(diff, static_cast<double>(y0.size())));

    const Matrix analytic = tape.grad(x);
    const Matrix numeric = numeric_grad([&](const Matrix& xx) { return weighted_sum(plain(xx), w); }, x0);
    EXPECT_LE(condtok::max_abs(analytic - numeric), tol * std::max(1.0, condtok::max_abs(numeric)));
}

}  // namespace

TEST(Tape, ScalarModelGradient) {
    // loss = (w x - y)^2, gradient 2 x (w x - y).
    const double w0 = 0.7, x0 = 1.5, y0 = 2.0;
    Tape tape;
    const Var w = tape.leaf(Matrix{{w0}}, true);
    const Var x = tape.leaf(Matrix{{x0}}, false);
    const Var loss = tape.mse(tape.matmul(w, x), Matrix{{y0}});
    tape.backward(loss);
    EXPECT_NEAR(tape.grad(w)(0, 0), 2 * x0 * (w0 * x0 - y0), 1e-15);
    EXPECT_EQ(tape.grad(x)(0, 0), 0.0);
}

TEST(Tape, ZeroModelZeroTargetZeroGradient) {
    Tape tape;
    const Var w = tape.leaf(Matrix(2, 3), true);
    const Var x = tape.leaf(Matrix::identity(2), false);
    const Var loss = tape.mse(tape.matmul(x, w), Matrix(2, 3));
    tape.backward(loss);
    EXPECT_EQ(tape.grad(w), Matrix(2, 3));
}

TEST(Tape, ConstantLeavesGetNoAdjoint) {
    Tape tape;
    const Var c = tape.leaf(Matrix{{1, 2}}, false);
    const Var p = tape.leaf(Matrix{{3, 4}}, true);
    const Var loss = tape.mse(tape.add(c, p), Matrix{{0, 0}});
    tape.backward(loss);
    EXPECT_EQ(tape.grad(c), Matrix(1, 2));
    EXPECT_FALSE(tape.requires_grad(c));
    EXPECT_NEAR(tape.grad(p)(0, 0), 4.0, 1e-15);  // 2 * (1 + 3) / 2
    EXPECT_NEAR(tape.grad(p)(0, 1), 6.0, 1e-15);
}

TEST(Tape, BackwardNeedsScalar) {
    Tape tape;
    const Var a = tape.leaf(Matrix(2, 2), true);
    EXPECT_THROW(tape.backward(a), condtok::DimensionError);
}

TEST(Tape, SharedInputAccumulates) {
    // loss = mse(a + a, 0) = 4 a^2 for a scalar; gradient 8 a.
    Tape tape;
    const Var a = tape.leaf(Matrix{{1.5}}, true);
    tape.backward(tape.mse(tape.add(a, a), Matrix{{0}}));
    EXPECT_NEAR(tape.grad(a)(0, 0), 12.0, 1e-15);
}

class OpGradients : public ::testing::Test {
protected:
    condtok::Rng rng{2718};
    Matrix rand(std::size_t r, std::size_t c) { return Matrix::random_uniform(r, c, -1, 1, rng); }
};

TEST_F(OpGradients, Matmul) {
    const Matrix b = rand(3, 2);
    check_unary([&](Tape& t, Var x) { return t.matmul(x, t.leaf(b, false)); },
                [&](const Matrix& x) { return condtok::matmul(x, b); }, rand(4, 3));
    const Matrix a = rand(2, 4);
    check_unary([&](Tape& t, Var x) { return t.matmul(t.leaf(a, false), x); },
                [&](const Matrix& x) { return condtok::matmul(a, x); }, rand(4, 3));
}

TEST_F(OpGradients, Transpose) {
    check_unary([](Tape& t, Var x) { return t.transpose(x); }, [](const Matrix& x) { return condtok::transpose(x); },
                rand(3, 2));
}

TEST_F(OpGradients, Scale) {
    check_unary([](Tape& t, Var x) { return t.scale(x, -2.5); }, [](const Matrix& x) { return x * -2.5; },
                rand(2, 2));
}

TEST_F(OpGradients, AddRow) {
    const Matrix base = rand(4, 3);
    check_unary([&](Tape& t, Var r) { return t.add_row(t.leaf(base, false), r); },
                [&](const Matrix& r) { return condtok::PlainOps{}.add_row(base, r); }, rand(1, 3));
}

TEST_F(OpGradients, Softmax) {
    check_unary([](Tape& t, Var x) { return t.softmax_rows(x); },
                [](const Matrix& x) { return condtok::softmax_rows(x); }, rand(3, 4) * 3.0);
}

TEST_F(OpGradients, Gelu) {
    check_unary([](Tape& t, Var x) { return t.gelu(x); }, [](const Matrix& x) { return condtok::PlainOps{}.gelu(x); },
                rand(3, 3) * 2.0);
}

TEST_F(OpGradients, LayerNorm) {
    const Matrix gamma = rand(1, 5), beta = rand(1, 5);
    check_unary([&](Tape& t, Var x) { return t.layer_norm(x, t.leaf(gamma, false), t.leaf(beta, false)); },
                [&](const Matrix& x) { return condtok::PlainOps{}.layer_norm(x, gamma, beta); }, rand(3, 5), 1e-6);
    const Matrix x = rand(3, 5);
    check_unary([&](Tape& t, Var g) { return t.layer_norm(t.leaf(x, false), g, t.leaf(beta, false)); },
                [&](const Matrix& g) { return condtok::PlainOps{}.layer_norm(x, g, beta); }, gamma);
    check_unary([&](Tape& t, Var b) { return t.layer_norm(t.leaf(x, false), t.leaf(gamma, false), b); },
                [&](const Matrix& b) { return condtok::PlainOps{}.layer_norm(x, gamma, b); }, beta);
}

TEST_F(OpGradients, Hconcat) {
    const Matrix right = rand(3, 2);
    check_unary([&](Tape& t, Var x) { return t.hconcat({x, t.leaf(right, false), x}); },
                [&](const Matrix& x) {
                    const std::vector<Matrix> parts{x, right, x};
                    return condtok::hconcat(parts);
                },
                rand(3, 1));
}

TEST(Tape, MseValue) {
    Tape tape;
    const Var a = tape.leaf(Matrix{{1, 2}, {3, 4}}, true);
    const Var l = tape.mse(a, Matrix{{0, 0}, {0, 0}});
    EXPECT_DOUBLE_EQ(tape.value(l)(0, 0), 30.0 / 4.0);
    EXPECT_THROW(tape.mse(a, Matrix(1, 2)), condtok::DimensionError);
}
