#pragma once

// Reverse-mode differentiation over a flat tape of matrix-valued nodes.
//
// Each op appends a node holding its value and a closure that pushes the
// node's adjoint to its inputs. backward() seeds a 1x1 output with 1 and
// walks the tape in reverse. Leaves created with requires_grad = false
// (tokens, positional encoding, the correction C) never receive an adjoint.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "condtok/attention.hpp"
#include "condtok/error.hpp"
#include "condtok/matrix.hpp"

namespace condtok {

struct Var {
    std::size_t id = 0;
};

class Tape {
public:
    Var leaf(Matrix value, bool requires_grad) {
        return push(std::move(value), requires_grad, nullptr);
    }

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Adjoint of v after backward(); zeros if v never received one.
    Matrix grad(Var v) const {
        const Node& n = nodes_[v.id];
        return n.has_grad ? n.grad : Matrix(n.value.rows(), n.value.cols());
    }

    void backward(Var output) {
        const Matrix& out = value(output);
        if (out.rows() != 1 || out.cols() != 1) {
            throw DimensionError("backward: output must be 1x1, got " + out.shape_string());
        }
        accumulate(output.id, Matrix{{1.0}});
        for (std::size_t i = output.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.has_grad || !n.backprop) continue;
            n.backprop(*this, n.grad);
        }
    }

    // ----- ops ---------------------------------------------------------------

    Var matmul(Var a, Var b) {
        return binary(a, b, condtok::matmul(value(a), value(b)), [a, b](Tape& t, const Matrix& g) {
            if (t.requires_grad(a)) t.accumulate(a.id, condtok::matmul(g, condtok::transpose(t.value(b))));
            if (t.requires_grad(b)) t.accumulate(b.id, condtok::matmul(condtok::transpose(t.value(a)), g));
        });
    }

    Var transpose(Var a) {
        return unary(a, condtok::transpose(value(a)),
                     [a](Tape& t, const Matrix& g) { t.accumulate(a.id, condtok::transpose(g)); });
    }

    Var add(Var a, Var b) {
        return binary(a, b, value(a) + value(b), [a, b](Tape& t, const Matrix& g) {
            if (t.requires_grad(a)) t.accumulate(a.id, g);
            if (t.requires_grad(b)) t.accumulate(b.id, g);
        });
    }

    Var scale(Var a, double s) {
        return unary(a, value(a) * s, [a, s](Tape& t, const Matrix& g) { t.accumulate(a.id, g * s); });
    }

    /// a + row broadcast over every row of a.
    Var add_row(Var a, Var row) {
        Matrix out = PlainOps{}.add_row(value(a), value(row));
        return binary(a, row, std::move(out), [a, row](Tape& t, const Matrix& g) {
            if (t.requires_grad(a)) t.accumulate(a.id, g);
            if (t.requires_grad(row)) {
                Matrix sums(1, g.cols());
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) sums(0, j) += g(i, j);
                t.accumulate(row.id, sums);
            }
        });
    }

    Var softmax_rows(Var a) {
        Matrix y = condtok::softmax_rows(value(a));
        const std::size_t self = nodes_.size();
        return unary(a, std::move(y), [a, self](Tape& t, const Matrix& g) {
            const Matrix& y = t.nodes_[self].value;
            Matrix dx(y.rows(), y.cols());
            for (std::size_t i = 0; i < y.rows(); ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
                for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
            }
            t.accumulate(a.id, dx);
        });
    }

    Var gelu(Var a) {
        return unary(a, PlainOps{}.gelu(value(a)), [a](Tape& t, const Matrix& g) {
            const Matrix& x = t.value(a);
            Matrix dx = g;
            auto d = dx.data();
            auto xs = x.data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] *= gelu_derivative(xs[i]);
            t.accumulate(a.id, dx);
        });
    }

    Var layer_norm(Var x, Var gamma, Var beta) {
        const Matrix& xv = value(x);
        const std::size_t rows = xv.rows(), cols = xv.cols();
        const double n = static_cast<double>(cols);
        Matrix xhat(rows, cols);
        std::vector<double> inv(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            double mean = 0.0;
            for (double v : xv.row(i)) mean += v;
            mean /= n;
            double var = 0.0;
            for (double v : xv.row(i)) var += (v - mean) * (v - mean);
            var /= n;
            inv[i] = 1.0 / std::sqrt(var + kLayerNormEps);
            for (std::size_t j = 0; j < cols; ++j) xhat(i, j) = (xv(i, j) - mean) * inv[i];
        }
        Matrix out = PlainOps{}.layer_norm(xv, value(gamma), value(beta));
        const std::size_t self = nodes_.size();
        Var result = push(std::move(out), requires_grad(x) || requires_grad(gamma) || requires_grad(beta), nullptr);
        nodes_[self].backprop = [x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv), n](Tape& t,
                                                                                                  const Matrix& g) {
            const Matrix& gam = t.value(gamma);
            const std::size_t rows = g.rows(), cols = g.cols();
            if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                Matrix dg(1, cols), db(1, cols);
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < cols; ++j) {
                        dg(0, j) += g(i, j) * xhat(i, j);
                        db(0, j) += g(i, j);
                    }
                }
                if (t.requires_grad(gamma)) t.accumulate(gamma.id, dg);
                if (t.requires_grad(beta)) t.accumulate(beta.id, db);
            }
            if (t.requires_grad(x)) {
                Matrix dx(rows, cols);
                for (std::size_t i = 0; i < rows; ++i) {
                    double sum = 0.0, sum_xhat = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double dxh = g(i, j) * gam(0, j);
                        sum += dxh;
                        sum_xhat += dxh * xhat(i, j);
                    }
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double dxh = g(i, j) * gam(0, j);
                        dx(i, j) = inv[i] / n * (n * dxh - sum - xhat(i, j) * sum_xhat);
                    }
                }
                t.accumulate(x.id, dx);
            }
        };
        return result;
    }

    Var hconcat(const std::vector<Var>& parts) {
        std::vector<Matrix> values;
        values.reserve(parts.size());
        bool rg = false;
        for (Var p : parts) {
            values.push_back(value(p));
            rg = rg || requires_grad(p);
        }
        return push(condtok::hconcat(values), rg, [parts](Tape& t, const Matrix& g) {
            std::size_t offset = 0;
            for (Var p : parts) {
                const std::size_t w = t.value(p).cols();
                if (t.requires_grad(p)) t.accumulate(p.id, column_block(g, offset, w));
                offset += w;
            }
        });
    }

    /// Mean squared error against a constant target, as a 1x1 node.
    Var mse(Var a, const Matrix& target) {
        const Matrix& av = value(a);
        av.require_same_shape(target, "mse");
        double acc = 0.0;
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double d = av.data()[i] - target.data()[i];
            acc += d * d;
        }
        const double n = static_cast<double>(av.size());
        Matrix out{{acc / n}};
        out.check_finite("mse");
        return unary(a, std::move(out), [a, target, n](Tape& t, const Matrix& g) {
            Matrix diff = t.value(a) - target;
            t.accumulate(a.id, diff * (2.0 * g(0, 0) / n));
        });
    }

private:
    using Backprop = std::function<void(Tape&, const Matrix&)>;

    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        bool has_grad = false;
        Backprop backprop;
    };

    Var push(Matrix value, bool requires_grad, Backprop fn) {
        nodes_.push_back({std::move(value), Matrix(), requires_grad, false, requires_grad ? std::move(fn) : nullptr});
        return {nodes_.size() - 1};
    }

    Var unary(Var a, Matrix out, Backprop fn) { return push(std::move(out), requires_grad(a), std::move(fn)); }

    Var binary(Var a, Var b, Matrix out, Backprop fn) {
        return push(std::move(out), requires_grad(a) || requires_grad(b), std::move(fn));
    }

    void accumulate(std::size_t id, const Matrix& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (!n.has_grad) {
            n.grad = g;
            n.has_grad = true;
        } else {
            n.grad += g;
        }
    }

    std::vector<Node> nodes_;
};

/// Backend for the generic forward pass that records onto a Tape.
struct TapeOps {
    using Value = Var;
    static constexpr bool traceable = false;

    Tape& tape;

    Var constant(const Matrix& m) const { return tape.leaf(m, false); }
    std::size_t cols(Var v) const { return tape.value(v).cols(); }
    Var matmul(Var a, Var b) const { return tape.matmul(a, b); }
    Var transpose(Var a) const { return tape.transpose(a); }
    Var add(Var a, Var b) const { return tape.add(a, b); }
    Var scale(Var a, double s) const { return tape.scale(a, s); }
    Var add_row(Var a, Var r) const { return tape.add_row(a, r); }
    Var softmax_rows(Var a) const { return tape.softmax_rows(a); }
    Var gelu(Var a) const { return tape.gelu(a); }
    Var layer_norm(Var x, Var g, Var b) const { return tape.layer_norm(x, g, b); }
    Var hconcat(const std::vector<Var>& parts) const { return tape.hconcat(parts); }
};

/// Registers every parameter of `params` as a trainable leaf.
inline BasicParameters<Var> record_parameters(Tape& tape, const Parameters& params) {
    BasicParameters<Var> out;
    out.embedding = tape.leaf(params.embedding, true);
    for (const auto& layer : params.layers) {
        BasicLayer<Var> lv;
        for (const auto& h : layer.heads)
            lv.heads.push_back({tape.leaf(h.wq, true), tape.leaf(h.wk, true), tape.leaf(h.wv, true)});
        lv.ff = {tape.leaf(layer.ff.w1, true), tape.leaf(layer.ff.b1, true), tape.leaf(layer.ff.w2, true),
                 tape.leaf(layer.ff.b2, true)};
        if (layer.norm_attn)
            lv.norm_attn = BasicLayerNorm<Var>{tape.leaf(layer.norm_attn->gamma, true), tape.leaf(layer.norm_attn->beta, true)};
        if (layer.norm_ff)
            lv.norm_ff = BasicLayerNorm<Var>{tape.leaf(layer.norm_ff->gamma, true), tape.leaf(layer.norm_ff->beta, true)};
        out.layers.push_back(std::move(lv));
    }
    return out;
}

}  // namespace condtok
