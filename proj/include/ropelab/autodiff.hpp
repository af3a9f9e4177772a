#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "ropelab/core.hpp"

namespace ropelab::ad {

// Dense row-major 2D tensor. Everything the model needs is a matrix: a batch
// of feature rows, a weight matrix, a bias row or a 1x1 scalar.
template <typename T>
struct Tensor {
    int rows = 0, cols = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, T(0)) {}
    Tensor(int r, int c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != static_cast<std::size_t>(r) * c)
            throw ShapeError("Tensor: data length does not match shape");
    }

    std::size_t numel() const { return data.size(); }
    T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    T at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(rows, cols);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Var = int;

namespace detail {

template <typename T>
void matmul_accum(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool transpose_a,
                  bool transpose_b) {
    int m = transpose_a ? a.cols : a.rows;
    int k = transpose_a ? a.rows : a.cols;
    int n = transpose_b ? b.rows : b.cols;
    for (int i = 0; i < m; ++i) {
        T* orow = out.data.data() + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = transpose_a ? a.at(p, i) : a.at(i, p);
            if (av == T(0)) continue;
            const T* brow;
            if (!transpose_b) {
                brow = b.data.data() + static_cast<std::size_t>(p) * n;
                for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
            } else {
                for (int j = 0; j < n; ++j) orow[j] += av * b.at(j, p);
            }
        }
    }
}

}  // namespace detail

// Reverse-mode tape. Records every operation whose result depends on a
// gradient-carrying input; backward() walks the record in reverse.
template <typename T>
class Tape {
    enum class Op {
        Input,
        Matmul,
        Add,      // same shape
        AddBias,  // [B,n] + [1,n]
        Mul,      // elementwise, same shape
        Affine,   // a*x + b elementwise, constants
        Concat,   // last axis
        Slice,    // last axis
        Tanh,
        Sigmoid,
        Elu,
        Softplus,
        Exp,
        Rsqrt,
        Sum,
        Mse,
        Embed,
        GaussKl,
    };

    struct Node {
        Op op;
        Var in0 = -1, in1 = -1, in2 = -1, in3 = -1;
        Tensor<T> value;
        bool requires_grad = false;
        T ca = T(0), cb = T(0);        // affine coefficients
        int start = 0, len = 0;        // slice window
        std::vector<int> indices;      // embedding rows
    };

public:
    using value_type = T;

    Var input(Tensor<T> value, bool requires_grad = false) {
        Node n;
        n.op = Op::Input;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    const Tensor<T>& value(Var v) const { return nodes_[v].value; }
    const Tensor<T>& grad(Var v) const { return grads_[v]; }
    std::size_t size() const { return nodes_.size(); }

    Var matmul(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.cols != B.rows) throw ShapeError("matmul: inner dimensions differ");
        Node n = binary(Op::Matmul, a, b, Tensor<T>(A.rows, B.cols));
        detail::matmul_accum(A, B, n.value, false, false);
        return push(std::move(n));
    }

    Var add(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rows == B.rows && A.cols == B.cols) {
            Node n = binary(Op::Add, a, b, A);
            for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] += B.data[i];
            return push(std::move(n));
        }
        if (B.rows == 1 && A.cols == B.cols) {
            Node n = binary(Op::AddBias, a, b, A);
            for (int r = 0; r < A.rows; ++r)
                for (int c = 0; c < A.cols; ++c) n.value.at(r, c) += B.at(0, c);
            return push(std::move(n));
        }
        throw ShapeError("add: incompatible shapes");
    }

    Var mul(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rows != B.rows || A.cols != B.cols) throw ShapeError("mul: shape mismatch");
        Node n = binary(Op::Mul, a, b, A);
        for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] *= B.data[i];
        return push(std::move(n));
    }

    // a*x + b, elementwise with scalar constants
    Var affine(Var x, T a, T b) {
        Node n = unary(Op::Affine, x, val(x));
        n.ca = a;
        n.cb = b;
        for (auto& v : n.value.data) v = a * v + b;
        return push(std::move(n));
    }

    Var concat(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rows != B.rows) throw ShapeError("concat: row counts differ");
        Node n = binary(Op::Concat, a, b, Tensor<T>(A.rows, A.cols + B.cols));
        for (int r = 0; r < A.rows; ++r) {
            for (int c = 0; c < A.cols; ++c) n.value.at(r, c) = A.at(r, c);
            for (int c = 0; c < B.cols; ++c) n.value.at(r, A.cols + c) = B.at(r, c);
        }
        return push(std::move(n));
    }

    Var slice(Var x, int start, int len) {
        const auto& X = val(x);
        if (start < 0 || len < 0 || start + len > X.cols) throw ShapeError("slice: out of range");
        Node n = unary(Op::Slice, x, Tensor<T>(X.rows, len));
        n.start = start;
        n.len = len;
        for (int r = 0; r < X.rows; ++r)
            for (int c = 0; c < len; ++c) n.value.at(r, c) = X.at(r, start + c);
        return push(std::move(n));
    }

    Var tanh(Var x) { return pointwise(Op::Tanh, x, [](T v) { return std::tanh(v); }); }

    Var sigmoid(Var x) {
        return pointwise(Op::Sigmoid, x, [](T v) { return T(1) / (T(1) + std::exp(-v)); });
    }

    Var elu(Var x) {
        return pointwise(Op::Elu, x, [](T v) { return v > T(0) ? v : std::exp(v) - T(1); });
    }

    Var softplus(Var x) {
        return pointwise(Op::Softplus, x, [](T v) {
            // overflow-safe: softplus(v) = max(v, 0) + log1p(exp(-|v|))
            return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
        });
    }

    Var exp(Var x) { return pointwise(Op::Exp, x, [](T v) { return std::exp(v); }); }

    // 1/sqrt(x), defined for x > 0
    Var rsqrt(Var x) {
        return pointwise(Op::Rsqrt, x, [](T v) { return T(1) / std::sqrt(v); });
    }

    Var sum(Var x) {
        Node n = unary(Op::Sum, x, Tensor<T>(1, 1));
        T s = T(0);
        for (T v : val(x).data) s += v;
        n.value.data[0] = s;
        return push(std::move(n));
    }

    Var mean_squared_error(Var pred, Var target) {
        const auto& P = val(pred);
        const auto& Y = val(target);
        if (P.rows != Y.rows || P.cols != Y.cols) throw ShapeError("mse: shape mismatch");
        Node n = binary(Op::Mse, pred, target, Tensor<T>(1, 1));
        T s = T(0);
        for (std::size_t i = 0; i < P.numel(); ++i) {
            T d = P.data[i] - Y.data[i];
            s += d * d;
        }
        n.value.data[0] = s / static_cast<T>(P.numel());
        return push(std::move(n));
    }

    // Selects rows of `table`; gradients flow only to the selected rows.
    Var embedding_lookup(Var table, std::vector<int> indices) {
        const auto& W = val(table);
        for (int i : indices)
            if (i < 0 || i >= W.rows) throw ShapeError("embedding_lookup: index out of range");
        Node n = unary(Op::Embed, table, Tensor<T>(static_cast<int>(indices.size()), W.cols));
        for (std::size_t r = 0; r < indices.size(); ++r)
            for (int c = 0; c < W.cols; ++c) n.value.at(static_cast<int>(r), c) = W.at(indices[r], c);
        n.indices = std::move(indices);
        return push(std::move(n));
    }

    // Sum over dimensions of KL(N(mu1, s1^2) || N(mu2, s2^2)), diagonal.
    Var gaussian_kl(Var mu1, Var s1, Var mu2, Var s2) {
        const auto& M1 = val(mu1);
        const auto& S1 = val(s1);
        const auto& M2 = val(mu2);
        const auto& S2 = val(s2);
        if (M1.rows != S1.rows || M1.cols != S1.cols || M1.rows != M2.rows ||
            M1.cols != M2.cols || M1.rows != S2.rows || M1.cols != S2.cols)
            throw ShapeError("gaussian_kl: shape mismatch");
        for (T v : S1.data)
            if (v <= T(0)) throw DomainError("gaussian_kl: sigma must be positive");
        for (T v : S2.data)
            if (v <= T(0)) throw DomainError("gaussian_kl: sigma must be positive");
        Node n;
        n.op = Op::GaussKl;
        n.in0 = mu1;
        n.in1 = s1;
        n.in2 = mu2;
        n.in3 = s2;
        n.requires_grad = nodes_[mu1].requires_grad || nodes_[s1].requires_grad ||
                          nodes_[mu2].requires_grad || nodes_[s2].requires_grad;
        n.value = Tensor<T>(1, 1);
        T acc = T(0);
        for (std::size_t i = 0; i < M1.numel(); ++i) {
            T d = M1.data[i] - M2.data[i];
            acc += std::log(S2.data[i] / S1.data[i]) +
                   (S1.data[i] * S1.data[i] + d * d) / (T(2) * S2.data[i] * S2.data[i]) - T(0.5);
        }
        n.value.data[0] = acc;
        return push(std::move(n));
    }

    // mu + sigma * noise; noise is a plain input, so no gradient reaches it.
    Var reparameterize(Var mu, Var sigma, Var noise) { return add(mul(sigma, noise), mu); }

    void backward(Var loss) {
        if (val(loss).numel() != 1) throw ShapeError("backward: loss must be scalar");
        grads_.assign(nodes_.size(), Tensor<T>());
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            grads_[i] = Tensor<T>(nodes_[i].value.rows, nodes_[i].value.cols);
        grads_[loss].data[0] = T(1);
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) backprop(i);
    }

private:
    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;

    const Tensor<T>& val(Var v) const { return nodes_[v].value; }

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size()) - 1;
    }

    Node unary(Op op, Var x, Tensor<T> value) {
        Node n;
        n.op = op;
        n.in0 = x;
        n.value = std::move(value);
        n.requires_grad = nodes_[x].requires_grad;
        return n;
    }

    Node binary(Op op, Var a, Var b, Tensor<T> value) {
        Node n;
        n.op = op;
        n.in0 = a;
        n.in1 = b;
        n.value = std::move(value);
        n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
        return n;
    }

    template <typename F>
    Var pointwise(Op op, Var x, F&& f) {
        Node n = unary(op, x, val(x));
        for (auto& v : n.value.data) v = f(v);
        return push(std::move(n));
    }

    bool needs(Var v) const { return v >= 0 && nodes_[v].requires_grad; }

    void backprop(int i) {
        const Node& n = nodes_[i];
        if (!n.requires_grad) return;
        const Tensor<T>& g = grads_[i];
        switch (n.op) {
            case Op::Input:
                break;
            case Op::Matmul: {
                if (needs(n.in0)) detail::matmul_accum(g, val(n.in1), grads_[n.in0], false, true);
                if (needs(n.in1)) detail::matmul_accum(val(n.in0), g, grads_[n.in1], true, false);
                break;
            }
            case Op::Add: {
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k) grads_[n.in0].data[k] += g.data[k];
                if (needs(n.in1))
                    for (std::size_t k = 0; k < g.numel(); ++k) grads_[n.in1].data[k] += g.data[k];
                break;
            }
            case Op::AddBias: {
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k) grads_[n.in0].data[k] += g.data[k];
                if (needs(n.in1))
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < g.cols; ++c) grads_[n.in1].at(0, c) += g.at(r, c);
                break;
            }
            case Op::Mul: {
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k)
                        grads_[n.in0].data[k] += g.data[k] * val(n.in1).data[k];
                if (needs(n.in1))
                    for (std::size_t k = 0; k < g.numel(); ++k)
                        grads_[n.in1].data[k] += g.data[k] * val(n.in0).data[k];
                break;
            }
            case Op::Affine: {
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k)
                        grads_[n.in0].data[k] += g.data[k] * n.ca;
                break;
            }
            case Op::Concat: {
                int ac = val(n.in0).cols;
                if (needs(n.in0))
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < ac; ++c) grads_[n.in0].at(r, c) += g.at(r, c);
                if (needs(n.in1))
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < val(n.in1).cols; ++c)
                            grads_[n.in1].at(r, c) += g.at(r, ac + c);
                break;
            }
            case Op::Slice: {
                if (needs(n.in0))
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < n.len; ++c)
                            grads_[n.in0].at(r, n.start + c) += g.at(r, c);
                break;
            }
            case Op::Tanh: {
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k) {
                        T y = n.value.data[k];
                        grads_[n.in0].data[k] += g.data[k] * (T(1) - y * y);
                    }
                break;
            }
            case Op::Sigmoid: {
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k) {
                        T y = n.value.data[k];
                        grads_[n.in0].data[k] += g.data[k] * y * (T(1) - y);
                    }
                break;
            }
            case Op::Elu: {
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k) {
                        T x = val(n.in0).data[k];
                        grads_[n.in0].data[k] +=
                            g.data[k] * (x > T(0) ? T(1) : n.value.data[k] + T(1));
                    }
                break;
            }
            case Op::Softplus: {
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k) {
                        T x = val(n.in0).data[k];
                        grads_[n.in0].data[k] += g.data[k] / (T(1) + std::exp(-x));
                    }
                break;
            }
            case Op::Exp: {
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k)
                        grads_[n.in0].data[k] += g.data[k] * n.value.data[k];
                break;
            }
            case Op::Rsqrt: {
                // d/dx x^{-1/2} = -x^{-3/2} / 2 = -y^3 / 2
                if (needs(n.in0))
                    for (std::size_t k = 0; k < g.numel(); ++k) {
                        T y = n.value.data[k];
                        grads_[n.in0].data[k] += g.data[k] * T(-0.5) * y * y * y;
                    }
                break;
            }
            case Op::Sum: {
                if (needs(n.in0))
                    for (auto& v : grads_[n.in0].data) v += g.data[0];
                break;
            }
            case Op::Mse: {
                T scale = T(2) * g.data[0] / static_cast<T>(val(n.in0).numel());
                for (std::size_t k = 0; k < val(n.in0).numel(); ++k) {
                    T d = val(n.in0).data[k] - val(n.in1).data[k];
                    if (needs(n.in0)) grads_[n.in0].data[k] += scale * d;
                    if (needs(n.in1)) grads_[n.in1].data[k] -= scale * d;
                }
                break;
            }
            case Op::Embed: {
                if (needs(n.in0))
                    for (std::size_t r = 0; r < n.indices.size(); ++r)
                        for (int c = 0; c < g.cols; ++c)
                            grads_[n.in0].at(n.indices[r], c) += g.at(static_cast<int>(r), c);
                break;
            }
            case Op::GaussKl: {
                T go = g.data[0];
                const auto& M1 = val(n.in0);
                const auto& S1 = val(n.in1);
                const auto& M2 = val(n.in2);
                const auto& S2 = val(n.in3);
                for (std::size_t k = 0; k < M1.numel(); ++k) {
                    T d = M1.data[k] - M2.data[k];
                    T s1 = S1.data[k], s2 = S2.data[k];
                    T inv_v2 = T(1) / (s2 * s2);
                    if (needs(n.in0)) grads_[n.in0].data[k] += go * d * inv_v2;
                    if (needs(n.in2)) grads_[n.in2].data[k] -= go * d * inv_v2;
                    if (needs(n.in1)) grads_[n.in1].data[k] += go * (-T(1) / s1 + s1 * inv_v2);
                    if (needs(n.in3))
                        grads_[n.in3].data[k] +=
                            go * (T(1) / s2 - (s1 * s1 + d * d) / (s2 * s2 * s2));
                }
                break;
            }
        }
    }
};

// ---- GRU cell --------------------------------------------------------------

template <typename T>
struct GruWeights {
    Var w_reset, b_reset;      // [(dx+dh), dh], [1, dh]
    Var w_update, b_update;
    Var w_cand, b_cand;
};

// h' = (1-u) .* tanh(W_n [x, r.*h] + b_n) + u .* h
template <typename T>
Var gru_cell(Tape<T>& tape, Var x, Var h, const GruWeights<T>& w) {
    Var xh = tape.concat(x, h);
    Var r = tape.sigmoid(tape.add(tape.matmul(xh, w.w_reset), w.b_reset));
    Var u = tape.sigmoid(tape.add(tape.matmul(xh, w.w_update), w.b_update));
    Var xrh = tape.concat(x, tape.mul(r, h));
    Var cand = tape.tanh(tape.add(tape.matmul(xrh, w.w_cand), w.b_cand));
    Var keep = tape.mul(u, h);
    Var blend = tape.mul(tape.affine(u, T(-1), T(1)), cand);
    return tape.add(blend, keep);
}

// ---- Adam ------------------------------------------------------------------

template <typename T>
struct AdamMoments {
    std::vector<T> m, v;
};

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamMoments<T>& moments, long t, T lr,
               T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
    if (param.numel() != grad.numel()) throw ShapeError("adam_step: shape mismatch");
    if (moments.m.empty()) {
        moments.m.assign(param.numel(), T(0));
        moments.v.assign(param.numel(), T(0));
    }
    T bc1 = T(1) - std::pow(beta1, static_cast<T>(t));
    T bc2 = T(1) - std::pow(beta2, static_cast<T>(t));
    for (std::size_t i = 0; i < param.numel(); ++i) {
        T g = grad.data[i];
        moments.m[i] = beta1 * moments.m[i] + (T(1) - beta1) * g;
        moments.v[i] = beta2 * moments.v[i] + (T(1) - beta2) * g * g;
        T mhat = moments.m[i] / bc1;
        T vhat = moments.v[i] / bc2;
        param.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

// ---- gradient checker ------------------------------------------------------

// f builds a scalar loss on the given tape from Vars created from `params`;
// it must be callable with both Tape<float> and Tape<double>. The analytic
// f32 gradients are compared against f64 central differences.
template <typename F>
double grad_check(F&& f, const std::vector<Tensor<double>>& params, double h = 1e-3) {
    // analytic path in f32
    Tape<float> tape;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.input(p.template cast<float>(), true));
    Var loss = f(tape, vars);
    tape.backward(loss);

    auto eval = [&](const std::vector<Tensor<double>>& pts) {
        Tape<double> t64;
        std::vector<Var> vs;
        for (const auto& p : pts) vs.push_back(t64.input(p, false));
        return t64.value(f(t64, vs)).data[0];
    };

    double max_rel = 0.0;
    std::vector<Tensor<double>> work = params;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t k = 0; k < params[pi].numel(); ++k) {
            double orig = work[pi].data[k];
            work[pi].data[k] = orig + h;
            double up = eval(work);
            work[pi].data[k] = orig - h;
            double down = eval(work);
            work[pi].data[k] = orig;
            double fd = (up - down) / (2.0 * h);
            double an = static_cast<double>(tape.grad(vars[pi]).data[k]);
            double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace ropelab::ad
