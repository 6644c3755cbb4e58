#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "far/error.hpp"
#include "far/tensor.hpp"

namespace far {

// Reverse-mode autodiff tape. Records one node per differentiable op in
// topological order; backward() walks the list once in reverse. Variables
// are plain integer handles into the tape's value table.
//
// Grad propagation is pruned at record time: a node stores a backward rule
// only if at least one operand (transitively) depends on a leaf created
// with requires_grad = true. This keeps backward cheap when only a small
// parameter group is being trained.
template <typename T>
class TapeT {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    // ---- leaves -------------------------------------------------------

    Var leaf(TensorT<T> value, bool requires_grad) {
        values_.push_back(std::move(value));
        tracked_.push_back(requires_grad ? 1 : 0);
        return Var{static_cast<int>(values_.size()) - 1};
    }

    Var constant(TensorT<T> value) { return leaf(std::move(value), false); }

    Var scalar_const(T v) { return constant(TensorT<T>::scalar(v)); }

    // Value copy that blocks gradient flow.
    Var detach(Var v) { return constant(value(v)); }

    const TensorT<T>& value(Var v) const { return values_[static_cast<std::size_t>(v.id)]; }

    bool tracked(Var v) const { return tracked_[static_cast<std::size_t>(v.id)] != 0; }

    int num_vars() const { return static_cast<int>(values_.size()); }

    // ---- linear algebra -------------------------------------------------

    Var matmul(Var a, Var b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0)) {
            throw DimensionError("matmul: incompatible shapes " +
                                 Tensor::shape_str(A.shape) + " x " + Tensor::shape_str(B.shape));
        }
        int m = A.dim(0), k = A.dim(1), n = B.dim(1);
        TensorT<T> out = TensorT<T>::zeros({m, n});
        for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
                T av = A.at2(i, p);
                for (int j = 0; j < n; ++j) out.at2(i, j) += av * B.at2(p, j);
            }
        }
        Var o = result(std::move(out), {a, b});
        if (tracked(o)) {
            record(o, [a, b, o, m, k, n](TapeT& t, Grads& g) {
                const auto& G = g.of(o);
                const auto& A2 = t.value(a);
                const auto& B2 = t.value(b);
                if (t.tracked(a)) {
                    auto& dA = g.acc(a, A2.shape);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) {
                            T gv = G.at2(i, j);
                            for (int p = 0; p < k; ++p) dA.at2(i, p) += gv * B2.at2(p, j);
                        }
                }
                if (t.tracked(b)) {
                    auto& dB = g.acc(b, B2.shape);
                    for (int i = 0; i < m; ++i)
                        for (int p = 0; p < k; ++p) {
                            T av = A2.at2(i, p);
                            for (int j = 0; j < n; ++j) dB.at2(p, j) += av * G.at2(i, j);
                        }
                }
            });
        }
        return o;
    }

    // y = W x (+ b). x: [in], W: [out, in], b: [out] or invalid Var.
    Var linear(Var x, Var w, Var b = Var{}) {
        const auto& X = value(x);
        const auto& W = value(w);
        if (X.ndim() != 1 || W.ndim() != 2 || W.dim(1) != X.dim(0)) {
            throw DimensionError("linear: incompatible shapes");
        }
        int out_n = W.dim(0), in_n = W.dim(1);
        TensorT<T> out = TensorT<T>::zeros({out_n});
        for (int i = 0; i < out_n; ++i) {
            T s = 0;
            for (int j = 0; j < in_n; ++j) s += W.at2(i, j) * X.data[static_cast<std::size_t>(j)];
            out.data[static_cast<std::size_t>(i)] = s;
        }
        if (b.valid()) {
            const auto& B = value(b);
            if (B.ndim() != 1 || B.dim(0) != out_n) throw DimensionError("linear: bad bias shape");
            for (int i = 0; i < out_n; ++i) out.data[static_cast<std::size_t>(i)] += B.data[static_cast<std::size_t>(i)];
        }
        std::vector<Var> deps{x, w};
        if (b.valid()) deps.push_back(b);
        Var o = result(std::move(out), deps);
        if (tracked(o)) {
            record(o, [x, w, b, o, out_n, in_n](TapeT& t, Grads& g) {
                const auto& G = g.of(o);
                const auto& X2 = t.value(x);
                const auto& W2 = t.value(w);
                if (t.tracked(x)) {
                    auto& dX = g.acc(x, X2.shape);
                    for (int i = 0; i < out_n; ++i) {
                        T gv = G.data[static_cast<std::size_t>(i)];
                        for (int j = 0; j < in_n; ++j) dX.data[static_cast<std::size_t>(j)] += gv * W2.at2(i, j);
                    }
                }
                if (t.tracked(w)) {
                    auto& dW = g.acc(w, W2.shape);
                    for (int i = 0; i < out_n; ++i) {
                        T gv = G.data[static_cast<std::size_t>(i)];
                        for (int j = 0; j < in_n; ++j) dW.at2(i, j) += gv * X2.data[static_cast<std::size_t>(j)];
                    }
                }
                if (b.valid() && t.tracked(b)) {
                    auto& dB = g.acc(b, t.value(b).shape);
                    for (int i = 0; i < out_n; ++i) dB.data[static_cast<std::size_t>(i)] += G.data[static_cast<std::size_t>(i)];
                }
            });
        }
        return o;
    }

    // Cross-correlation (no kernel flip). x: [cin, h, w], k: [cout, cin, kk, kk].
    Var conv2d(Var x, Var k, int padding) {
        const auto& X = value(x);
        const auto& K = value(k);
        if (X.ndim() != 3 || K.ndim() != 4 || K.dim(1) != X.dim(0) || K.dim(2) != K.dim(3)) {
            throw DimensionError("conv2d: incompatible shapes");
        }
        int kk = K.dim(2);
        if (kk % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
        int cin = X.dim(0), h = X.dim(1), w = X.dim(2), cout = K.dim(0);
        int oh = h + 2 * padding - kk + 1;
        int ow = w + 2 * padding - kk + 1;
        if (oh < 1 || ow < 1) throw DimensionError("conv2d: output dimension < 1");
        TensorT<T> out = TensorT<T>::zeros({cout, oh, ow});
        conv_forward(X.data.data(), K.data.data(), out.data.data(), cin, h, w, cout, kk, padding, oh, ow);
        Var o = result(std::move(out), {x, k});
        if (tracked(o)) {
            record(o, [x, k, o, cin, h, w, cout, kk, padding, oh, ow](TapeT& t, Grads& g) {
                const auto& G = g.of(o);
                const auto& X2 = t.value(x);
                const auto& K2 = t.value(k);
                if (t.tracked(x)) {
                    auto& dX = g.acc(x, X2.shape);
                    conv_backward_input(G.data.data(), K2.data.data(), dX.data.data(),
                                        cin, h, w, cout, kk, padding, oh, ow);
                }
                if (t.tracked(k)) {
                    auto& dK = g.acc(k, K2.shape);
                    conv_backward_kernel(G.data.data(), X2.data.data(), dK.data.data(),
                                         cin, h, w, cout, kk, padding, oh, ow);
                }
            });
        }
        return o;
    }

    // ---- structural ops -------------------------------------------------

    Var add_channel_bias(Var x, Var b) {
        const auto& X = value(x);
        const auto& B = value(b);
        if (X.ndim() != 3 || B.ndim() != 1 || B.dim(0) != X.dim(0)) {
            throw DimensionError("add_channel_bias: incompatible shapes");
        }
        int c = X.dim(0), hw = X.dim(1) * X.dim(2);
        TensorT<T> out = X;
        for (int ch = 0; ch < c; ++ch) {
            T bv = B.data[static_cast<std::size_t>(ch)];
            for (int p = 0; p < hw; ++p) out.data[static_cast<std::size_t>(ch * hw + p)] += bv;
        }
        Var o = result(std::move(out), {x, b});
        if (tracked(o)) {
            record(o, [x, b, o, c, hw](TapeT& t, Grads& g) {
                const auto& G = g.of(o);
                if (t.tracked(x)) {
                    auto& dX = g.acc(x, t.value(x).shape);
                    for (std::size_t i = 0; i < G.data.size(); ++i) dX.data[i] += G.data[i];
                }
                if (t.tracked(b)) {
                    auto& dB = g.acc(b, t.value(b).shape);
                    for (int ch = 0; ch < c; ++ch) {
                        T s = 0;
                        for (int p = 0; p < hw; ++p) s += G.data[static_cast<std::size_t>(ch * hw + p)];
                        dB.data[static_cast<std::size_t>(ch)] += s;
                    }
                }
            });
        }
        return o;
    }

    Var global_avg_pool(Var x) {
        const auto& X = value(x);
        if (X.ndim() != 3) throw DimensionError("global_avg_pool: expects c x h x w");
        int c = X.dim(0), hw = X.dim(1) * X.dim(2);
        if (hw < 1) throw DimensionError("global_avg_pool: empty spatial extent");
        TensorT<T> out = TensorT<T>::zeros({c});
        T inv = T(1) / static_cast<T>(hw);
        for (int ch = 0; ch < c; ++ch) {
            T s = 0;
            for (int p = 0; p < hw; ++p) s += X.data[static_cast<std::size_t>(ch * hw + p)];
            out.data[static_cast<std::size_t>(ch)] = s * inv;
        }
        Var o = result(std::move(out), {x});
        if (tracked(o)) {
            record(o, [x, o, c, hw, inv](TapeT& t, Grads& g) {
                if (!t.tracked(x)) return;
                const auto& G = g.of(o);
                auto& dX = g.acc(x, t.value(x).shape);
                for (int ch = 0; ch < c; ++ch) {
                    T gv = G.data[static_cast<std::size_t>(ch)] * inv;
                    for (int p = 0; p < hw; ++p) dX.data[static_cast<std::size_t>(ch * hw + p)] += gv;
                }
            });
        }
        return o;
    }

    // Plane 0: per-position mean over channels; plane 1: per-position max.
    // Max ties break toward the lowest channel index.
    Var channel_pool(Var x) {
        const auto& X = value(x);
        if (X.ndim() != 3 || X.dim(0) < 1) throw DimensionError("channel_pool: expects c x h x w, c >= 1");
        int c = X.dim(0), h = X.dim(1), w = X.dim(2), hw = h * w;
        TensorT<T> out = TensorT<T>::zeros({2, h, w});
        std::vector<int> argmax(static_cast<std::size_t>(hw), 0);
        T inv = T(1) / static_cast<T>(c);
        for (int p = 0; p < hw; ++p) {
            T s = 0, best = X.data[static_cast<std::size_t>(p)];
            int bi = 0;
            for (int ch = 0; ch < c; ++ch) {
                T v = X.data[static_cast<std::size_t>(ch * hw + p)];
                s += v;
                if (v > best) {
                    best = v;
                    bi = ch;
                }
            }
            out.data[static_cast<std::size_t>(p)] = s * inv;
            out.data[static_cast<std::size_t>(hw + p)] = best;
            argmax[static_cast<std::size_t>(p)] = bi;
        }
        Var o = result(std::move(out), {x});
        if (tracked(o)) {
            record(o, [x, o, c, hw, inv, argmax = std::move(argmax)](TapeT& t, Grads& g) {
                if (!t.tracked(x)) return;
                const auto& G = g.of(o);
                auto& dX = g.acc(x, t.value(x).shape);
                for (int p = 0; p < hw; ++p) {
                    T gm = G.data[static_cast<std::size_t>(p)] * inv;
                    for (int ch = 0; ch < c; ++ch) dX.data[static_cast<std::size_t>(ch * hw + p)] += gm;
                    dX.data[static_cast<std::size_t>(argmax[static_cast<std::size_t>(p)] * hw + p)] +=
                        G.data[static_cast<std::size_t>(hw + p)];
                }
            });
        }
        return o;
    }

    // 2x2 average pooling, stride 2. Requires even spatial dims.
    Var avg_pool2(Var x) {
        const auto& X = value(x);
        if (X.ndim() != 3 || X.dim(1) % 2 != 0 || X.dim(2) % 2 != 0) {
            throw DimensionError("avg_pool2: expects c x h x w with even h, w");
        }
        int c = X.dim(0), h = X.dim(1), w = X.dim(2), oh = h / 2, ow = w / 2;
        TensorT<T> out = TensorT<T>::zeros({c, oh, ow});
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    out.at3(ch, i, j) = (X.at3(ch, 2 * i, 2 * j) + X.at3(ch, 2 * i, 2 * j + 1) +
                                         X.at3(ch, 2 * i + 1, 2 * j) + X.at3(ch, 2 * i + 1, 2 * j + 1)) *
                                        T(0.25);
                }
        Var o = result(std::move(out), {x});
        if (tracked(o)) {
            record(o, [x, o, c, oh, ow](TapeT& t, Grads& g) {
                if (!t.tracked(x)) return;
                const auto& G = g.of(o);
                auto& dX = g.acc(x, t.value(x).shape);
                for (int ch = 0; ch < c; ++ch)
                    for (int i = 0; i < oh; ++i)
                        for (int j = 0; j < ow; ++j) {
                            T gv = G.at3(ch, i, j) * T(0.25);
                            dX.at3(ch, 2 * i, 2 * j) += gv;
                            dX.at3(ch, 2 * i, 2 * j + 1) += gv;
                            dX.at3(ch, 2 * i + 1, 2 * j) += gv;
                            dX.at3(ch, 2 * i + 1, 2 * j + 1) += gv;
                        }
            });
        }
        return o;
    }

    // x[c,h,w] scaled per channel by a[c].
    Var scale_channels(Var x, Var a) {
        const auto& X = value(x);
        const auto& A = value(a);
        if (X.ndim() != 3 || A.ndim() != 1 || A.dim(0) != X.dim(0)) {
            throw DimensionError("scale_channels: incompatible shapes");
        }
        int c = X.dim(0), hw = X.dim(1) * X.dim(2);
        TensorT<T> out = X;
        for (int ch = 0; ch < c; ++ch) {
            T av = A.data[static_cast<std::size_t>(ch)];
            for (int p = 0; p < hw; ++p) out.data[static_cast<std::size_t>(ch * hw + p)] *= av;
        }
        Var o = result(std::move(out), {x, a});
        if (tracked(o)) {
            record(o, [x, a, o, c, hw](TapeT& t, Grads& g) {
                const auto& G = g.of(o);
                const auto& X2 = t.value(x);
                const auto& A2 = t.value(a);
                if (t.tracked(x)) {
                    auto& dX = g.acc(x, X2.shape);
                    for (int ch = 0; ch < c; ++ch) {
                        T av = A2.data[static_cast<std::size_t>(ch)];
                        for (int p = 0; p < hw; ++p)
                            dX.data[static_cast<std::size_t>(ch * hw + p)] += av * G.data[static_cast<std::size_t>(ch * hw + p)];
                    }
                }
                if (t.tracked(a)) {
                    auto& dA = g.acc(a, A2.shape);
                    for (int ch = 0; ch < c; ++ch) {
                        T s = 0;
                        for (int p = 0; p < hw; ++p)
                            s += G.data[static_cast<std::size_t>(ch * hw + p)] * X2.data[static_cast<std::size_t>(ch * hw + p)];
                        dA.data[static_cast<std::size_t>(ch)] += s;
                    }
                }
            });
        }
        return o;
    }

    // x[c,h,w] scaled per spatial position by s[h,w] (or [1,h,w]).
    Var scale_spatial(Var x, Var s) {
        const auto& X = value(x);
        const auto& S = value(s);
        int sh, sw;
        if (S.ndim() == 2) {
            sh = S.dim(0);
            sw = S.dim(1);
        } else if (S.ndim() == 3 && S.dim(0) == 1) {
            sh = S.dim(1);
            sw = S.dim(2);
        } else {
            throw DimensionError("scale_spatial: map must be h x w or 1 x h x w");
        }
        if (X.ndim() != 3 || X.dim(1) != sh || X.dim(2) != sw) {
            throw DimensionError("scale_spatial: incompatible shapes");
        }
        int c = X.dim(0), hw = sh * sw;
        TensorT<T> out = X;
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p)
                out.data[static_cast<std::size_t>(ch * hw + p)] *= S.data[static_cast<std::size_t>(p)];
        Var o = result(std::move(out), {x, s});
        if (tracked(o)) {
            record(o, [x, s, o, c, hw](TapeT& t, Grads& g) {
                const auto& G = g.of(o);
                const auto& X2 = t.value(x);
                const auto& S2 = t.value(s);
                if (t.tracked(x)) {
                    auto& dX = g.acc(x, X2.shape);
                    for (int ch = 0; ch < c; ++ch)
                        for (int p = 0; p < hw; ++p)
                            dX.data[static_cast<std::size_t>(ch * hw + p)] +=
                                S2.data[static_cast<std::size_t>(p)] * G.data[static_cast<std::size_t>(ch * hw + p)];
                }
                if (t.tracked(s)) {
                    auto& dS = g.acc(s, S2.shape);
                    for (int ch = 0; ch < c; ++ch)
                        for (int p = 0; p < hw; ++p)
                            dS.data[static_cast<std::size_t>(p)] +=
                                G.data[static_cast<std::size_t>(ch * hw + p)] * X2.data[static_cast<std::size_t>(ch * hw + p)];
                }
            });
        }
        return o;
    }

    // ---- elementwise ------------------------------------------------------

    Var relu(Var x) {
        return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                     [](T v, T) { return v > T(0) ? T(1) : T(0); });
    }

    Var sigmoid(Var x) {
        return unary(x, "sigmoid",
                     [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                     [](T, T y) { return y * (T(1) - y); });
    }

    // Overflow-safe: max(x, 0) + log1p(exp(-|x|)).
    Var softplus(Var x) {
        return unary(x, "softplus",
                     [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
                     [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
    }

    Var exp_op(Var x) {
        return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
    }

    Var log_op(Var x) {
        const auto& X = value(x);
        for (T v : X.data)
            if (!(v > T(0))) throw DomainError("log: non-positive input");
        return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
    }

    Var sqrt_op(Var x) {
        const auto& X = value(x);
        for (T v : X.data)
            if (v < T(0)) throw DomainError("sqrt: negative input");
        return unary(x, "sqrt", [](T v) { return std::sqrt(v); },
                     [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
    }

    Var abs_op(Var x) {
        return unary(x, "abs", [](T v) { return std::abs(v); },
                     [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
    }

    Var add(Var a, Var b) {
        return binary(a, b, "add", [](T u, T v) { return u + v; },
                      [](T, T) { return T(1); }, [](T, T) { return T(1); });
    }

    Var sub(Var a, Var b) {
        return binary(a, b, "sub", [](T u, T v) { return u - v; },
                      [](T, T) { return T(1); }, [](T, T) { return T(-1); });
    }

    Var mul(Var a, Var b) {
        return binary(a, b, "mul", [](T u, T v) { return u * v; },
                      [](T, T v) { return v; }, [](T u, T) { return u; });
    }

    Var scale(Var x, T c) {
        return unary(x, "scale", [c](T v) { return c * v; }, [c](T, T) { return c; });
    }

    Var add_scalar(Var x, T c) {
        return unary(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
    }

    // ---- reductions and probability ops ------------------------------------

    Var sum(Var x) {
        const auto& X = value(x);
        T s = 0;
        for (T v : X.data) s += v;
        Var o = result(TensorT<T>::scalar(s), {x});
        if (tracked(o)) {
            record(o, [x, o](TapeT& t, Grads& g) {
                if (!t.tracked(x)) return;
                T gv = g.of(o).data[0];
                auto& dX = g.acc(x, t.value(x).shape);
                for (auto& d : dX.data) d += gv;
            });
        }
        return o;
    }

    Var mean_all(Var x) { return scale(sum(x), T(1) / static_cast<T>(value(x).size())); }

    // Max-subtraction stabilized softmax over a 1-D logit vector.
    Var softmax(Var logits) {
        const auto& Z = value(logits);
        if (Z.ndim() != 1 || Z.dim(0) < 1) throw DimensionError("softmax: expects non-empty vector");
        int n = Z.dim(0);
        T zmax = *std::max_element(Z.data.begin(), Z.data.end());
        TensorT<T> out = TensorT<T>::zeros({n});
        T denom = 0;
        for (int i = 0; i < n; ++i) {
            T e = std::exp(Z.data[static_cast<std::size_t>(i)] - zmax);
            out.data[static_cast<std::size_t>(i)] = e;
            denom += e;
        }
        for (auto& v : out.data) v /= denom;
        Var o = result(std::move(out), {logits});
        if (tracked(o)) {
            record(o, [logits, o, n](TapeT& t, Grads& g) {
                if (!t.tracked(logits)) return;
                const auto& G = g.of(o);
                const auto& Y = t.value(o);
                T dot = 0;
                for (int i = 0; i < n; ++i) dot += G.data[static_cast<std::size_t>(i)] * Y.data[static_cast<std::size_t>(i)];
                auto& dZ = g.acc(logits, t.value(logits).shape);
                for (int i = 0; i < n; ++i)
                    dZ.data[static_cast<std::size_t>(i)] +=
                        Y.data[static_cast<std::size_t>(i)] * (G.data[static_cast<std::size_t>(i)] - dot);
            });
        }
        return o;
    }

    // Shannon entropy of a probability vector; 0 log 0 handled by clamping
    // probabilities at 1e-12. Contract-checks the input distribution.
    Var entropy(Var probs) {
        const auto& P = value(probs);
        if (P.ndim() != 1 || P.dim(0) < 1) throw DimensionError("entropy: expects non-empty vector");
        T s = 0;
        for (T v : P.data) {
            if (v < T(-1e-6)) throw ContractError("entropy: negative probability component");
            s += v;
        }
        if (std::abs(static_cast<double>(s) - 1.0) > 1e-4) throw ContractError("entropy: probabilities do not sum to 1");
        const T clamp = T(1e-12);
        T e = 0;
        for (T v : P.data) {
            T pc = std::max(v, clamp);
            e -= v * std::log(pc);
        }
        Var o = result(TensorT<T>::scalar(e), {probs});
        if (tracked(o)) {
            record(o, [probs, o, clamp](TapeT& t, Grads& g) {
                if (!t.tracked(probs)) return;
                T gv = g.of(o).data[0];
                const auto& P2 = t.value(probs);
                auto& dP = g.acc(probs, P2.shape);
                for (std::size_t i = 0; i < P2.data.size(); ++i) {
                    T pc = std::max(P2.data[i], clamp);
                    dP.data[i] += gv * (-(std::log(pc) + T(1)));
                }
            });
        }
        return o;
    }

    // -log softmax(logits)[label], via log-sum-exp.
    Var cross_entropy(Var logits, int label) {
        const auto& Z = value(logits);
        if (Z.ndim() != 1) throw DimensionError("cross_entropy: expects logit vector");
        int n = Z.dim(0);
        if (label < 0 || label >= n) throw ContractError("cross_entropy: label out of range");
        T zmax = *std::max_element(Z.data.begin(), Z.data.end());
        T denom = 0;
        for (T v : Z.data) denom += std::exp(v - zmax);
        T loss = std::log(denom) + zmax - Z.data[static_cast<std::size_t>(label)];
        Var o = result(TensorT<T>::scalar(loss), {logits});
        if (tracked(o)) {
            record(o, [logits, o, label, n, zmax, denom](TapeT& t, Grads& g) {
                if (!t.tracked(logits)) return;
                T gv = g.of(o).data[0];
                const auto& Z2 = t.value(logits);
                auto& dZ = g.acc(logits, Z2.shape);
                for (int i = 0; i < n; ++i) {
                    T p = std::exp(Z2.data[static_cast<std::size_t>(i)] - zmax) / denom;
                    dZ.data[static_cast<std::size_t>(i)] += gv * (p - (i == label ? T(1) : T(0)));
                }
            });
        }
        return o;
    }

    // ---- backward ---------------------------------------------------------

    struct Grads {
        std::vector<TensorT<T>> g;

        bool has(Var v) const {
            return static_cast<std::size_t>(v.id) < g.size() && !g[static_cast<std::size_t>(v.id)].data.empty();
        }
        const TensorT<T>& of(Var v) const { return g[static_cast<std::size_t>(v.id)]; }
        TensorT<T>& acc(Var v, const std::vector<int>& shape) {
            auto& t = g[static_cast<std::size_t>(v.id)];
            if (t.data.empty()) t = TensorT<T>::zeros(shape);
            return t;
        }
        // Gradient of a variable; zeros if it never received a contribution.
        TensorT<T> get(Var v, const TapeT& tape) const {
            if (has(v)) return of(v);
            return TensorT<T>::zeros(tape.value(v).shape);
        }
    };

    Grads backward(Var root) const {
        if (value(root).size() != 1) throw ContractError("backward: root must be scalar-valued");
        Grads grads;
        grads.g.resize(values_.size());
        grads.acc(root, value(root).shape).data[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!grads.has(Var{it->out})) continue;
            it->back(const_cast<TapeT&>(*this), grads);
        }
        return grads;
    }

private:
    struct Node {
        int out;
        std::function<void(TapeT&, Grads&)> back;
    };

    std::vector<TensorT<T>> values_;
    std::vector<char> tracked_;
    std::vector<Node> nodes_;

    Var result(TensorT<T> value, const std::vector<Var>& deps) {
        bool tr = false;
        for (Var d : deps) tr = tr || tracked(d);
        values_.push_back(std::move(value));
        tracked_.push_back(tr ? 1 : 0);
        return Var{static_cast<int>(values_.size()) - 1};
    }

    void record(Var out, std::function<void(TapeT&, Grads&)> back) {
        nodes_.push_back(Node{out.id, std::move(back)});
    }

    template <typename F, typename D>
    Var unary(Var x, const char*, F fwd, D dfdx) {
        const auto& X = value(x);
        TensorT<T> out = X;
        for (auto& v : out.data) v = fwd(v);
        Var o = result(std::move(out), {x});
        if (tracked(o)) {
            record(o, [x, o, dfdx](TapeT& t, Grads& g) {
                if (!t.tracked(x)) return;
                const auto& G = g.of(o);
                const auto& X2 = t.value(x);
                const auto& Y2 = t.value(o);
                auto& dX = g.acc(x, X2.shape);
                for (std::size_t i = 0; i < X2.data.size(); ++i) dX.data[i] += G.data[i] * dfdx(X2.data[i], Y2.data[i]);
            });
        }
        return o;
    }

    template <typename F, typename DA, typename DB>
    Var binary(Var a, Var b, const char* name, F fwd, DA dfda, DB dfdb) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (!A.same_shape(B)) {
            throw DimensionError(std::string(name) + ": shape mismatch " +
                                 Tensor::shape_str(A.shape) + " vs " + Tensor::shape_str(B.shape));
        }
        TensorT<T> out = A;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = fwd(A.data[i], B.data[i]);
        Var o = result(std::move(out), {a, b});
        if (tracked(o)) {
            record(o, [a, b, o, dfda, dfdb](TapeT& t, Grads& g) {
                const auto& G = g.of(o);
                const auto& A2 = t.value(a);
                const auto& B2 = t.value(b);
                if (t.tracked(a)) {
                    auto& dA = g.acc(a, A2.shape);
                    for (std::size_t i = 0; i < G.data.size(); ++i) dA.data[i] += G.data[i] * dfda(A2.data[i], B2.data[i]);
                }
                if (t.tracked(b)) {
                    auto& dB = g.acc(b, B2.shape);
                    for (std::size_t i = 0; i < G.data.size(); ++i) dB.data[i] += G.data[i] * dfdb(A2.data[i], B2.data[i]);
                }
            });
        }
        return o;
    }

    // Hot loops kept as flat-pointer kernels so the compiler can vectorize
    // the contiguous inner dimension.
    static void conv_forward(const T* x, const T* k, T* out, int cin, int h, int w,
                             int cout, int kk, int pad, int oh, int ow) {
        for (int co = 0; co < cout; ++co) {
            T* o = out + static_cast<std::size_t>(co) * oh * ow;
            for (int ci = 0; ci < cin; ++ci) {
                const T* xc = x + static_cast<std::size_t>(ci) * h * w;
                const T* kc = k + (static_cast<std::size_t>(co) * cin + ci) * kk * kk;
                for (int ky = 0; ky < kk; ++ky) {
                    for (int kx = 0; kx < kk; ++kx) {
                        T kv = kc[ky * kk + kx];
                        if (kv == T(0)) continue;
                        for (int oy = 0; oy < oh; ++oy) {
                            int iy = oy + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            int x0 = std::max(0, pad - kx);
                            int x1 = std::min(ow, w + pad - kx);
                            const T* xr = xc + iy * w + (x0 + kx - pad);
                            T* orow = o + oy * ow + x0;
                            for (int ox = 0; ox < x1 - x0; ++ox) orow[ox] += kv * xr[ox];
                        }
                    }
                }
            }
        }
    }

    static void conv_backward_input(const T* gout, const T* k, T* dx, int cin, int h, int w,
                                    int cout, int kk, int pad, int oh, int ow) {
        for (int co = 0; co < cout; ++co) {
            const T* g = gout + static_cast<std::size_t>(co) * oh * ow;
            for (int ci = 0; ci < cin; ++ci) {
                T* dxc = dx + static_cast<std::size_t>(ci) * h * w;
                const T* kc = k + (static_cast<std::size_t>(co) * cin + ci) * kk * kk;
                for (int ky = 0; ky < kk; ++ky) {
                    for (int kx = 0; kx < kk; ++kx) {
                        T kv = kc[ky * kk + kx];
                        if (kv == T(0)) continue;
                        for (int oy = 0; oy < oh; ++oy) {
                            int iy = oy + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            int x0 = std::max(0, pad - kx);
                            int x1 = std::min(ow, w + pad - kx);
                            T* dxr = dxc + iy * w + (x0 + kx - pad);
                            const T* grow = g + oy * ow + x0;
                            for (int ox = 0; ox < x1 - x0; ++ox) dxr[ox] += kv * grow[ox];
                        }
                    }
                }
            }
        }
    }

    static void conv_backward_kernel(const T* gout, const T* x, T* dk, int cin, int h, int w,
                                     int cout, int kk, int pad, int oh, int ow) {
        for (int co = 0; co < cout; ++co) {
            const T* g = gout + static_cast<std::size_t>(co) * oh * ow;
            for (int ci = 0; ci < cin; ++ci) {
                const T* xc = x + static_cast<std::size_t>(ci) * h * w;
                T* dkc = dk + (static_cast<std::size_t>(co) * cin + ci) * kk * kk;
                for (int ky = 0; ky < kk; ++ky) {
                    for (int kx = 0; kx < kk; ++kx) {
                        T s = 0;
                        for (int oy = 0; oy < oh; ++oy) {
                            int iy = oy + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            int x0 = std::max(0, pad - kx);
                            int x1 = std::min(ow, w + pad - kx);
                            const T* xr = xc + iy * w + (x0 + kx - pad);
                            const T* grow = g + oy * ow + x0;
                            for (int ox = 0; ox < x1 - x0; ++ox) s += grow[ox] * xr[ox];
                        }
                        dkc[ky * kk + kx] += s;
                    }
                }
            }
        }
    }
};

using Tape = TapeT<float>;

}  // namespace far
