#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "far/finite_diff.hpp"
#include "far/rng.hpp"
#include "far/tape.hpp"
#include "far/tensor.hpp"

using far::ContractError;
using far::DimensionError;
using far::DomainError;
using far::Tensor;
using far::TensorT;

namespace {

TensorT<double> random_tensor(std::vector<int> shape, far::Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = TensorT<double>::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Runs `build` in 32-bit with autodiff and checks the gradients of every
// leaf against 64-bit central finite differences of the same graph.
template <typename Builder>
far::FdReport check_grads(const std::vector<TensorT<double>>& params, Builder build,
                          double step = 1e-3, double tol = 1e-3) {
    far::TapeT<float> tf;
    std::vector<far::TapeT<float>::Var> vars;
    for (const auto& p : params) vars.push_back(tf.leaf(p.cast<float>(), true));
    auto root = build(tf, vars);
    auto grads = tf.backward(root);
    std::vector<TensorT<float>> g;
    for (auto v : vars) g.push_back(grads.get(v, tf));

    std::function<double(const std::vector<TensorT<double>>&)> f =
        [&build](const std::vector<TensorT<double>>& ps) {
            far::TapeT<double> td;
            std::vector<far::TapeT<double>::Var> vs;
            for (const auto& p : ps) vs.push_back(td.leaf(p, false));
            return td.value(build(td, vs)).item();
        };
    return far::finite_diff_check<float>(f, params, g, step, tol);
}

// Independent triple-loop matmul oracle.
TensorT<double> matmul_oracle(const TensorT<double>& a, const TensorT<double>& b) {
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = TensorT<double>::zeros({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p) out.at2(i, j) += a.at2(i, p) * b.at2(p, j);
    return out;
}

// Independent quadruple-loop convolution oracle (cross-correlation).
TensorT<double> conv_oracle(const TensorT<double>& x, const TensorT<double>& k, int pad) {
    int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    int cout = k.dim(0), kk = k.dim(2);
    int oh = h + 2 * pad - kk + 1, ow = w + 2 * pad - kk + 1;
    auto out = TensorT<double>::zeros({cout, oh, ow});
    for (int co = 0; co < cout; ++co)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double s = 0;
                for (int ci = 0; ci < cin; ++ci)
                    for (int ky = 0; ky < kk; ++ky)
                        for (int kx = 0; kx < kk; ++kx) {
                            int iy = oy + ky - pad, ix = ox + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            s += x.at3(ci, iy, ix) *
                                 k.data[static_cast<std::size_t>(((co * cin + ci) * kk + ky) * kk + kx)];
                        }
                out.at3(co, oy, ox) = s;
            }
    return out;
}

}  // namespace

TEST_CASE("matmul: identity, annihilator, hand-checked product") {
    far::Tape t;
    auto a = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    auto eye = t.constant(Tensor({2, 2}, {1, 0, 0, 1}));
    auto zero = t.constant(Tensor::zeros({2, 2}));

    CHECK(t.value(t.matmul(eye, a)).data == std::vector<float>{1, 2, 3, 4});
    CHECK(t.value(t.matmul(a, zero)).data == std::vector<float>{0, 0, 0, 0});

    auto b = t.constant(Tensor({2, 2}, {5, 6, 7, 8}));
    auto c = t.value(t.matmul(a, b));
    CHECK(c.data == std::vector<float>{19, 22, 43, 50});

    // frozen from the triple-loop oracle
    auto oracle = matmul_oracle(TensorT<double>({2, 2}, {1, 2, 3, 4}), TensorT<double>({2, 2}, {5, 6, 7, 8}));
    for (int i = 0; i < 4; ++i) CHECK(c.data[i] == doctest::Approx(oracle.data[i]));

    CHECK_THROWS_AS(t.matmul(a, t.constant(Tensor::zeros({3, 2}))), DimensionError);
}

TEST_CASE("conv2d: identity kernel is bitwise identity, zero kernel annihilates") {
    far::Rng rng(7);
    far::Tape t;
    auto xd = random_tensor({1, 5, 5}, rng);
    auto x = t.constant(xd.cast<float>());
    auto k1 = t.constant(Tensor({1, 1, 1, 1}, {1.0f}));
    auto y = t.value(t.conv2d(x, k1, 0));
    CHECK(y.shape == std::vector<int>{1, 5, 5});
    CHECK(y.data == t.value(x).data);  // bitwise

    auto kz = t.constant(Tensor::zeros({2, 1, 3, 3}));
    auto z = t.value(t.conv2d(x, kz, 1));
    for (float v : z.data) CHECK(v == 0.0f);
}

TEST_CASE("conv2d: 3x3 on 5x5 ramp with padding matches the naive oracle") {
    auto xd = TensorT<double>::zeros({1, 5, 5});
    for (int i = 0; i < 25; ++i) xd.data[static_cast<std::size_t>(i)] = i;  // ramp image
    far::Rng rng(3);
    auto kd = random_tensor({2, 1, 3, 3}, rng);
    auto expect = conv_oracle(xd, kd, 1);

    far::Tape t;
    auto y = t.value(t.conv2d(t.constant(xd.cast<float>()), t.constant(kd.cast<float>()), 1));
    CHECK(y.shape == expect.shape);
    for (std::size_t i = 0; i < y.data.size(); ++i)
        CHECK(y.data[i] == doctest::Approx(expect.data[i]).epsilon(1e-5));

    // output smaller than 1 in any dim is rejected
    auto big_k = t.constant(Tensor::zeros({1, 1, 7, 7}));
    CHECK_THROWS_AS(t.conv2d(t.constant(Tensor::zeros({1, 5, 5})), big_k, 0), DimensionError);
}

TEST_CASE("global_avg_pool: constants, small means, random vs sum oracle") {
    far::Tape t;
    auto c3 = t.value(t.global_avg_pool(t.constant(Tensor::full({4, 3, 3}, 3.0f))));
    for (float v : c3.data) CHECK(v == doctest::Approx(3.0));

    auto q = t.value(t.global_avg_pool(t.constant(Tensor({1, 2, 2}, {0, 1, 2, 3}))));
    CHECK(q.data[0] == doctest::Approx(1.5));

    far::Rng rng(11);
    auto xd = random_tensor({4, 3, 3}, rng);
    auto y = t.value(t.global_avg_pool(t.constant(xd.cast<float>())));
    for (int c = 0; c < 4; ++c) {
        double s = 0;
        for (int i = 0; i < 9; ++i) s += xd.data[static_cast<std::size_t>(c * 9 + i)];
        CHECK(y.data[static_cast<std::size_t>(c)] == doctest::Approx(s / 9.0).epsilon(1e-5));
    }

    CHECK_THROWS_AS(t.global_avg_pool(t.constant(Tensor::zeros({4, 0, 3}))), DimensionError);
}

TEST_CASE("channel_pool: degenerate cases and random vs loop oracle") {
    far::Tape t;
    auto single = Tensor({1, 2, 2}, {1, 2, 3, 4});
    auto y1 = t.value(t.channel_pool(t.constant(single)));
    CHECK(y1.shape == std::vector<int>{2, 2, 2});
    for (int p = 0; p < 4; ++p) {
        CHECK(y1.data[static_cast<std::size_t>(p)] == single.data[static_cast<std::size_t>(p)]);
        CHECK(y1.data[static_cast<std::size_t>(4 + p)] == single.data[static_cast<std::size_t>(p)]);
    }

    auto pm = t.value(t.channel_pool(t.constant(Tensor({2, 1, 1}, {-1, 1}))));
    CHECK(pm.data[0] == doctest::Approx(0.0));
    CHECK(pm.data[1] == doctest::Approx(1.0));

    far::Rng rng(13);
    auto xd = random_tensor({8, 4, 4}, rng);
    auto y = t.value(t.channel_pool(t.constant(xd.cast<float>())));
    for (int p = 0; p < 16; ++p) {
        double s = 0, mx = xd.data[static_cast<std::size_t>(p)];
        for (int c = 0; c < 8; ++c) {
            double v = xd.data[static_cast<std::size_t>(c * 16 + p)];
            s += v;
            mx = std::max(mx, v);
        }
        CHECK(y.data[static_cast<std::size_t>(p)] == doctest::Approx(s / 8.0).epsilon(1e-5));
        CHECK(y.data[static_cast<std::size_t>(16 + p)] == doctest::Approx(mx).epsilon(1e-5));
    }
}

TEST_CASE("elementwise: sigmoid, softplus stability, log domain") {
    far::Tape t;
    CHECK(t.value(t.sigmoid(t.scalar_const(0.0f))).item() == doctest::Approx(0.5));
    CHECK(t.value(t.softplus(t.scalar_const(0.0f))).item() == doctest::Approx(std::log(2.0)));
    float sp50 = t.value(t.softplus(t.scalar_const(50.0f))).item();
    CHECK(std::isfinite(sp50));
    CHECK(sp50 == doctest::Approx(50.0).epsilon(1e-6));
    CHECK_THROWS_AS(t.log_op(t.scalar_const(-1.0f)), DomainError);
    CHECK_THROWS_AS(t.log_op(t.scalar_const(0.0f)), DomainError);
}

TEST_CASE("softmax: symmetry, limit case, high-precision oracle, normalization") {
    far::Tape t;
    auto u = t.value(t.softmax(t.constant(Tensor({4}, {1, 1, 1, 1}))));
    for (float v : u.data) CHECK(v == doctest::Approx(0.25));

    auto lim = t.value(t.softmax(t.constant(Tensor({2}, {0.0f, -1e9f}))));
    CHECK(lim.data[0] == doctest::Approx(1.0));
    CHECK(lim.data[1] == doctest::Approx(0.0));

    // frozen from long-double evaluation of exp(i)/sum
    auto p = t.value(t.softmax(t.constant(Tensor({3}, {1, 2, 3}))));
    CHECK(p.data[0] == doctest::Approx(0.090030573).epsilon(1e-5));
    CHECK(p.data[1] == doctest::Approx(0.244728471).epsilon(1e-5));
    CHECK(p.data[2] == doctest::Approx(0.665240956).epsilon(1e-5));

    far::Rng rng(5);
    for (int it = 0; it < 20; ++it) {
        auto zd = random_tensor({6}, rng, -5, 5);
        auto y = t.value(t.softmax(t.constant(zd.cast<float>())));
        double s = 0;
        for (float v : y.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("backward: basic rules and contract") {
    far::Tape t;
    auto x = t.leaf(Tensor({1}, {2.5f}), true);
    auto g1 = t.backward(x);
    CHECK(g1.get(x, t).item() == doctest::Approx(1.0));

    far::Tape t2;
    auto v = t2.leaf(Tensor({3}, {1, 2, 3}), true);
    auto y = t2.sum(t2.mul(v, v));
    auto g2 = t2.backward(y);
    CHECK(g2.get(v, t2).data == std::vector<float>{2, 4, 6});

    far::Tape t3;
    auto m = t3.leaf(Tensor({2, 2}, {1, 2, 3, 4}), true);
    CHECK_THROWS_AS(t3.backward(m), ContractError);

    // untouched variables report zero gradients
    far::Tape t4;
    auto a = t4.leaf(Tensor({2}, {1, 1}), true);
    auto b = t4.leaf(Tensor({2}, {5, 5}), true);
    auto r = t4.sum(a);
    auto g4 = t4.backward(r);
    CHECK(g4.get(b, t4).data == std::vector<float>{0, 0});
}

TEST_CASE("backward linearity: grad of summed losses equals summed grads") {
    far::Rng rng(17);
    auto xd = random_tensor({5}, rng);

    far::Tape t;
    auto x = t.leaf(xd.cast<float>(), true);
    auto l1 = t.sum(t.mul(x, x));
    auto l2 = t.sum(t.sigmoid(x));
    auto lsum = t.add(l1, l2);

    auto ga = t.backward(l1).get(x, t);
    auto gb = t.backward(l2).get(x, t);
    auto gs = t.backward(lsum).get(x, t);
    for (int i = 0; i < 5; ++i)
        CHECK(gs.data[static_cast<std::size_t>(i)] ==
              doctest::Approx(ga.data[static_cast<std::size_t>(i)] + gb.data[static_cast<std::size_t>(i)]).epsilon(1e-6));
}

TEST_CASE("finite_diff_check: linear exact, quadratic tight, sigmoid chain within tol") {
    far::Rng rng(23);
    {
        auto p = random_tensor({4}, rng);
        auto r = check_grads({p}, [](auto& t, const auto& vs) { return t.scale(t.sum(vs[0]), decltype(t.value(vs[0]).item())(3)); });
        CHECK(r.max_rel_err < 1e-6);
    }
    {
        auto p = random_tensor({1}, rng);
        auto r = check_grads({p}, [](auto& t, const auto& vs) { return t.sum(t.mul(vs[0], vs[0])); });
        CHECK(r.max_rel_err < 1e-5);
    }
    {
        auto x = random_tensor({3}, rng);
        auto w = random_tensor({2, 3}, rng);
        auto r = check_grads({x, w}, [](auto& t, const auto& vs) {
            return t.sum(t.sigmoid(t.linear(vs[0], vs[1])));
        });
        CHECK(r.max_rel_err < 1e-3);
    }
}

TEST_CASE("gradient property: every differentiable op matches finite differences") {
    far::Rng rng(31);

    SUBCASE("matmul") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 2}, rng);
        auto r = check_grads({a, b}, [](auto& t, const auto& vs) { return t.sum(t.matmul(vs[0], vs[1])); });
        CHECK(r.all_pass());
    }
    SUBCASE("conv2d both operands") {
        auto x = random_tensor({2, 6, 6}, rng);
        auto k = random_tensor({3, 2, 3, 3}, rng);
        auto r = check_grads({x, k}, [](auto& t, const auto& vs) {
            return t.sum(t.mul(t.conv2d(vs[0], vs[1], 1), t.conv2d(vs[0], vs[1], 1)));
        });
        CHECK(r.all_pass());
    }
    SUBCASE("pools and gating ops") {
        auto x = random_tensor({4, 4, 4}, rng);
        auto a = random_tensor({4}, rng);
        auto s = random_tensor({4, 4}, rng);
        auto r = check_grads({x, a, s}, [](auto& t, const auto& vs) {
            auto gated = t.scale_spatial(t.scale_channels(vs[0], vs[1]), vs[2]);
            auto cp = t.channel_pool(gated);
            return t.add(t.sum(t.global_avg_pool(gated)), t.sum(t.avg_pool2(cp)));
        });
        CHECK(r.all_pass());
    }
    SUBCASE("elementwise chain") {
        auto x = random_tensor({6}, rng);
        auto r = check_grads({x}, [](auto& t, const auto& vs) {
            auto y = t.softplus(t.sub(t.sigmoid(vs[0]), t.relu(vs[0])));
            return t.sum(t.mul(y, t.exp_op(t.scale(vs[0], decltype(t.value(vs[0]).item())(0.3)))));
        });
        CHECK(r.all_pass());
    }
    SUBCASE("softmax entropy and cross entropy") {
        auto z = random_tensor({5}, rng);
        auto r1 = check_grads({z}, [](auto& t, const auto& vs) { return t.entropy(t.softmax(vs[0])); });
        CHECK(r1.all_pass());
        auto r2 = check_grads({z}, [](auto& t, const auto& vs) { return t.cross_entropy(vs[0], 2); });
        CHECK(r2.all_pass());
    }
    SUBCASE("sqrt abs log") {
        auto x = random_tensor({5}, rng, 0.2, 1.5);
        auto r = check_grads({x}, [](auto& t, const auto& vs) {
            return t.add(t.sum(t.sqrt_op(vs[0])), t.add(t.sum(t.abs_op(vs[0])), t.sum(t.log_op(vs[0]))));
        });
        CHECK(r.all_pass());
    }
}

TEST_CASE("cross_entropy: trivial values and label contract") {
    far::Tape t;
    auto strong = t.value(t.cross_entropy(t.constant(Tensor({3}, {50.0f, 0.0f, 0.0f})), 0)).item();
    CHECK(strong == doctest::Approx(0.0).epsilon(1e-6));
    auto uniform = t.value(t.cross_entropy(t.constant(Tensor({4}, {1, 1, 1, 1})), 2)).item();
    CHECK(uniform == doctest::Approx(std::log(4.0)));
    // frozen from long-double log-sum-exp
    auto h = t.value(t.cross_entropy(t.constant(Tensor({3}, {1, 2, 3})), 0)).item();
    CHECK(h == doctest::Approx(2.40760596).epsilon(1e-5));
    CHECK_THROWS_AS(t.cross_entropy(t.constant(Tensor({3}, {1, 2, 3})), 3), ContractError);
    CHECK_THROWS_AS(t.cross_entropy(t.constant(Tensor({3}, {1, 2, 3})), -1), ContractError);
}

TEST_CASE("entropy: contract checks") {
    far::Tape t;
    CHECK_THROWS_AS(t.entropy(t.constant(Tensor({2}, {0.8f, 0.4f}))), ContractError);
    CHECK_THROWS_AS(t.entropy(t.constant(Tensor({2}, {1.2f, -0.2f}))), ContractError);
    auto onehot = t.value(t.entropy(t.constant(Tensor({3}, {1, 0, 0})))).item();
    CHECK(onehot == doctest::Approx(0.0));
}

TEST_CASE("determinism: identical inputs give bitwise-identical outputs") {
    far::Rng rng(41);
    auto xd = random_tensor({3, 8, 8}, rng);
    auto kd = random_tensor({4, 3, 3, 3}, rng);
    auto run = [&] {
        far::Tape t;
        auto y = t.sigmoid(t.conv2d(t.constant(xd.cast<float>()), t.constant(kd.cast<float>()), 1));
        return t.value(t.global_avg_pool(y)).data;
    };
    CHECK(run() == run());
}
