#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "cdhm/autodiff.hpp"
#include "cdhm/nn.hpp"
#include "cdhm/rng.hpp"

using namespace cdhm;

namespace {

// Central finite differences on every element of every input tensor.
// build(inputs) must return a scalar Var recorded on a fresh tape.
void check_gradients(std::vector<Tensor> inputs,
                     const std::function<Var(Tape&, std::vector<Var>&)>& build,
                     double h = 1e-6, double tol = 1e-6) {
    Tape tape;
    std::vector<Var> vars;
    for (auto& in : inputs) vars.push_back(tape.leaf(in, true));
    Var loss = build(tape, vars);
    tape.backward(loss);
    std::vector<Tensor> analytic;
    for (auto& v : vars) analytic.push_back(tape.grad(v));

    for (size_t vi = 0; vi < inputs.size(); ++vi) {
        for (int64_t i = 0; i < inputs[vi].size(); ++i) {
            double orig = inputs[vi][i];
            auto eval = [&](double x) {
                inputs[vi][i] = x;
                Tape t2;
                std::vector<Var> vs;
                for (auto& in : inputs) vs.push_back(t2.leaf(in, false));
                return t2.value(build(t2, vs))[0];
            };
            double fp = eval(orig + h);
            double fm = eval(orig - h);
            inputs[vi][i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double ref = std::max({std::fabs(fd), std::fabs(analytic[vi][i]), 1.0});
            INFO("input " << vi << " element " << i << " fd=" << fd
                          << " analytic=" << analytic[vi][i]);
            CHECK(std::fabs(fd - analytic[vi][i]) / ref < tol);
        }
    }
}

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("elementwise op gradients") {
    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    check_gradients({a, b}, [](Tape&, std::vector<Var>& v) {
        return mean_all(mul(add(v[0], v[1]), sub(v[0], scale(v[1], 0.7))));
    });
    check_gradients({a}, [](Tape&, std::vector<Var>& v) {
        return sum_all(tanh_op(sigmoid(add_scalar(v[0], 0.3))));
    });
    check_gradients({a}, [](Tape&, std::vector<Var>& v) {
        return mean_all(leaky_relu(v[0], 0.2));
    });
    check_gradients({a}, [](Tape&, std::vector<Var>& v) {
        return mean_all(relu(one_minus(v[0])));
    });
    check_gradients({a}, [](Tape&, std::vector<Var>& v) {
        return mean_all(exp_op(scale(v[0], 0.5)));
    });
}

TEST_CASE("linear and concat gradients") {
    Rng rng(11);
    Tensor x = random_tensor({4, 5}, rng);
    Tensor w = random_tensor({3, 5}, rng, 0.5);
    Tensor b = random_tensor({3}, rng, 0.1);
    Tensor x2 = random_tensor({4, 2}, rng);
    check_gradients({x, w, b, x2}, [](Tape&, std::vector<Var>& v) {
        Var y = linear(v[0], v[1], v[2]);
        Var c = concat_cols({y, v[3]});
        Var s = slice_cols(c, 1, 3);
        return mean_all(mul(s, s));
    });
}

TEST_CASE("conv2d gradients") {
    Rng rng(13);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    Tensor w = random_tensor({4, 3, 4, 4}, rng, 0.3);
    Tensor b = random_tensor({4}, rng, 0.1);
    check_gradients({x, w, b}, [](Tape&, std::vector<Var>& v) {
        return mean_all(conv2d(v[0], v[1], v[2], 2, 1));
    });
}

TEST_CASE("conv_transpose2d gradients and shape") {
    Rng rng(17);
    Tensor x = random_tensor({2, 3, 3, 3}, rng);
    Tensor w = random_tensor({3, 4, 4, 4}, rng, 0.3);
    Tensor b = random_tensor({4}, rng, 0.1);
    {
        Tape t;
        Var y = conv_transpose2d(t.leaf(x), t.leaf(w), t.leaf(b), 2, 1);
        CHECK(t.value(y).shape() == std::vector<int64_t>{2, 4, 6, 6});
    }
    check_gradients({x, w, b}, [](Tape&, std::vector<Var>& v) {
        return mean_all(mul(conv_transpose2d(v[0], v[1], v[2], 2, 1),
                            conv_transpose2d(v[0], v[1], v[2], 2, 1)));
    });
}

TEST_CASE("conv2d / conv_transpose2d adjoint identity") {
    // <conv(x), y> == <x, convT(y)> for zero bias and shared weights.
    Rng rng(19);
    Tensor x = random_tensor({1, 2, 6, 6}, rng);
    Tensor w = random_tensor({3, 2, 4, 4}, rng);
    Tensor y = random_tensor({1, 3, 3, 3}, rng);
    Tensor b3({3}), b2({2});
    Tape t;
    Var cx = conv2d(t.leaf(x), t.leaf(w), t.leaf(b3), 2, 1);
    // convT expects w as [Ci=3, Co=2, K, K]; transpose first two axes of w.
    Tensor wt({3, 2, 4, 4});
    for (int64_t a = 0; a < 3; ++a)
        for (int64_t c = 0; c < 2; ++c)
            for (int64_t i = 0; i < 16; ++i)
                wt[(a * 2 + c) * 16 + i] = w[(a * 2 + c) * 16 + i];
    // Note: conv2d weight [Co,Ci,K,K]=[3,2,4,4] has the same layout convT
    // wants for [Ci,Co,K,K] with Ci=3, Co=2 mapping y back to x's channels.
    Var cty = conv_transpose2d(t.leaf(y), t.leaf(wt), t.leaf(b2), 2, 1);
    double lhs = 0.0, rhs = 0.0;
    for (int64_t i = 0; i < t.value(cx).size(); ++i) lhs += t.value(cx)[i] * y[i];
    for (int64_t i = 0; i < t.value(cty).size(); ++i) rhs += t.value(cty)[i] * x[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv1d gradients") {
    Rng rng(23);
    Tensor x = random_tensor({2, 2, 10}, rng);
    Tensor w = random_tensor({3, 2, 4}, rng, 0.3);
    Tensor b = random_tensor({3}, rng, 0.1);
    check_gradients({x, w, b}, [](Tape&, std::vector<Var>& v) {
        return mean_all(conv1d(v[0], v[1], v[2], 2, 1));
    });
}

TEST_CASE("batch_norm2d gradients (training mode)") {
    Rng rng(29);
    Tensor x = random_tensor({3, 2, 3, 3}, rng);
    Tensor g = random_tensor({2}, rng, 0.5);
    Tensor be = random_tensor({2}, rng, 0.1);
    check_gradients(
        {x, g, be},
        [](Tape&, std::vector<Var>& v) {
            Tensor rm({2}), rv({2}, 1.0);
            Var y = batch_norm2d(v[0], v[1], v[2], rm, rv, /*training=*/true);
            return mean_all(mul(y, y));
        },
        1e-6, 1e-5);
}

TEST_CASE("batch_norm2d eval mode uses frozen stats") {
    Rng rng(31);
    Tensor x = random_tensor({2, 2, 2, 2}, rng);
    Tensor g({2}, 1.0), be({2});
    Tensor rm({2}), rv({2}, 1.0);
    rm[0] = 0.5;
    rm[1] = -0.25;
    rv[0] = 4.0;
    rv[1] = 0.25;
    Tape t;
    Var y = batch_norm2d(t.leaf(x), t.leaf(g), t.leaf(be), rm, rv, false);
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t ch = 0; ch < 2; ++ch)
            for (int64_t p = 0; p < 4; ++p) {
                int64_t idx = (i * 2 + ch) * 4 + p;
                double expect = (x[idx] - rm[ch]) / std::sqrt(rv[ch] + 1e-5);
                CHECK(t.value(y)[idx] == doctest::Approx(expect).epsilon(1e-12));
            }
    // Frozen statistics are untouched by eval-mode forwards.
    CHECK(rm[0] == 0.5);
    CHECK(rv[1] == 0.25);
}

TEST_CASE("pool / softmax / reparameterize gradients") {
    Rng rng(37);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    check_gradients({x}, [](Tape&, std::vector<Var>& v) {
        return mean_all(global_avg_pool2d(v[0]));
    });
    Tensor logits = random_tensor({3, 5}, rng);
    check_gradients({logits}, [](Tape&, std::vector<Var>& v) {
        Var p = softmax_rows(v[0]);
        return mean_all(mul(p, p));
    });
    Tensor m = random_tensor({2, 4}, rng);
    Tensor lv = random_tensor({2, 4}, rng, 0.5);
    Tensor noise = random_tensor({2, 4}, rng);
    check_gradients({m, lv}, [noise](Tape&, std::vector<Var>& v) {
        Var s = reparameterize_op(v[0], v[1], noise);
        return mean_all(mul(s, s));
    });
}

TEST_CASE("reparameterize gradient identities") {
    // d sample / d mean = I; d sample / d logvar = diag(0.5 exp(0.5 lv) noise)
    Rng rng(41);
    Tensor m = random_tensor({1, 6}, rng);
    Tensor lv = random_tensor({1, 6}, rng, 0.5);
    Tensor noise = random_tensor({1, 6}, rng);
    for (int64_t k = 0; k < 6; ++k) {
        Tape t;
        Var vm = t.leaf(m, true);
        Var vl = t.leaf(lv, true);
        Var s = reparameterize_op(vm, vl, noise);
        // select component k
        Tensor sel({1, 6});
        sel[k] = 1.0;
        Var picked = sum_all(mul(s, t.leaf(sel)));
        t.backward(picked);
        const Tensor& gm = t.grad(vm);
        const Tensor& gl = t.grad(vl);
        for (int64_t j = 0; j < 6; ++j) {
            double expect_m = (j == k) ? 1.0 : 0.0;
            double expect_l = (j == k) ? 0.5 * std::exp(0.5 * lv[j]) * noise[j] : 0.0;
            CHECK(gm[j] == doctest::Approx(expect_m).epsilon(1e-12));
            CHECK(gl[j] == doctest::Approx(expect_l).epsilon(1e-9));
        }
    }
}

TEST_CASE("fused loss gradients") {
    Rng rng(43);
    Tensor mq = random_tensor({2, 3}, rng);
    Tensor lq = random_tensor({2, 3}, rng, 0.5);
    Tensor mp = random_tensor({2, 3}, rng);
    Tensor lp = random_tensor({2, 3}, rng, 0.5);
    check_gradients({mq, lq, mp, lp}, [](Tape&, std::vector<Var>& v) {
        return kl_diag_mean(v[0], v[1], v[2], v[3]);
    });

    Tensor pr = random_tensor({2, 2, 3, 3}, rng);
    Tensor tg = random_tensor({2, 2, 3, 3}, rng);
    check_gradients({pr, tg}, [](Tape&, std::vector<Var>& v) {
        return half_mse(v[0], v[1]);
    });

    Tensor xs = random_tensor({3, 4}, rng);
    Tensor xt = random_tensor({4, 4}, rng);
    check_gradients({xs, xt}, [](Tape&, std::vector<Var>& v) {
        return mmd_rbf(v[0], v[1], {0.8, 1.7});
    });

    Tensor logits = random_tensor({3, 4}, rng);
    std::vector<int> labels = {2, 0, 3};
    check_gradients({logits}, [labels](Tape&, std::vector<Var>& v) {
        return nll_onehot(softmax_rows(v[0]), labels);
    });
}

TEST_CASE("gru cell gradients and gate range") {
    Rng rng(47);
    ParamStore ps;
    GruCellLayer cell;
    cell.init(ps, "gru", 3, 4, rng);
    Tensor x = random_tensor({2, 3}, rng);
    Tensor h = random_tensor({2, 4}, rng);

    std::vector<Tensor> inputs = {x, h};
    for (int i = 0; i < ps.count(); ++i) inputs.push_back(ps.value(i));
    // Param order from init: W_R, bias_R, W_Z, bias_Z, W_H, bias_H.
    check_gradients(inputs, [&](Tape&, std::vector<Var>& v) {
        Var xh = concat_cols({v[0], v[1]});
        Var r = sigmoid(linear(xh, v[2 + 0], v[2 + 1]));
        Var z = sigmoid(linear(xh, v[2 + 2], v[2 + 3]));
        Var xrh = concat_cols({v[0], mul(r, v[1])});
        Var cand = tanh_op(linear(xrh, v[2 + 4], v[2 + 5]));
        Var hn = add(mul(one_minus(z), v[1]), mul(z, cand));
        return mean_all(mul(hn, hn));
    });

    // Gate range property over random finite inputs.
    for (int trial = 0; trial < 20; ++trial) {
        Tape t;
        ParamBind pb(t, ps);
        Tensor xt = random_tensor({1, 3}, rng, 10.0);
        Tensor ht = random_tensor({1, 4}, rng, 10.0);
        auto gates = cell.gates(pb, t.leaf(xt), t.leaf(ht));
        for (int64_t i = 0; i < 4; ++i) {
            CHECK(t.value(gates.reset)[i] > 0.0);
            CHECK(t.value(gates.reset)[i] < 1.0);
            CHECK(t.value(gates.update)[i] > 0.0);
            CHECK(t.value(gates.update)[i] < 1.0);
        }
    }
}

TEST_CASE("gru update-gate saturation hands state to candidate") {
    Rng rng(53);
    ParamStore ps;
    GruCellLayer cell;
    cell.init(ps, "gru", 2, 3, rng);
    // Drive the update gate to 1 via a huge bias.
    ps.value("gru.bias_Z").fill(1e3);
    Tape t;
    ParamBind pb(t, ps);
    Tensor x = random_tensor({1, 2}, rng);
    Tensor h = random_tensor({1, 3}, rng);
    Var hn = cell.forward(pb, t.leaf(x), t.leaf(h));
    // Candidate recomputed by hand.
    Tape t2;
    ParamBind pb2(t2, ps);
    Var xh = concat_cols({t2.leaf(x), t2.leaf(h)});
    Var r = sigmoid(linear(xh, pb2.var(cell.w_r), pb2.var(cell.b_r)));
    Var xrh = concat_cols({t2.leaf(x), mul(r, t2.leaf(h))});
    Var cand = tanh_op(linear(xrh, pb2.var(cell.w_h), pb2.var(cell.b_h)));
    for (int64_t i = 0; i < 3; ++i)
        CHECK(t.value(hn)[i] == doctest::Approx(t2.value(cand)[i]).epsilon(1e-9));
}

TEST_CASE("gru half-open gates with zero candidate halve the state") {
    Rng rng(59);
    ParamStore ps;
    GruCellLayer cell;
    cell.init(ps, "gru", 2, 3, rng);
    ps.value("gru.W_R").fill(0.0);
    ps.value("gru.bias_R").fill(0.0);
    ps.value("gru.W_Z").fill(0.0);
    ps.value("gru.bias_Z").fill(0.0);  // sigmoid(0) = 0.5
    ps.value("gru.W_H").fill(0.0);
    ps.value("gru.bias_H").fill(0.0);  // candidate = tanh(0) = 0
    Tape t;
    ParamBind pb(t, ps);
    Tensor x = random_tensor({1, 2}, rng);
    Tensor h = random_tensor({1, 3}, rng);
    Var hn = cell.forward(pb, t.leaf(x), t.leaf(h));
    for (int64_t i = 0; i < 3; ++i)
        CHECK(t.value(hn)[i] == doctest::Approx(0.5 * h[i]).epsilon(1e-12));
}
