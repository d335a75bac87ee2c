#include "doctest.h"

#include <cmath>

#include "detlab/rng.hpp"
#include "detlab/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace detlab;
using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

Td randn(Shape shape, Xorshift64Star& rng, bool rg = true, double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Td::from(std::move(shape), std::move(v), rg);
}

// direct nested-loop convolution, independent of the engine's kernel
std::vector<double> conv_oracle(const std::vector<double>& x, int c, int h, int w, const std::vector<double>& k,
                                int oc, int kh, int kw, int stride, int pad) {
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<size_t>(oc) * oh * ow, 0.0);
    for (int o = 0; o < oc; ++o)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = 0;
                for (int ci = 0; ci < c; ++ci)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int iy = oy * stride + ky - pad;
                            const int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += x[(static_cast<size_t>(ci) * h + iy) * w + ix] *
                                   k[((static_cast<size_t>(o) * c + ci) * kh + ky) * kw + kx];
                        }
                out[(static_cast<size_t>(o) * oh + oy) * ow + ox] = acc;
            }
    return out;
}

}  // namespace

TEST_CASE("matmul identity and hand-expanded products") {
    auto a = Td::from({2, 2}, {3, -1, 2, 5});
    auto i2 = Td::from({2, 2}, {1, 0, 0, 1});
    auto prod = matmul(i2, a);
    for (int i = 0; i < 4; ++i) CHECK(prod.values()[i] == doctest::Approx(a.values()[i]));

    auto m = Td::from({2, 2}, {1, 2, 3, 4});
    auto v = Td::from({2, 1}, {0, 1});
    auto mv = matmul(m, v);
    CHECK(mv.at({0, 0}) == doctest::Approx(2));
    CHECK(mv.at({1, 0}) == doctest::Approx(4));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Td::zeros({2, 3});
    auto b = Td::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
    }
}

TEST_CASE("grad of sum(A*B) wrt A equals ones x B^T") {
    Xorshift64Star rng(7);
    auto a = randn({3, 4}, rng);
    auto b = randn({4, 5}, rng, false);
    auto loss = sum_all(matmul(a, b));
    backward(loss);
    // rows of dA are all equal to the row sums of B
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 4; ++k) {
            double expect = 0;
            for (int j = 0; j < 5; ++j) expect += b.at({k, j});
            CHECK(a.grad()[static_cast<size_t>(i) * 4 + k] == doctest::Approx(expect).epsilon(1e-10));
        }
    // and the same thing via the finite-difference oracle
    auto a2 = randn({3, 4}, rng);
    auto b2 = randn({4, 5}, rng, false);
    auto r = gradcheck::check([&] { return sum_all(matmul(a2, b2)); }, {&a2}, rng, 12);
    CHECK(r.ok());
}

TEST_CASE("conv2d identity kernel and all-ones summation") {
    auto x = Td::from({1, 2, 2}, {1, 2, 3, 4});
    auto k = Td::from({1, 1, 1, 1}, {1});
    auto y = conv2d(x, k, Td(), 1, 0);
    for (int i = 0; i < 4; ++i) CHECK(y.values()[i] == doctest::Approx(x.values()[i]));

    auto ones = Td::filled({1, 3, 3}, 1.0);
    auto kernel = Td::filled({1, 1, 3, 3}, 1.0);
    auto s = conv2d(ones, kernel, Td(), 1, 0);
    CHECK(s.numel() == 1);
    CHECK(s.item() == doctest::Approx(9.0));
}

TEST_CASE("conv2d random case matches nested-loop oracle") {
    Xorshift64Star rng(11);
    const int c = 2, h = 5, w = 7, oc = 3, kh = 3, kw = 3;
    auto x = randn({c, h, w}, rng, false);
    auto k = randn({oc, c, kh, kw}, rng, false);
    for (int stride : {1, 2}) {
        const int pad = 1;
        if ((h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0) continue;
        auto y = conv2d(x, k, Td(), stride, pad);
        auto expect = conv_oracle(x.values(), c, h, w, k.values(), oc, kh, kw, stride, pad);
        REQUIRE(y.values().size() == expect.size());
        double max_diff = 0;
        for (size_t i = 0; i < expect.size(); ++i) max_diff = std::max(max_diff, std::abs(y.values()[i] - expect[i]));
        CHECK(max_diff <= 1e-6);
    }
}

TEST_CASE("conv2d non-integral output extent is a configuration error") {
    auto x = Td::zeros({1, 6, 6});
    auto k = Td::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS(conv2d(x, k, Td(), 2, 1), ConfigError);
    // per-edge padding restores an integral extent
    auto y = conv2d(x, k, Td(), 2, 0, 1, 0, 1);
    CHECK(y.dim(1) == 3);
    CHECK(y.dim(2) == 3);
}

TEST_CASE("softmax of uniform vector is uniform; rows sum to one") {
    auto x = Td::filled({4}, 0.37);
    auto y = softmax_lastdim(x);
    for (double v : y.values()) CHECK(v == doctest::Approx(0.25));

    Xorshift64Star rng(3);
    auto m = randn({5, 7}, rng, false);
    auto sm = softmax_lastdim(m);
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int j = 0; j < 7; ++j) {
            CHECK(sm.at({r, j}) >= 0.0);
            s += sm.at({r, j});
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("sigmoid(0) = 0.5 and layer_norm of a constant vector is zero") {
    CHECK(sigmoid(Td::scalar(0.0)).item() == doctest::Approx(0.5));
    auto x = Td::filled({6}, 3.25);
    auto gain = Td::filled({6}, 1.0);
    auto bias = Td::zeros({6});
    auto y = layer_norm(x, gain, bias);
    for (double v : y.values()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("layer_norm normalizes each slice before the affine map") {
    Xorshift64Star rng(19);
    auto x = randn({3, 9}, rng, false);
    auto gain = Td::filled({9}, 1.0);
    auto bias = Td::zeros({9});
    auto y = layer_norm(x, gain, bias);
    for (int r = 0; r < 3; ++r) {
        double mean = 0, var = 0;
        for (int j = 0; j < 9; ++j) mean += y.at({r, j});
        mean /= 9;
        for (int j = 0; j < 9; ++j) var += (y.at({r, j}) - mean) * (y.at({r, j}) - mean);
        var /= 9;
        CHECK(std::abs(mean) <= 1e-9);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("bilinear_sample grid alignment, midpoint, and outside-zero rule") {
    // 1x1x2 feature: pixels valued 0 and 1
    auto f = Td::from({1, 1, 2}, {0.0, 1.0});
    auto center0 = Td::from({1, 2}, {0.25, 0.5});  // center of pixel 0
    CHECK(bilinear_sample(f, center0).item() == doctest::Approx(0.0));
    auto center1 = Td::from({1, 2}, {0.75, 0.5});
    CHECK(bilinear_sample(f, center1).item() == doctest::Approx(1.0));
    auto mid = Td::from({1, 2}, {0.5, 0.5});
    CHECK(bilinear_sample(f, mid).item() == doctest::Approx(0.5));

    auto outside = Td::from({3, 2}, {-0.3, 0.5, 1.5, 0.5, 0.5, 2.0});
    auto vals = bilinear_sample(f, outside);
    for (double v : vals.values()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("bilinear_sample gradients match finite differences") {
    Xorshift64Star rng(23);
    auto f = randn({2, 4, 5}, rng);
    // points kept away from cell boundaries so the FD stencil stays in one cell
    std::vector<double> pts;
    for (int k = 0; k < 6; ++k) {
        pts.push_back((rng.uniform_int(5) + 0.3 + 0.4 * rng.uniform()) / 5.0);
        pts.push_back((rng.uniform_int(4) + 0.3 + 0.4 * rng.uniform()) / 4.0);
    }
    auto p = Td::from({6, 2}, std::move(pts), true);
    auto weights = randn({2, 6}, rng, false);
    auto r = gradcheck::check([&] { return sum_all(mul(bilinear_sample(f, p), weights)); }, {&f, &p}, rng, 10);
    CHECK(r.ok());
}

TEST_CASE("backward on simple reductions") {
    auto x = Td::from({3}, {1, 2, 3}, true);
    auto loss = sum_all(x);
    backward(loss);
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));

    auto y = Td::from({2}, {1, 2}, true);
    auto loss2 = sum_all(square(y));
    backward(loss2);
    CHECK(y.grad()[0] == doctest::Approx(2.0));
    CHECK(y.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward contract errors") {
    auto x = Td::from({2}, {1, 2}, true);
    auto vecloss = mul_scalar(x, 2.0);
    CHECK_THROWS_AS(backward(vecloss), NumericError);

    auto loss = sum_all(x);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), NumericError);  // tape consumed
}

TEST_CASE("finite differences agree for every differentiable op") {
    Xorshift64Star rng(101);

    SUBCASE("elementwise arithmetic") {
        auto a = randn({3, 4}, rng);
        auto b = randn({3, 4}, rng);
        // keep divisor away from zero
        for (auto& v : b.values()) v += (v >= 0 ? 1.5 : -1.5);
        auto r = gradcheck::check([&] { return sum_all(add(mul(a, b), div(a, b))); }, {&a, &b}, rng);
        CHECK(r.ok());
    }
    SUBCASE("unary maps") {
        auto a = randn({12}, rng, true, 0.2, 2.0);
        auto r = gradcheck::check([&] { return sum_all(add(log_t(a), add(sqrt_t(a), exp_t(a)))); }, {&a}, rng);
        CHECK(r.ok());
        auto b = randn({12}, rng);
        auto r2 = gradcheck::check([&] { return sum_all(add(log_sigmoid(b), square(b))); }, {&b}, rng);
        CHECK(r2.ok());
    }
    SUBCASE("activations") {
        for (Act act : {Act::Relu, Act::Silu, Act::Gelu, Act::Sigmoid}) {
            auto a = randn({14}, rng);
            // keep relu inputs away from the kink
            if (act == Act::Relu)
                for (auto& v : a.values())
                    if (std::abs(v) < 0.05) v += 0.1;
            auto r = gradcheck::check([&] { return sum_all(square(activation(a, act))); }, {&a}, rng);
            CHECK(r.ok());
        }
    }
    SUBCASE("abs / min / max away from ties") {
        auto a = randn({10}, rng);
        auto b = randn({10}, rng);
        for (size_t i = 0; i < 10; ++i) {
            if (std::abs(a.values()[i]) < 0.05) a.values()[i] += 0.1;
            if (std::abs(a.values()[i] - b.values()[i]) < 0.05) b.values()[i] += 0.2;
        }
        auto r = gradcheck::check(
            [&] { return sum_all(add(abs_t(a), add(minimum(a, b), maximum(a, b)))); }, {&a, &b}, rng);
        CHECK(r.ok());
    }
    SUBCASE("matmul and transpose") {
        auto a = randn({4, 3}, rng);
        auto b = randn({3, 5}, rng);
        auto w = randn({4, 5}, rng, false);
        auto r = gradcheck::check([&] { return sum_all(mul(matmul(a, b), w)); }, {&a, &b}, rng);
        CHECK(r.ok());
        auto r2 = gradcheck::check([&] { return sum_all(mul(transpose(matmul(a, b)), transpose(w))); }, {&a, &b}, rng);
        CHECK(r2.ok());
    }
    SUBCASE("softmax and layer_norm") {
        auto a = randn({4, 6}, rng);
        auto w = randn({4, 6}, rng, false);
        auto r = gradcheck::check([&] { return sum_all(mul(softmax_lastdim(a), w)); }, {&a}, rng);
        CHECK(r.ok());
        auto g = randn({6}, rng);
        auto bsh = randn({6}, rng);
        auto r2 = gradcheck::check([&] { return sum_all(mul(layer_norm(a, g, bsh), w)); }, {&a, &g, &bsh}, rng);
        CHECK(r2.ok());
    }
    SUBCASE("batch norm, both modes") {
        auto x = randn({2, 3, 4}, rng);
        auto g = randn({2}, rng);
        auto b = randn({2}, rng);
        auto w = randn({2, 3, 4}, rng, false);
        std::vector<double> mean = {0.3, -0.2}, var = {1.1, 0.7};
        auto r = gradcheck::check(
            [&] { return sum_all(mul(batch_norm_inference(x, mean, var, g, b), w)); }, {&x, &g, &b}, rng);
        CHECK(r.ok());
        auto r2 = gradcheck::check(
            [&] { return sum_all(mul(batch_norm_train(x, g, b), w)); }, {&x, &g, &b}, rng);
        CHECK(r2.ok());
    }
    SUBCASE("conv2d") {
        auto x = randn({2, 5, 5}, rng);
        auto k = randn({3, 2, 3, 3}, rng);
        auto b = randn({3}, rng);
        auto w = randn({3, 5, 5}, rng, false);
        auto r = gradcheck::check([&] { return sum_all(mul(conv2d(x, k, b, 1, 1), w)); }, {&x, &k, &b}, rng);
        CHECK(r.ok());
    }
    SUBCASE("concat / slice / gather / add_rowvec / resampling") {
        auto a = randn({3, 4}, rng);
        auto b = randn({2, 4}, rng);
        auto v = randn({4}, rng);
        auto r = gradcheck::check(
            [&] {
                auto cat = concat<double>({a, b}, 0);
                auto sl = slice(cat, 0, 1, 3);
                auto gr = gather_rows(add_rowvec(sl, v), {2, 0, 2});
                return sum_all(square(gr));
            },
            {&a, &b, &v}, rng);
        CHECK(r.ok());
        auto f = randn({2, 2, 4}, rng);
        auto r2 = gradcheck::check([&] { return sum_all(square(upsample2x_nearest(f))); }, {&f}, rng);
        CHECK(r2.ok());
        auto r3 = gradcheck::check([&] { return sum_all(square(avgpool2x(f))); }, {&f}, rng);
        CHECK(r3.ok());
    }
    SUBCASE("composed conv -> norm -> attention graph") {
        auto img = randn({2, 4, 4}, rng);
        auto k = randn({3, 2, 3, 3}, rng);
        auto kb = randn({3}, rng);
        auto g = randn({3}, rng);
        auto bb = randn({3}, rng);
        auto wq = randn({3, 3}, rng);
        auto wk = randn({3, 3}, rng);
        auto wv = randn({3, 3}, rng);
        auto build = [&] {
            auto feat = conv2d(img, k, kb, 1, 1);                      // [3,4,4]
            auto normed = batch_norm_train(feat, g, bb);
            auto tokens = transpose(reshape(normed, {3, 16}));         // [16,3]
            auto q = matmul(tokens, wq);
            auto kk = matmul(tokens, wk);
            auto vv = matmul(tokens, wv);
            auto attn = softmax_lastdim(mul_scalar(matmul(q, transpose(kk)), 1.0 / std::sqrt(3.0)));
            return sum_all(square(matmul(attn, vv)));
        };
        auto r = gradcheck::check(build, {&img, &k, &kb, &g, &bb, &wq, &wk, &wv}, rng, 5);
        CHECK(r.ok());
    }
}

TEST_CASE("forward results are bit-identical across repeated runs") {
    Xorshift64Star rng(55);
    auto x = randn({2, 6, 6}, rng, false);
    auto k = randn({4, 2, 3, 3}, rng, false);
    auto run = [&] {
        auto y = conv2d(x, k, Td(), 1, 1);
        auto t = transpose(reshape(y, {4, 36}));
        return softmax_lastdim(matmul(t, transpose(t))).values();
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);
}

TEST_CASE("float engine matches double engine to single precision") {
    Xorshift64Star rng(77);
    std::vector<double> vals(24);
    for (auto& v : vals) v = rng.uniform(-1, 1);
    auto xd = Td::from({4, 6}, vals);
    std::vector<float> valsf(vals.begin(), vals.end());
    auto xf = Tf::from({4, 6}, valsf);
    auto yd = softmax_lastdim(xd).values();
    auto yf = softmax_lastdim(xf).values();
    for (size_t i = 0; i < yd.size(); ++i) CHECK(std::abs(yd[i] - static_cast<double>(yf[i])) <= 1e-6);
}
