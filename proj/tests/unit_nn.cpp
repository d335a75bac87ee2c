#include "doctest.h"

#include "detlab/nn.hpp"
#include "support/gradcheck.hpp"

using namespace detlab;
using nn::ParamCollector;
using Td = Tensor<double>;

namespace {
Td randn(Shape shape, Xorshift64Star& rng, bool rg = true) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Td::from(std::move(shape), std::move(v), rg);
}
}  // namespace

TEST_CASE("linear and mlp gradients") {
    Xorshift64Star rng(1);
    nn::Mlp<double> mlp(5, 8, 3, 3, rng);
    auto x = randn({4, 5}, rng);
    ParamCollector<double> pc;
    mlp.collect(pc);
    std::vector<Td*> leaves = {&x};
    for (auto& p : pc.params) leaves.push_back(p.tensor);
    auto r = gradcheck::check([&] { return sum_all(square(mlp.forward(x))); }, leaves, rng, 4);
    CHECK(r.ok());
}

TEST_CASE("attention weight rows sum to one per head") {
    Xorshift64Star rng(2);
    nn::MultiheadAttention<double> mha(16, 4, rng);
    auto x = randn({9, 16}, rng, false);
    std::vector<Td> attn;
    mha.forward(x, nullptr, nullptr, &attn);
    REQUIRE(attn.size() == 4);
    for (const auto& a : attn) {
        REQUIRE(a.shape() == Shape{9, 9});
        for (int i = 0; i < 9; ++i) {
            double s = 0;
            for (int j = 0; j < 9; ++j) {
                CHECK(a.at({i, j}) >= 0.0);
                s += a.at({i, j});
            }
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("attention mask blocks the masked logits") {
    Xorshift64Star rng(3);
    nn::MultiheadAttention<double> mha(8, 2, rng);
    auto x = randn({4, 8}, rng, false);
    auto mask = Td::zeros({4, 4});
    // row 0 may only attend to itself
    for (int j = 1; j < 4; ++j) mask.values()[static_cast<size_t>(j)] = -1e9;
    std::vector<Td> attn;
    mha.forward(x, nullptr, &mask, &attn);
    for (const auto& a : attn) {
        CHECK(a.at({0, 0}) == doctest::Approx(1.0));
        for (int j = 1; j < 4; ++j) CHECK(a.at({0, j}) <= 1e-12);
    }
}

TEST_CASE("transformer layer gradients and zero preservation") {
    Xorshift64Star rng(4);
    nn::TransformerLayer<double> layer(8, 2, 16, rng);
    auto x = randn({5, 8}, rng);
    auto pos = randn({5, 8}, rng, false);
    ParamCollector<double> pc;
    layer.collect(pc);
    std::vector<Td*> leaves = {&x};
    for (size_t i = 0; i < pc.params.size(); i += 3) leaves.push_back(pc.params[i].tensor);
    auto r = gradcheck::check([&] { return sum_all(square(layer.forward(x, &pos))); }, leaves, rng, 4);
    CHECK(r.ok());

    // zero input with zero-initialized biases stays zero even with a positional signal
    auto zeros = Td::zeros({5, 8});
    auto y = layer.forward(zeros, &pos);
    for (double v : y.values()) CHECK(std::abs(v) <= 1e-12);
}

TEST_CASE("batch norm switches between batch and running statistics") {
    Xorshift64Star rng(5);
    nn::BatchNorm2d<double> bn(3);
    auto x = randn({3, 4, 4}, rng, false);
    auto y_train = bn.forward(x, true);
    // training output is normalized per channel
    for (int c = 0; c < 3; ++c) {
        double m = 0;
        for (int i = 0; i < 16; ++i) m += y_train.values()[static_cast<size_t>(c) * 16 + i];
        CHECK(std::abs(m / 16.0) <= 1e-9);
    }
    // running stats moved toward the batch stats
    CHECK(bn.running_mean[0] != 0.0);
    auto y_eval = bn.forward(x, false);
    CHECK(y_eval.values() != y_train.values());
}

TEST_CASE("repconv deploy equals train-architecture eval forward within 1e-5") {
    Xorshift64Star rng(6);
    for (bool identity : {false, true}) {
        nn::RepConv<double> rep(4, 4, rng, identity);
        // push the running stats away from their init
        for (int i = 0; i < 3; ++i) rep.forward(randn({4, 6, 6}, rng, false), true);

        std::vector<Td> inputs;
        for (int t = 0; t < 100; ++t) inputs.push_back(randn({4, 6, 6}, rng, false));
        std::vector<std::vector<double>> train_out;
        for (auto& x : inputs) train_out.push_back(rep.forward(x, false).values());
        rep.reparameterize();
        CHECK(rep.deployed);
        double max_diff = 0;
        for (size_t t = 0; t < inputs.size(); ++t) {
            auto deploy = rep.forward(inputs[t], false).values();
            for (size_t i = 0; i < deploy.size(); ++i)
                max_diff = std::max(max_diff, std::abs(deploy[i] - train_out[t][i]));
        }
        CHECK(max_diff <= 1e-5);
    }
}

TEST_CASE("repconv with zeroed 1x1 and no identity folds to the 3x3 branch") {
    Xorshift64Star rng(7);
    nn::RepConv<double> rep(3, 3, rng, false);
    for (auto& v : rep.conv1.weight.values()) v = 0.0;
    rep.reparameterize();
    for (int o = 0; o < 3; ++o) {
        const double is = 1.0 / std::sqrt(rep.bn3.running_var[static_cast<size_t>(o)] + rep.bn3.eps);
        const double g = rep.bn3.gain.data()[o] * is;
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 9; ++i)
                CHECK(rep.fused_weight.data()[(static_cast<size_t>(o) * 3 + c) * 9 + i] ==
                      doctest::Approx(rep.conv3.weight.data()[(static_cast<size_t>(o) * 3 + c) * 9 + i] * g));
    }
}

TEST_CASE("reparameterization is idempotent") {
    Xorshift64Star rng(8);
    nn::RepConv<double> rep(3, 3, rng, true);
    rep.reparameterize();
    auto w1 = rep.fused_weight.values();
    rep.reparameterize();
    CHECK(rep.fused_weight.values() == w1);
}

TEST_CASE("repconv train-mode gradients flow") {
    Xorshift64Star rng(9);
    nn::RepConv<double> rep(2, 2, rng, true);
    auto x = randn({2, 5, 5}, rng);
    std::vector<Td*> leaves = {&x, &rep.conv3.weight, &rep.conv1.weight, &rep.bn3.gain};
    auto r = gradcheck::check([&] { return sum_all(square(rep.forward(x, true))); }, leaves, rng, 4);
    CHECK(r.ok());
}

TEST_CASE("positional embedding is cached and bit-stable") {
    auto a = nn::sincos_position_embedding<float>(3, 4, 16);
    auto b = nn::sincos_position_embedding<float>(3, 4, 16);
    CHECK(a.values() == b.values());
    CHECK(a.shape() == Shape{12, 16});
    // distinct positions get distinct embeddings
    bool all_same = true;
    for (int j = 0; j < 16; ++j) all_same = all_same && a.at({0, j}) == a.at({5, j});
    CHECK(!all_same);
}

TEST_CASE("token flatten/reshape round trip is exact") {
    Xorshift64Star rng(10);
    auto x = randn({5, 3, 4}, rng, false);
    auto back = nn::chw_from_tokens(nn::tokens_from_chw(x), 5, 3, 4);
    CHECK(back.values() == x.values());
}
