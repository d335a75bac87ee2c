#include "doctest.h"

#include "detlab/backbone.hpp"
#include "support/gradcheck.hpp"

using namespace detlab;
using Td = Tensor<double>;

namespace {
Td rand_image(int h, int w, Xorshift64Star& rng, bool rg = false) {
    std::vector<double> v(static_cast<size_t>(3) * h * w);
    for (auto& x : v) x = rng.uniform(0, 1);
    return Td::from({3, h, w}, std::move(v), rg);
}
BackboneConfig tiny_cfg() {
    BackboneConfig cfg;
    cfg.stage_widths = {8, 12, 16, 24, 32};
    return cfg;
}
}  // namespace

TEST_CASE("pyramid stride arithmetic") {
    Xorshift64Star rng(1);
    BackboneTiny<double> bb(tiny_cfg(), rng);

    auto pyr = bb.forward(rand_image(96, 96, rng), false);
    CHECK(pyr.s3.shape() == Shape{16, 12, 12});
    CHECK(pyr.s4.shape() == Shape{24, 6, 6});
    CHECK(pyr.s5.shape() == Shape{32, 3, 3});

    auto pyr2 = bb.forward(rand_image(128, 128, rng), false);
    CHECK(pyr2.s5.shape() == Shape{32, 4, 4});

    // consecutive levels halve exactly
    CHECK(pyr.s3.dim(1) == 2 * pyr.s4.dim(1));
    CHECK(pyr.s4.dim(2) == 2 * pyr.s5.dim(2));
}

TEST_CASE("default pyramid widths are 64/128/256") {
    BackboneConfig cfg;
    CHECK(cfg.s3_channels() == 64);
    CHECK(cfg.s4_channels() == 128);
    CHECK(cfg.s5_channels() == 256);
}

TEST_CASE("indivisible input extent is a configuration error") {
    Xorshift64Star rng(2);
    BackboneTiny<double> bb(tiny_cfg(), rng);
    CHECK_THROWS_AS(bb.forward(Td::zeros({3, 96, 80}), false), ConfigError);
}

TEST_CASE("same weights and input give bit-identical outputs") {
    Xorshift64Star rng(3);
    BackboneTiny<double> bb(tiny_cfg(), rng);
    auto img = rand_image(64, 64, rng);
    auto a = bb.forward(img, false);
    auto b = bb.forward(img, false);
    CHECK(a.s3.values() == b.s3.values());
    CHECK(a.s4.values() == b.s4.values());
    CHECK(a.s5.values() == b.s5.values());
}

TEST_CASE("gradient reaches every backbone parameter") {
    Xorshift64Star rng(4);
    BackboneTiny<double> bb(tiny_cfg(), rng);
    auto img = rand_image(64, 64, rng);
    auto pyr = bb.forward(img, true);
    auto loss = add(sum_all(square(pyr.s3)), add(sum_all(square(pyr.s4)), sum_all(square(pyr.s5))));
    backward(loss);

    nn::ParamCollector<double> pc;
    bb.collect(pc);
    CHECK(pc.params.size() > 0);
    for (const auto& p : pc.params) {
        REQUIRE(p.tensor->has_grad());
        bool nonzero = false;
        for (double g : p.tensor->grad()) nonzero = nonzero || g != 0.0;
        INFO("param ", p.name);
        CHECK(nonzero);
    }
}
