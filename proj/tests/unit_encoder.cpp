#include "doctest.h"

#include "detlab/encoder.hpp"
#include "support/gradcheck.hpp"

using namespace detlab;
using Td = Tensor<double>;

namespace {

Td randn(Shape shape, Xorshift64Star& rng, bool rg = false) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Td::from(std::move(shape), std::move(v), rg);
}

BackboneConfig small_bb() {
    BackboneConfig cfg;
    cfg.stage_widths = {4, 6, 8, 12, 16};
    return cfg;
}

EncoderConfig small_cfg(EncoderVariant v = EncoderVariant::E) {
    EncoderConfig cfg;
    cfg.variant = v;
    cfg.embed_dim = 16;
    cfg.nheads = 4;
    cfg.ffn_dim = 32;
    cfg.width_mult = 1.0;
    return cfg;
}

FeaturePyramid<double> rand_pyramid(const BackboneConfig& bb, int h, int w, Xorshift64Star& rng, bool rg = false) {
    return {randn({bb.s3_channels(), h / 8, w / 8}, rng, rg), randn({bb.s4_channels(), h / 16, w / 16}, rng, rg),
            randn({bb.s5_channels(), h / 32, w / 32}, rng, rg)};
}

}  // namespace

TEST_CASE("aifi preserves the spatial shape of the deepest level") {
    Xorshift64Star rng(1);
    EncoderConfig cfg;  // paper-scale defaults: embed 256, heads 8, ffn 1024
    CHECK(cfg.embed_dim == 256);
    CHECK(cfg.nheads == 8);
    CHECK(cfg.ffn_dim == 1024);
    CHECK(cfg.aifi_layers == 1);
    CHECK(cfg.repblocks == 3);
    BackboneConfig bb;
    HybridEncoder<double> enc(cfg, bb, rng);
    auto s5 = randn({256, 3, 3}, rng);
    auto f5 = enc.aifi(s5, false);
    CHECK(f5.shape() == Shape{256, 3, 3});  // 9 tokens in, [256,3,3] out
}

TEST_CASE("ccff on all-zero inputs stays zero with zero-initialized biases") {
    Xorshift64Star rng(2);
    HybridEncoder<double> enc(small_cfg(), small_bb(), rng);
    FeaturePyramid<double> pyr{Td::zeros({8, 8, 8}), Td::zeros({12, 4, 4}), Td::zeros({16, 2, 2})};
    auto outs = enc.forward(pyr, false);
    REQUIRE(outs.size() == 3);
    for (const auto& o : outs)
        for (double v : o.values()) CHECK(std::abs(v) <= 1e-12);
}

TEST_CASE("fused pyramid keeps spatial extents and embed channels for any widths") {
    Xorshift64Star rng(3);
    for (auto widths : {std::vector<int>{4, 6, 8, 12, 16}, std::vector<int>{4, 6, 10, 20, 24}}) {
        BackboneConfig bb;
        bb.stage_widths = widths;
        HybridEncoder<double> enc(small_cfg(), bb, rng);
        auto pyr = rand_pyramid(bb, 64, 64, rng);
        auto outs = enc.forward(pyr, false);
        CHECK(outs[0].shape() == Shape{16, 8, 8});
        CHECK(outs[1].shape() == Shape{16, 4, 4});
        CHECK(outs[2].shape() == Shape{16, 2, 2});
    }
}

TEST_CASE("gradient reaches S3 from a loss on the deepest fused output") {
    Xorshift64Star rng(4);
    HybridEncoder<double> enc(small_cfg(), small_bb(), rng);
    auto pyr = rand_pyramid(small_bb(), 64, 64, rng, true);
    auto outs = enc.forward(pyr, true);
    backward(sum_all(square(outs[2])));
    REQUIRE(pyr.s3.has_grad());
    bool nonzero = false;
    for (double g : pyr.s3.grad()) nonzero = nonzero || g != 0.0;
    CHECK(nonzero);
}

TEST_CASE("fusion block rejects mismatched spatial extents") {
    Xorshift64Star rng(5);
    FusionBlock<double> fb(8, 8, 3, rng);
    CHECK_THROWS_AS(fb.forward(Td::zeros({8, 4, 4}), Td::zeros({8, 2, 2}), false), ShapeError);
}

TEST_CASE("fusion block with disabled RepConv branches reduces to the second path") {
    Xorshift64Star rng(6);
    FusionBlock<double> fb(6, 6, 3, rng);  // hidden == channels: no out conv
    REQUIRE(!fb.has_out);
    // make every RepConv an exact identity: conv branches zero, identity norm
    // rescaled so the affine map is 1, ReLU activation with positive inputs
    for (auto& rep : fb.reps) {
        rep.act = Act::Relu;
        for (auto& v : rep.conv3.weight.values()) v = 0.0;
        for (auto& v : rep.conv1.weight.values()) v = 0.0;
        REQUIRE(rep.with_identity);
        for (size_t c = 0; c < 6; ++c) {
            rep.bnid.running_mean[c] = 0.0;
            rep.bnid.running_var[c] = 1.0;
            rep.bnid.gain.values()[c] = std::sqrt(1.0 + rep.bnid.eps);
        }
    }
    // keep the RepConv path positive so ReLU passes it through
    for (auto& v : fb.in1.norm.bias.values()) v = 10.0;

    auto high = randn({6, 4, 4}, rng);
    auto low = randn({6, 4, 4}, rng);
    auto got = fb.forward(high, low, false);

    auto cat = concat<double>({high, low}, 0);
    auto expect = add(fb.in1.forward(cat, false), fb.in2.forward(cat, false));
    for (size_t i = 0; i < expect.values().size(); ++i)
        CHECK(got.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-9));
}

TEST_CASE("variant construction and parameter footprints") {
    Xorshift64Star rng(7);
    auto params_of = [&](EncoderVariant v) {
        HybridEncoder<double> enc(small_cfg(v), small_bb(), rng);
        nn::ParamCollector<double> pc;
        enc.collect(pc);
        return pc.param_count();
    };
    const int64_t proj_only = 3 * (8 * 16 + 2 * 16) + (12 - 8) * 16 + (16 - 12) * 16;
    // variant A: projections only (3 1x1 convs + norms)
    int64_t expected_proj = (8 * 16 + 2 * 16) + (12 * 16 + 2 * 16) + (16 * 16 + 2 * 16);
    CHECK(params_of(EncoderVariant::A) == expected_proj);
    (void)proj_only;

    // B, C, D, D_S5 share one transformer stack
    const int64_t b = params_of(EncoderVariant::B);
    CHECK(params_of(EncoderVariant::C) == b);
    CHECK(params_of(EncoderVariant::D) == b);
    CHECK(params_of(EncoderVariant::D_S5) == b);
    CHECK(params_of(EncoderVariant::E) > b);

    CHECK_THROWS_AS(parse_variant("Z"), ConfigError);
}

TEST_CASE("variant forwards produce consistent pyramids") {
    Xorshift64Star rng(8);
    for (EncoderVariant v : {EncoderVariant::A, EncoderVariant::B, EncoderVariant::C, EncoderVariant::D,
                             EncoderVariant::D_S5, EncoderVariant::E}) {
        HybridEncoder<double> enc(small_cfg(v), small_bb(), rng);
        auto pyr = rand_pyramid(small_bb(), 64, 64, rng);
        auto outs = enc.forward(pyr, false);
        REQUIRE(outs.size() == 3);
        CHECK(outs[0].shape() == Shape{16, 8, 8});
        CHECK(outs[2].shape() == Shape{16, 2, 2});
        for (const auto& o : outs) CHECK(all_finite(o));
    }
}

TEST_CASE("encoder reparameterization keeps eval outputs within 1e-5") {
    Xorshift64Star rng(9);
    HybridEncoder<double> enc(small_cfg(), small_bb(), rng);
    auto pyr = rand_pyramid(small_bb(), 64, 64, rng);
    enc.forward(pyr, true);  // move running stats off their init
    auto before = enc.forward(pyr, false);
    enc.reparameterize();
    auto after = enc.forward(pyr, false);
    double max_diff = 0;
    for (size_t l = 0; l < 3; ++l)
        for (size_t i = 0; i < before[l].values().size(); ++i)
            max_diff = std::max(max_diff, std::abs(before[l].values()[i] - after[l].values()[i]));
    CHECK(max_diff <= 1e-5);
}

TEST_CASE("analytic cost ordering holds for all extents divisible by 32") {
    EncoderConfig cfg;  // defaults: embed 256, ffn 1024, width_mult 0.25
    BackboneConfig bb;
    for (int hw : {32, 64, 96, 128, 160, 256, 320, 640}) {
        auto f = [&](EncoderVariant v) {
            EncoderConfig c = cfg;
            c.variant = v;
            return encoder_flops(c, bb, hw, hw).flops;
        };
        INFO("extent ", hw);
        CHECK(f(EncoderVariant::A) < f(EncoderVariant::D_S5));
        CHECK(f(EncoderVariant::D_S5) < f(EncoderVariant::E));
        CHECK(f(EncoderVariant::E) <= f(EncoderVariant::D));
        CHECK(f(EncoderVariant::D) < f(EncoderVariant::C));
    }
}

TEST_CASE("cost csv lists every variant") {
    auto csv = encoder_cost_csv(EncoderConfig{}, BackboneConfig{}, 96, 96);
    CHECK(csv.find("variant,params,flops") == 0);
    for (const char* name : {"\nA,", "\nB,", "\nC,", "\nD,", "\nD_S5,", "\nE,"})
        CHECK(csv.find(name) != std::string::npos);
}
