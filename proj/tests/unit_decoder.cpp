#include "doctest.h"

#include "detlab/decoder.hpp"
#include "support/gradcheck.hpp"

using namespace detlab;
using Td = Tensor<double>;

namespace {

Td randn(Shape shape, Xorshift64Star& rng, bool rg = false, double lo = -1, double hi = 1) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Td::from(std::move(shape), std::move(v), rg);
}

DecoderConfig small_cfg(int layers = 2) {
    DecoderConfig cfg;
    cfg.num_layers = layers;
    cfg.num_queries = 5;
    cfg.npoints = 2;
    cfg.nheads = 2;
    cfg.levels = 3;
    cfg.ffn_dim = 16;
    cfg.dn_number = 6;
    return cfg;
}

std::vector<Td> small_pyramid(Xorshift64Star& rng, int c = 8) {
    return {randn({c, 8, 8}, rng), randn({c, 4, 4}, rng), randn({c, 2, 2}, rng)};
}

// queries with mid-image reference boxes (keeps sampling well inside)
Td mid_boxes(int k, Xorshift64Star& rng, bool rg = false) {
    std::vector<double> v;
    for (int i = 0; i < k; ++i) {
        v.push_back(inverse_sigmoid_value(rng.uniform(0.35, 0.65)));
        v.push_back(inverse_sigmoid_value(rng.uniform(0.35, 0.65)));
        v.push_back(inverse_sigmoid_value(rng.uniform(0.1, 0.25)));
        v.push_back(inverse_sigmoid_value(rng.uniform(0.1, 0.25)));
    }
    return Td::from({k, 4}, std::move(v), rg);
}

std::vector<GroundTruth> sample_gts() {
    return {{0, {0.1, 0.1, 0.3, 0.35}}, {2, {0.5, 0.5, 0.8, 0.7}}, {1, {0.15, 0.6, 0.4, 0.9}}, {0, {0.6, 0.1, 0.9, 0.3}}};
}

}  // namespace

TEST_CASE("deformable attention weights sum to one per (query, head)") {
    Xorshift64Star rng(1);
    DeformableAttention<double> at(8, 2, 3, 2, rng);
    // randomize the weight projection so the softmax is non-trivial
    for (auto& v : at.weights.weight.values()) v = rng.uniform(-1, 1);
    auto q = randn({5, 8}, rng);
    auto ref = sigmoid(mid_boxes(5, rng));
    std::vector<Td> attn;
    at.forward(q, small_pyramid(rng), ref, &attn);
    REQUIRE(attn.size() == 1);
    REQUIRE(attn[0].shape() == Shape{10, 6});  // (K*heads, levels*points)
    for (int r = 0; r < 10; ++r) {
        double s = 0;
        for (int j = 0; j < 6; ++j) s += attn[0].at({r, j});
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("zero offsets on constant feature maps reduce to a projected constant") {
    Xorshift64Star rng(2);
    DeformableAttention<double> at(8, 2, 3, 2, rng);
    // offsets are zero-initialized by construction; use constant maps
    std::vector<Td> pyramid = {Td::filled({8, 8, 8}, 0.37), Td::filled({8, 4, 4}, 0.37), Td::filled({8, 2, 2}, 0.37)};
    auto q = randn({4, 8}, rng);
    auto ref = sigmoid(mid_boxes(4, rng));
    auto out = at.forward(q, pyramid, ref);

    // expected: out_proj(value_proj(constant token)), weights summing to 1
    auto token = Td::filled({1, 8}, 0.37);
    auto expect = at.out_proj.forward(at.value_proj.forward(token));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 8; ++j) CHECK(out.at({i, j}) == doctest::Approx(expect.at({0, j})).epsilon(1e-9));
}

TEST_CASE("gradients flow to sampling offsets and match finite differences") {
    Xorshift64Star rng(3);
    DeformableAttention<double> at(8, 2, 3, 2, rng);
    for (auto& v : at.offsets.weight.values()) v = rng.uniform(-0.05, 0.05);
    auto q = randn({3, 8}, rng);
    auto pyr = small_pyramid(rng);
    auto ref = sigmoid(mid_boxes(3, rng));
    auto r = gradcheck::check([&] { return sum_all(square(at.forward(q, pyr, ref))); },
                              {&at.offsets.weight, &at.weights.weight, &at.value_proj.weight}, rng, 6);
    CHECK(r.ok());
}

TEST_CASE("fused deformable sampling equals the composed bilinear_sample route") {
    Xorshift64Star rng(42);
    const int k = 5, heads = 2, levels = 3, npoints = 2, c = 8, dh = c / heads, lp = levels * npoints;
    auto pyr = small_pyramid(rng);
    std::vector<Td> token_sets;
    std::vector<std::array<int, 2>> shapes;
    for (auto& f : pyr) {
        token_sets.push_back(nn::tokens_from_chw(f));
        shapes.push_back({f.dim(1), f.dim(2)});
    }
    auto values = concat(token_sets, 0);
    auto locs = randn({k, heads * lp * 2}, rng, false, 0.05, 0.95);
    auto w_raw = randn({k, heads * lp}, rng);
    auto w = reshape(softmax_lastdim(reshape(w_raw, {k * heads, lp})), {k, heads * lp});

    auto fused = ms_deform_sample(values, shapes, locs, w, heads);

    // reference: per (head, level) bilinear_sample composition
    auto expect = Td::zeros({k, c});
    for (int l = 0; l < levels; ++l) {
        auto v_chw = nn::chw_from_tokens(slice(values, 0, l == 0 ? 0 : (l == 1 ? 64 : 80), l == 0 ? 64 : (l == 1 ? 16 : 4)),
                                         c, shapes[(size_t)l][0], shapes[(size_t)l][1]);
        for (int h = 0; h < heads; ++h) {
            for (int q = 0; q < k; ++q)
                for (int p = 0; p < npoints; ++p) {
                    const int idx = (h * levels + l) * npoints + p;
                    auto pt = Td::from({1, 2}, {locs.at({q, 2 * idx}), locs.at({q, 2 * idx + 1})});
                    auto sampled = bilinear_sample(slice(v_chw, 0, h * dh, dh), pt);  // [dh, 1]
                    for (int j = 0; j < dh; ++j)
                        expect.values()[(size_t)q * c + h * dh + j] += w.at({q, idx}) * sampled.at({j, 0});
                }
        }
    }
    for (size_t i = 0; i < fused.values().size(); ++i)
        CHECK(fused.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-9));
}

TEST_CASE("fused deformable sampling gradients match finite differences") {
    Xorshift64Star rng(43);
    auto pyr = small_pyramid(rng);
    std::vector<Td> token_sets;
    std::vector<std::array<int, 2>> shapes;
    for (auto& f : pyr) {
        token_sets.push_back(nn::tokens_from_chw(f));
        shapes.push_back({f.dim(1), f.dim(2)});
    }
    auto values = concat(token_sets, 0).detach();
    values.set_requires_grad(true);
    const int k = 3, heads = 2, lp = 6;
    // cell-interior locations keep the FD stencil on one side of each kink
    std::vector<double> lv;
    for (int i = 0; i < k * heads * lp; ++i) {
        lv.push_back((rng.uniform_int(2) + 0.3 + 0.4 * rng.uniform()) / 2.0);
        lv.push_back((rng.uniform_int(2) + 0.3 + 0.4 * rng.uniform()) / 2.0);
    }
    auto locs = Td::from({k, heads * lp * 2}, std::move(lv), true);
    auto w = randn({k, heads * lp}, rng, true, 0.05, 1.0);
    auto r = gradcheck::check(
        [&] { return sum_all(square(ms_deform_sample(values, shapes, locs, w, heads))); }, {&values, &locs, &w}, rng, 8);
    CHECK(r.ok());
}

TEST_CASE("zero box deltas leave positions unchanged through every layer") {
    Xorshift64Star rng(4);
    Decoder<double> dec(8, small_cfg(2), 3, rng);
    // zero all box heads: refinement adds nothing
    nn::ParamCollector<double> pc;
    dec.collect(pc);
    for (auto& p : pc.params)
        if (p.name.find(".box.") != std::string::npos)
            for (auto& v : p.tensor->values()) v = 0.0;
    auto content = randn({5, 8}, rng);
    auto pos = mid_boxes(5, rng);
    auto out = dec.forward(content, pos, small_pyramid(rng), 2);
    auto expect = sigmoid(pos);
    for (int l = 0; l < 2; ++l)
        for (size_t i = 0; i < out.boxes[static_cast<size_t>(l)].values().size(); ++i)
            CHECK(out.boxes[static_cast<size_t>(l)].values()[i] == doctest::Approx(expect.values()[i]));
}

TEST_CASE("every layer emits [K, embed]-shaped content predictions and in-range boxes") {
    Xorshift64Star rng(5);
    Decoder<double> dec(8, small_cfg(3), 3, rng);
    auto out = dec.forward(randn({5, 8}, rng), mid_boxes(5, rng), small_pyramid(rng), 3);
    REQUIRE(out.logits.size() == 3);
    for (int l = 0; l < 3; ++l) {
        CHECK(out.logits[static_cast<size_t>(l)].shape() == Shape{5, 3});
        CHECK(out.boxes[static_cast<size_t>(l)].shape() == Shape{5, 4});
        for (double v : out.boxes[static_cast<size_t>(l)].values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("refinement detaches between layers") {
    Xorshift64Star rng(6);
    Decoder<double> dec(8, small_cfg(2), 3, rng);
    auto content = randn({5, 8}, rng, true);
    auto pos = mid_boxes(5, rng, true);
    auto out = dec.forward(content, pos, small_pyramid(rng), 2);
    backward(sum_all(out.boxes[1]));  // loss on layer 2 boxes only

    nn::ParamCollector<double> pc;
    dec.collect(pc);
    for (auto& p : pc.params) {
        if (p.name.find("layer0.box.") != std::string::npos) {
            // layer-1 box head must receive no gradient from the layer-2 loss
            bool all_zero = true;
            if (p.tensor->has_grad())
                for (double g : p.tensor->grad()) all_zero = all_zero && g == 0.0;
            CHECK(all_zero);
        }
        if (p.name.find("layer1.box.l2.weight") != std::string::npos) {
            REQUIRE(p.tensor->has_grad());
            bool nonzero = false;
            for (double g : p.tensor->grad()) nonzero = nonzero || g != 0.0;
            CHECK(nonzero);
        }
    }
}

TEST_CASE("truncated inference is bit-identical to the prefix of a full forward") {
    Xorshift64Star rng(7);
    Decoder<double> dec(8, small_cfg(3), 3, rng);
    auto content = randn({5, 8}, rng);
    auto pos = mid_boxes(5, rng);
    auto pyr = small_pyramid(rng);
    auto full = dec.forward(content, pos, pyr, 3);
    for (int k = 1; k <= 3; ++k) {
        auto part = dec.forward(content, pos, pyr, k);
        CHECK(part.boxes.back().values() == full.boxes[static_cast<size_t>(k - 1)].values());
        CHECK(part.logits.back().values() == full.logits[static_cast<size_t>(k - 1)].values());
    }
    CHECK_THROWS_AS(dec.forward(content, pos, pyr, 0), ConfigError);
    CHECK_THROWS_AS(dec.forward(content, pos, pyr, 4), ConfigError);
}

TEST_CASE("denoising group arithmetic and zero-noise exactness") {
    Xorshift64Star rng(8);
    Decoder<double> dec(8, small_cfg(), 3, rng);
    auto gts = sample_gts();

    DecoderConfig cfg = small_cfg();
    cfg.dn_number = 200;
    Xorshift64Star dn_rng(1);
    auto dn = make_denoising_batch(gts, cfg, dec.label_embedding(), 3, dn_rng);
    CHECK(dn.groups == 25);             // ceil(200 / (2*4))
    CHECK(dn.count() == 25 * 8);        // 25 groups of 4 pos + 4 neg

    cfg.label_noise_ratio = 0.0;
    cfg.box_noise_scale = 0.0;
    Xorshift64Star dn_rng2(1);
    auto clean = make_denoising_batch(gts, cfg, dec.label_embedding(), 3, dn_rng2);
    auto boxes = sigmoid(clean.pos_logits);
    for (int i = 0; i < clean.count(); ++i) {
        const auto gt = to_cxcywh(gts[static_cast<size_t>(clean.gt_index[static_cast<size_t>(i)])].box);
        CHECK(boxes.at({i, 0}) == doctest::Approx(gt.cx).epsilon(1e-9));
        CHECK(boxes.at({i, 1}) == doctest::Approx(gt.cy).epsilon(1e-9));
        CHECK(boxes.at({i, 2}) == doctest::Approx(gt.w).epsilon(1e-9));
        CHECK(boxes.at({i, 3}) == doctest::Approx(gt.h).epsilon(1e-9));
    }

    // empty GT -> empty batch
    Xorshift64Star dn_rng3(1);
    auto empty = make_denoising_batch<double>({}, cfg, dec.label_embedding(), 3, dn_rng3);
    CHECK(empty.count() == 0);
}

TEST_CASE("attention mask blocks matching->denoising and cross-group pairs") {
    Xorshift64Star rng(9);
    Decoder<double> dec(8, small_cfg(), 3, rng);
    auto gts = sample_gts();
    DecoderConfig cfg = small_cfg();
    cfg.dn_number = 16;  // 2 groups of 8
    Xorshift64Star dn_rng(2);
    auto dn = make_denoising_batch(gts, cfg, dec.label_embedding(), 3, dn_rng);
    REQUIRE(dn.groups == 2);
    const int d = dn.count();
    const int total = d + cfg.num_queries;
    REQUIRE(dn.attn_mask.shape() == Shape{total, total});
    for (int i = d; i < total; ++i)
        for (int j = 0; j < d; ++j) CHECK(dn.attn_mask.at({i, j}) == -1e9);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            const bool same_group = (i / 8) == (j / 8);
            CHECK(dn.attn_mask.at({i, j}) == (same_group ? 0.0 : -1e9));
        }
    // denoising queries may see the matching queries
    for (int i = 0; i < d; ++i)
        for (int j = d; j < total; ++j) CHECK(dn.attn_mask.at({i, j}) == 0.0);
}

TEST_CASE("zeroing denoising content changes no matching-query prediction") {
    Xorshift64Star rng(10);
    DecoderConfig cfg = small_cfg(2);
    Decoder<double> dec(8, cfg, 3, rng);
    auto gts = sample_gts();
    auto content = randn({cfg.num_queries, 8}, rng);
    auto pos = mid_boxes(cfg.num_queries, rng);
    auto pyr = small_pyramid(rng);

    Xorshift64Star dn_rng(3);
    auto dn = make_denoising_batch(gts, cfg, dec.label_embedding(), 3, dn_rng);
    auto out = dec.forward(content, pos, pyr, 2, &dn);

    auto dn_zero = dn;
    dn_zero.content = Td::zeros({dn.count(), 8});
    auto out_zero = dec.forward(content, pos, pyr, 2, &dn_zero);
    for (int l = 0; l < 2; ++l) {
        CHECK(out.logits[static_cast<size_t>(l)].values() == out_zero.logits[static_cast<size_t>(l)].values());
        CHECK(out.boxes[static_cast<size_t>(l)].values() == out_zero.boxes[static_cast<size_t>(l)].values());
    }
}

TEST_CASE("analytic decoder cost is strictly increasing in use_layers") {
    DecoderConfig cfg;
    uint64_t prev = 0;
    for (int k = 1; k <= cfg.num_layers; ++k) {
        const uint64_t f = decoder_flops(cfg, 256, 96, 96, k);
        CHECK(f > prev);
        prev = f;
    }
}
