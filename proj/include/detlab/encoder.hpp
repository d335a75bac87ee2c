#pragma once

// Hybrid encoder: intra-scale attention on the deepest level (AIFI) plus
// convolutional cross-scale fusion (CCFF), together with the A/B/C/D/D_S5
// variant scaffolding used for the encoder cost study.

#include <string>
#include <vector>

#include "detlab/backbone.hpp"
#include "detlab/nn.hpp"

namespace detlab {

enum class EncoderVariant { A, B, C, D, D_S5, E };

inline const char* variant_name(EncoderVariant v) {
    switch (v) {
        case EncoderVariant::A: return "A";
        case EncoderVariant::B: return "B";
        case EncoderVariant::C: return "C";
        case EncoderVariant::D: return "D";
        case EncoderVariant::D_S5: return "D_S5";
        case EncoderVariant::E: return "E";
    }
    return "?";
}

inline EncoderVariant parse_variant(const std::string& s) {
    if (s == "A") return EncoderVariant::A;
    if (s == "B") return EncoderVariant::B;
    if (s == "C") return EncoderVariant::C;
    if (s == "D") return EncoderVariant::D;
    if (s == "D_S5" || s == "DS5") return EncoderVariant::D_S5;
    if (s == "E") return EncoderVariant::E;
    throw ConfigError(str_cat("unknown encoder variant '", s, "'"));
}

struct EncoderConfig {
    EncoderVariant variant = EncoderVariant::E;
    int embed_dim = 256;
    int nheads = 8;
    int ffn_dim = 1024;
    int aifi_layers = 1;
    int repblocks = 3;
    double width_mult = 0.25;  // fusion-block hidden width as a fraction of embed_dim

    void validate() const {
        if (embed_dim % nheads != 0)
            throw ConfigError(str_cat("embed_dim ", embed_dim, " not divisible by nheads ", nheads));
        if (width_mult <= 0.0 || width_mult > 1.0)
            throw ConfigError(str_cat("width_mult ", width_mult, " outside (0,1]"));
    }
    int hidden_channels() const { return std::max(4, static_cast<int>(embed_dim * width_mult)); }
};

// conv + batch norm + SiLU
template <typename T>
struct ConvNorm {
    nn::Conv2d<T> conv;
    nn::BatchNorm2d<T> norm;
    bool act = true;

    ConvNorm() = default;
    ConvNorm(int in, int out, int k, int stride, Xorshift64Star& rng, bool act_ = true)
        : conv(in, out, k, stride, rng, false), norm(out), act(act_) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        auto y = norm.forward(conv.forward(x), training);
        return act ? silu(y) : y;
    }
    void collect(nn::ParamCollector<T>& pc) {
        pc.sub("conv", conv);
        pc.sub("norm", norm);
    }
};

// Fusion block: concat -> two 1x1 convs into two paths -> RepConv stack on one
// path -> element-wise add (plus a 1x1 out conv when the hidden width differs).
template <typename T>
struct FusionBlock {
    ConvNorm<T> in1, in2;
    std::vector<nn::RepConv<T>> reps;
    ConvNorm<T> out;
    bool has_out = false;

    FusionBlock() = default;
    FusionBlock(int channels, int hidden, int nreps, Xorshift64Star& rng)
        : in1(2 * channels, hidden, 1, 1, rng), in2(2 * channels, hidden, 1, 1, rng), has_out(hidden != channels) {
        for (int i = 0; i < nreps; ++i) reps.emplace_back(hidden, hidden, rng, true);
        if (has_out) out = ConvNorm<T>(hidden, channels, 1, 1, rng);
    }

    Tensor<T> forward(const Tensor<T>& high, const Tensor<T>& low, bool training) {
        if (high.dim(1) != low.dim(1) || high.dim(2) != low.dim(2))
            throw ShapeError(str_cat("fusion_block: spatial mismatch ", shape_str(high.shape()), " vs ",
                                     shape_str(low.shape())));
        auto cat = concat<T>({high, low}, 0);
        auto a = in1.forward(cat, training);
        auto b = in2.forward(cat, training);
        for (auto& rep : reps) a = rep.forward(a, training);
        auto sum = add(a, b);
        return has_out ? out.forward(sum, training) : sum;
    }
    void collect(nn::ParamCollector<T>& pc) {
        pc.sub("in1", in1);
        pc.sub("in2", in2);
        for (size_t i = 0; i < reps.size(); ++i) pc.sub(str_cat("rep", i), reps[i]);
        if (has_out) pc.sub("out", out);
    }
    void reparameterize() {
        for (auto& rep : reps) rep.reparameterize();
    }
};

template <typename T>
class HybridEncoder {
public:
    HybridEncoder() = default;
    HybridEncoder(const EncoderConfig& cfg, const BackboneConfig& bb, Xorshift64Star& rng) : cfg_(cfg) {
        cfg_.validate();
        const int c = cfg_.embed_dim;
        projs_.emplace_back(bb.s3_channels(), c, 1, 1, rng, false);
        projs_.emplace_back(bb.s4_channels(), c, 1, 1, rng, false);
        projs_.emplace_back(bb.s5_channels(), c, 1, 1, rng, false);

        const bool need_sse = cfg_.variant != EncoderVariant::A;
        if (need_sse)
            for (int i = 0; i < cfg_.aifi_layers; ++i) sse_.emplace_back(c, cfg_.nheads, cfg_.ffn_dim, rng);

        if (cfg_.variant == EncoderVariant::E) {
            const int hidden = cfg_.hidden_channels();
            laterals_.emplace_back(c, c, 1, 1, rng);  // level 5
            laterals_.emplace_back(c, c, 1, 1, rng);  // level 4
            td_fuse_.emplace_back(c, hidden, cfg_.repblocks, rng);  // makes P4
            td_fuse_.emplace_back(c, hidden, cfg_.repblocks, rng);  // makes P3
            downs_.emplace_back(c, c, 3, 2, rng);  // P3 -> stride 16
            downs_.emplace_back(c, c, 3, 2, rng);  // N4 -> stride 32
            bu_fuse_.emplace_back(c, hidden, cfg_.repblocks, rng);  // makes N4
            bu_fuse_.emplace_back(c, hidden, cfg_.repblocks, rng);  // makes N5
        }
    }

    // intra-scale interaction on one level: flatten, attention with 2D sine
    // positions on Q,K, reshape back to the input spatial shape
    Tensor<T> aifi(const Tensor<T>& s5, bool training) {
        (void)training;
        const int c = s5.dim(0), h = s5.dim(1), w = s5.dim(2);
        if (c != cfg_.embed_dim) throw ShapeError(str_cat("aifi: expected ", cfg_.embed_dim, " channels, got ", c));
        auto tokens = nn::tokens_from_chw(s5);
        auto pos = nn::sincos_position_embedding<T>(h, w, cfg_.embed_dim);
        for (auto& layer : sse_) tokens = layer.forward(tokens, &pos);
        return nn::chw_from_tokens(tokens, c, h, w);
    }

    // cross-scale fusion over the projected pyramid (top-down then bottom-up)
    std::vector<Tensor<T>> ccff(const Tensor<T>& p3, const Tensor<T>& p4, const Tensor<T>& f5, bool training) {
        auto lat5 = laterals_[0].forward(f5, training);
        auto p4m = td_fuse_[0].forward(upsample2x_nearest(lat5), p4, training);
        auto lat4 = laterals_[1].forward(p4m, training);
        auto p3m = td_fuse_[1].forward(upsample2x_nearest(lat4), p3, training);

        auto n4 = bu_fuse_[0].forward(downs_[0].forward(p3m, training), lat4, training);
        auto n5 = bu_fuse_[1].forward(downs_[1].forward(n4, training), lat5, training);
        return {p3m, n4, n5};
    }

    // fused pyramid at embed_dim channels, same spatial extents as the input
    std::vector<Tensor<T>> forward(const FeaturePyramid<T>& pyr, bool training) {
        auto p3 = projs_[0].forward(pyr.s3, training);
        auto p4 = projs_[1].forward(pyr.s4, training);
        auto p5 = projs_[2].forward(pyr.s5, training);
        switch (cfg_.variant) {
            case EncoderVariant::A:
                return {p3, p4, p5};
            case EncoderVariant::B:
                return {sse_level(p3), sse_level(p4), sse_level(p5)};
            case EncoderVariant::C:
                return mse_concat(p3, p4, p5);
            case EncoderVariant::D:
                return pan_pool(sse_level(p3), sse_level(p4), sse_level(p5));
            case EncoderVariant::D_S5:
                return pan_pool(p3, p4, sse_level(p5));
            case EncoderVariant::E:
                return ccff(p3, p4, aifi(p5, training), training);
        }
        throw ConfigError("unknown encoder variant");
    }

    void collect(nn::ParamCollector<T>& pc) {
        for (size_t i = 0; i < projs_.size(); ++i) pc.sub(str_cat("proj", i + 3), projs_[i]);
        for (size_t i = 0; i < sse_.size(); ++i) pc.sub(str_cat("sse", i), sse_[i]);
        for (size_t i = 0; i < laterals_.size(); ++i) pc.sub(str_cat("lateral", i), laterals_[i]);
        for (size_t i = 0; i < td_fuse_.size(); ++i) pc.sub(str_cat("td_fuse", i), td_fuse_[i]);
        for (size_t i = 0; i < downs_.size(); ++i) pc.sub(str_cat("down", i), downs_[i]);
        for (size_t i = 0; i < bu_fuse_.size(); ++i) pc.sub(str_cat("bu_fuse", i), bu_fuse_[i]);
    }

    void reparameterize() {
        for (auto& f : td_fuse_) f.reparameterize();
        for (auto& f : bu_fuse_) f.reparameterize();
    }

    const EncoderConfig& config() const { return cfg_; }

private:
    Tensor<T> sse_level(const Tensor<T>& p) {
        auto tokens = nn::tokens_from_chw(p);
        auto pos = nn::sincos_position_embedding<T>(p.dim(1), p.dim(2), cfg_.embed_dim);
        for (auto& layer : sse_) tokens = layer.forward(tokens, &pos);
        return nn::chw_from_tokens(tokens, p.dim(0), p.dim(1), p.dim(2));
    }

    // global attention over the concatenated multi-scale sequence
    std::vector<Tensor<T>> mse_concat(const Tensor<T>& p3, const Tensor<T>& p4, const Tensor<T>& p5) {
        const int t3 = p3.dim(1) * p3.dim(2), t4 = p4.dim(1) * p4.dim(2), t5 = p5.dim(1) * p5.dim(2);
        auto tokens = concat<T>({nn::tokens_from_chw(p3), nn::tokens_from_chw(p4), nn::tokens_from_chw(p5)}, 0);
        auto pos = concat<T>({nn::sincos_position_embedding<T>(p3.dim(1), p3.dim(2), cfg_.embed_dim),
                              nn::sincos_position_embedding<T>(p4.dim(1), p4.dim(2), cfg_.embed_dim),
                              nn::sincos_position_embedding<T>(p5.dim(1), p5.dim(2), cfg_.embed_dim)},
                             0);
        for (auto& layer : sse_) tokens = layer.forward(tokens, &pos);
        return {nn::chw_from_tokens(slice(tokens, 0, 0, t3), cfg_.embed_dim, p3.dim(1), p3.dim(2)),
                nn::chw_from_tokens(slice(tokens, 0, t3, t4), cfg_.embed_dim, p4.dim(1), p4.dim(2)),
                nn::chw_from_tokens(slice(tokens, 0, t3 + t4, t5), cfg_.embed_dim, p5.dim(1), p5.dim(2))};
    }

    // parameter-free PAN path: nearest upsample + add, average-pool + add
    std::vector<Tensor<T>> pan_pool(const Tensor<T>& p3, const Tensor<T>& p4, const Tensor<T>& p5) {
        auto t4 = add(p4, upsample2x_nearest(p5));
        auto t3 = add(p3, upsample2x_nearest(t4));
        auto n4 = add(t4, avgpool2x(t3));
        auto n5 = add(p5, avgpool2x(n4));
        return {t3, n4, n5};
    }

    EncoderConfig cfg_;
    std::vector<ConvNorm<T>> projs_;
    std::vector<nn::TransformerLayer<T>> sse_;
    std::vector<ConvNorm<T>> laterals_;
    std::vector<FusionBlock<T>> td_fuse_;
    std::vector<ConvNorm<T>> downs_;
    std::vector<FusionBlock<T>> bu_fuse_;
};

// ---------------------------------------------------------------------------
// analytic cost model (multiplies and adds, deterministic integers)

struct EncoderCost {
    uint64_t flops = 0;
    int64_t params = 0;
};

namespace detail_flops {

inline uint64_t conv_flops(uint64_t tokens, uint64_t in_c, uint64_t out_c, uint64_t k) {
    return 2ull * tokens * in_c * out_c * k * k;
}
inline uint64_t attention_layer_flops(uint64_t t, uint64_t c, uint64_t ffn) {
    // qkvo projections, logits + weighted sum, ffn, norms
    return 2ull * t * c * c * 4 + 2ull * t * t * c * 2 + 2ull * t * c * ffn * 2 + 10ull * t * c;
}

}  // namespace detail_flops

// Analytic multiply-add count for one encoder forward at the given input size.
inline EncoderCost encoder_flops(const EncoderConfig& cfg, const BackboneConfig& bb, int height, int width) {
    using namespace detail_flops;
    if (height % 32 || width % 32) throw ConfigError("encoder_flops: extents must be divisible by 32");
    const uint64_t c = static_cast<uint64_t>(cfg.embed_dim);
    const uint64_t ffn = static_cast<uint64_t>(cfg.ffn_dim);
    const uint64_t t3 = static_cast<uint64_t>(height / 8) * (width / 8);
    const uint64_t t4 = static_cast<uint64_t>(height / 16) * (width / 16);
    const uint64_t t5 = static_cast<uint64_t>(height / 32) * (width / 32);

    EncoderCost cost;
    // input projections (all variants)
    cost.flops += conv_flops(t3, static_cast<uint64_t>(bb.s3_channels()), c, 1);
    cost.flops += conv_flops(t4, static_cast<uint64_t>(bb.s4_channels()), c, 1);
    cost.flops += conv_flops(t5, static_cast<uint64_t>(bb.s5_channels()), c, 1);
    cost.params += (bb.s3_channels() + bb.s4_channels() + bb.s5_channels()) * cfg.embed_dim + 6 * cfg.embed_dim;

    const int64_t sse_params =
        cfg.aifi_layers * (4 * (cfg.embed_dim * cfg.embed_dim + cfg.embed_dim) +
                           2 * (cfg.embed_dim * cfg.ffn_dim) + cfg.ffn_dim + cfg.embed_dim + 4 * cfg.embed_dim);
    auto sse = [&](uint64_t t) { return static_cast<uint64_t>(cfg.aifi_layers) * attention_layer_flops(t, c, ffn); };
    auto pan_pool = [&] {
        // nearest upsample + add (t3+t4 adds times c), two 2x2 average pools
        return (t3 + t4) * c + (t4 + t5) * c * 5 + (t4 + t5) * c;
    };

    const uint64_t hidden = static_cast<uint64_t>(cfg.hidden_channels());
    auto fusion_block = [&](uint64_t t) {
        uint64_t f = 2 * conv_flops(t, 2 * c, hidden, 1);                               // two input 1x1s
        f += static_cast<uint64_t>(cfg.repblocks) * (conv_flops(t, hidden, hidden, 3) +  // RepConv branches
                                                     conv_flops(t, hidden, hidden, 1) + 3 * t * hidden);
        f += t * hidden;  // path add
        if (hidden != c) f += conv_flops(t, hidden, c, 1);
        return f;
    };
    const int64_t rep_params = 9 * static_cast<int64_t>(hidden) * static_cast<int64_t>(hidden) +
                               static_cast<int64_t>(hidden) * static_cast<int64_t>(hidden) + 3 * 2 * static_cast<int64_t>(hidden);
    const int64_t fusion_params = 2 * (2 * cfg.embed_dim * static_cast<int64_t>(hidden) + 2 * static_cast<int64_t>(hidden)) +
                                  cfg.repblocks * rep_params +
                                  (hidden != c ? static_cast<int64_t>(hidden) * cfg.embed_dim + 2 * cfg.embed_dim : 0);
    auto ccff = [&] {
        uint64_t f = conv_flops(t5, c, c, 1) + conv_flops(t4, c, c, 1);  // laterals at levels 5 and 4
        f += (t4 + t3) * c;                                                      // nearest upsample copies counted as moves
        f += fusion_block(t4) + fusion_block(t3);                                // top-down
        f += conv_flops(t4, c, c, 3) + conv_flops(t5, c, c, 3);                  // stride-2 downsamples
        f += fusion_block(t4) + fusion_block(t5);                                // bottom-up
        return f;
    };
    const int64_t ccff_params = 2 * (cfg.embed_dim * cfg.embed_dim + 2 * cfg.embed_dim) + 4 * fusion_params +
                                2 * (9 * cfg.embed_dim * cfg.embed_dim + 2 * cfg.embed_dim);

    switch (cfg.variant) {
        case EncoderVariant::A:
            break;
        case EncoderVariant::B:
            cost.flops += sse(t3) + sse(t4) + sse(t5);
            cost.params += sse_params;  // shared weights across levels
            break;
        case EncoderVariant::C:
            cost.flops += sse(t3 + t4 + t5);
            cost.params += sse_params;
            break;
        case EncoderVariant::D:
            cost.flops += sse(t3) + sse(t4) + sse(t5) + pan_pool();
            cost.params += sse_params;
            break;
        case EncoderVariant::D_S5:
            cost.flops += sse(t5) + pan_pool();
            cost.params += sse_params;
            break;
        case EncoderVariant::E:
            cost.flops += sse(t5) + ccff();
            cost.params += sse_params + ccff_params;
            break;
    }
    return cost;
}

// CSV table (variant,params,flops) over all variants at one input size
inline std::string encoder_cost_csv(const EncoderConfig& base, const BackboneConfig& bb, int height, int width) {
    std::string csv = "variant,params,flops\n";
    for (EncoderVariant v : {EncoderVariant::A, EncoderVariant::B, EncoderVariant::C, EncoderVariant::D,
                             EncoderVariant::D_S5, EncoderVariant::E}) {
        EncoderConfig cfg = base;
        cfg.variant = v;
        const EncoderCost cost = encoder_flops(cfg, bb, height, width);
        csv += str_cat(variant_name(v), ",", cost.params, ",", cost.flops, "\n");
    }
    return csv;
}

}  // namespace detlab
