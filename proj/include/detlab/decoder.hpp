#pragma once

// Multi-layer decoder: masked self-attention over object queries, multi-scale
// deformable cross-attention into the fused pyramid, iterative box refinement
// in inverse-sigmoid space (detached between layers), denoising query groups,
// and inference-time truncation to a layer prefix.

#include <array>
#include <vector>

#include "detlab/geometry.hpp"
#include "detlab/nn.hpp"
#include "detlab/synth.hpp"

namespace detlab {

struct DecoderConfig {
    int num_layers = 6;
    int num_queries = 300;
    int npoints = 4;
    int nheads = 8;
    int levels = 3;
    int ffn_dim = 1024;
    int dn_number = 200;
    double label_noise_ratio = 0.5;
    double box_noise_scale = 1.0;

    void validate(int embed_dim) const {
        if (embed_dim % nheads != 0)
            throw ConfigError(str_cat("decoder: embed_dim ", embed_dim, " not divisible by ", nheads, " heads"));
        if (num_layers < 1) throw ConfigError("decoder: num_layers must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// fused multi-scale deformable sampling core: one op for all heads, levels and
// points, with the same pixel-center / zero-padding semantics as
// bilinear_sample (the composed route it replaces is kept as a test oracle)

template <typename T>
Tensor<T> ms_deform_sample(const Tensor<T>& values, const std::vector<std::array<int, 2>>& shapes,
                           const Tensor<T>& locs, const Tensor<T>& weights, int heads) {
    const int total_tokens = values.dim(0);
    const int c = values.dim(1);
    const int k = locs.dim(0);
    const int levels = static_cast<int>(shapes.size());
    const int lp = weights.dim(1) / heads;
    const int npoints = lp / levels;
    const int dh = c / heads;
    if (locs.dim(1) != heads * lp * 2) throw ShapeError("ms_deform_sample: loc/weight column mismatch");
    std::vector<int> level_start(static_cast<size_t>(levels), 0);
    {
        int acc = 0;
        for (int l = 0; l < levels; ++l) {
            level_start[static_cast<size_t>(l)] = acc;
            acc += shapes[static_cast<size_t>(l)][0] * shapes[static_cast<size_t>(l)][1];
        }
        if (acc != total_tokens) throw ShapeError("ms_deform_sample: token count does not match level shapes");
    }

    const T* vv = values.data();
    const T* lv = locs.data();
    const T* wv = weights.data();
    std::vector<T> out(static_cast<size_t>(k) * c, T(0));
    for (int q = 0; q < k; ++q) {
        const T* lrow = lv + static_cast<size_t>(q) * heads * lp * 2;
        const T* wrow = wv + static_cast<size_t>(q) * heads * lp;
        for (int h = 0; h < heads; ++h) {
            T* orow = out.data() + static_cast<size_t>(q) * c + h * dh;
            for (int l = 0; l < levels; ++l) {
                const int gh = shapes[static_cast<size_t>(l)][0], gw = shapes[static_cast<size_t>(l)][1];
                for (int p = 0; p < npoints; ++p) {
                    const int idx = (h * levels + l) * npoints + p;
                    const T aw = wrow[idx];
                    const T px = lrow[2 * idx] * static_cast<T>(gw) - T(0.5);
                    const T py = lrow[2 * idx + 1] * static_cast<T>(gh) - T(0.5);
                    const int x0 = static_cast<int>(std::floor(px));
                    const int y0 = static_cast<int>(std::floor(py));
                    const T fx = px - static_cast<T>(x0), fy = py - static_cast<T>(y0);
                    for (int ty = 0; ty < 2; ++ty) {
                        const int yy = y0 + ty;
                        if (yy < 0 || yy >= gh) continue;
                        const T wy = ty ? fy : T(1) - fy;
                        for (int tx = 0; tx < 2; ++tx) {
                            const int xx = x0 + tx;
                            if (xx < 0 || xx >= gw) continue;
                            const T wt = aw * wy * (tx ? fx : T(1) - fx);
                            const T* vrow = vv + (static_cast<size_t>(level_start[static_cast<size_t>(l)]) +
                                                  static_cast<size_t>(yy) * gw + xx) *
                                                     c +
                                            h * dh;
                            for (int j = 0; j < dh; ++j) orow[j] += wt * vrow[j];
                        }
                    }
                }
            }
        }
    }

    auto vn = values.node(); auto ln = locs.node(); auto wn = weights.node();
    auto starts = level_start;
    return detail::make_op<T>({k, c}, std::move(out), {values, locs, weights},
        [vn, ln, wn, shapes, starts, heads, k, c, dh, levels, npoints, lp](detail::TensorNode<T>& o) {
            const T* g = o.grad.data();
            const T* vv = vn->values.data();
            const T* lv = ln->values.data();
            const T* wv = wn->values.data();
            T* gv = vn->requires_grad ? vn->grad_data() : nullptr;
            T* gl = ln->requires_grad ? ln->grad_data() : nullptr;
            T* gw = wn->requires_grad ? wn->grad_data() : nullptr;
            for (int q = 0; q < k; ++q) {
                const T* lrow = lv + static_cast<size_t>(q) * heads * lp * 2;
                const T* wrow = wv + static_cast<size_t>(q) * heads * lp;
                for (int h = 0; h < heads; ++h) {
                    const T* grow = g + static_cast<size_t>(q) * c + h * dh;
                    for (int l = 0; l < levels; ++l) {
                        const int gh2 = shapes[static_cast<size_t>(l)][0], gw2 = shapes[static_cast<size_t>(l)][1];
                        for (int p = 0; p < npoints; ++p) {
                            const int idx = (h * levels + l) * npoints + p;
                            const T aw = wrow[idx];
                            const T px = lrow[2 * idx] * static_cast<T>(gw2) - T(0.5);
                            const T py = lrow[2 * idx + 1] * static_cast<T>(gh2) - T(0.5);
                            const int x0 = static_cast<int>(std::floor(px));
                            const int y0 = static_cast<int>(std::floor(py));
                            const T fx = px - static_cast<T>(x0), fy = py - static_cast<T>(y0);
                            // per-tap dot products with the incoming gradient
                            T dot_w = 0, dpx = 0, dpy = 0;
                            T tapdot[2][2] = {{0, 0}, {0, 0}};
                            for (int ty = 0; ty < 2; ++ty) {
                                const int yy = y0 + ty;
                                if (yy < 0 || yy >= gh2) continue;
                                const T wy = ty ? fy : T(1) - fy;
                                for (int tx = 0; tx < 2; ++tx) {
                                    const int xx = x0 + tx;
                                    if (xx < 0 || xx >= gw2) continue;
                                    const T wx = tx ? fx : T(1) - fx;
                                    const size_t voff = (static_cast<size_t>(starts[static_cast<size_t>(l)]) +
                                                         static_cast<size_t>(yy) * gw2 + xx) *
                                                            c +
                                                        static_cast<size_t>(h) * dh;
                                    const T* vrow = vv + voff;
                                    T dot = 0;
                                    for (int j = 0; j < dh; ++j) dot += grow[j] * vrow[j];
                                    tapdot[ty][tx] = dot;
                                    if (gv) {
                                        T* gvr = gv + voff;
                                        const T wt = aw * wy * wx;
                                        for (int j = 0; j < dh; ++j) gvr[j] += wt * grow[j];
                                    }
                                }
                            }
                            dot_w = (T(1) - fy) * ((T(1) - fx) * tapdot[0][0] + fx * tapdot[0][1]) +
                                    fy * ((T(1) - fx) * tapdot[1][0] + fx * tapdot[1][1]);
                            if (gw) gw[static_cast<size_t>(q) * heads * lp + idx] += dot_w;
                            if (gl) {
                                dpx = (T(1) - fy) * (tapdot[0][1] - tapdot[0][0]) + fy * (tapdot[1][1] - tapdot[1][0]);
                                dpy = (T(1) - fx) * (tapdot[1][0] - tapdot[0][0]) + fx * (tapdot[1][1] - tapdot[0][1]);
                                gl[(static_cast<size_t>(q) * heads * lp + idx) * 2] += aw * dpx * static_cast<T>(gw2);
                                gl[(static_cast<size_t>(q) * heads * lp + idx) * 2 + 1] += aw * dpy * static_cast<T>(gh2);
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
struct DeformableAttention {
    nn::Linear<T> value_proj, out_proj;
    nn::Linear<T> offsets;  // C -> heads*levels*npoints*2
    nn::Linear<T> weights;  // C -> heads*levels*npoints, softmax over levels*points
    int heads = 8, levels = 3, npoints = 4;

    DeformableAttention() = default;
    DeformableAttention(int dim, int heads_, int levels_, int npoints_, Xorshift64Star& rng)
        : value_proj(dim, dim, rng),
          out_proj(dim, dim, rng),
          offsets(dim, heads_ * levels_ * npoints_ * 2, rng),
          weights(dim, heads_ * levels_ * npoints_, rng),
          heads(heads_),
          levels(levels_),
          npoints(npoints_) {
        // start from neutral sampling: zero offsets, uniform weights
        for (auto& v : offsets.weight.values()) v = T(0);
        for (auto& v : weights.weight.values()) v = T(0);
    }

    // queries [K,C]; pyramid: `levels` feature maps [C,h,w]; ref_boxes [K,4]
    // cxcywh in [0,1]. Softmax attention weights per (query, head) over
    // levels*npoints; samples at center + offset * wh/(2*npoints).
    Tensor<T> forward(const Tensor<T>& queries, const std::vector<Tensor<T>>& pyramid, const Tensor<T>& ref_boxes,
                      std::vector<Tensor<T>>* attn_out = nullptr) const {
        const int k = queries.dim(0);
        const int lp = levels * npoints;

        auto off = offsets.forward(queries);                                   // [K, h*l*p*2]
        auto w_logits = reshape(weights.forward(queries), {k * heads, lp});
        auto w = reshape(softmax_lastdim(w_logits), {k, heads * lp});          // rows sum to 1 per (query, head)

        // reference center/scale replicated per (head, level, point): constants
        const T* ref = ref_boxes.data();
        std::vector<T> cen(static_cast<size_t>(k) * heads * lp * 2);
        std::vector<T> scl(cen.size());
        for (int q = 0; q < k; ++q) {
            const T cx = ref[static_cast<size_t>(q) * 4], cy = ref[static_cast<size_t>(q) * 4 + 1];
            const T sx = ref[static_cast<size_t>(q) * 4 + 2] * T(0.5) / static_cast<T>(npoints);
            const T sy = ref[static_cast<size_t>(q) * 4 + 3] * T(0.5) / static_cast<T>(npoints);
            T* crow = cen.data() + static_cast<size_t>(q) * heads * lp * 2;
            T* srow = scl.data() + static_cast<size_t>(q) * heads * lp * 2;
            for (int i = 0; i < heads * lp; ++i) {
                crow[2 * i] = cx;
                crow[2 * i + 1] = cy;
                srow[2 * i] = sx;
                srow[2 * i + 1] = sy;
            }
        }
        auto locs = add(mul(off, Tensor<T>::from(off.shape(), std::move(scl))),
                        Tensor<T>::from(off.shape(), std::move(cen)));

        std::vector<Tensor<T>> token_sets;
        std::vector<std::array<int, 2>> shapes;
        for (const auto& feat : pyramid) {
            token_sets.push_back(nn::tokens_from_chw(feat));
            shapes.push_back({feat.dim(1), feat.dim(2)});
        }
        auto values = value_proj.forward(token_sets.size() > 1 ? concat(token_sets, 0) : token_sets[0]);
        auto sampled = ms_deform_sample(values, shapes, locs, w, heads);
        if (attn_out) *attn_out = {reshape(w, {k * heads, lp})};
        return out_proj.forward(sampled);
    }

    void collect(nn::ParamCollector<T>& pc) {
        pc.sub("value", value_proj);
        pc.sub("out", out_proj);
        pc.sub("offsets", offsets);
        pc.sub("weights", weights);
    }
};

// ---------------------------------------------------------------------------

template <typename T>
struct DecoderLayer {
    nn::MultiheadAttention<T> self_attn;
    DeformableAttention<T> cross;
    nn::LayerNorm<T> n1, n2, n3;
    nn::Linear<T> ffn1, ffn2;
    nn::Linear<T> cls_head;
    nn::Mlp<T> box_head;  // 3-layer MLP -> 4 box deltas

    DecoderLayer() = default;
    DecoderLayer(int dim, const DecoderConfig& cfg, int num_classes, Xorshift64Star& rng)
        : self_attn(dim, cfg.nheads, rng),
          cross(dim, cfg.nheads, cfg.levels, cfg.npoints, rng),
          n1(dim),
          n2(dim),
          n3(dim),
          ffn1(dim, cfg.ffn_dim, rng),
          ffn2(cfg.ffn_dim, dim, rng),
          cls_head(dim, num_classes, rng),
          box_head(dim, dim, 4, 3, rng) {
        // start class probabilities near the foreground prior
        for (auto& v : cls_head.bias.values()) v = static_cast<T>(-3.89182029811063);  // logit(0.02)
    }

    Tensor<T> forward(const Tensor<T>& content, const Tensor<T>& query_pos, const std::vector<Tensor<T>>& pyramid,
                      const Tensor<T>& ref_boxes, const Tensor<T>* self_mask) const {
        auto x = n1.forward(add(content, self_attn.forward(content, &query_pos, self_mask)));
        auto qc = add(x, query_pos);  // position-conditioned cross-attention input
        x = n2.forward(add(x, cross.forward(qc, pyramid, ref_boxes)));
        return n3.forward(add(x, ffn2.forward(relu(ffn1.forward(x)))));
    }
    void collect(nn::ParamCollector<T>& pc) {
        pc.sub("self", self_attn);
        pc.sub("cross", cross);
        pc.sub("n1", n1);
        pc.sub("n2", n2);
        pc.sub("n3", n3);
        pc.sub("ffn1", ffn1);
        pc.sub("ffn2", ffn2);
        pc.sub("cls", cls_head);
        pc.sub("box", box_head);
    }
};

// ---------------------------------------------------------------------------
// denoising query construction (positive/negative pair groups, shared mask)

template <typename T>
struct DenoisingBatch {
    Tensor<T> content;     // [D, C]
    Tensor<T> pos_logits;  // [D, 4]
    Tensor<T> attn_mask;   // [D+K, D+K], additive (0 visible, -1e9 blocked)
    std::vector<int> gt_index;     // source GT per denoising query
    std::vector<char> is_positive; // negatives are supervised as background
    int groups = 0;
    int count() const { return static_cast<int>(gt_index.size()); }
};

// groups = ceil(dn_number / (2*num_gt)); each group holds one positive and one
// negative query per GT. Labels flip to a random class with probability
// label_noise_ratio; box coordinates are jittered proportionally to the box
// size (noise factor in [0,1) for positives, [1,2) for negatives).
template <typename T>
DenoisingBatch<T> make_denoising_batch(const std::vector<GroundTruth>& gts, const DecoderConfig& cfg,
                                       const Tensor<T>& label_embedding, int num_classes, Xorshift64Star& rng) {
    DenoisingBatch<T> dn;
    const int num_gt = static_cast<int>(gts.size());
    const int k = cfg.num_queries;
    if (num_gt == 0 || cfg.dn_number <= 0) {
        dn.attn_mask = Tensor<T>();  // nothing to mask
        return dn;
    }
    dn.groups = (cfg.dn_number + 2 * num_gt - 1) / (2 * num_gt);
    const int d = dn.groups * 2 * num_gt;

    std::vector<int> labels;
    std::vector<T> box_logits;
    labels.reserve(static_cast<size_t>(d));
    for (int g = 0; g < dn.groups; ++g) {
        for (int half = 0; half < 2; ++half) {  // 0: positives, 1: negatives
            const bool positive = half == 0;
            for (int i = 0; i < num_gt; ++i) {
                const auto& gt = gts[static_cast<size_t>(i)];
                int label = gt.label;
                if (cfg.label_noise_ratio > 0 && rng.uniform() < cfg.label_noise_ratio)
                    label = rng.uniform_int(num_classes);
                labels.push_back(label);
                dn.gt_index.push_back(i);
                dn.is_positive.push_back(positive ? 1 : 0);

                BoxCxCyWH b = to_cxcywh(gt.box);
                const double diff[4] = {b.w / 2, b.h / 2, b.w / 2, b.h / 2};
                double noised[4] = {b.cx, b.cy, b.w, b.h};
                if (cfg.box_noise_scale > 0) {
                    for (int j = 0; j < 4; ++j) {
                        double r = rng.uniform();           // [0,1) positives
                        if (!positive) r += 1.0;            // [1,2) negatives
                        const double sign = rng.coin() ? 1.0 : -1.0;
                        noised[j] += sign * r * diff[j] * cfg.box_noise_scale;
                    }
                }
                for (int j = 0; j < 4; ++j)
                    box_logits.push_back(inverse_sigmoid_value(static_cast<T>(std::clamp(noised[j], 1e-4, 1.0))));
            }
        }
    }
    dn.content = gather_rows(label_embedding, labels);
    dn.pos_logits = Tensor<T>::from({d, 4}, std::move(box_logits), false);

    // mask[i][j] blocks query i from attending to query j
    const int total = d + k;
    std::vector<T> mask(static_cast<size_t>(total) * total, T(0));
    for (int i = d; i < total; ++i)  // matching queries never see denoising queries
        for (int j = 0; j < d; ++j) mask[static_cast<size_t>(i) * total + j] = T(-1e9);
    const int group_size = 2 * num_gt;
    for (int i = 0; i < d; ++i) {  // denoising groups are mutually invisible
        const int gi = i / group_size;
        for (int j = 0; j < d; ++j)
            if (j / group_size != gi) mask[static_cast<size_t>(i) * total + j] = T(-1e9);
    }
    dn.attn_mask = Tensor<T>::from({total, total}, std::move(mask), false);
    return dn;
}

// ---------------------------------------------------------------------------

template <typename T>
struct DecoderOutput {
    // per executed layer: predictions for the denoising part and matching part
    std::vector<Tensor<T>> logits;     // [K, classes]
    std::vector<Tensor<T>> boxes;      // [K, 4] cxcywh
    std::vector<Tensor<T>> dn_logits;  // [D, classes] (undefined when no dn)
    std::vector<Tensor<T>> dn_boxes;   // [D, 4]
};

template <typename T>
class Decoder {
public:
    Decoder() = default;
    Decoder(int embed_dim, const DecoderConfig& cfg, int num_classes, Xorshift64Star& rng)
        : cfg_(cfg), num_classes_(num_classes) {
        cfg_.validate(embed_dim);
        query_pos_ = nn::Mlp<T>(4, embed_dim, embed_dim, 2, rng);
        label_embedding_ = nn::init::uniform<T>({num_classes, embed_dim}, 0.5, rng);
        for (int l = 0; l < cfg_.num_layers; ++l) layers_.emplace_back(embed_dim, cfg_, num_classes, rng);
    }

    const Tensor<T>& label_embedding() const { return label_embedding_; }
    const DecoderConfig& config() const { return cfg_; }

    // Runs the first use_layers layers. The denoising block, when present, is
    // prepended to the query set and split back out of every layer's heads.
    DecoderOutput<T> forward(const Tensor<T>& content, const Tensor<T>& pos_logits,
                             const std::vector<Tensor<T>>& pyramid, int use_layers,
                             const DenoisingBatch<T>* dn = nullptr) const {
        if (use_layers < 1 || use_layers > cfg_.num_layers)
            throw ConfigError(str_cat("decoder: use_layers ", use_layers, " outside [1,", cfg_.num_layers, "]"));
        const int k = content.dim(0);
        const int d = (dn && dn->count() > 0) ? dn->count() : 0;

        Tensor<T> x = content;
        Tensor<T> cur_logits = pos_logits;
        const Tensor<T>* mask = nullptr;
        if (d > 0) {
            x = concat<T>({dn->content, content}, 0);
            cur_logits = concat<T>({dn->pos_logits, pos_logits}, 0);
            mask = &dn->attn_mask;
        }

        DecoderOutput<T> out;
        for (int l = 0; l < use_layers; ++l) {
            const auto& layer = layers_[static_cast<size_t>(l)];
            auto ref = sigmoid(cur_logits);
            auto qpos = query_pos_.forward(ref.detach());
            x = layer.forward(x, qpos, pyramid, ref, mask);
            auto logits = layer.cls_head.forward(x);
            auto box_logits = add(cur_logits, layer.box_head.forward(x));  // iterative refinement
            auto boxes = sigmoid(box_logits);
            if (d > 0) {
                out.dn_logits.push_back(slice(logits, 0, 0, d));
                out.dn_boxes.push_back(slice(boxes, 0, 0, d));
                out.logits.push_back(slice(logits, 0, d, k));
                out.boxes.push_back(slice(boxes, 0, d, k));
            } else {
                out.logits.push_back(logits);
                out.boxes.push_back(boxes);
            }
            cur_logits = box_logits.detach();  // refinement does not backprop across layers
        }
        return out;
    }

    void collect(nn::ParamCollector<T>& pc) {
        pc.add("label_embedding", label_embedding_);
        pc.sub("query_pos", query_pos_);
        for (size_t l = 0; l < layers_.size(); ++l) pc.sub(str_cat("layer", l), layers_[l]);
    }

private:
    DecoderConfig cfg_;
    int num_classes_ = 0;
    nn::Mlp<T> query_pos_;
    Tensor<T> label_embedding_;
    std::vector<DecoderLayer<T>> layers_;
};

// analytic multiply-add count of a truncated decoder forward (matching queries
// only), strictly increasing in use_layers
inline uint64_t decoder_flops(const DecoderConfig& cfg, int embed_dim, int height, int width, int use_layers) {
    const uint64_t c = static_cast<uint64_t>(embed_dim);
    const uint64_t k = static_cast<uint64_t>(cfg.num_queries);
    const uint64_t tn = static_cast<uint64_t>(height / 8) * (width / 8) + static_cast<uint64_t>(height / 16) * (width / 16) +
                        static_cast<uint64_t>(height / 32) * (width / 32);
    const uint64_t lp = static_cast<uint64_t>(cfg.levels) * cfg.npoints;
    uint64_t per_layer = 0;
    per_layer += 2 * k * c * c * 4 + 2 * k * k * c * 2;          // self attention
    per_layer += 2 * k * 4 * c + 2 * k * c * c;                  // query pos MLP
    per_layer += 2 * tn * c * c;                                 // value projection
    per_layer += 2 * k * c * (lp * 3);                           // offsets + weights
    per_layer += static_cast<uint64_t>(cfg.nheads) * lp * k * (8 * (c / cfg.nheads));  // sampling
    per_layer += 2 * k * c * c;                                  // output projection
    per_layer += 2 * k * c * static_cast<uint64_t>(cfg.ffn_dim) * 2;                   // ffn
    per_layer += 2 * k * c * (4 + 1) + 2 * k * (c * c * 2 + c * 4);                    // heads
    return static_cast<uint64_t>(use_layers) * per_layer;
}

}  // namespace detlab
