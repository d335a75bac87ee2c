#pragma once

// Full detector assembly and the inference path (raw predictions from a layer
// prefix, then score-threshold post-processing into detections).

#include <string>
#include <vector>

#include "detlab/backbone.hpp"
#include "detlab/decoder.hpp"
#include "detlab/encoder.hpp"
#include "detlab/query_select.hpp"

namespace detlab {

enum class QueryScheme { Vanilla, Uncertainty };

inline const char* scheme_name(QueryScheme s) { return s == QueryScheme::Vanilla ? "vanilla" : "uncertainty"; }
inline QueryScheme parse_scheme(const std::string& s) {
    if (s == "vanilla") return QueryScheme::Vanilla;
    if (s == "uncertainty") return QueryScheme::Uncertainty;
    throw ConfigError(str_cat("unknown query-selection scheme '", s, "'"));
}

struct ModelConfig {
    BackboneConfig backbone;
    EncoderConfig encoder;
    DecoderConfig decoder;
    int num_classes = kNumShapeClasses;
    QueryScheme scheme = QueryScheme::Uncertainty;
    double backbone_lr_mult = 0.1;  // backbone lr = base lr * 0.1
};

template <typename T>
struct TrainForward {
    EncoderHeadOutput<T> enc;
    SelectedQueries<T> sel;
    DenoisingBatch<T> dn;
    DecoderOutput<T> dec;
};

template <typename T>
struct RawPrediction {
    Tensor<T> logits;  // [K, classes], final executed layer
    Tensor<T> boxes;   // [K, 4] cxcywh
};

template <typename T>
class Detector {
public:
    Detector() = default;
    Detector(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
        Xorshift64Star rng(splitmix64(seed) ^ 0x9E3779B97F4A7C15ull);
        backbone_ = BackboneTiny<T>(cfg.backbone, rng);
        encoder_ = HybridEncoder<T>(cfg.encoder, cfg.backbone, rng);
        head_ = EncoderHead<T>(cfg.encoder.embed_dim, cfg.num_classes, rng);
        decoder_ = Decoder<T>(cfg.encoder.embed_dim, cfg.decoder, cfg.num_classes, rng);
    }

    TrainForward<T> forward_train(const Tensor<T>& image, const std::vector<GroundTruth>& gts,
                                  Xorshift64Star& dn_rng) {
        auto pyr = backbone_.forward(image, true);
        auto fused = encoder_.forward(pyr, true);
        TrainForward<T> f;
        f.enc = head_.forward(fused);
        f.sel = select_topk(f.enc, cfg_.decoder.num_queries);
        f.dn = make_denoising_batch(gts, cfg_.decoder, decoder_.label_embedding(), cfg_.num_classes, dn_rng);
        f.dec = decoder_.forward(f.sel.content, f.sel.pos_logits, fused, cfg_.decoder.num_layers,
                                 f.dn.count() > 0 ? &f.dn : nullptr);
        return f;
    }

    // deterministic eval-mode forward through the first use_layers layers
    RawPrediction<T> forward_infer(const Tensor<T>& image, int use_layers) {
        NoGrad<T> ng;
        auto pyr = backbone_.forward(image, false);
        auto fused = encoder_.forward(pyr, false);
        auto enc = head_.forward(fused);
        auto sel = select_topk(enc, cfg_.decoder.num_queries);
        auto dec = decoder_.forward(sel.content, sel.pos_logits, fused, use_layers);
        return {dec.logits.back(), dec.boxes.back()};
    }

    std::vector<Detection> infer(const Tensor<T>& image, int use_layers, double score_thr) {
        return to_detections(forward_infer(image, use_layers), score_thr);
    }

    // one detection per (query, class) pair above the score threshold,
    // descending score, capped at max_dets
    static std::vector<Detection> to_detections(const RawPrediction<T>& raw, double score_thr, int max_dets = 300) {
        const int k = raw.logits.dim(0), c = raw.logits.dim(1);
        std::vector<Detection> dets;
        for (int q = 0; q < k; ++q)
            for (int cls = 0; cls < c; ++cls) {
                const double score =
                    1.0 / (1.0 + std::exp(-static_cast<double>(raw.logits.data()[static_cast<size_t>(q) * c + cls])));
                if (score < score_thr) continue;
                BoxCxCyWH b{static_cast<double>(raw.boxes.data()[static_cast<size_t>(q) * 4]),
                            static_cast<double>(raw.boxes.data()[static_cast<size_t>(q) * 4 + 1]),
                            static_cast<double>(raw.boxes.data()[static_cast<size_t>(q) * 4 + 2]),
                            static_cast<double>(raw.boxes.data()[static_cast<size_t>(q) * 4 + 3])};
                BoxXYXY xy = to_xyxy(b);
                xy.x1 = std::clamp(xy.x1, 0.0, 1.0);
                xy.y1 = std::clamp(xy.y1, 0.0, 1.0);
                xy.x2 = std::clamp(xy.x2, 0.0, 1.0);
                xy.y2 = std::clamp(xy.y2, 0.0, 1.0);
                dets.push_back({cls, score, xy});
            }
        std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
        if (static_cast<int>(dets.size()) > max_dets) dets.resize(static_cast<size_t>(max_dets));
        return dets;
    }

    // (classification score, IoU vs best GT) of every selected encoder feature
    std::vector<std::pair<double, double>> selected_feature_quality(const Tensor<T>& image,
                                                                    const std::vector<GroundTruth>& gts) {
        NoGrad<T> ng;
        auto pyr = backbone_.forward(image, false);
        auto fused = encoder_.forward(pyr, false);
        auto enc = head_.forward(fused);
        auto sel = select_topk(enc, cfg_.decoder.num_queries);
        std::vector<std::pair<double, double>> out;
        for (size_t i = 0; i < sel.indices.size(); ++i) {
            const int tok = sel.indices[i];
            BoxCxCyWH b{static_cast<double>(enc.boxes.data()[static_cast<size_t>(tok) * 4]),
                        static_cast<double>(enc.boxes.data()[static_cast<size_t>(tok) * 4 + 1]),
                        static_cast<double>(enc.boxes.data()[static_cast<size_t>(tok) * 4 + 2]),
                        static_cast<double>(enc.boxes.data()[static_cast<size_t>(tok) * 4 + 3])};
            double best = 0;
            for (const auto& gt : gts) best = std::max(best, iou(to_xyxy(b), gt.box));
            out.emplace_back(sel.scores[i], best);
        }
        return out;
    }

    void collect(nn::ParamCollector<T>& pc) {
        const double saved = pc.lr_mult;
        pc.lr_mult = cfg_.backbone_lr_mult;
        pc.sub("backbone", backbone_);
        pc.lr_mult = saved;
        pc.sub("encoder", encoder_);
        pc.sub("enc_head", head_);
        pc.sub("decoder", decoder_);
    }

    void reparameterize() { encoder_.reparameterize(); }

    const ModelConfig& config() const { return cfg_; }
    BackboneTiny<T>& backbone() { return backbone_; }
    HybridEncoder<T>& encoder() { return encoder_; }
    EncoderHead<T>& head() { return head_; }
    Decoder<T>& decoder() { return decoder_; }

private:
    ModelConfig cfg_;
    BackboneTiny<T> backbone_;
    HybridEncoder<T> encoder_;
    EncoderHead<T> head_;
    Decoder<T> decoder_;
};

}  // namespace detlab
