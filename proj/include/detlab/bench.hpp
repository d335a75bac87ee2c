#pragma once

// End-to-end latency protocol: dataset preloaded, fixed warmup excluded, model
// and post-processing stages timed separately on a monotonic clock. Plus the
// NMS threshold sweep and the decoder-layer speed/accuracy sweep.

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "detlab/evaluator.hpp"
#include "detlab/geometry.hpp"
#include "detlab/model.hpp"
#include "detlab/train.hpp"

namespace detlab {

inline int64_t now_ns() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

double median_of(std::vector<double> values);
// Spearman rank correlation with average ranks for ties
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

struct BenchRecord {
    int sample_id = 0;
    int64_t model_ns = 0;
    int64_t post_ns = 0;
    int detections_out = 0;
};

struct BenchSummary {
    double mean_model_ns = 0, median_model_ns = 0;
    double mean_post_ns = 0, median_post_ns = 0;
    double mean_total_ns = 0, median_total_ns = 0;
    std::vector<BenchRecord> records;  // post-warmup only
};

BenchSummary summarize(const std::vector<BenchRecord>& records);

enum class PostMode { ScoreThreshold, Nms };
inline PostMode parse_post_mode(const std::string& s) {
    if (s == "none" || s == "score") return PostMode::ScoreThreshold;
    if (s == "nms") return PostMode::Nms;
    throw ConfigError(str_cat("unknown post-processing mode '", s, "'"));
}

// clustered box corpus (most scores low, heavy spatial overlap)
std::vector<Detection> synthetic_box_corpus(uint64_t seed, int count, int classes = 3);

struct SweepRow {
    double conf = 0, iou = 0;
    int count = 0;
    int64_t nms_ns_median = 0;
    int64_t nms_ns_mean = 0;
};

// counts via count_remaining; timings over `reps` repetitions per cell
std::vector<SweepRow> nms_sweep(const std::vector<Detection>& dets, const std::vector<double>& confs,
                                const std::vector<double>& ious, int reps = 30);
std::string sweep_csv(const std::vector<SweepRow>& rows);
// bar chart of remaining counts per confidence threshold
std::string sweep_svg(const std::vector<SweepRow>& rows);

struct LayerSweepRow {
    int layers = 0;
    double ap = 0;
    int64_t latency_ns = 0;  // median over the dataset
};
std::string layer_sweep_csv(const std::vector<LayerSweepRow>& rows);

// ---------------------------------------------------------------------------

template <typename T>
BenchSummary bench_end_to_end(Detector<T>& model, const std::vector<SyntheticScene>& dataset, PostMode post,
                              double conf_thr, double iou_thr, double score_thr, int warmup = 10, int passes = 3,
                              int use_layers = 0) {
    if (dataset.empty()) throw ConfigError("bench: empty dataset");
    if (use_layers <= 0) use_layers = model.config().decoder.num_layers;
    std::vector<BenchRecord> records;
    int iteration = 0;
    for (int pass = 0; pass < passes; ++pass) {
        for (size_t i = 0; i < dataset.size(); ++i, ++iteration) {
            const auto& scene = dataset[i];
            Tensor<T> image;
            if constexpr (std::is_same_v<T, float>) {
                image = scene.image;
            } else {
                std::vector<T> v(scene.image.values().begin(), scene.image.values().end());
                image = Tensor<T>::from(scene.image.shape(), std::move(v));
            }
            const int64_t t0 = now_ns();
            auto raw = model.forward_infer(image, use_layers);
            const int64_t t1 = now_ns();
            std::vector<Detection> dets;
            if (post == PostMode::ScoreThreshold) {
                dets = Detector<T>::to_detections(raw, score_thr);
            } else {
                auto all = Detector<T>::to_detections(raw, 0.0);
                auto kept = nms(all, conf_thr, iou_thr);
                dets.reserve(kept.size());
                for (int k : kept) dets.push_back(all[static_cast<size_t>(k)]);
            }
            const int64_t t2 = now_ns();
            if (iteration >= warmup)
                records.push_back({static_cast<int>(i), t1 - t0, t2 - t1, static_cast<int>(dets.size())});
        }
    }
    return summarize(records);
}

template <typename T>
std::vector<LayerSweepRow> decoder_layer_sweep(Detector<T>& model, const std::vector<SyntheticScene>& dataset,
                                               double score_thr, int warmup = 10) {
    std::vector<LayerSweepRow> rows;
    for (int layers = 1; layers <= model.config().decoder.num_layers; ++layers) {
        auto summary = bench_end_to_end(model, dataset, PostMode::ScoreThreshold, 0, 0, score_thr, warmup, 2, layers);
        auto ap = evaluate_model(model, dataset, layers, score_thr);
        rows.push_back({layers, ap.ap, static_cast<int64_t>(summary.median_model_ns + summary.median_post_ns)});
    }
    return rows;
}

}  // namespace detlab
