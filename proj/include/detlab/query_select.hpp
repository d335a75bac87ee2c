#pragma once

// Encoder-side prediction head and top-K query initialization. The head scores
// every fused-pyramid token; selection takes the K best by max class
// probability. The classification loss drives each positive's score toward its
// localization quality, which is what minimizes the score/IoU discrepancy.

#include <array>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "detlab/geometry.hpp"
#include "detlab/nn.hpp"

namespace detlab {

template <typename T>
struct EncoderHeadOutput {
    Tensor<T> features;    // [Tn, C] head input tokens
    Tensor<T> logits;      // [Tn, num_classes]
    Tensor<T> box_logits;  // [Tn, 4], anchor logit + predicted delta
    Tensor<T> boxes;       // [Tn, 4] cxcywh = sigmoid(box_logits)
    std::vector<std::array<int, 2>> level_shapes;  // (h,w) per level
};

// grid anchors per level: centers at cell centers, w=h=0.05*2^level
template <typename T>
Tensor<T> grid_anchor_logits(const std::vector<std::array<int, 2>>& level_shapes) {
    static std::map<std::vector<std::array<int, 2>>, Tensor<T>> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(level_shapes);
    if (it != cache.end()) return it->second;
    std::vector<T> vals;
    for (size_t level = 0; level < level_shapes.size(); ++level) {
        const int h = level_shapes[level][0], w = level_shapes[level][1];
        const double wh = 0.05 * std::pow(2.0, static_cast<double>(level));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                vals.push_back(inverse_sigmoid_value(static_cast<T>((x + 0.5) / w)));
                vals.push_back(inverse_sigmoid_value(static_cast<T>((y + 0.5) / h)));
                vals.push_back(inverse_sigmoid_value(static_cast<T>(wh)));
                vals.push_back(inverse_sigmoid_value(static_cast<T>(wh)));
            }
    }
    const int tn = static_cast<int>(vals.size()) / 4;
    auto t = Tensor<T>::from({tn, 4}, std::move(vals), false);
    cache.emplace(level_shapes, t);
    return t;
}

template <typename T>
struct EncoderHead {
    nn::Linear<T> cls;
    nn::Mlp<T> box;

    EncoderHead() = default;
    EncoderHead(int embed_dim, int num_classes, Xorshift64Star& rng)
        : cls(embed_dim, num_classes, rng), box(embed_dim, embed_dim, 4, 3, rng) {
        // start class probabilities near the foreground prior
        for (auto& v : cls.bias.values()) v = static_cast<T>(-3.89182029811063);  // logit(0.02)
    }

    EncoderHeadOutput<T> forward(const std::vector<Tensor<T>>& pyramid) const {
        std::vector<Tensor<T>> token_sets;
        std::vector<std::array<int, 2>> shapes;
        for (const auto& level : pyramid) {
            token_sets.push_back(nn::tokens_from_chw(level));
            shapes.push_back({level.dim(1), level.dim(2)});
        }
        EncoderHeadOutput<T> out;
        out.features = token_sets.size() > 1 ? concat(token_sets, 0) : token_sets[0];
        out.logits = cls.forward(out.features);
        out.box_logits = add(box.forward(out.features), grid_anchor_logits<T>(shapes));
        out.boxes = sigmoid(out.box_logits);
        out.level_shapes = std::move(shapes);
        return out;
    }
    void collect(nn::ParamCollector<T>& pc) {
        pc.sub("cls", cls);
        pc.sub("box", box);
    }
};

template <typename T>
struct SelectedQueries {
    Tensor<T> content;     // [K, C], detached encoder features
    Tensor<T> pos_logits;  // [K, 4], keeps gradient into the head
    std::vector<int> indices;      // strictly descending selection score
    std::vector<double> scores;    // max class probability per selected token
};

// selection score of one token = max over classes of sigmoid(logit)
template <typename T>
std::vector<double> selection_scores(const Tensor<T>& logits) {
    const int n = logits.dim(0), c = logits.dim(1);
    std::vector<double> scores(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        T best = logits.data()[static_cast<size_t>(i) * c];
        for (int j = 1; j < c; ++j) best = std::max(best, logits.data()[static_cast<size_t>(i) * c + j]);
        scores[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-static_cast<double>(best)));
    }
    return scores;
}

template <typename T>
SelectedQueries<T> select_topk(const EncoderHeadOutput<T>& head, int k) {
    const int tn = head.logits.dim(0);
    if (k > tn) throw ConfigError(str_cat("select_topk: K=", k, " exceeds token count ", tn));
    auto scores = selection_scores(head.logits);
    std::vector<int> order(static_cast<size_t>(tn));
    for (int i = 0; i < tn; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
        return sa != sb ? sa > sb : a < b;
    });
    order.resize(static_cast<size_t>(k));
    SelectedQueries<T> sel;
    sel.indices = order;
    for (int i : order) sel.scores.push_back(scores[static_cast<size_t>(i)]);
    sel.content = gather_rows(head.features.detach(), order);
    sel.pos_logits = gather_rows(head.box_logits, order);
    return sel;
}

// feature uncertainty: discrepancy between localization and classification quality
inline double uncertainty(double localization_quality, double cls_score) {
    return std::abs(localization_quality - cls_score);
}

// IoU-aware focal-style classification loss over a token set.
//   positives: |q - p|^gamma * BCE(p, q), q = localization quality target
//   negatives: alpha * p^gamma * BCE(p, 0)
// The positive term vanishes exactly when the class score attains its quality
// target, so minimizing it minimizes the score/IoU discrepancy. With q = 1 it
// is the plain focal loss used by the vanilla scheme.
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<int>& matched_tokens,
                              const std::vector<int>& matched_classes, const std::vector<double>& quality,
                              double alpha = 0.75, double gamma = 2.0) {
    const int n = logits.dim(0), c = logits.dim(1);
    (void)gamma;  // fixed at 2 (squared modulating factor)
    std::vector<T> target(static_cast<size_t>(n) * c, T(0));
    std::vector<T> posmask(static_cast<size_t>(n) * c, T(0));
    for (size_t m = 0; m < matched_tokens.size(); ++m) {
        const size_t at = static_cast<size_t>(matched_tokens[m]) * c + matched_classes[m];
        target[at] = static_cast<T>(quality[m]);
        posmask[at] = T(1);
    }
    auto tq = Tensor<T>::from({n, c}, std::move(target), false);
    auto pos = Tensor<T>::from({n, c}, std::move(posmask), false);

    auto p = sigmoid(logits);
    auto log_p = log_sigmoid(logits);
    auto log_1mp = log_sigmoid(neg(logits));
    auto bce = neg(add(mul(tq, log_p), mul(add_scalar(neg(tq), T(1)), log_1mp)));
    auto w_pos = mul(pos, square(sub(tq, p)));
    auto w_neg = mul_scalar(mul(add_scalar(neg(pos), T(1)), square(p)), static_cast<T>(alpha));
    return sum_all(mul(add(w_pos, w_neg), bce));
}

// ---------------------------------------------------------------------------
// Prop metrics and the score/IoU scatter export

struct PropMetrics {
    double prop_cls = 0, prop_both = 0;
    int64_t count = 0;
};

struct ScatterRow {
    double cls_score = 0, iou_score = 0;
    std::string scheme;
};

class PropAccumulator {
public:
    // iou_score = IoU of the decoded box against its best-matching GT
    void add(double cls_score, double iou_score) {
        ++n_;
        if (cls_score > 0.5) ++cls_;
        if (cls_score > 0.5 && iou_score > 0.5) ++both_;
    }
    PropMetrics result() const {
        PropMetrics m;
        m.count = n_;
        if (n_ > 0) {
            m.prop_cls = static_cast<double>(cls_) / static_cast<double>(n_);
            m.prop_both = static_cast<double>(both_) / static_cast<double>(n_);
        }
        return m;
    }

private:
    int64_t n_ = 0, cls_ = 0, both_ = 0;
};

// rows with classification score > 0.5, header `cls_score,iou_score,scheme`
inline void export_scatter(const std::string& path, const std::vector<ScatterRow>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError(str_cat("cannot open '", path, "' for writing"));
    os << "cls_score,iou_score,scheme\n";
    for (const auto& r : rows)
        if (r.cls_score > 0.5) os << r.cls_score << ',' << r.iou_score << ',' << r.scheme << '\n';
}

}  // namespace detlab
