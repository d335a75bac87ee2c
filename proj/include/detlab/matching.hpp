#pragma once

// Bipartite matching (shortest-augmenting-path assignment with a cost-neutral
// lexicographic polish), the class/box cost matrix, and the full training loss
// over decoder layers, encoder head, and denoising groups.

#include <limits>
#include <utility>
#include <vector>

#include "detlab/model.hpp"

namespace detlab {

struct CostWeights {
    double cls = 2.0, alpha = 0.25, gamma = 2.0, bbox = 5.0, giou = 2.0;
};
struct LossWeights {
    double cls = 1.0, alpha = 0.75, gamma = 2.0, bbox = 5.0, giou = 2.0;
};

using Matching = std::vector<std::pair<int, int>>;  // (prediction, gt), injective both ways

// Minimum-cost assignment of min(N,M) pairs. Deterministic; among equal-cost
// optima, cost-preserving exchanges push the sorted pair list toward the
// lexicographically smallest one.
inline Matching hungarian(const std::vector<std::vector<double>>& cost) {
    const int n_rows = static_cast<int>(cost.size());
    const int n_cols = n_rows ? static_cast<int>(cost[0].size()) : 0;
    if (n_rows == 0 || n_cols == 0) return {};
    for (const auto& row : cost)
        for (double v : row)
            if (!std::isfinite(v)) throw NumericError("hungarian: non-finite cost entry");

    const bool transposed = n_rows > n_cols;
    const int n = transposed ? n_cols : n_rows;  // rows of the solved matrix
    const int m = transposed ? n_rows : n_cols;
    auto at = [&](int i, int j) { return transposed ? cost[static_cast<size_t>(j)][static_cast<size_t>(i)]
                                                    : cost[static_cast<size_t>(i)][static_cast<size_t>(j)]; };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0), v(static_cast<size_t>(m) + 1, 0);
    std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<size_t>(m) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int i0 = p[static_cast<size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j)
                if (!used[static_cast<size_t>(j)]) {
                    const double cur = at(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                    if (cur < minv[static_cast<size_t>(j)]) {
                        minv[static_cast<size_t>(j)] = cur;
                        way[static_cast<size_t>(j)] = j0;
                    }
                    if (minv[static_cast<size_t>(j)] < delta) {
                        delta = minv[static_cast<size_t>(j)];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }

    Matching pairs;
    for (int j = 1; j <= m; ++j)
        if (p[static_cast<size_t>(j)]) {
            const int row = p[static_cast<size_t>(j)] - 1, col = j - 1;
            pairs.emplace_back(transposed ? col : row, transposed ? row : col);
        }
    std::sort(pairs.begin(), pairs.end());

    auto entry = [&](int pred, int gt) { return cost[static_cast<size_t>(pred)][static_cast<size_t>(gt)]; };
    bool changed = true;
    int guard = 0;
    while (changed && guard++ < 64) {
        changed = false;
        // swap assigned columns between two pairs when cost-neutral and lex-better
        for (size_t a = 0; a < pairs.size(); ++a)
            for (size_t b = a + 1; b < pairs.size(); ++b) {
                auto [ra, ca] = pairs[a];
                auto [rb, cb] = pairs[b];
                if (cb < ca && entry(ra, cb) + entry(rb, ca) == entry(ra, ca) + entry(rb, cb)) {
                    pairs[a].second = cb;
                    pairs[b].second = ca;
                    changed = true;
                }
            }
        // move a pair to an earlier unmatched prediction when cost-neutral
        std::vector<char> used_pred(cost.size(), 0);
        for (auto& pr : pairs) used_pred[static_cast<size_t>(pr.first)] = 1;
        for (auto& pr : pairs)
            for (int cand = 0; cand < pr.first; ++cand)
                if (!used_pred[static_cast<size_t>(cand)] && entry(cand, pr.second) == entry(pr.first, pr.second)) {
                    used_pred[static_cast<size_t>(pr.first)] = 0;
                    used_pred[static_cast<size_t>(cand)] = 1;
                    pr.first = cand;
                    changed = true;
                    break;
                }
        std::sort(pairs.begin(), pairs.end());
    }
    return pairs;
}

// focal-style class cost plus L1 (cxcywh) and GIoU (xyxy) terms
template <typename T>
std::vector<std::vector<double>> cost_matrix(const Tensor<T>& logits, const Tensor<T>& boxes,
                                             const std::vector<GroundTruth>& gts, const CostWeights& w) {
    const int n = logits.dim(0), c = logits.dim(1);
    const int m = static_cast<int>(gts.size());
    std::vector<std::vector<double>> cost(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(m), 0.0));
    constexpr double eps = 1e-8;
    for (int i = 0; i < n; ++i) {
        const BoxCxCyWH pb{static_cast<double>(boxes.data()[static_cast<size_t>(i) * 4]),
                           static_cast<double>(boxes.data()[static_cast<size_t>(i) * 4 + 1]),
                           static_cast<double>(boxes.data()[static_cast<size_t>(i) * 4 + 2]),
                           static_cast<double>(boxes.data()[static_cast<size_t>(i) * 4 + 3])};
        const BoxXYXY pxy = to_xyxy(pb);
        for (int j = 0; j < m; ++j) {
            const auto& gt = gts[static_cast<size_t>(j)];
            const double logit = static_cast<double>(logits.data()[static_cast<size_t>(i) * c + gt.label]);
            const double prob = 1.0 / (1.0 + std::exp(-logit));
            const double pos = w.alpha * std::pow(1.0 - prob, w.gamma) * (-std::log(prob + eps));
            const double neg = (1.0 - w.alpha) * std::pow(prob, w.gamma) * (-std::log(1.0 - prob + eps));
            const BoxCxCyWH gb = to_cxcywh(gt.box);
            const double l1 = std::abs(pb.cx - gb.cx) + std::abs(pb.cy - gb.cy) + std::abs(pb.w - gb.w) +
                              std::abs(pb.h - gb.h);
            cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                w.cls * (pos - neg) + w.bbox * l1 + w.giou * (1.0 - giou(pxy, gt.box));
        }
    }
    return cost;
}

// ---------------------------------------------------------------------------
// differentiable box losses for matched pairs

// GIoU of each matched (pred, gt) row; pred in cxcywh with grad, gt constant
template <typename T>
Tensor<T> giou_rows(const Tensor<T>& pred_cxcywh, const Tensor<T>& gt_xyxy) {
    const T eps = T(1e-9);
    auto cx = slice(pred_cxcywh, 1, 0, 1);
    auto cy = slice(pred_cxcywh, 1, 1, 1);
    auto w = slice(pred_cxcywh, 1, 2, 1);
    auto h = slice(pred_cxcywh, 1, 3, 1);
    auto px1 = sub(cx, mul_scalar(w, T(0.5)));
    auto py1 = sub(cy, mul_scalar(h, T(0.5)));
    auto px2 = add(cx, mul_scalar(w, T(0.5)));
    auto py2 = add(cy, mul_scalar(h, T(0.5)));
    auto gx1 = slice(gt_xyxy, 1, 0, 1);
    auto gy1 = slice(gt_xyxy, 1, 1, 1);
    auto gx2 = slice(gt_xyxy, 1, 2, 1);
    auto gy2 = slice(gt_xyxy, 1, 3, 1);

    auto iw = relu(sub(minimum(px2, gx2), maximum(px1, gx1)));
    auto ih = relu(sub(minimum(py2, gy2), maximum(py1, gy1)));
    auto inter = mul(iw, ih);
    auto area_p = mul(relu(sub(px2, px1)), relu(sub(py2, py1)));
    auto area_g = mul(sub(gx2, gx1), sub(gy2, gy1));
    auto uni = sub(add(area_p, area_g), inter);
    auto iou_v = div(inter, add_scalar(uni, eps));
    auto ew = sub(maximum(px2, gx2), minimum(px1, gx1));
    auto eh = sub(maximum(py2, gy2), minimum(py1, gy1));
    auto enclosure = add_scalar(mul(ew, eh), eps);
    return sub(iou_v, div(sub(enclosure, uni), enclosure));
}

template <typename T>
struct LossTerms {
    Tensor<T> cls, l1, giou;  // scalars, already weight-scaled
};

// localization quality (IoU against the matched GT) per matched pair; these
// are loss targets, not differentiated through
template <typename T>
std::vector<double> localization_quality(const Tensor<T>& boxes, const std::vector<GroundTruth>& gts,
                                         const Matching& matching, QueryScheme scheme) {
    std::vector<double> quality;
    quality.reserve(matching.size());
    for (const auto& [pi, gi] : matching) {
        if (scheme == QueryScheme::Vanilla) {
            quality.push_back(1.0);
            continue;
        }
        const BoxCxCyWH pb{static_cast<double>(boxes.data()[static_cast<size_t>(pi) * 4]),
                           static_cast<double>(boxes.data()[static_cast<size_t>(pi) * 4 + 1]),
                           static_cast<double>(boxes.data()[static_cast<size_t>(pi) * 4 + 2]),
                           static_cast<double>(boxes.data()[static_cast<size_t>(pi) * 4 + 3])};
        quality.push_back(iou(to_xyxy(pb), gts[static_cast<size_t>(gi)].box));
    }
    return quality;
}

// matched class + box losses for one prediction set, normalized by `norm`
template <typename T>
LossTerms<T> matched_loss(const Tensor<T>& logits, const Tensor<T>& boxes, const std::vector<GroundTruth>& gts,
                          const Matching& matching, const std::vector<double>& quality, const LossWeights& lw,
                          double norm) {
    LossTerms<T> terms;
    std::vector<int> tokens, classes, pred_rows;
    std::vector<T> gt_xyxy, gt_cxcywh;
    for (const auto& [pi, gi] : matching) {
        const auto& gt = gts[static_cast<size_t>(gi)];
        tokens.push_back(pi);
        classes.push_back(gt.label);
        pred_rows.push_back(pi);
        gt_xyxy.push_back(static_cast<T>(gt.box.x1));
        gt_xyxy.push_back(static_cast<T>(gt.box.y1));
        gt_xyxy.push_back(static_cast<T>(gt.box.x2));
        gt_xyxy.push_back(static_cast<T>(gt.box.y2));
        const BoxCxCyWH gb = to_cxcywh(gt.box);
        gt_cxcywh.push_back(static_cast<T>(gb.cx));
        gt_cxcywh.push_back(static_cast<T>(gb.cy));
        gt_cxcywh.push_back(static_cast<T>(gb.w));
        gt_cxcywh.push_back(static_cast<T>(gb.h));
    }
    const T scale = static_cast<T>(1.0 / norm);
    terms.cls = mul_scalar(classification_loss(logits, tokens, classes, quality, lw.alpha, lw.gamma),
                           static_cast<T>(lw.cls) * scale);
    if (matching.empty()) {
        terms.l1 = Tensor<T>::scalar(T(0));
        terms.giou = Tensor<T>::scalar(T(0));
        return terms;
    }
    const int mm = static_cast<int>(matching.size());
    auto pred = gather_rows(boxes, pred_rows);
    auto gt_c = Tensor<T>::from({mm, 4}, std::move(gt_cxcywh), false);
    auto gt_x = Tensor<T>::from({mm, 4}, std::move(gt_xyxy), false);
    terms.l1 = mul_scalar(sum_all(abs_t(sub(pred, gt_c))), static_cast<T>(lw.bbox) * scale);
    terms.giou = mul_scalar(sum_all(add_scalar(neg(giou_rows(pred, gt_x)), T(1))), static_cast<T>(lw.giou) * scale);
    return terms;
}

// Matchings and quality targets are fixed under no-grad before the loss is
// assembled; the loss is then a smooth function of the predictions given them.
struct DetectionTargets {
    std::vector<Matching> dec;
    std::vector<std::vector<double>> dec_quality;
    Matching enc;
    std::vector<double> enc_quality;
    Matching dn;  // known correspondence, positives only
    std::vector<std::vector<double>> dn_quality;
};

template <typename T>
DetectionTargets compute_targets(const TrainForward<T>& fwd, const std::vector<GroundTruth>& gts,
                                 const CostWeights& cw, QueryScheme scheme) {
    DetectionTargets t;
    for (size_t l = 0; l < fwd.dec.logits.size(); ++l) {
        Matching m;
        if (!gts.empty()) m = hungarian(cost_matrix(fwd.dec.logits[l], fwd.dec.boxes[l], gts, cw));
        t.dec_quality.push_back(localization_quality(fwd.dec.boxes[l], gts, m, scheme));
        t.dec.push_back(std::move(m));
    }
    if (!gts.empty()) t.enc = hungarian(cost_matrix(fwd.enc.logits, fwd.enc.boxes, gts, cw));
    t.enc_quality = localization_quality(fwd.enc.boxes, gts, t.enc, scheme);
    if (fwd.dn.count() > 0) {
        for (int i = 0; i < fwd.dn.count(); ++i)
            if (fwd.dn.is_positive[static_cast<size_t>(i)])
                t.dn.emplace_back(i, fwd.dn.gt_index[static_cast<size_t>(i)]);
        for (size_t l = 0; l < fwd.dec.dn_logits.size(); ++l)
            t.dn_quality.push_back(localization_quality(fwd.dec.dn_boxes[l], gts, t.dn, scheme));
    }
    return t;
}

struct LossBreakdown {
    double total = 0, cls = 0, l1 = 0, giou = 0, dn = 0;
};

// Sum over decoder layers (matched independently per layer), the encoder head,
// and the denoising groups (known correspondence, negatives as background).
template <typename T>
Tensor<T> detection_loss_given(const TrainForward<T>& fwd, const std::vector<GroundTruth>& gts,
                               const DetectionTargets& targets, const LossWeights& lw,
                               LossBreakdown* breakdown = nullptr) {
    const double norm = std::max<size_t>(1, gts.size());
    Tensor<T> cls_total, box_l1_total, giou_total, dn_total;
    auto acc = [](Tensor<T>& into, const Tensor<T>& term) { into = into.defined() ? add(into, term) : term; };

    for (size_t l = 0; l < fwd.dec.logits.size(); ++l) {
        auto terms = matched_loss(fwd.dec.logits[l], fwd.dec.boxes[l], gts, targets.dec[l], targets.dec_quality[l],
                                  lw, norm);
        acc(cls_total, terms.cls);
        acc(box_l1_total, terms.l1);
        acc(giou_total, terms.giou);
    }
    {
        auto terms = matched_loss(fwd.enc.logits, fwd.enc.boxes, gts, targets.enc, targets.enc_quality, lw, norm);
        acc(cls_total, terms.cls);
        acc(box_l1_total, terms.l1);
        acc(giou_total, terms.giou);
    }
    if (fwd.dn.count() > 0) {
        const double dn_norm = std::max(1.0, static_cast<double>(gts.size() * static_cast<size_t>(fwd.dn.groups)));
        for (size_t l = 0; l < fwd.dec.dn_logits.size(); ++l) {
            auto terms = matched_loss(fwd.dec.dn_logits[l], fwd.dec.dn_boxes[l], gts, targets.dn,
                                      targets.dn_quality[l], lw, dn_norm);
            acc(dn_total, add(terms.cls, add(terms.l1, terms.giou)));
        }
    }

    if (!dn_total.defined()) dn_total = Tensor<T>::scalar(T(0));
    auto total = add(add(cls_total, box_l1_total), add(giou_total, dn_total));
    if (breakdown) {
        breakdown->cls = static_cast<double>(cls_total.item());
        breakdown->l1 = static_cast<double>(box_l1_total.item());
        breakdown->giou = static_cast<double>(giou_total.item());
        breakdown->dn = static_cast<double>(dn_total.item());
        breakdown->total = static_cast<double>(total.item());
    }
    return total;
}

template <typename T>
Tensor<T> detection_loss(const TrainForward<T>& fwd, const std::vector<GroundTruth>& gts, const LossWeights& lw,
                         const CostWeights& cw, QueryScheme scheme, LossBreakdown* breakdown = nullptr) {
    return detection_loss_given(fwd, gts, compute_targets(fwd, gts, cw, scheme), lw, breakdown);
}

}  // namespace detlab
