#include "detlab/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace detlab {

namespace {

struct FlatDet {
    int image = 0;
    double score = 0;
    BoxXYXY box;
};

// 101-point interpolated AP from (score-ordered) tp/fp flags
double interpolated_ap(const std::vector<char>& tp_flags, int npos) {
    if (npos == 0) return -1.0;  // undefined for this class/bucket
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (char f : tp_flags) {
        if (f) ++tp;
        else ++fp;
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / npos);
    }
    // running maximum of precision from the right
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
        precision[static_cast<size_t>(i)] = std::max(precision[static_cast<size_t>(i)], precision[static_cast<size_t>(i) + 1]);
    double total = 0;
    for (int r = 0; r <= 100; ++r) {
        const double target = r / 100.0;
        // first index with recall >= target
        size_t lo = 0, hi = recall.size();
        while (lo < hi) {
            const size_t mid = (lo + hi) / 2;
            if (recall[mid] >= target) hi = mid;
            else lo = mid + 1;
        }
        total += lo < recall.size() ? precision[lo] : 0.0;
    }
    return total / 101.0;
}

struct BucketRange {
    double lo = 0, hi = 1e30;
};

double class_bucket_ap(const std::vector<EvalImage>& images, int cls, double iou_thr, const BucketRange& range,
                       int image_size, bool* has_gt) {
    const double px2 = static_cast<double>(image_size) * image_size;
    std::vector<FlatDet> dets;
    for (int im = 0; im < static_cast<int>(images.size()); ++im)
        for (const auto& d : images[static_cast<size_t>(im)].dets)
            if (d.label == cls) dets.push_back({im, d.score, d.box});
    // canonical order: independent of the caller's detection ordering
    std::sort(dets.begin(), dets.end(), [](const FlatDet& a, const FlatDet& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image != b.image) return a.image < b.image;
        if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
        if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
        if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
        return a.box.y2 < b.box.y2;
    });

    // per image: class GTs with their in-bucket flag
    int npos = 0;
    std::vector<std::vector<int>> gt_ids(images.size());
    std::vector<std::vector<char>> gt_ignored(images.size());
    for (size_t im = 0; im < images.size(); ++im)
        for (int g = 0; g < static_cast<int>(images[im].gts.size()); ++g) {
            const auto& gt = images[im].gts[static_cast<size_t>(g)];
            if (gt.label != cls) continue;
            const double area = box_area(gt.box) * px2;
            const bool ignored = area < range.lo || area >= range.hi;
            gt_ids[im].push_back(g);
            gt_ignored[im].push_back(ignored ? 1 : 0);
            if (!ignored) ++npos;
        }
    if (has_gt) *has_gt = npos > 0;

    std::vector<std::vector<char>> gt_used(images.size());
    for (size_t im = 0; im < images.size(); ++im) gt_used[im].assign(gt_ids[im].size(), 0);

    std::vector<char> tp_flags;
    for (const auto& d : dets) {
        const size_t im = static_cast<size_t>(d.image);
        int best = -1;
        double best_iou = iou_thr;
        bool best_ignored = true;
        for (int k = 0; k < static_cast<int>(gt_ids[im].size()); ++k) {
            if (gt_used[im][static_cast<size_t>(k)]) continue;
            const auto& gt = images[im].gts[static_cast<size_t>(gt_ids[im][static_cast<size_t>(k)])];
            const double ov = iou(d.box, gt.box);
            if (ov < iou_thr) continue;
            const bool ign = gt_ignored[im][static_cast<size_t>(k)];
            // prefer any non-ignored match; among equals take the higher IoU
            if (best >= 0 && !best_ignored && ign) continue;
            if (best >= 0 && best_ignored == ign && ov <= best_iou) continue;
            best = k;
            best_iou = ov;
            best_ignored = ign;
        }
        if (best >= 0) {
            gt_used[im][static_cast<size_t>(best)] = 1;
            if (!best_ignored) tp_flags.push_back(1);
            // matches to out-of-bucket GTs are ignored entirely
        } else {
            const double area = box_area(d.box) * px2;
            if (area >= range.lo && area < range.hi) tp_flags.push_back(0);  // in-bucket miss counts as FP
        }
    }
    return interpolated_ap(tp_flags, npos);
}

double mean_over_classes(const std::vector<double>& vals) {
    double total = 0;
    int n = 0;
    for (double v : vals)
        if (v >= 0) {
            total += v;
            ++n;
        }
    return n ? total / n : 0.0;
}

}  // namespace

ApResult evaluate_ap(const std::vector<EvalImage>& images, double score_thr, int image_size) {
    std::vector<EvalImage> filtered(images.size());
    std::set<int> classes;
    for (size_t i = 0; i < images.size(); ++i) {
        filtered[i].gts = images[i].gts;
        for (const auto& gt : images[i].gts) classes.insert(gt.label);
        for (const auto& d : images[i].dets)
            if (d.score >= score_thr) filtered[i].dets.push_back(d);
    }

    const double scale = static_cast<double>(image_size) * image_size / (640.0 * 640.0);
    const BucketRange all{0, 1e30};
    const BucketRange small{0, 1024.0 * scale};
    const BucketRange medium{1024.0 * scale, 9216.0 * scale};
    const BucketRange large{9216.0 * scale, 1e30};

    ApResult res;
    std::vector<double> ap_cls, ap50_cls, ap75_cls, s_cls, m_cls, l_cls;
    for (int cls : classes) {
        std::vector<double> per_thr;
        bool any = false;
        for (int t = 0; t < 10; ++t) {
            const double thr = 0.5 + 0.05 * t;
            bool has = false;
            const double ap = class_bucket_ap(filtered, cls, thr, all, image_size, &has);
            any = any || has;
            per_thr.push_back(ap);
            if (t == 0) ap50_cls.push_back(ap);
            if (t == 5) ap75_cls.push_back(ap);
        }
        if (!any) continue;
        ap_cls.push_back(mean_over_classes(per_thr));
        auto bucket_mean = [&](const BucketRange& range) {
            std::vector<double> vals;
            for (int t = 0; t < 10; ++t)
                vals.push_back(class_bucket_ap(filtered, cls, 0.5 + 0.05 * t, range, image_size, nullptr));
            return mean_over_classes(vals);
        };
        s_cls.push_back(bucket_mean(small));
        m_cls.push_back(bucket_mean(medium));
        l_cls.push_back(bucket_mean(large));
    }
    res.ap = mean_over_classes(ap_cls);
    res.ap50 = mean_over_classes(ap50_cls);
    res.ap75 = mean_over_classes(ap75_cls);
    res.ap_s = mean_over_classes(s_cls);
    res.ap_m = mean_over_classes(m_cls);
    res.ap_l = mean_over_classes(l_cls);
    return res;
}

}  // namespace detlab
