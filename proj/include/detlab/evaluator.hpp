#pragma once

// COCO-style average precision: per class, per IoU threshold 0.50:0.05:0.95,
// 101-point interpolated precision-recall, with size buckets scaled to the
// desk image area.

#include <vector>

#include "detlab/geometry.hpp"
#include "detlab/synth.hpp"

namespace detlab {

struct EvalImage {
    std::vector<Detection> dets;
    std::vector<GroundTruth> gts;
};

struct ApResult {
    double ap = 0, ap50 = 0, ap75 = 0;
    double ap_s = 0, ap_m = 0, ap_l = 0;
};

// score_thr filters detections first; image_size scales the COCO 32^2 / 96^2
// area thresholds by (image_size/640)^2
ApResult evaluate_ap(const std::vector<EvalImage>& images, double score_thr = 0.0, int image_size = 96);

}  // namespace detlab
