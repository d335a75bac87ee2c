#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace detlab {

// axis-aligned box, normalized image coordinates, x1 <= x2 and y1 <= y2
struct BoxXYXY {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

struct BoxCxCyWH {
    double cx = 0, cy = 0, w = 0, h = 0;
};

inline BoxXYXY to_xyxy(const BoxCxCyWH& b) {
    return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}
inline BoxCxCyWH to_cxcywh(const BoxXYXY& b) {
    return {(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, b.x2 - b.x1, b.y2 - b.y1};
}

inline double box_area(const BoxXYXY& b) { return (b.x2 - b.x1) * (b.y2 - b.y1); }

double iou(const BoxXYXY& a, const BoxXYXY& b);
double giou(const BoxXYXY& a, const BoxXYXY& b);

struct Detection {
    int label = 0;
    double score = 0;
    BoxXYXY box;
};

// Class-wise greedy suppression. Detections with score < conf_thr are dropped,
// then per class, in descending score (ties by lower original index), any
// remaining same-class box with IoU > iou_thr against a kept box is discarded.
// Returned indices are in processing (descending score) order.
std::vector<int> nms(const std::vector<Detection>& dets, double conf_thr, double iou_thr);

// boxes with score >= conf_thr
int count_remaining(const std::vector<Detection>& dets, double conf_thr);

// line-oriented text format: `label score x1 y1 x2 y2` per detection
void write_detections(std::ostream& os, const std::vector<Detection>& dets);
std::vector<Detection> read_detections(std::istream& is);
void save_detections(const std::string& path, const std::vector<Detection>& dets);
std::vector<Detection> load_detections(const std::string& path);

}  // namespace detlab
