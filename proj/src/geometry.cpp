#include "detlab/geometry.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "detlab/common.hpp"

namespace detlab {

double iou(const BoxXYXY& a, const BoxXYXY& b) {
    const double ix1 = std::max(a.x1, b.x1);
    const double iy1 = std::max(a.y1, b.y1);
    const double ix2 = std::min(a.x2, b.x2);
    const double iy2 = std::min(a.y2, b.y2);
    const double inter = std::max(0.0, ix2 - ix1) * std::max(0.0, iy2 - iy1);
    const double uni = box_area(a) + box_area(b) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

double giou(const BoxXYXY& a, const BoxXYXY& b) {
    const double ix1 = std::max(a.x1, b.x1);
    const double iy1 = std::max(a.y1, b.y1);
    const double ix2 = std::min(a.x2, b.x2);
    const double iy2 = std::min(a.y2, b.y2);
    const double inter = std::max(0.0, ix2 - ix1) * std::max(0.0, iy2 - iy1);
    const double uni = box_area(a) + box_area(b) - inter;
    const double base = uni > 0 ? inter / uni : 0.0;
    const double ex1 = std::min(a.x1, b.x1);
    const double ey1 = std::min(a.y1, b.y1);
    const double ex2 = std::max(a.x2, b.x2);
    const double ey2 = std::max(a.y2, b.y2);
    const double enclosure = (ex2 - ex1) * (ey2 - ey1);
    if (enclosure <= 0) return base;  // degenerate enclosure
    return base - (enclosure - uni) / enclosure;
}

std::vector<int> nms(const std::vector<Detection>& dets, double conf_thr, double iou_thr) {
    std::vector<int> order;
    order.reserve(dets.size());
    for (int i = 0; i < static_cast<int>(dets.size()); ++i)
        if (dets[static_cast<size_t>(i)].score >= conf_thr) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double sa = dets[static_cast<size_t>(a)].score, sb = dets[static_cast<size_t>(b)].score;
        return sa != sb ? sa > sb : a < b;
    });
    std::vector<char> suppressed(dets.size(), 0);
    std::vector<int> kept;
    for (size_t i = 0; i < order.size(); ++i) {
        const int idx = order[i];
        if (suppressed[static_cast<size_t>(idx)]) continue;
        kept.push_back(idx);
        const Detection& k = dets[static_cast<size_t>(idx)];
        for (size_t j = i + 1; j < order.size(); ++j) {
            const int cand = order[j];
            if (suppressed[static_cast<size_t>(cand)]) continue;
            const Detection& c = dets[static_cast<size_t>(cand)];
            if (c.label != k.label) continue;
            if (iou(k.box, c.box) > iou_thr) suppressed[static_cast<size_t>(cand)] = 1;
        }
    }
    return kept;
}

int count_remaining(const std::vector<Detection>& dets, double conf_thr) {
    int n = 0;
    for (const auto& d : dets)
        if (d.score >= conf_thr) ++n;
    return n;
}

void write_detections(std::ostream& os, const std::vector<Detection>& dets) {
    os << std::setprecision(17);
    for (const auto& d : dets)
        os << d.label << ' ' << d.score << ' ' << d.box.x1 << ' ' << d.box.y1 << ' ' << d.box.x2 << ' ' << d.box.y2
           << '\n';
}

std::vector<Detection> read_detections(std::istream& is) {
    std::vector<Detection> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Detection d;
        if (!(ls >> d.label >> d.score >> d.box.x1 >> d.box.y1 >> d.box.x2 >> d.box.y2))
            throw IoError(str_cat("malformed detection line: '", line, "'"));
        out.push_back(d);
    }
    return out;
}

void save_detections(const std::string& path, const std::vector<Detection>& dets) {
    std::ofstream os(path);
    if (!os) throw IoError(str_cat("cannot open '", path, "' for writing"));
    write_detections(os, dets);
}

std::vector<Detection> load_detections(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(str_cat("cannot open '", path, "'"));
    return read_detections(is);
}

}  // namespace detlab
