#include "detlab/bench.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "detlab/rng.hpp"

namespace detlab {

double median_of(std::vector<double> values) {
    if (values.empty()) return 0;
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {
std::vector<double> average_ranks(const std::vector<double>& xs) {
    const size_t n = xs.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n, 0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}
}  // namespace

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw NumericError("spearman: need two same-length series");
    auto rx = average_ranks(xs);
    auto ry = average_ranks(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double cov = 0, vx = 0, vy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if (vx == 0 || vy == 0) return 0;
    return cov / std::sqrt(vx * vy);
}

BenchSummary summarize(const std::vector<BenchRecord>& records) {
    BenchSummary s;
    s.records = records;
    if (records.empty()) return s;
    std::vector<double> model_ns, post_ns, total_ns;
    for (const auto& r : records) {
        model_ns.push_back(static_cast<double>(r.model_ns));
        post_ns.push_back(static_cast<double>(r.post_ns));
        total_ns.push_back(static_cast<double>(r.model_ns + r.post_ns));
        s.mean_model_ns += static_cast<double>(r.model_ns);
        s.mean_post_ns += static_cast<double>(r.post_ns);
    }
    const double n = static_cast<double>(records.size());
    s.mean_model_ns /= n;
    s.mean_post_ns /= n;
    s.mean_total_ns = s.mean_model_ns + s.mean_post_ns;
    s.median_model_ns = median_of(model_ns);
    s.median_post_ns = median_of(post_ns);
    s.median_total_ns = median_of(total_ns);
    return s;
}

std::vector<Detection> synthetic_box_corpus(uint64_t seed, int count, int classes) {
    Xorshift64Star rng(seed);
    const int nclusters = 24;
    std::vector<std::array<double, 2>> centers;
    for (int c = 0; c < nclusters; ++c) centers.push_back({rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)});
    std::vector<Detection> dets;
    dets.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const auto& ctr = centers[static_cast<size_t>(rng.uniform_int(nclusters))];
        const double cx = std::clamp(ctr[0] + 0.06 * rng.normal(), 0.02, 0.98);
        const double cy = std::clamp(ctr[1] + 0.06 * rng.normal(), 0.02, 0.98);
        const double w = std::clamp(0.1 * std::exp(0.4 * rng.normal()), 0.01, 0.5);
        const double h = std::clamp(0.1 * std::exp(0.4 * rng.normal()), 0.01, 0.5);
        BoxXYXY box{std::max(0.0, cx - w / 2), std::max(0.0, cy - h / 2), std::min(1.0, cx + w / 2),
                    std::min(1.0, cy + h / 2)};
        const double u = rng.uniform();
        dets.push_back({rng.uniform_int(classes), u * u * u, box});  // mostly low scores
    }
    return dets;
}

std::vector<SweepRow> nms_sweep(const std::vector<Detection>& dets, const std::vector<double>& confs,
                                const std::vector<double>& ious, int reps) {
    if (dets.empty()) throw ConfigError("nms_sweep: empty detection corpus");
    std::vector<SweepRow> rows;
    for (double conf : confs) {
        const int count = count_remaining(dets, conf);
        for (double iou_thr : ious) {
            std::vector<double> times;
            times.reserve(static_cast<size_t>(reps));
            size_t sink = 0;
            for (int r = 0; r < reps; ++r) {
                const int64_t t0 = now_ns();
                auto kept = nms(dets, conf, iou_thr);
                const int64_t t1 = now_ns();
                sink += kept.size();
                times.push_back(static_cast<double>(t1 - t0));
            }
            (void)sink;
            double mean = 0;
            for (double t : times) mean += t;
            mean /= static_cast<double>(times.size());
            rows.push_back({conf, iou_thr, count, static_cast<int64_t>(median_of(times)), static_cast<int64_t>(mean)});
        }
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "conf,iou,count,nms_ns_median,nms_ns_mean\n";
    for (const auto& r : rows)
        os << r.conf << ',' << r.iou << ',' << r.count << ',' << r.nms_ns_median << ',' << r.nms_ns_mean << '\n';
    return os.str();
}

std::string sweep_svg(const std::vector<SweepRow>& rows) {
    // one bar per distinct confidence threshold (counts are iou-independent)
    std::vector<std::pair<double, int>> bars;
    for (const auto& r : rows)
        if (bars.empty() || bars.back().first != r.conf) bars.push_back({r.conf, r.count});
    int max_count = 1;
    for (auto& [c, n] : bars) max_count = std::max(max_count, n);
    const int bar_w = 56, gap = 12, height = 240, base = 200, left = 48;
    const int width = left + static_cast<int>(bars.size()) * (bar_w + gap) + gap;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<text x=\"4\" y=\"16\" font-size=\"12\">remaining boxes vs confidence threshold</text>\n";
    for (size_t i = 0; i < bars.size(); ++i) {
        const int h = static_cast<int>(160.0 * bars[i].second / max_count);
        const int x = left + static_cast<int>(i) * (bar_w + gap);
        os << "<rect x=\"" << x << "\" y=\"" << base - h << "\" width=\"" << bar_w << "\" height=\"" << h
           << "\" fill=\"#4a7fb5\"/>\n";
        os << "<text x=\"" << x << "\" y=\"" << base + 14 << "\" font-size=\"10\">" << bars[i].first << "</text>\n";
        os << "<text x=\"" << x << "\" y=\"" << base - h - 4 << "\" font-size=\"10\">" << bars[i].second
           << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string layer_sweep_csv(const std::vector<LayerSweepRow>& rows) {
    std::ostringstream os;
    os << "layers,ap,latency_ns\n";
    for (const auto& r : rows) os << r.layers << ',' << r.ap << ',' << r.latency_ns << '\n';
    return os.str();
}

}  // namespace detlab
