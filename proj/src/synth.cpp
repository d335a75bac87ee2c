#include "detlab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "detlab/common.hpp"
#include "detlab/rng.hpp"
#include "json.hpp"

namespace detlab {

namespace {

constexpr int kMinShapePx = 6;
constexpr double kKeepFraction = 0.7;

struct Placement {
    int label;
    int x0, y0, w, h;
};

void rasterize(const Placement& p, int height, int width, std::vector<uint8_t>& mask) {
    mask.assign(static_cast<size_t>(height) * width, 0);
    const double cx = p.x0 + p.w / 2.0, cy = p.y0 + p.h / 2.0;
    for (int y = p.y0; y < p.y0 + p.h && y < height; ++y) {
        for (int x = p.x0; x < p.x0 + p.w && x < width; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            bool inside = false;
            switch (p.label) {
                case 0: {  // circle
                    const double r = p.w / 2.0;
                    inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
                    break;
                }
                case 1:  // square
                    inside = true;
                    break;
                case 2: {  // upright isoceles triangle: apex top-center
                    const double ax = p.x0 + p.w / 2.0, ay = p.y0;
                    const double bx = p.x0, by = p.y0 + p.h;
                    const double ccx = p.x0 + p.w, ccy = p.y0 + p.h;
                    auto side = [&](double x1, double y1, double x2, double y2) {
                        return (px - x1) * (y2 - y1) - (py - y1) * (x2 - x1);
                    };
                    const double d1 = side(ax, ay, bx, by);
                    const double d2 = side(bx, by, ccx, ccy);
                    const double d3 = side(ccx, ccy, ax, ay);
                    inside = (d1 <= 0 && d2 <= 0 && d3 <= 0) || (d1 >= 0 && d2 >= 0 && d3 >= 0);
                    break;
                }
                default: break;
            }
            if (inside) mask[static_cast<size_t>(y) * width + x] = 1;
        }
    }
}

bool mask_bbox(const std::vector<uint8_t>& mask, int height, int width, int& mnx, int& mny, int& mxx, int& mxy) {
    mnx = width; mny = height; mxx = -1; mxy = -1;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            if (mask[static_cast<size_t>(y) * width + x]) {
                mnx = std::min(mnx, x);
                mny = std::min(mny, y);
                mxx = std::max(mxx, x);
                mxy = std::max(mxy, y);
            }
    return mxx >= 0;
}

// clips to [0,1]^2, reporting the surviving area fraction
BoxXYXY clip_box(const BoxXYXY& b, double& fraction) {
    BoxXYXY c{std::clamp(b.x1, 0.0, 1.0), std::clamp(b.y1, 0.0, 1.0), std::clamp(b.x2, 0.0, 1.0),
              std::clamp(b.y2, 0.0, 1.0)};
    const double full = box_area(b);
    fraction = full > 0 ? std::max(0.0, box_area(c)) / full : 0.0;
    return c;
}

void apply_box_transform(std::vector<GroundTruth>& gts, const std::function<BoxXYXY(const BoxXYXY&)>& f,
                         double min_wh_px, int height, int width, AugmentTrace* trace) {
    std::vector<GroundTruth> kept;
    for (const auto& gt : gts) {
        BoxXYXY moved = f(gt.box);
        double fraction = 0;
        BoxXYXY clipped = clip_box(moved, fraction);
        const bool degenerate =
            (clipped.x2 - clipped.x1) * width < min_wh_px || (clipped.y2 - clipped.y1) * height < min_wh_px;
        const bool keep = fraction >= kKeepFraction && !degenerate;
        if (trace) trace->events.push_back({gt.label, moved, clipped, fraction, keep});
        if (keep) kept.push_back({gt.label, clipped});
    }
    gts = std::move(kept);
}

std::array<float, 3> channel_means(const Tensor<float>& img) {
    const int hw = img.dim(1) * img.dim(2);
    std::array<float, 3> m{};
    for (int c = 0; c < 3; ++c) {
        double s = 0;
        const float* p = img.data() + static_cast<size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) s += p[i];
        m[static_cast<size_t>(c)] = static_cast<float>(s / hw);
    }
    return m;
}

// translate by (dx,dy) pixels, filling uncovered area
Tensor<float> shift_image(const Tensor<float>& img, int dx, int dy, const std::array<float, 3>& fill) {
    const int h = img.dim(1), w = img.dim(2);
    auto out = Tensor<float>::zeros({3, h, w});
    for (int c = 0; c < 3; ++c) {
        float* op = out.data() + static_cast<size_t>(c) * h * w;
        const float* ip = img.data() + static_cast<size_t>(c) * h * w;
        for (int y = 0; y < h; ++y) {
            const int sy = y - dy;
            for (int x = 0; x < w; ++x) {
                const int sx = x - dx;
                op[static_cast<size_t>(y) * w + x] = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                                         ? ip[static_cast<size_t>(sy) * w + sx]
                                                         : fill[static_cast<size_t>(c)];
            }
        }
    }
    return out;
}

}  // namespace

SyntheticScene generate_scene(uint64_t seed, uint64_t index, int height, int width,
                              std::vector<std::vector<uint8_t>>* masks) {
    if (height % 32 != 0 || width % 32 != 0)
        throw ConfigError(str_cat("scene extent ", height, "x", width, " not divisible by 32"));
    Xorshift64Star rng = substream(seed, index);

    std::array<float, 3> bg;
    for (auto& c : bg) c = static_cast<float>(rng.uniform(0.1, 0.9));

    auto image = Tensor<float>::zeros({3, height, width});
    for (int c = 0; c < 3; ++c)
        std::fill_n(image.data() + static_cast<size_t>(c) * height * width, static_cast<size_t>(height) * width,
                    bg[static_cast<size_t>(c)]);

    const int target = 1 + rng.uniform_int(8);
    const int max_side = std::min({40, height / 2, width / 2});
    std::vector<Placement> placed;
    std::vector<GroundTruth> gts;
    std::vector<uint8_t> mask;
    for (int obj = 0; obj < target; ++obj) {
        for (int attempt = 0; attempt < 40; ++attempt) {
            Placement p;
            p.label = rng.uniform_int(kNumShapeClasses);
            p.w = kMinShapePx + rng.uniform_int(max_side - kMinShapePx + 1);
            p.h = (p.label == 0) ? p.w : kMinShapePx + rng.uniform_int(max_side - kMinShapePx + 1);
            p.x0 = 1 + rng.uniform_int(width - p.w - 2);
            p.y0 = 1 + rng.uniform_int(height - p.h - 2);
            bool overlaps = false;
            for (const auto& q : placed)
                if (p.x0 < q.x0 + q.w + 2 && q.x0 < p.x0 + p.w + 2 && p.y0 < q.y0 + q.h + 2 &&
                    q.y0 < p.y0 + p.h + 2) {
                    overlaps = true;
                    break;
                }
            if (overlaps) continue;

            rasterize(p, height, width, mask);
            int mnx, mny, mxx, mxy;
            if (!mask_bbox(mask, height, width, mnx, mny, mxx, mxy)) continue;
            if (mxx - mnx + 1 < 4 || mxy - mny + 1 < 4) continue;

            // color contrasting the background by >= 0.3 in one chosen channel
            std::array<float, 3> color;
            for (auto& c : color) c = static_cast<float>(rng.uniform());
            const int k = rng.uniform_int(3);
            const float b = bg[static_cast<size_t>(k)];
            color[static_cast<size_t>(k)] =
                b >= 0.5f ? static_cast<float>(rng.uniform(0.0, b - 0.3)) : static_cast<float>(rng.uniform(b + 0.3, 1.0));

            for (int y = mny; y <= mxy; ++y)
                for (int x = mnx; x <= mxx; ++x)
                    if (mask[static_cast<size_t>(y) * width + x])
                        for (int c = 0; c < 3; ++c)
                            image.data()[(static_cast<size_t>(c) * height + y) * width + x] =
                                color[static_cast<size_t>(c)];

            placed.push_back(p);
            gts.push_back({p.label, {static_cast<double>(mnx) / width, static_cast<double>(mny) / height,
                                     static_cast<double>(mxx + 1) / width, static_cast<double>(mxy + 1) / height}});
            if (masks) masks->push_back(mask);
            break;
        }
    }
    return {std::move(image), std::move(gts)};
}

std::vector<SyntheticScene> generate(uint64_t seed, int count, int height, int width) {
    std::vector<SyntheticScene> scenes;
    scenes.reserve(static_cast<size_t>(std::max(0, count)));
    for (int i = 0; i < count; ++i) scenes.push_back(generate_scene(seed, static_cast<uint64_t>(i), height, width));
    return scenes;
}

SyntheticScene augment(const SyntheticScene& scene, uint64_t seed, AugmentTrace* trace) {
    Xorshift64Star rng(seed);
    const int h = scene.height(), w = scene.width();
    SyntheticScene out{scene.image.detach(), scene.gts};

    if (rng.coin()) {  // horizontal flip
        if (trace) trace->flipped = true;
        auto flipped = Tensor<float>::zeros({3, h, w});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y) {
                const float* src = out.image.data() + (static_cast<size_t>(c) * h + y) * w;
                float* dst = flipped.data() + (static_cast<size_t>(c) * h + y) * w;
                for (int x = 0; x < w; ++x) dst[x] = src[w - 1 - x];
            }
        out.image = flipped;
        for (auto& gt : out.gts) gt.box = {1.0 - gt.box.x2, gt.box.y1, 1.0 - gt.box.x1, gt.box.y2};
    }

    if (rng.coin()) {  // color jitter
        if (trace) trace->color_jittered = true;
        for (int c = 0; c < 3; ++c) {
            const float d = static_cast<float>(rng.uniform(-0.2, 0.2));
            float* p = out.image.data() + static_cast<size_t>(c) * h * w;
            for (int i = 0; i < h * w; ++i) p[i] = std::clamp(p[i] + d, 0.0f, 1.0f);
        }
    }

    if (rng.coin()) {  // expand onto a larger canvas, crop back: net translation with fill
        if (trace) trace->expanded = true;
        const double e = rng.uniform(1.05, 1.3);
        const int margin_x = std::max(1, static_cast<int>(e * w) - w);
        const int margin_y = std::max(1, static_cast<int>(e * h) - h);
        const int dx = rng.uniform_int(2 * margin_x + 1) - margin_x;
        const int dy = rng.uniform_int(2 * margin_y + 1) - margin_y;
        out.image = shift_image(out.image, dx, dy, channel_means(out.image));
        apply_box_transform(
            out.gts,
            [&](const BoxXYXY& b) {
                return BoxXYXY{b.x1 + static_cast<double>(dx) / w, b.y1 + static_cast<double>(dy) / h,
                               b.x2 + static_cast<double>(dx) / w, b.y2 + static_cast<double>(dy) / h};
            },
            2.0, h, w, trace);
    }

    if (rng.coin()) {  // resize within +-25%, letterbox or center-crop back
        if (trace) trace->resized = true;
        const double s = rng.uniform(0.75, 1.25);
        const int nh = std::max(8, static_cast<int>(std::lround(s * h)));
        const int nw = std::max(8, static_cast<int>(std::lround(s * w)));
        const auto fill = channel_means(out.image);
        auto resized = Tensor<float>::zeros({3, h, w});
        const int oy = (h - nh) / 2;  // negative -> crop
        const int ox = (w - nw) / 2;
        for (int c = 0; c < 3; ++c) {
            float* dst = resized.data() + static_cast<size_t>(c) * h * w;
            const float* src = out.image.data() + static_cast<size_t>(c) * h * w;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const int ry = y - oy, rx = x - ox;
                    if (ry < 0 || ry >= nh || rx < 0 || rx >= nw) {
                        dst[static_cast<size_t>(y) * w + x] = fill[static_cast<size_t>(c)];
                        continue;
                    }
                    const int sy = std::min(h - 1, static_cast<int>((ry + 0.5) * h / nh));
                    const int sx = std::min(w - 1, static_cast<int>((rx + 0.5) * w / nw));
                    dst[static_cast<size_t>(y) * w + x] = src[static_cast<size_t>(sy) * w + sx];
                }
        }
        out.image = resized;
        apply_box_transform(
            out.gts,
            [&](const BoxXYXY& b) {
                return BoxXYXY{(b.x1 * nw + ox) / w, (b.y1 * nh + oy) / h, (b.x2 * nw + ox) / w,
                               (b.y2 * nh + oy) / h};
            },
            2.0, h, w, trace);
    }
    return out;
}

void dump_dataset(const std::string& dir, const std::vector<SyntheticScene>& scenes) {
    std::filesystem::create_directories(dir);
    nlohmann::json ann = nlohmann::json::array();
    for (size_t i = 0; i < scenes.size(); ++i) {
        const auto& s = scenes[i];
        const std::string name = str_cat("scene_", i, ".ppm");
        std::ofstream os(dir + "/" + name, std::ios::binary);
        if (!os) throw IoError(str_cat("cannot write ", dir, "/", name));
        const int h = s.height(), w = s.width();
        os << "P6\n" << w << ' ' << h << "\n255\n";
        std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    row[static_cast<size_t>(x) * 3 + c] = static_cast<unsigned char>(std::lround(
                        std::clamp(s.image.data()[(static_cast<size_t>(c) * h + y) * w + x], 0.0f, 1.0f) * 255.0f));
            os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
        }
        nlohmann::json item;
        item["file"] = name;
        item["gts"] = nlohmann::json::array();
        for (const auto& gt : s.gts)
            item["gts"].push_back({{"label", gt.label},
                                   {"x1", gt.box.x1},
                                   {"y1", gt.box.y1},
                                   {"x2", gt.box.x2},
                                   {"y2", gt.box.y2}});
        ann.push_back(item);
    }
    std::ofstream js(dir + "/annotations.json");
    if (!js) throw IoError(str_cat("cannot write ", dir, "/annotations.json"));
    js << ann.dump(2) << '\n';
}

}  // namespace detlab
