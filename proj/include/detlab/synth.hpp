#pragma once

// Deterministic synthetic detection scenes: colored circles, squares and
// triangles on a flat background, with tight mask-derived boxes. Generation is
// a pure function of (seed, index); the PRNG is the xorshift64* generator from
// rng.hpp so the stream is reproducible everywhere.

#include <cstdint>
#include <string>
#include <vector>

#include "detlab/geometry.hpp"
#include "detlab/tensor.hpp"

namespace detlab {

inline constexpr int kNumShapeClasses = 3;  // 0 circle, 1 square, 2 triangle

struct GroundTruth {
    int label = 0;
    BoxXYXY box;
};

struct SyntheticScene {
    Tensor<float> image;  // [3,H,W] in [0,1]
    std::vector<GroundTruth> gts;
    int height() const { return image.dim(1); }
    int width() const { return image.dim(2); }
};

// One scene; `masks` (when given) receives the rasterized per-object masks,
// each H*W bytes, for oracle checks.
SyntheticScene generate_scene(uint64_t seed, uint64_t index, int height = 96, int width = 96,
                              std::vector<std::vector<uint8_t>>* masks = nullptr);

std::vector<SyntheticScene> generate(uint64_t seed, int count, int height = 96, int width = 96);

struct AugmentTrace {
    bool flipped = false, color_jittered = false, expanded = false, resized = false;
    struct BoxEvent {
        int label = 0;
        BoxXYXY unclipped;  // transformed box before clipping
        BoxXYXY clipped;
        double visible_fraction = 1.0;
        bool kept = true;
    };
    std::vector<BoxEvent> events;  // one per input box per geometric stage
};

// Applies, each with independent probability 1/2: horizontal flip, per-channel
// color jitter (+-0.2, clamped), expand-and-crop back to the input size, and
// resize jitter within +-25% letterboxed back. Boxes whose visible fraction
// drops below 0.7 are removed.
SyntheticScene augment(const SyntheticScene& scene, uint64_t seed, AugmentTrace* trace = nullptr);

// binary PPMs plus one JSON annotation file (annotations.json) in `dir`
void dump_dataset(const std::string& dir, const std::vector<SyntheticScene>& scenes);

}  // namespace detlab
