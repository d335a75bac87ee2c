#pragma once

// Small convolutional backbone: five stride-2 stages (3x3 conv + norm + SiLU,
// one residual block each). Stages 3-5 are tapped as the {S3,S4,S5} pyramid at
// strides 8/16/32.

#include <vector>

#include "detlab/nn.hpp"

namespace detlab {

struct BackboneConfig {
    // per-stage output widths; the last three are the pyramid channels
    std::vector<int> stage_widths = {16, 32, 64, 128, 256};
    int s3_channels() const { return stage_widths[2]; }
    int s4_channels() const { return stage_widths[3]; }
    int s5_channels() const { return stage_widths[4]; }
};

template <typename T>
struct FeaturePyramid {
    Tensor<T> s3, s4, s5;
};

template <typename T>
struct ResidualBlock {
    nn::Conv2d<T> c1, c2;
    nn::BatchNorm2d<T> n1, n2;

    ResidualBlock() = default;
    ResidualBlock(int c, Xorshift64Star& rng)
        : c1(c, std::max(4, c / 2), 3, 1, rng, false),
          c2(std::max(4, c / 2), c, 3, 1, rng, false),
          n1(std::max(4, c / 2)),
          n2(c) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        auto h = silu(n1.forward(c1.forward(x), training));
        return silu(add(x, n2.forward(c2.forward(h), training)));
    }
    void collect(nn::ParamCollector<T>& pc) {
        pc.sub("c1", c1);
        pc.sub("c2", c2);
        pc.sub("n1", n1);
        pc.sub("n2", n2);
    }
};

template <typename T>
class BackboneTiny {
public:
    BackboneTiny() = default;
    BackboneTiny(const BackboneConfig& cfg, Xorshift64Star& rng) : cfg_(cfg) {
        int in = 3;
        for (int s = 0; s < 5; ++s) {
            const int out = cfg.stage_widths[static_cast<size_t>(s)];
            downs_.emplace_back(in, out, 3, 2, rng, false);
            norms_.emplace_back(out);
            blocks_.emplace_back(out, rng);
            in = out;
        }
    }

    FeaturePyramid<T> forward(const Tensor<T>& image, bool training) {
        if (image.rank() != 3 || image.dim(0) != 3)
            throw ShapeError(str_cat("backbone: expected [3,H,W], got ", shape_str(image.shape())));
        if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0)
            throw ConfigError(str_cat("backbone: input ", image.dim(1), "x", image.dim(2), " not divisible by 32"));
        Tensor<T> x = image;
        FeaturePyramid<T> pyr;
        for (int s = 0; s < 5; ++s) {
            x = blocks_[static_cast<size_t>(s)].forward(
                silu(norms_[static_cast<size_t>(s)].forward(downs_[static_cast<size_t>(s)].forward(x), training)),
                training);
            if (s == 2) pyr.s3 = x;
            if (s == 3) pyr.s4 = x;
            if (s == 4) pyr.s5 = x;
        }
        return pyr;
    }

    void collect(nn::ParamCollector<T>& pc) {
        for (int s = 0; s < 5; ++s) {
            pc.sub(str_cat("stage", s, ".down"), downs_[static_cast<size_t>(s)]);
            pc.sub(str_cat("stage", s, ".norm"), norms_[static_cast<size_t>(s)]);
            pc.sub(str_cat("stage", s, ".res"), blocks_[static_cast<size_t>(s)]);
        }
    }

    const BackboneConfig& config() const { return cfg_; }

private:
    BackboneConfig cfg_;
    std::vector<nn::Conv2d<T>> downs_;
    std::vector<nn::BatchNorm2d<T>> norms_;
    std::vector<ResidualBlock<T>> blocks_;
};

}  // namespace detlab
