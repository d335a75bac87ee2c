#pragma once

// Central finite-difference oracle (f64, h=1e-5) for reverse-mode gradients.
// Lives in test code only; the engine under test never calls it.

#include <functional>
#include <vector>

#include "detlab/rng.hpp"
#include "detlab/tensor.hpp"

namespace gradcheck {

struct Result {
    double max_rel = 0.0;
    int checked = 0;
    bool ok(double rtol = 1e-4) const { return checked > 0 && max_rel <= rtol; }
};

// Compares analytic grads of build_loss() wrt each leaf against central
// differences. A random subset of coordinates per leaf is probed.
inline Result check(const std::function<detlab::Tensor<double>()>& build_loss,
                    const std::vector<detlab::Tensor<double>*>& leaves, detlab::Xorshift64Star& rng,
                    int coords_per_leaf = 8, double h = 1e-5, double rtol = 1e-4, double atol = 1e-7) {
    for (auto* leaf : leaves) leaf->zero_grad();
    auto loss = build_loss();
    detlab::backward(loss);

    Result res;
    for (auto* leaf : leaves) {
        const int64_t n = leaf->numel();
        std::vector<int64_t> coords;
        if (n <= coords_per_leaf) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int c = 0; c < coords_per_leaf; ++c) coords.push_back(rng.next() % static_cast<uint64_t>(n));
        }
        const std::vector<double> analytic =
            leaf->has_grad() ? leaf->grad() : std::vector<double>(static_cast<size_t>(n), 0.0);
        for (int64_t i : coords) {
            const double v = leaf->values()[static_cast<size_t>(i)];
            double lp, lm;
            {
                detlab::NoGrad<double> ng;
                leaf->values()[static_cast<size_t>(i)] = v + h;
                lp = build_loss().item();
                leaf->values()[static_cast<size_t>(i)] = v - h;
                lm = build_loss().item();
                leaf->values()[static_cast<size_t>(i)] = v;
            }
            const double fd = (lp - lm) / (2.0 * h);
            const double an = analytic[static_cast<size_t>(i)];
            const double denom = std::max({std::abs(fd), std::abs(an), atol / rtol});
            res.max_rel = std::max(res.max_rel, std::abs(fd - an) / denom);
            ++res.checked;
        }
    }
    return res;
}

}  // namespace gradcheck
