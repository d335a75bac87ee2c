#pragma once

// Training loop: AdamW with decoupled weight decay and a per-group lr
// multiplier, linear warmup, global grad-norm clipping, an EMA shadow of the
// parameters, JSONL metric logging, and periodic held-out evaluation.

#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <ostream>

#include "detlab/checkpoint.hpp"
#include "detlab/evaluator.hpp"
#include "detlab/matching.hpp"
#include "detlab/model.hpp"
#include "detlab/synth.hpp"

namespace detlab {

struct TrainConfig {
    double base_lr = 1e-4;
    double weight_decay = 1e-4;
    int warmup_steps = 2000;
    double warmup_factor = 0.001;
    double clip_grad_norm = 0.1;
    double ema_decay = 0.9999;
    bool ema_ramp = true;  // (1+t)/(10+t) ramp toward ema_decay
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    int total_steps = 20000;
    int batch_size = 4;
    uint64_t seed = 0;
    int train_scenes = 5000;
    int eval_scenes = 500;
    int image_size = 96;
    int eval_every = 1000;
    int log_every = 50;
    double eval_score_thr = 0.0;
    bool augment_data = true;

    LossWeights loss;
    CostWeights cost;

    void validate() const {
        if (base_lr <= 0) throw ConfigError("train: base lr must be positive");
        if (clip_grad_norm <= 0) throw ConfigError("train: clip_grad_norm must be positive");
        if (ema_decay <= 0 || ema_decay >= 1) throw ConfigError("train: ema decay must lie in (0,1)");
        if (batch_size < 1 || total_steps < 1) throw ConfigError("train: batch/steps must be >= 1");
    }

    // linear warmup from base_lr*warmup_factor to base_lr, then constant
    double lr_at(int64_t step) const {
        if (warmup_steps <= 0 || step >= warmup_steps) return base_lr;
        const double t = static_cast<double>(step) / warmup_steps;
        return base_lr * (warmup_factor + (1.0 - warmup_factor) * t);
    }
};

// global grad norm over all params; scales grads in place when above max_norm
template <typename T>
double clip_global_norm(std::vector<nn::NamedParam<T>>& params, double max_norm) {
    double sq = 0;
    for (auto& p : params) {
        if (!p.tensor->has_grad()) continue;
        for (T g : p.tensor->grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto& p : params) {
            if (!p.tensor->has_grad()) continue;
            T* g = p.tensor->grad_data();
            for (int64_t i = 0; i < p.tensor->numel(); ++i) g[i] *= scale;
        }
    }
    return norm;
}

template <typename T>
class AdamW {
public:
    AdamW(const std::vector<nn::NamedParam<T>>& params, const TrainConfig& cfg) : cfg_(cfg) {
        for (const auto& p : params)
            states_.push_back({std::vector<T>(static_cast<size_t>(p.tensor->numel()), T(0)),
                               std::vector<T>(static_cast<size_t>(p.tensor->numel()), T(0))});
    }

    void step(std::vector<nn::NamedParam<T>>& params, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
        for (size_t k = 0; k < params.size(); ++k) {
            auto& p = params[k];
            auto& st = states_[k];
            const double group_lr = lr * p.lr_mult;
            T* vals = p.tensor->data();
            const bool has_grad = p.tensor->has_grad();
            const T* g = has_grad ? p.tensor->grad().data() : nullptr;
            for (int64_t i = 0; i < p.tensor->numel(); ++i) {
                const double gi = g ? static_cast<double>(g[i]) : 0.0;
                double m = cfg_.adam_beta1 * st.m[static_cast<size_t>(i)] + (1 - cfg_.adam_beta1) * gi;
                double v = cfg_.adam_beta2 * st.v[static_cast<size_t>(i)] + (1 - cfg_.adam_beta2) * gi * gi;
                st.m[static_cast<size_t>(i)] = static_cast<T>(m);
                st.v[static_cast<size_t>(i)] = static_cast<T>(v);
                const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.adam_eps);
                // decoupled weight decay
                vals[i] -= static_cast<T>(group_lr * (update + cfg_.weight_decay * static_cast<double>(vals[i])));
            }
        }
    }

private:
    struct State {
        std::vector<T> m, v;
    };
    TrainConfig cfg_;
    std::vector<State> states_;
    int64_t t_ = 0;
};

template <typename T>
class Ema {
public:
    Ema(const std::vector<nn::NamedParam<T>>& params, double decay, bool ramp) : decay_(decay), ramp_(ramp) {
        for (const auto& p : params) shadows_.push_back(p.tensor->values());
    }

    void update(const std::vector<nn::NamedParam<T>>& params) {
        ++updates_;
        double d = decay_;
        if (ramp_) d = std::min(decay_, (1.0 + static_cast<double>(updates_)) / (10.0 + static_cast<double>(updates_)));
        for (size_t k = 0; k < params.size(); ++k) {
            const T* v = params[k].tensor->data();
            auto& s = shadows_[k];
            for (size_t i = 0; i < s.size(); ++i)
                s[i] = static_cast<T>(d * static_cast<double>(s[i]) + (1 - d) * static_cast<double>(v[i]));
        }
    }

    // exchange shadow and live values (call twice to restore)
    void swap(std::vector<nn::NamedParam<T>>& params) {
        for (size_t k = 0; k < params.size(); ++k) std::swap(params[k].tensor->values(), shadows_[k]);
    }

    std::vector<std::vector<T>>& shadows() { return shadows_; }

private:
    double decay_;
    bool ramp_;
    int64_t updates_ = 0;
    std::vector<std::vector<T>> shadows_;
};

// ---------------------------------------------------------------------------
// model <-> checkpoint

template <typename T>
CheckpointData snapshot(Detector<T>& model, Ema<T>* ema, int64_t step, const std::string& config_json) {
    nn::ParamCollector<T> pc;
    model.collect(pc);
    CheckpointData data;
    data.step = step;
    data.config_json = config_json;
    for (const auto& p : pc.params) {
        std::vector<float> v(p.tensor->values().begin(), p.tensor->values().end());
        data.blobs.emplace_back(p.name, std::move(v));
    }
    for (const auto& b : pc.buffers) {
        std::vector<float> v(b.data->begin(), b.data->end());
        data.blobs.emplace_back("buf/" + b.name, std::move(v));
    }
    if (ema) {
        for (size_t k = 0; k < pc.params.size(); ++k) {
            std::vector<float> v(ema->shadows()[k].begin(), ema->shadows()[k].end());
            data.blobs.emplace_back("ema/" + pc.params[k].name, std::move(v));
        }
    }
    return data;
}

template <typename T>
void restore(Detector<T>& model, const CheckpointData& data, Ema<T>* ema = nullptr) {
    nn::ParamCollector<T> pc;
    model.collect(pc);
    for (auto& p : pc.params) {
        const auto* blob = data.find(p.name);
        if (!blob) throw IoError(str_cat("checkpoint missing parameter '", p.name, "'"));
        if (static_cast<int64_t>(blob->size()) != p.tensor->numel())
            throw IoError(str_cat("checkpoint blob '", p.name, "' has ", blob->size(), " values, expected ",
                                  p.tensor->numel()));
        for (size_t i = 0; i < blob->size(); ++i) p.tensor->values()[i] = static_cast<T>((*blob)[i]);
    }
    for (auto& b : pc.buffers) {
        const auto* blob = data.find("buf/" + b.name);
        if (!blob) throw IoError(str_cat("checkpoint missing buffer '", b.name, "'"));
        b.data->assign(blob->begin(), blob->end());
    }
    if (ema) {
        for (size_t k = 0; k < pc.params.size(); ++k) {
            const auto* blob = data.find("ema/" + pc.params[k].name);
            if (!blob) throw IoError(str_cat("checkpoint missing EMA blob for '", pc.params[k].name, "'"));
            ema->shadows()[k].assign(blob->begin(), blob->end());
        }
    }
}

// ---------------------------------------------------------------------------
// evaluation helpers

template <typename T>
ApResult evaluate_model(Detector<T>& model, const std::vector<SyntheticScene>& scenes, int use_layers,
                        double score_thr) {
    std::vector<EvalImage> images;
    images.reserve(scenes.size());
    for (const auto& s : scenes) {
        EvalImage img;
        img.gts = s.gts;
        Tensor<T> input;
        if constexpr (std::is_same_v<T, float>) {
            input = s.image;
        } else {
            std::vector<T> v(s.image.values().begin(), s.image.values().end());
            input = Tensor<T>::from(s.image.shape(), std::move(v));
        }
        img.dets = model.infer(input, use_layers, score_thr);
        images.push_back(std::move(img));
    }
    return evaluate_ap(images, 0.0, scenes.empty() ? 96 : scenes[0].height());
}

template <typename T>
PropMetrics eval_prop(Detector<T>& model, const std::vector<SyntheticScene>& scenes, const std::string& scheme,
                      std::vector<ScatterRow>* rows = nullptr) {
    PropAccumulator acc;
    for (const auto& s : scenes) {
        auto quality = model.selected_feature_quality(s.image, s.gts);
        for (const auto& [cls, iou_score] : quality) {
            acc.add(cls, iou_score);
            if (rows) rows->push_back({cls, iou_score, scheme});
        }
    }
    return acc.result();
}

// ---------------------------------------------------------------------------

struct EvalRecord {
    int64_t step = 0;
    ApResult ap;
};

struct TrainResult {
    int64_t steps_run = 0;
    std::vector<EvalRecord> evals;
    ApResult final_ap;
    std::string abort_reason;  // empty on success
};

template <typename T>
class Trainer {
public:
    Trainer(Detector<T>& model, const TrainConfig& cfg) : model_(model), cfg_(cfg) {
        cfg_.validate();
        model_.collect(pc_);
        opt_ = std::make_unique<AdamW<T>>(pc_.params, cfg_);
        ema_ = std::make_unique<Ema<T>>(pc_.params, cfg_.ema_decay, cfg_.ema_ramp);
        eval_set_ = generate(cfg_.seed ^ kEvalSeedSalt, cfg_.eval_scenes, cfg_.image_size, cfg_.image_size);
    }

    // stop_early, when set, is called after each periodic eval
    TrainResult run(std::ostream& metric_log, const std::function<bool(const EvalRecord&)>& stop_early = {}) {
        TrainResult result;
        Xorshift64Star loop_rng(cfg_.seed ^ 0x7261696E6C6F6Full);
        Xorshift64Star dn_rng(cfg_.seed ^ 0x646E2D726E67ull);

        for (int64_t step = 0; step < cfg_.total_steps; ++step) {
            const double lr = cfg_.lr_at(step);
            for (auto& p : pc_.params) p.tensor->zero_grad();

            LossBreakdown avg;
            for (int b = 0; b < cfg_.batch_size; ++b) {
                const uint64_t idx = static_cast<uint64_t>(loop_rng.uniform_int(cfg_.train_scenes));
                SyntheticScene scene = generate_scene(cfg_.seed, idx, cfg_.image_size, cfg_.image_size);
                if (cfg_.augment_data)
                    scene = augment(scene, splitmix64((static_cast<uint64_t>(step) << 8) ^ static_cast<uint64_t>(b) ^
                                                      splitmix64(cfg_.seed)));
                Tensor<T> image;
                if constexpr (std::is_same_v<T, float>) {
                    image = scene.image;
                } else {
                    std::vector<T> v(scene.image.values().begin(), scene.image.values().end());
                    image = Tensor<T>::from(scene.image.shape(), std::move(v));
                }
                auto fwd = model_.forward_train(image, scene.gts, dn_rng);
                LossBreakdown bd;
                auto loss = detection_loss(fwd, scene.gts, cfg_.loss, cfg_.cost, model_.config().scheme, &bd);
                const char* bad = nullptr;
                if (!std::isfinite(bd.cls)) bad = "cls";
                else if (!std::isfinite(bd.l1)) bad = "l1";
                else if (!std::isfinite(bd.giou)) bad = "giou";
                else if (!std::isfinite(bd.dn)) bad = "dn";
                if (bad)
                    throw NumericError(str_cat("non-finite loss term '", bad, "' at step ", step));
                avg.total += bd.total / cfg_.batch_size;
                avg.cls += bd.cls / cfg_.batch_size;
                avg.l1 += bd.l1 / cfg_.batch_size;
                avg.giou += bd.giou / cfg_.batch_size;
                avg.dn += bd.dn / cfg_.batch_size;
                backward(mul_scalar(loss, static_cast<T>(1.0 / cfg_.batch_size)));
            }
            clip_global_norm(pc_.params, cfg_.clip_grad_norm);
            opt_->step(pc_.params, lr);
            ema_->update(pc_.params);
            result.steps_run = step + 1;

            if (step % cfg_.log_every == 0 || step + 1 == cfg_.total_steps) {
                char line[256];
                std::snprintf(line, sizeof(line),
                              "{\"step\":%lld,\"total\":%.9g,\"cls\":%.9g,\"l1\":%.9g,\"giou\":%.9g,\"dn\":%.9g}",
                              static_cast<long long>(step), avg.total, avg.cls, avg.l1, avg.giou, avg.dn);
                metric_log << line << '\n';
            }

            if (cfg_.eval_every > 0 && ((step + 1) % cfg_.eval_every == 0 || step + 1 == cfg_.total_steps)) {
                EvalRecord rec{step + 1, evaluate_ema()};
                result.evals.push_back(rec);
                char line[256];
                std::snprintf(line, sizeof(line),
                              "{\"step\":%lld,\"ap\":%.9g,\"ap50\":%.9g,\"ap75\":%.9g}",
                              static_cast<long long>(rec.step), rec.ap.ap, rec.ap.ap50, rec.ap.ap75);
                metric_log << line << '\n';
                if (stop_early && stop_early(rec)) break;
            }
        }
        result.final_ap = result.evals.empty() ? evaluate_ema() : result.evals.back().ap;
        return result;
    }

    // evaluation uses the EMA shadow weights
    ApResult evaluate_ema() {
        ema_->swap(pc_.params);
        auto ap = evaluate_model(model_, eval_set_, model_.config().decoder.num_layers, cfg_.eval_score_thr);
        ema_->swap(pc_.params);
        return ap;
    }

    Ema<T>& ema() { return *ema_; }
    std::vector<nn::NamedParam<T>>& params() { return pc_.params; }
    const std::vector<SyntheticScene>& eval_set() const { return eval_set_; }

    static constexpr uint64_t kEvalSeedSalt = 0x6576616C2D736574ull;  // held-out split offset

private:
    Detector<T>& model_;
    TrainConfig cfg_;
    nn::ParamCollector<T> pc_;
    std::unique_ptr<AdamW<T>> opt_;
    std::unique_ptr<Ema<T>> ema_;
    std::vector<SyntheticScene> eval_set_;
};

}  // namespace detlab
