#pragma once

// Run configuration: defaults < JSON config file < command-line overrides.
// Every hyperparameter of the training recipe is addressable by key; unknown
// keys are rejected. The effective config is echoed next to every artifact.

#include <map>
#include <string>
#include <vector>

#include "detlab/model.hpp"
#include "detlab/train.hpp"

namespace detlab {

struct RunConfig {
    // data
    uint64_t seed = 0;
    int image_size = 96;
    int train_scenes = 5000;
    int eval_scenes = 500;

    // model
    std::string variant = "E";
    std::string query_selection = "uncertainty";
    std::vector<int> backbone_widths = {16, 32, 64, 128, 192};
    int embed_dim = 128;
    int nheads = 8;
    int ffn_dim = 512;
    int aifi_layers = 1;
    int num_repblocks = 3;
    double width_mult = 0.25;
    int num_decoder_layers = 3;
    int num_queries = 60;
    int npoints = 4;
    int decoder_ffn_dim = 512;
    int num_feature_scales = 3;
    int denoising_number = 60;
    double label_noise_ratio = 0.5;
    double box_noise_scale = 1.0;

    // optimization
    double base_lr = 1e-4;
    double backbone_lr = 1e-5;
    double weight_decay = 1e-4;
    int warmup_steps = 2000;
    double warmup_factor = 0.001;
    double clip_grad_norm = 0.1;
    double ema_decay = 0.9999;
    bool ema_ramp = true;

    // matching costs and loss weights
    double cost_class = 2.0, cost_alpha = 0.25, cost_gamma = 2.0, cost_bbox = 5.0, cost_giou = 2.0;
    double loss_class = 1.0, loss_alpha = 0.75, loss_gamma = 2.0, loss_bbox = 5.0, loss_giou = 2.0;

    // run control
    int steps = 20000;
    int batch_size = 4;
    int eval_every = 1000;
    int log_every = 50;
    double score_thr = 0.0;
    bool augment = true;
    bool deploy = false;  // checkpoint holds reparameterized (fused) weights

    std::string to_json() const;
    ModelConfig model_config() const;
    TrainConfig train_config() const;
    void validate() const;
};

// `file` may be empty; overrides are raw JSON fragments keyed by config name
RunConfig make_run_config(const std::string& file, const std::map<std::string, std::string>& overrides);
RunConfig run_config_from_json(const std::string& json_text);

}  // namespace detlab
