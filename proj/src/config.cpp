#include "detlab/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace detlab {

namespace {

using json = nlohmann::ordered_json;

json to_json_obj(const RunConfig& c) {
    return json{{"seed", c.seed},
                {"image_size", c.image_size},
                {"train_scenes", c.train_scenes},
                {"eval_scenes", c.eval_scenes},
                {"variant", c.variant},
                {"query_selection", c.query_selection},
                {"backbone_widths", c.backbone_widths},
                {"embed_dim", c.embed_dim},
                {"nheads", c.nheads},
                {"ffn_dim", c.ffn_dim},
                {"aifi_layers", c.aifi_layers},
                {"num_repblocks", c.num_repblocks},
                {"width_mult", c.width_mult},
                {"num_decoder_layers", c.num_decoder_layers},
                {"num_queries", c.num_queries},
                {"npoints", c.npoints},
                {"decoder_ffn_dim", c.decoder_ffn_dim},
                {"num_feature_scales", c.num_feature_scales},
                {"denoising_number", c.denoising_number},
                {"label_noise_ratio", c.label_noise_ratio},
                {"box_noise_scale", c.box_noise_scale},
                {"base_lr", c.base_lr},
                {"backbone_lr", c.backbone_lr},
                {"weight_decay", c.weight_decay},
                {"warmup_steps", c.warmup_steps},
                {"warmup_factor", c.warmup_factor},
                {"clip_grad_norm", c.clip_grad_norm},
                {"ema_decay", c.ema_decay},
                {"ema_ramp", c.ema_ramp},
                {"cost_class", c.cost_class},
                {"cost_alpha", c.cost_alpha},
                {"cost_gamma", c.cost_gamma},
                {"cost_bbox", c.cost_bbox},
                {"cost_giou", c.cost_giou},
                {"loss_class", c.loss_class},
                {"loss_alpha", c.loss_alpha},
                {"loss_gamma", c.loss_gamma},
                {"loss_bbox", c.loss_bbox},
                {"loss_giou", c.loss_giou},
                {"steps", c.steps},
                {"batch_size", c.batch_size},
                {"eval_every", c.eval_every},
                {"log_every", c.log_every},
                {"score_thr", c.score_thr},
                {"augment", c.augment},
                {"deploy", c.deploy}};
}

void apply_json(RunConfig& c, const json& j) {
    const json known = to_json_obj(RunConfig{});
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.contains(it.key())) throw ConfigError(str_cat("unknown config key '", it.key(), "'"));
    auto get = [&](const char* key, auto& into) {
        if (j.contains(key)) into = j.at(key).get<std::decay_t<decltype(into)>>();
    };
    get("seed", c.seed);
    get("image_size", c.image_size);
    get("train_scenes", c.train_scenes);
    get("eval_scenes", c.eval_scenes);
    get("variant", c.variant);
    get("query_selection", c.query_selection);
    get("backbone_widths", c.backbone_widths);
    get("embed_dim", c.embed_dim);
    get("nheads", c.nheads);
    get("ffn_dim", c.ffn_dim);
    get("aifi_layers", c.aifi_layers);
    get("num_repblocks", c.num_repblocks);
    get("width_mult", c.width_mult);
    get("num_decoder_layers", c.num_decoder_layers);
    get("num_queries", c.num_queries);
    get("npoints", c.npoints);
    get("decoder_ffn_dim", c.decoder_ffn_dim);
    get("num_feature_scales", c.num_feature_scales);
    get("denoising_number", c.denoising_number);
    get("label_noise_ratio", c.label_noise_ratio);
    get("box_noise_scale", c.box_noise_scale);
    get("base_lr", c.base_lr);
    get("backbone_lr", c.backbone_lr);
    get("weight_decay", c.weight_decay);
    get("warmup_steps", c.warmup_steps);
    get("warmup_factor", c.warmup_factor);
    get("clip_grad_norm", c.clip_grad_norm);
    get("ema_decay", c.ema_decay);
    get("ema_ramp", c.ema_ramp);
    get("cost_class", c.cost_class);
    get("cost_alpha", c.cost_alpha);
    get("cost_gamma", c.cost_gamma);
    get("cost_bbox", c.cost_bbox);
    get("cost_giou", c.cost_giou);
    get("loss_class", c.loss_class);
    get("loss_alpha", c.loss_alpha);
    get("loss_gamma", c.loss_gamma);
    get("loss_bbox", c.loss_bbox);
    get("loss_giou", c.loss_giou);
    get("steps", c.steps);
    get("batch_size", c.batch_size);
    get("eval_every", c.eval_every);
    get("log_every", c.log_every);
    get("score_thr", c.score_thr);
    get("augment", c.augment);
    get("deploy", c.deploy);
}

}  // namespace

std::string RunConfig::to_json() const { return to_json_obj(*this).dump(2); }

ModelConfig RunConfig::model_config() const {
    validate();
    ModelConfig m;
    m.backbone.stage_widths = backbone_widths;
    m.encoder.variant = parse_variant(variant);
    m.encoder.embed_dim = embed_dim;
    m.encoder.nheads = nheads;
    m.encoder.ffn_dim = ffn_dim;
    m.encoder.aifi_layers = aifi_layers;
    m.encoder.repblocks = num_repblocks;
    m.encoder.width_mult = width_mult;
    m.decoder.num_layers = num_decoder_layers;
    m.decoder.num_queries = num_queries;
    m.decoder.npoints = npoints;
    m.decoder.nheads = nheads;
    m.decoder.levels = num_feature_scales;
    m.decoder.ffn_dim = decoder_ffn_dim;
    m.decoder.dn_number = denoising_number;
    m.decoder.label_noise_ratio = label_noise_ratio;
    m.decoder.box_noise_scale = box_noise_scale;
    m.scheme = parse_scheme(query_selection);
    m.backbone_lr_mult = backbone_lr / base_lr;
    return m;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.base_lr = base_lr;
    t.weight_decay = weight_decay;
    t.warmup_steps = warmup_steps;
    t.warmup_factor = warmup_factor;
    t.clip_grad_norm = clip_grad_norm;
    t.ema_decay = ema_decay;
    t.ema_ramp = ema_ramp;
    t.total_steps = steps;
    t.batch_size = batch_size;
    t.seed = seed;
    t.train_scenes = train_scenes;
    t.eval_scenes = eval_scenes;
    t.image_size = image_size;
    t.eval_every = eval_every;
    t.log_every = log_every;
    t.eval_score_thr = score_thr;
    t.augment_data = augment;
    t.cost = CostWeights{cost_class, cost_alpha, cost_gamma, cost_bbox, cost_giou};
    t.loss = LossWeights{loss_class, loss_alpha, loss_gamma, loss_bbox, loss_giou};
    return t;
}

void RunConfig::validate() const {
    if (backbone_widths.size() != 5)
        throw ConfigError(str_cat("backbone_widths needs 5 stage entries, got ", backbone_widths.size()));
    if (num_feature_scales != 3)
        throw ConfigError(str_cat("num_feature_scales must be 3 (got ", num_feature_scales, ")"));
    if (image_size % 32 != 0) throw ConfigError(str_cat("image_size ", image_size, " not divisible by 32"));
    if (base_lr <= 0) throw ConfigError("base_lr must be positive");
}

RunConfig run_config_from_json(const std::string& json_text) {
    RunConfig cfg;
    json parsed;
    try {
        parsed = json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(str_cat("invalid config JSON: ", e.what()));
    }
    apply_json(cfg, parsed);
    return cfg;
}

RunConfig make_run_config(const std::string& file, const std::map<std::string, std::string>& overrides) {
    RunConfig cfg;
    if (!file.empty()) {
        std::ifstream is(file);
        if (!is) throw IoError(str_cat("cannot open config file '", file, "'"));
        std::stringstream ss;
        ss << is.rdbuf();
        json parsed;
        try {
            parsed = json::parse(ss.str());
        } catch (const std::exception& e) {
            throw ConfigError(str_cat("invalid config file '", file, "': ", e.what()));
        }
        apply_json(cfg, parsed);
    }
    if (!overrides.empty()) {
        json patch = json::object();
        for (const auto& [key, value] : overrides) {
            try {
                patch[key] = json::parse(value);
            } catch (...) {
                patch[key] = value;  // bare strings
            }
        }
        apply_json(cfg, patch);
    }
    cfg.validate();
    return cfg;
}

}  // namespace detlab
