// detlab command-line entry point: train / eval / bench / nms-sweep /
// layer-sweep / scatter / reparam. Every command echoes its effective config
// next to its outputs. Exit codes: 0 ok, 2 config error, 3 numeric failure,
// 4 I/O error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "detlab/bench.hpp"
#include "detlab/config.hpp"
#include "detlab/matching.hpp"
#include "detlab/train.hpp"

namespace fs = std::filesystem;
using namespace detlab;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw IoError(str_cat("cannot write '", path, "'"));
    os << text;
}

void echo_config(const RunConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    write_text(out_dir + "/config.json", cfg.to_json() + "\n");
}

RunConfig config_from_checkpoint(const std::string& path) {
    auto data = load_checkpoint(path);
    return run_config_from_json(data.config_json);
}

struct LoadedModel {
    RunConfig cfg;
    std::unique_ptr<Detector<float>> model;
    int64_t step = 0;
};

LoadedModel load_model(const std::string& ckpt_path) {
    LoadedModel lm;
    auto data = load_checkpoint(ckpt_path);
    lm.cfg = run_config_from_json(data.config_json);
    lm.model = std::make_unique<Detector<float>>(lm.cfg.model_config(), lm.cfg.seed);
    if (lm.cfg.deploy) lm.model->reparameterize();  // match the fused parameter layout
    restore(*lm.model, data);
    lm.step = data.step;
    return lm;
}

// evaluation always runs on the held-out split derived from the config seed
std::vector<SyntheticScene> eval_split(const RunConfig& cfg) {
    return generate(cfg.seed ^ Trainer<float>::kEvalSeedSalt, cfg.eval_scenes, cfg.image_size, cfg.image_size);
}

int cmd_train(const RunConfig& cfg, const std::string& out_dir) {
    echo_config(cfg, out_dir);
    Detector<float> model(cfg.model_config(), cfg.seed);
    Trainer<float> trainer(model, cfg.train_config());
    std::ofstream log(out_dir + "/metrics.jsonl");
    if (!log) throw IoError(str_cat("cannot write '", out_dir, "/metrics.jsonl'"));
    auto result = trainer.run(log);
    save_checkpoint(out_dir + "/model.ckpt", snapshot(model, &trainer.ema(), result.steps_run, cfg.to_json()));
    std::cout << "trained " << result.steps_run << " steps; eval ap " << result.final_ap.ap << " ap50 "
              << result.final_ap.ap50 << "\nwrote " << out_dir << "/model.ckpt\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, int layers, double score_thr, const std::string& out_dir) {
    auto lm = load_model(ckpt);
    echo_config(lm.cfg, out_dir);
    const int use_layers = layers > 0 ? layers : lm.cfg.num_decoder_layers;
    auto scenes = eval_split(lm.cfg);
    auto ap = evaluate_model(*lm.model, scenes, use_layers, score_thr);
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\"layers\":%d,\"score_thr\":%g,\"ap\":%.6f,\"ap50\":%.6f,\"ap75\":%.6f,"
                  "\"ap_s\":%.6f,\"ap_m\":%.6f,\"ap_l\":%.6f}",
                  use_layers, score_thr, ap.ap, ap.ap50, ap.ap75, ap.ap_s, ap.ap_m, ap.ap_l);
    write_text(out_dir + "/eval.json", std::string(buf) + "\n");
    std::cout << buf << "\n";
    return 0;
}

int cmd_bench(const std::string& ckpt, const std::string& post, double conf, double iou_thr, double score_thr,
              int warmup, int reps, const std::string& out_dir) {
    auto lm = load_model(ckpt);
    echo_config(lm.cfg, out_dir);
    auto scenes = generate(lm.cfg.seed + 17, 32, lm.cfg.image_size, lm.cfg.image_size);
    auto summary =
        bench_end_to_end(*lm.model, scenes, parse_post_mode(post), conf, iou_thr, score_thr, warmup, std::max(1, reps));
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"post\":\"%s\",\"samples\":%zu,\"mean_model_ns\":%.0f,\"median_model_ns\":%.0f,"
                  "\"mean_post_ns\":%.0f,\"median_post_ns\":%.0f,\"mean_total_ns\":%.0f,\"median_total_ns\":%.0f}",
                  post.c_str(), summary.records.size(), summary.mean_model_ns, summary.median_model_ns,
                  summary.mean_post_ns, summary.median_post_ns, summary.mean_total_ns, summary.median_total_ns);
    write_text(out_dir + "/bench.json", std::string(buf) + "\n");
    std::cout << buf << "\n";
    return 0;
}

int cmd_nms_sweep(const std::string& dets_source, const std::vector<double>& confs, const std::vector<double>& ious,
                  int reps, const RunConfig& cfg, const std::string& out_dir) {
    echo_config(cfg, out_dir);
    std::vector<Detection> corpus;
    if (dets_source == "synthetic") {
        corpus = synthetic_box_corpus(cfg.seed + 1234, 10000);
    } else {
        corpus = load_detections(dets_source);
    }
    auto rows = nms_sweep(corpus, confs, ious, reps);
    write_text(out_dir + "/nms_sweep.csv", sweep_csv(rows));
    write_text(out_dir + "/nms_sweep.svg", sweep_svg(rows));
    std::cout << "wrote " << out_dir << "/nms_sweep.csv (" << rows.size() << " rows) and nms_sweep.svg\n";
    return 0;
}

int cmd_layer_sweep(const std::string& ckpt, double score_thr, const std::string& out_dir) {
    auto lm = load_model(ckpt);
    echo_config(lm.cfg, out_dir);
    auto scenes = eval_split(lm.cfg);
    auto rows = decoder_layer_sweep(*lm.model, scenes, score_thr);
    write_text(out_dir + "/layer_sweep.csv", layer_sweep_csv(rows));
    std::cout << layer_sweep_csv(rows);
    return 0;
}

int cmd_scatter(const std::string& ckpt, const std::string& vanilla_ckpt, const std::string& out_dir) {
    auto lm = load_model(ckpt);
    echo_config(lm.cfg, out_dir);
    auto scenes = eval_split(lm.cfg);
    std::vector<ScatterRow> rows;
    auto prop = eval_prop(*lm.model, scenes, lm.cfg.query_selection, &rows);
    std::cout << lm.cfg.query_selection << ": prop_cls " << prop.prop_cls << " prop_both " << prop.prop_both << "\n";
    if (!vanilla_ckpt.empty()) {
        auto vm = load_model(vanilla_ckpt);
        auto vprop = eval_prop(*vm.model, scenes, vm.cfg.query_selection, &rows);
        std::cout << vm.cfg.query_selection << ": prop_cls " << vprop.prop_cls << " prop_both " << vprop.prop_both
                  << "\n";
    }
    export_scatter(out_dir + "/scatter.csv", rows);
    std::cout << "wrote " << out_dir << "/scatter.csv\n";
    return 0;
}

int cmd_reparam(const std::string& ckpt, const std::string& out_path) {
    auto lm = load_model(ckpt);
    lm.model->reparameterize();
    lm.cfg.deploy = true;
    const auto parent = fs::path(out_path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    save_checkpoint(out_path, snapshot(*lm.model, static_cast<Ema<float>*>(nullptr), lm.step, lm.cfg.to_json()));
    std::cout << "wrote deploy-mode checkpoint " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale real-time detection transformer laboratory"};
    app.require_subcommand(1);

    std::string config_file, out_dir = "out", ckpt, dets = "synthetic", post = "none", vanilla_ckpt, out_path;
    std::vector<std::string> set_args;
    std::map<std::string, std::string> overrides;
    std::string seed_flag, steps_flag, variant_flag, scheme_flag;
    int layers = 0, warmup = 10, reps = 3, sweep_reps = 30;
    double score_thr = -1, conf = 0.001, iou_thr = 0.7;
    std::vector<double> conf_list = {0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25};
    std::vector<double> iou_list = {0.5, 0.6, 0.7, 0.8};

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_file, "JSON config file");
        cmd->add_option("--set", set_args, "config override key=json")->take_all();
        cmd->add_option("--out", out_dir, "output directory");
    };

    auto* train = app.add_subcommand("train", "train a detector on the synthetic dataset");
    add_common(train);
    train->add_option("--seed", seed_flag);
    train->add_option("--steps", steps_flag);
    train->add_option("--variant", variant_flag, "encoder variant A|B|C|D|D_S5|E");
    train->add_option("--query-selection", scheme_flag, "vanilla|uncertainty");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
    add_common(eval);
    eval->add_option("--ckpt", ckpt)->required();
    eval->add_option("--layers", layers, "decoder layers used at inference");
    eval->add_option("--score-thr", score_thr);

    auto* bench = app.add_subcommand("bench", "end-to-end latency benchmark");
    add_common(bench);
    bench->add_option("--ckpt", ckpt)->required();
    bench->add_option("--post", post, "none|nms");
    bench->add_option("--conf", conf);
    bench->add_option("--iou", iou_thr);
    bench->add_option("--score-thr", score_thr);
    bench->add_option("--warmup", warmup);
    bench->add_option("--reps", reps, "timed passes over the dataset");

    auto* sweep = app.add_subcommand("nms-sweep", "NMS threshold sweep on a box corpus");
    add_common(sweep);
    sweep->add_option("--dets", dets, "detection file or 'synthetic'");
    sweep->add_option("--conf-list", conf_list)->delimiter(',');
    sweep->add_option("--iou-list", iou_list)->delimiter(',');
    sweep->add_option("--reps", sweep_reps);

    auto* lsweep = app.add_subcommand("layer-sweep", "per-layer speed/accuracy table");
    add_common(lsweep);
    lsweep->add_option("--ckpt", ckpt)->required();
    lsweep->add_option("--score-thr", score_thr);

    auto* scatter = app.add_subcommand("scatter", "selected-feature score/IoU scatter export");
    add_common(scatter);
    scatter->add_option("--ckpt", ckpt)->required();
    scatter->add_option("--vanilla-ckpt", vanilla_ckpt, "second checkpoint for the comparison scheme");

    auto* reparam = app.add_subcommand("reparam", "fold RepConv branches into deploy form");
    reparam->add_option("--ckpt", ckpt)->required();
    reparam->add_option("--out", out_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        for (const auto& kv : set_args) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw ConfigError(str_cat("--set expects key=json, got '", kv, "'"));
            overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
        }
        if (train->parsed()) {
            if (!seed_flag.empty()) overrides["seed"] = seed_flag;
            if (!steps_flag.empty()) overrides["steps"] = steps_flag;
            if (!variant_flag.empty()) overrides["variant"] = "\"" + variant_flag + "\"";
            if (!scheme_flag.empty()) overrides["query_selection"] = "\"" + scheme_flag + "\"";
            return cmd_train(make_run_config(config_file, overrides), out_dir);
        }
        if (eval->parsed()) {
            auto cfg = config_from_checkpoint(ckpt);
            return cmd_eval(ckpt, layers, score_thr < 0 ? cfg.score_thr : score_thr, out_dir);
        }
        if (bench->parsed())
            return cmd_bench(ckpt, post, conf, iou_thr, score_thr < 0 ? 0.3 : score_thr, warmup, reps, out_dir);
        if (sweep->parsed())
            return cmd_nms_sweep(dets, conf_list, iou_list, sweep_reps, make_run_config(config_file, overrides),
                                 out_dir);
        if (lsweep->parsed()) return cmd_layer_sweep(ckpt, score_thr < 0 ? 0.3 : score_thr, out_dir);
        if (scatter->parsed()) return cmd_scatter(ckpt, vanilla_ckpt, out_dir);
        if (reparam->parsed()) return cmd_reparam(ckpt, out_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
