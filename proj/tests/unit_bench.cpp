#include "doctest.h"

#include "detlab/bench.hpp"
#include "detlab/config.hpp"

using namespace detlab;

TEST_CASE("median and spearman helpers") {
    CHECK(median_of({3, 1, 2}) == doctest::Approx(2));
    CHECK(median_of({4, 1, 3, 2}) == doctest::Approx(2.5));
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {9, 7, 5, 3}) == doctest::Approx(-1.0));
    // monotone nonlinear maps keep rank correlation at one
    CHECK(spearman({1, 2, 3, 4, 5}, {1, 8, 27, 64, 125}) == doctest::Approx(1.0));
}

TEST_CASE("synthetic corpus is reproducible with heavy low-score mass and overlap") {
    auto a = synthetic_box_corpus(1, 5000);
    auto b = synthetic_box_corpus(1, 5000);
    REQUIRE(a.size() == 5000);
    CHECK(a.size() == b.size());
    for (size_t i = 0; i < 100; ++i) {
        CHECK(a[i].score == b[i].score);
        CHECK(a[i].box.x1 == b[i].box.x1);
    }
    CHECK(count_remaining(a, 0.25) < count_remaining(a, 0.001));
    // clusters force suppression
    auto kept = nms(a, 0.001, 0.5);
    CHECK(kept.size() < a.size() / 2);
}

TEST_CASE("count_remaining is monotone over the sweep grid") {
    auto corpus = synthetic_box_corpus(7, 10000);
    std::vector<double> confs = {0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25};
    auto rows = nms_sweep(corpus, confs, {0.5, 0.7}, 3);
    REQUIRE(rows.size() == confs.size() * 2);
    int prev = rows[0].count;
    for (size_t i = 2; i < rows.size(); i += 2) {
        CHECK(rows[i].count <= prev);
        prev = rows[i].count;
    }
    // spearman of conf vs count is exactly -1 on this corpus
    std::vector<double> conf_list, counts;
    for (size_t i = 0; i < rows.size(); i += 2) {
        conf_list.push_back(rows[i].conf);
        counts.push_back(rows[i].count);
    }
    CHECK(spearman(conf_list, counts) == doctest::Approx(-1.0));
}

TEST_CASE("sweep csv and svg formats") {
    std::vector<SweepRow> rows = {{0.001, 0.5, 900, 1000, 1100}, {0.01, 0.5, 500, 700, 750}};
    auto csv = sweep_csv(rows);
    CHECK(csv.find("conf,iou,count,nms_ns_median,nms_ns_mean\n") == 0);
    CHECK(csv.find("0.001,0.5,900,1000,1100") != std::string::npos);
    auto svg = sweep_svg(rows);
    CHECK(svg.find("<svg") == 0);
    CHECK(svg.find("rect") != std::string::npos);

    auto lcsv = layer_sweep_csv({{1, 0.5, 12345}, {2, 0.6, 23456}});
    CHECK(lcsv.find("layers,ap,latency_ns\n") == 0);
    CHECK(lcsv.find("2,0.6,23456") != std::string::npos);
}

TEST_CASE("empty sweep corpus is rejected") {
    CHECK_THROWS_AS(nms_sweep({}, {0.1}, {0.5}, 3), ConfigError);
}

TEST_CASE("end-to-end bench records the stage split and honors warmup") {
    ModelConfig mcfg;
    mcfg.backbone.stage_widths = {4, 6, 8, 12, 16};
    mcfg.encoder.embed_dim = 16;
    mcfg.encoder.nheads = 4;
    mcfg.encoder.ffn_dim = 32;
    mcfg.encoder.width_mult = 1.0;
    mcfg.decoder.num_layers = 2;
    mcfg.decoder.num_queries = 5;
    mcfg.decoder.npoints = 2;
    mcfg.decoder.nheads = 2;
    mcfg.decoder.ffn_dim = 16;
    Detector<float> model(mcfg, 3);
    auto dataset = generate(1, 4, 32, 32);

    auto summary = bench_end_to_end(model, dataset, PostMode::ScoreThreshold, 0, 0, 0.3, 3, 2);
    // 2 passes x 4 samples = 8 iterations, 3 warmup excluded
    CHECK(summary.records.size() == 5);
    for (const auto& r : summary.records) {
        CHECK(r.model_ns >= 0);
        CHECK(r.post_ns >= 0);
    }
    CHECK(summary.mean_total_ns == doctest::Approx(summary.mean_model_ns + summary.mean_post_ns));

    auto with_nms = bench_end_to_end(model, dataset, PostMode::Nms, 0.01, 0.7, 0, 3, 2);
    CHECK(with_nms.records.size() == 5);
}

TEST_CASE("run config: defaults, file, overrides, unknown keys") {
    RunConfig def;
    CHECK(def.variant == "E");
    CHECK(def.query_selection == "uncertainty");
    CHECK(def.embed_dim == 128);
    CHECK(def.num_decoder_layers == 3);
    // paper-recipe defaults
    CHECK(def.base_lr == 1e-4);
    CHECK(def.backbone_lr == 1e-5);
    CHECK(def.weight_decay == 1e-4);
    CHECK(def.warmup_steps == 2000);
    CHECK(def.warmup_factor == 0.001);
    CHECK(def.clip_grad_norm == 0.1);
    CHECK(def.ema_decay == 0.9999);
    CHECK(def.cost_class == 2.0);
    CHECK(def.cost_alpha == 0.25);
    CHECK(def.loss_alpha == 0.75);
    CHECK(def.loss_bbox == 5.0);
    CHECK(def.label_noise_ratio == 0.5);
    CHECK(def.box_noise_scale == 1.0);

    auto from_file = run_config_from_json("{\"embed_dim\": 64, \"variant\": \"D_S5\"}");
    CHECK(from_file.embed_dim == 64);
    CHECK(from_file.variant == "D_S5");

    CHECK_THROWS_AS(run_config_from_json("{\"embedd_dim\": 64}"), ConfigError);

    std::map<std::string, std::string> overrides = {{"steps", "123"}, {"query_selection", "\"vanilla\""}};
    auto cfg = make_run_config("", overrides);
    CHECK(cfg.steps == 123);
    CHECK(cfg.query_selection == "vanilla");

    // json echo round trip
    auto echoed = run_config_from_json(cfg.to_json());
    CHECK(echoed.steps == 123);
    CHECK(echoed.to_json() == cfg.to_json());

    // model/train conversion respects the backbone lr ratio
    auto mc = cfg.model_config();
    CHECK(mc.backbone_lr_mult == doctest::Approx(0.1));
    auto tc = cfg.train_config();
    CHECK(tc.base_lr == 1e-4);
}
