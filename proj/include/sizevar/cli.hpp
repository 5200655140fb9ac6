#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sizevar/io.hpp"
#include "sizevar/pipeline.hpp"
#include "sizevar/synthgen.hpp"

namespace sizevar::cli {

// Exit-code contract: 0 success, 1 runtime failure, 2 usage/config error.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One JSON config file drives every command; flags override seed, method and
// the primary output path. The full config is copied into reports for
// provenance.
struct RunConfig {
    json raw;
    std::uint64_t seed = 0;
    double test_frac = 0.2;
    std::string method = "gbdt";
    std::map<std::string, std::string> paths;
    synth::CatalogGenConfig catalog_cfg;
    synth::SceneConfig scene_cfg;
    synth::NoiseConfig noise_cfg;
    std::size_t n_scenes = 100;
    pipeline::PipelineOptions pipeline_opts;

    std::string path(const std::string& name) const {
        const auto it = paths.find(name);
        if (it == paths.end() || it->second.empty())
            throw ConfigError("config: paths." + name + " is required for this command");
        return it->second;
    }

    std::string config_hash() const {
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a(raw.dump())));
        return buf;
    }
};

namespace detail_cli {

inline std::pair<double, double> pair_of(const json& j, const char* key,
                                         std::pair<double, double> fallback) {
    if (!j.contains(key)) return fallback;
    const json& a = j.at(key);
    return {a.at(0).get<double>(), a.at(1).get<double>()};
}

inline std::pair<int, int> int_pair_of(const json& j, const char* key,
                                       std::pair<int, int> fallback) {
    if (!j.contains(key)) return fallback;
    const json& a = j.at(key);
    return {a.at(0).get<int>(), a.at(1).get<int>()};
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
}

}  // namespace detail_cli

inline RunConfig config_from_json(const json& j) {
    try {
        RunConfig cfg;
        cfg.raw = j;
        if (!j.contains("seed"))
            throw ConfigError("config: 'seed' is required (no wall-clock defaults)");
        cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.test_frac = j.value("test_frac", 0.2);
        cfg.method = j.value("method", std::string("gbdt"));

        if (j.contains("paths"))
            for (const auto& [key, value] : j.at("paths").items())
                cfg.paths[key] = value.get<std::string>();

        const json sg = j.value("synthgen", json::object());
        // The generator algorithm is part of the data contract: a different
        // implementation reproduces these datasets only by matching it.
        const std::string rng_algorithm = sg.value("rng_algorithm", std::string("splitmix64"));
        if (rng_algorithm != "splitmix64")
            throw ConfigError("config: synthgen.rng_algorithm '" + rng_algorithm +
                              "' is not supported (this build implements splitmix64)");
        cfg.catalog_cfg.n_groups = sg.value("n_groups", 6);
        cfg.catalog_cfg.variants_per_group = detail_cli::int_pair_of(sg, "variants_per_group", {2, 3});
        cfg.catalog_cfg.size_gap = sg.value("size_gap", 0.30);
        cfg.catalog_cfg.base_width_mm = detail_cli::pair_of(sg, "base_width_mm", {20.0, 80.0});
        cfg.catalog_cfg.base_aspect = detail_cli::pair_of(sg, "base_aspect", {0.4, 2.2});
        cfg.catalog_cfg.rng_seed = sg.contains("rng_seed") ? sg.at("rng_seed").get<std::uint64_t>()
                                                           : cfg.seed;
        cfg.n_scenes = sg.value("n_scenes", std::size_t{100});
        cfg.scene_cfg.groups_per_scene = detail_cli::int_pair_of(sg, "groups_per_scene", {4, 6});
        cfg.scene_cfg.boxes_per_group = detail_cli::int_pair_of(sg, "boxes_per_group", {3, 5});
        cfg.scene_cfg.rng_seed = cfg.catalog_cfg.rng_seed;
        cfg.noise_cfg.sigma = sg.value("sigma", 0.0);
        cfg.noise_cfg.outlier_prob = sg.value("outlier_prob", 0.0);
        cfg.noise_cfg.outlier_scale_range = detail_cli::pair_of(sg, "outlier_scale_range", {1.5, 3.0});
        cfg.noise_cfg.scale_range = detail_cli::pair_of(sg, "scale_range", {2.0, 10.0});

        const json gb = j.value("gbdt", json::object());
        cfg.pipeline_opts.bin_opts.bins = gb.value("bins", 10);
        cfg.pipeline_opts.bin_opts.cooccur_min_frac = gb.value("cooccur_min_frac", 0.05);
        cfg.pipeline_opts.bin_opts.range_percentiles =
            detail_cli::pair_of(gb, "range_percentiles", {1.0, 99.0});
        cfg.pipeline_opts.gbdt_params.n_rounds = gb.value("n_rounds", 200);
        cfg.pipeline_opts.gbdt_params.max_depth = gb.value("max_depth", 3);
        cfg.pipeline_opts.gbdt_params.learning_rate = gb.value("learning_rate", 0.1);
        cfg.pipeline_opts.gbdt_params.min_leaf = gb.value("min_leaf", 3);

        const json gm = j.value("gmm", json::object());
        cfg.pipeline_opts.bank_opts.em.max_iters = gm.value("max_iters", 200);
        cfg.pipeline_opts.bank_opts.em.tol = gm.value("tol", 1e-6);
        cfg.pipeline_opts.bank_opts.em.reg_eps = gm.value("reg_eps", 1e-6);
        cfg.pipeline_opts.bank_opts.em.n_restarts = gm.value("n_restarts", 5);
        cfg.pipeline_opts.bank_opts.min_points = gm.value("min_points", 10);

        const json sn = j.value("setnet", json::object());
        cfg.pipeline_opts.setnet_hp.hidden = sn.value("hidden", 32);
        cfg.pipeline_opts.setnet_hp.epochs = sn.value("epochs", 300);
        cfg.pipeline_opts.setnet_hp.lr = sn.value("lr", 0.01);
        cfg.pipeline_opts.setnet_hp.momentum = sn.value("momentum", 0.9);
        cfg.pipeline_opts.setnet_hp.batch_size = sn.value("batch_size", 32);
        cfg.pipeline_opts.setnet_hp.l2 = sn.value("l2", 1e-4);

        const json pl = j.value("pipeline", json::object());
        cfg.pipeline_opts.min_train_candidates = pl.value("min_train_candidates", 20);
        cfg.pipeline_opts.threads = pl.value("threads", 0);

        cfg.pipeline_opts.seed = cfg.seed;
        cfg.pipeline_opts.config_hash = cfg.config_hash();
        return cfg;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return config_from_json(j);
}

// --- commands ----------------------------------------------------------------

inline int cmd_gen(const RunConfig& cfg) {
    synth::CatalogGenConfig catalog_cfg = cfg.catalog_cfg;
    catalog_cfg.rng_seed = derive_seed(cfg.catalog_cfg.rng_seed, fnv1a("catalog"));
    const Catalog catalog = synth::generate_catalog(catalog_cfg);
    const std::vector<Scene> scenes = synth::generate_dataset(
        catalog, cfg.scene_cfg, cfg.noise_cfg, cfg.n_scenes,
        derive_seed(cfg.scene_cfg.rng_seed, fnv1a("scenes")));

    const std::string catalog_path = cfg.path("catalog");
    const std::string scenes_path = cfg.path("scenes");
    if (catalog_path == scenes_path) throw ConfigError("config: catalog and scenes paths collide");
    save_catalog(catalog, catalog_path);
    save_scenes_jsonl(scenes, scenes_path);

    std::size_t n_boxes = 0;
    std::map<std::string, std::size_t> per_group;
    for (const Scene& s : scenes) {
        n_boxes += s.boxes.size();
        for (const DetectedBox& b : s.boxes) ++per_group[b.group_id];
    }
    std::printf("wrote %s (%zu groups) and %s\n", catalog_path.c_str(), catalog.groups.size(),
                scenes_path.c_str());
    std::printf("scenes: %zu  boxes: %zu\n", scenes.size(), n_boxes);
    for (const auto& [group_id, count] : per_group)
        std::printf("  %s: %zu boxes, %zu variants\n", group_id.c_str(), count,
                    catalog.variant_count(group_id));
    return 0;
}

inline int cmd_train(const RunConfig& cfg, const std::string& method) {
    if (method != "gbdt" && method != "setnet")
        throw ConfigError("unknown method '" + method + "' (expected gbdt or setnet)");
    const Catalog catalog = load_catalog(cfg.path("catalog"));
    const std::vector<Scene> scenes = load_scenes_jsonl(cfg.path("scenes"));
    auto [train_scenes, test_scenes] = pipeline::split_scenes(scenes, cfg.test_frac, cfg.seed);

    const pipeline::TrainResult result =
        pipeline::train_bundle(train_scenes, catalog, method, cfg.pipeline_opts);
    pipeline::save_bundle(result.bundle, cfg.path("bundle"));

    std::printf("trained %s bundle on %zu scenes (%zu held out for eval)\n", method.c_str(),
                train_scenes.size(), test_scenes.size());
    for (const auto& [group_id, count] : result.diagnostics.train_candidates) {
        const auto& history = result.diagnostics.loss_history;
        const auto it = history.find(group_id);
        if (it != history.end() && !it->second.empty())
            std::printf("  %s: %zu candidates, final train loss %.6f\n", group_id.c_str(), count,
                        it->second.back());
        else
            std::printf("  %s: %zu candidates (no model)\n", group_id.c_str(), count);
    }
    for (const std::string& g : result.diagnostics.single_variant_groups)
        std::printf("  %s: single variant, classification is vacuous\n", g.c_str());
    for (const std::string& g : result.diagnostics.skipped_groups)
        std::printf("  %s: skipped, fewer than %d training candidates\n", g.c_str(),
                    cfg.pipeline_opts.min_train_candidates);
    for (const std::string& w : result.diagnostics.warnings)
        std::printf("  warning: %s\n", w.c_str());
    std::printf("bundle written to %s\n", cfg.path("bundle").c_str());
    return 0;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& bundle_path) {
    const pipeline::ModelBundle bundle = pipeline::load_bundle(bundle_path);
    const std::vector<Scene> scenes = load_scenes_jsonl(cfg.path("scenes"));
    auto [train_scenes, test_scenes] = pipeline::split_scenes(scenes, cfg.test_frac, cfg.seed);
    if (bundle.provenance.train_fingerprint !=
        pipeline::detail_pipeline::fingerprint_scenes(train_scenes))
        std::fprintf(stderr,
                     "warning: bundle was not trained on this config's train split; "
                     "the evaluation may leak training scenes\n");

    const pipeline::EvalReport report = pipeline::evaluate(bundle, test_scenes);
    json report_json = pipeline::report_to_json(report, bundle.method);
    report_json["config"] = cfg.raw;
    detail_cli::write_file(cfg.path("report_json"), report_json.dump(2) + "\n");
    detail_cli::write_file(cfg.path("report_csv"), pipeline::report_to_csv(report, bundle.method));

    std::printf("%-10s %8s %10s\n", "group", "n_test", "accuracy");
    for (const pipeline::GroupEval& ev : report.per_group)
        std::printf("%-10s %8zu %10.4f\n", ev.group_id.c_str(), ev.n_test, ev.accuracy);
    std::printf("macro accuracy %.4f, micro accuracy %.4f over %zu candidates\n",
                report.macro_accuracy, report.micro_accuracy, report.n_candidates);
    return 0;
}

inline int cmd_infer(const RunConfig& cfg, const std::string& bundle_path,
                     const std::string& scenes_path) {
    const pipeline::ModelBundle bundle = pipeline::load_bundle(bundle_path);
    const std::vector<Scene> scenes = load_scenes_jsonl(scenes_path);

    std::ofstream out(cfg.path("predictions"));
    if (!out) throw std::runtime_error("cannot open for writing: " + cfg.path("predictions"));
    std::size_t n_boxes = 0;
    for (const Scene& scene : scenes) {
        for (const pipeline::BoxPrediction& pred : pipeline::infer_scene(bundle, scene)) {
            json probs = json::object();
            for (const auto& [cls, p] : pred.probs) probs[cls] = p;
            const json record{{"scene_id", scene.scene_id},
                              {"box_id", pred.box_id},
                              {"group", pred.group_id},
                              {"predicted_class",
                               pred.predicted_class ? json(*pred.predicted_class) : json(nullptr)},
                              {"probs", std::move(probs)}};
            out << record.dump() << "\n";
            ++n_boxes;
        }
    }
    std::printf("wrote %zu predictions for %zu scenes to %s\n", n_boxes, scenes.size(),
                cfg.path("predictions").c_str());
    return 0;
}

// Both methods on the identical split; one method failing is recorded in the
// CSV and does not abort the other.
inline int cmd_compare(const RunConfig& cfg) {
    const Catalog catalog = load_catalog(cfg.path("catalog"));
    const std::vector<Scene> scenes = load_scenes_jsonl(cfg.path("scenes"));
    auto [train_scenes, test_scenes] = pipeline::split_scenes(scenes, cfg.test_frac, cfg.seed);

    struct Outcome {
        bool ok = false;
        pipeline::EvalReport report;
        std::string error;
    };
    std::map<std::string, Outcome> outcomes;
    for (const std::string method : {"gbdt", "setnet"}) {
        Outcome& outcome = outcomes[method];
        try {
            const pipeline::TrainResult trained =
                pipeline::train_bundle(train_scenes, catalog, method, cfg.pipeline_opts);
            outcome.report = pipeline::evaluate(trained.bundle, test_scenes);
            outcome.ok = true;
        } catch (const std::exception& e) {
            outcome.error = e.what();
            std::fprintf(stderr, "method %s failed: %s\n", method.c_str(), e.what());
        }
    }
    if (!outcomes.at("gbdt").ok && !outcomes.at("setnet").ok)
        throw std::runtime_error("both methods failed: gbdt: " + outcomes.at("gbdt").error +
                                 "; setnet: " + outcomes.at("setnet").error);

    struct Row {
        std::size_t n_test = 0;
        std::optional<double> acc_gbdt;
        std::optional<double> acc_setnet;
    };
    std::map<std::string, Row> rows;
    for (const auto& [method, outcome] : outcomes) {
        if (!outcome.ok) continue;
        for (const pipeline::GroupEval& ev : outcome.report.per_group) {
            Row& row = rows[ev.group_id];
            row.n_test = ev.n_test;
            (method == "gbdt" ? row.acc_gbdt : row.acc_setnet) = ev.accuracy;
        }
    }

    std::string csv = "group_id,n_test,acc_gbdt,acc_setnet\n";
    char buf[160];
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string("NA");
        char c[32];
        std::snprintf(c, sizeof(c), "%.6f", *v);
        return std::string(c);
    };
    for (const auto& [group_id, row] : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%zu,%s,%s\n", group_id.c_str(), row.n_test,
                      cell(row.acc_gbdt).c_str(), cell(row.acc_setnet).c_str());
        csv += buf;
    }
    detail_cli::write_file(cfg.path("compare_csv"), csv);

    json summary{{"version", 1}, {"config", cfg.raw}};
    for (const auto& [method, outcome] : outcomes) {
        if (outcome.ok)
            summary[method] = {{"macro_accuracy", outcome.report.macro_accuracy},
                               {"micro_accuracy", outcome.report.micro_accuracy},
                               {"n_candidates", outcome.report.n_candidates}};
        else
            summary[method] = {{"error", outcome.error}};
    }
    detail_cli::write_file(cfg.path("compare_summary"), summary.dump(2) + "\n");

    std::printf("%-10s %8s %10s %10s\n", "group", "n_test", "acc_gbdt", "acc_setnet");
    for (const auto& [group_id, row] : rows)
        std::printf("%-10s %8zu %10s %10s\n", group_id.c_str(), row.n_test,
                    cell(row.acc_gbdt).c_str(), cell(row.acc_setnet).c_str());
    for (const auto& [method, outcome] : outcomes)
        if (outcome.ok)
            std::printf("%s: macro %.4f micro %.4f\n", method.c_str(),
                        outcome.report.macro_accuracy, outcome.report.micro_accuracy);
    return 0;
}

}  // namespace sizevar::cli
