#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>

#include "sizevar/pipeline.hpp"
#include "sizevar/synthgen.hpp"
#include "helpers.hpp"

using namespace sizevar;
using namespace sizevar::pipeline;
using test_helpers::make_box;
using test_helpers::make_scene;

namespace {

// tiny_catalog plus a single-variant anchor (GA), a group that never shows up
// in training (G3), and another single-variant group (G4). The anchor matters
// for the noiseless tests: without a fixed-size reference, a scene whose
// boxes are all the small variant is indistinguishable from one where they
// are all the large variant, so exact accuracy would be unreachable even for
// a perfect model.
Catalog anchored_catalog() {
    Catalog catalog = test_helpers::tiny_catalog();
    catalog.groups.push_back({"GA", {{"GA_a", 25.0, 25.0}}});
    return catalog;
}

Catalog extended_catalog() {
    Catalog catalog = anchored_catalog();
    catalog.groups.push_back({"G3", {{"G3_a", 18.0, 18.0}, {"G3_b", 23.4, 23.4}}});
    catalog.groups.push_back({"G4", {{"G4_a", 60.0, 15.0}}});
    return catalog;
}

std::vector<Scene> noiseless_dataset(std::size_t n, std::uint64_t seed) {
    synth::SceneConfig scene_cfg;
    scene_cfg.groups_per_scene = {3, 3};  // all of G1, G2, GA in every scene
    scene_cfg.boxes_per_group = {2, 3};
    synth::NoiseConfig noise;
    noise.sigma = 0.0;
    noise.outlier_prob = 0.0;
    return synth::generate_dataset(anchored_catalog(), scene_cfg, noise, n, seed);
}

PipelineOptions fast_options() {
    PipelineOptions opts;
    opts.seed = 5;
    opts.gbdt_params.n_rounds = 40;
    opts.setnet_hp.epochs = 40;
    opts.bank_opts.em.n_restarts = 2;
    opts.bank_opts.em.max_iters = 80;
    opts.threads = 2;
    return opts;
}

}  // namespace

TEST_CASE("split_scenes") {
    const std::vector<Scene> scenes = noiseless_dataset(100, 1);
    const auto [train, test] = split_scenes(scenes, 0.2, 42);
    CHECK(train.size() == 80);
    CHECK(test.size() == 20);

    const auto [train2, test2] = split_scenes(scenes, 0.2, 42);
    CHECK(train2.size() == train.size());
    for (std::size_t i = 0; i < train.size(); ++i)
        CHECK(train2[i].scene_id == train[i].scene_id);

    std::set<std::string> train_ids, test_ids;
    for (const Scene& s : train) train_ids.insert(s.scene_id);
    for (const Scene& s : test) test_ids.insert(s.scene_id);
    for (const std::string& id : test_ids) CHECK(train_ids.count(id) == 0);

    CHECK_THROWS_AS(split_scenes(scenes, 0.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_scenes(scenes, 1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_scenes({scenes[0]}, 0.5, 1), std::invalid_argument);
}

TEST_CASE("train_bundle structure for both methods") {
    const Catalog catalog = anchored_catalog();
    const std::vector<Scene> scenes = noiseless_dataset(120, 2);
    const PipelineOptions opts = fast_options();

    SECTION("gbdt bundle has one model per group") {
        const TrainResult result = train_bundle(scenes, catalog, "gbdt", opts);
        CHECK(result.bundle.method == "gbdt");
        CHECK(result.bundle.gbdt_groups.size() == 2);
        CHECK(!result.bundle.bank.has_value());
        CHECK(!result.bundle.provenance.config_hash.empty());
        CHECK(!result.bundle.provenance.train_fingerprint.empty());
    }
    SECTION("setnet bundle carries the feature bank") {
        const TrainResult result = train_bundle(scenes, catalog, "setnet", opts);
        CHECK(result.bundle.setnet_groups.size() == 2);
        CHECK(result.bundle.bank.has_value());
    }
    SECTION("unknown method is rejected") {
        CHECK_THROWS_AS(train_bundle(scenes, catalog, "svm", opts), std::invalid_argument);
    }
    SECTION("identical inputs and seed give byte-identical bundles") {
        for (const std::string method : {"gbdt", "setnet"}) {
            const TrainResult a = train_bundle(scenes, catalog, method, opts);
            const TrainResult b = train_bundle(scenes, catalog, method, opts);
            CHECK(bundle_to_json(a.bundle).dump() == bundle_to_json(b.bundle).dump());
        }
    }
}

TEST_CASE("train_bundle skips and reports groups without enough data") {
    const Catalog catalog = extended_catalog();
    const std::vector<Scene> scenes = noiseless_dataset(120, 3);  // only G1, G2 appear
    const PipelineOptions opts = fast_options();

    const TrainResult result = train_bundle(scenes, catalog, "gbdt", opts);
    CHECK(result.bundle.gbdt_groups.count("G1") == 1);
    CHECK(result.bundle.gbdt_groups.count("G2") == 1);
    CHECK(result.bundle.gbdt_groups.count("G3") == 0);
    CHECK(std::count(result.diagnostics.skipped_groups.begin(),
                     result.diagnostics.skipped_groups.end(), "G3") == 1);
    CHECK(std::count(result.diagnostics.single_variant_groups.begin(),
                     result.diagnostics.single_variant_groups.end(), "G4") == 1);

    SECTION("no trainable group at all") {
        Catalog only_g4;
        only_g4.groups.push_back(catalog.groups[3]);
        std::vector<Scene> g4_scenes;
        for (int i = 0; i < 30; ++i)
            g4_scenes.push_back(make_scene("g4s" + std::to_string(i),
                                           {make_box("b0", 60, 15, "G4", "G4_a"),
                                            make_box("b1", 61, 15, "G4", "G4_a")}));
        CHECK_THROWS_AS(train_bundle(g4_scenes, only_g4, "gbdt", opts), std::runtime_error);
    }
}

TEST_CASE("infer_scene") {
    const Catalog catalog = extended_catalog();
    const std::vector<Scene> scenes = noiseless_dataset(120, 4);
    const PipelineOptions opts = fast_options();
    const TrainResult result = train_bundle(scenes, catalog, "gbdt", opts);

    SECTION("single-variant boxes get their class with probability one") {
        const Scene scene = make_scene("s", {make_box("b0", 60, 15, "G4", std::nullopt),
                                             make_box("b1", 40, 80, "G1", std::nullopt)});
        const std::vector<BoxPrediction> preds = infer_scene(result.bundle, scene);
        REQUIRE(preds.size() == 2);
        CHECK(preds[0].predicted_class == "G4_a");
        REQUIRE(preds[0].probs.size() == 1);
        CHECK(preds[0].probs[0].second == 1.0);
    }
    SECTION("groups without a model get a marker, not a guess") {
        const Scene scene = make_scene("s", {make_box("b0", 18, 18, "G3", std::nullopt),
                                             make_box("b1", 40, 80, "G1", std::nullopt)});
        const std::vector<BoxPrediction> preds = infer_scene(result.bundle, scene);
        CHECK(!preds[0].predicted_class.has_value());
        CHECK(preds[0].probs.empty());
        CHECK(preds[1].predicted_class.has_value());
    }
    SECTION("invalid scenes are rejected") {
        const Scene scene = make_scene("s", {make_box("b0", 1, 1, "NOPE", std::nullopt)});
        CHECK_THROWS_AS(infer_scene(result.bundle, scene), std::runtime_error);
    }
    SECTION("noiseless predictions are correct") {
        const std::vector<Scene> fresh = noiseless_dataset(20, 999);
        std::size_t checked = 0;
        for (const Scene& scene : fresh) {
            const std::vector<BoxPrediction> preds = infer_scene(result.bundle, scene);
            for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
                REQUIRE(preds[i].predicted_class.has_value());
                CHECK(*preds[i].predicted_class == *scene.boxes[i].class_id);
                ++checked;
            }
        }
        CHECK(checked > 50);
    }
}

TEST_CASE("evaluate") {
    const Catalog catalog = anchored_catalog();
    const std::vector<Scene> scenes = noiseless_dataset(150, 6);
    const auto [train, test] = split_scenes(scenes, 0.2, 6);
    const PipelineOptions opts = fast_options();
    const TrainResult result = train_bundle(train, catalog, "gbdt", opts);

    const EvalReport report = evaluate(result.bundle, test);
    REQUIRE(report.per_group.size() == 2);
    std::size_t total = 0;
    for (const GroupEval& ev : report.per_group) {
        // row sums equal the per-class test counts
        std::map<std::string, std::size_t> class_counts;
        for (const Scene& s : test)
            for (const DetectedBox& b : s.boxes)
                if (b.group_id == ev.group_id && b.class_id) ++class_counts[*b.class_id];
        for (std::size_t c = 0; c < ev.class_order.size(); ++c) {
            std::size_t row_sum = 0;
            for (std::size_t k = 0; k < ev.class_order.size(); ++k) row_sum += ev.confusion[c][k];
            CHECK(row_sum == class_counts[ev.class_order[c]]);
        }
        total += ev.n_test;
        // noiseless: everything correct, confusion diagonal
        CHECK(ev.accuracy == 1.0);
        for (std::size_t c = 0; c < ev.class_order.size(); ++c)
            for (std::size_t k = 0; k < ev.class_order.size(); ++k)
                if (c != k) CHECK(ev.confusion[c][k] == 0);
    }
    CHECK(report.n_candidates == total);
    CHECK(report.macro_accuracy == 1.0);
    CHECK(report.micro_accuracy == 1.0);

    SECTION("zero evaluable candidates is an error") {
        std::vector<Scene> unlabeled = test;
        for (Scene& s : unlabeled)
            for (DetectedBox& b : s.boxes) b.class_id.reset();
        CHECK_THROWS_AS(evaluate(result.bundle, unlabeled), std::runtime_error);
    }
}

TEST_CASE("bundle persistence round-trips predictions") {
    const Catalog catalog = anchored_catalog();
    const std::vector<Scene> scenes = noiseless_dataset(120, 7);
    const PipelineOptions opts = fast_options();
    const std::vector<Scene> fresh = noiseless_dataset(50, 1234);

    for (const std::string method : {"gbdt", "setnet"}) {
        const TrainResult result = train_bundle(scenes, catalog, method, opts);
        const std::string path = "pipeline_test_bundle_" + method + ".json";
        save_bundle(result.bundle, path);
        const ModelBundle loaded = load_bundle(path);

        for (const Scene& scene : fresh) {
            const auto a = infer_scene(result.bundle, scene);
            const auto b = infer_scene(loaded, scene);
            REQUIRE(a.size() == b.size());
            for (std::size_t i = 0; i < a.size(); ++i) {
                CHECK(a[i].predicted_class == b[i].predicted_class);
                REQUIRE(a[i].probs.size() == b[i].probs.size());
                for (std::size_t c = 0; c < a[i].probs.size(); ++c) {
                    CHECK(a[i].probs[c].first == b[i].probs[c].first);
                    CHECK(a[i].probs[c].second == b[i].probs[c].second);
                }
            }
        }
        std::remove(path.c_str());
    }
}

TEST_CASE("bundle loader rejects corrupt and mismatched files") {
    SECTION("corrupted file raises a parse error") {
        const std::string path = "pipeline_test_corrupt.json";
        {
            std::ofstream out(path);
            out << "{\"version\": 1, \"method\": \"gb";
        }
        CHECK_THROWS_AS(load_bundle(path), nlohmann::json::exception);
        std::remove(path.c_str());
    }
    SECTION("wrong version raises a version error") {
        const std::string path = "pipeline_test_version.json";
        {
            std::ofstream out(path);
            out << "{\"version\": 99, \"method\": \"gbdt\"}";
        }
        CHECK_THROWS_AS(load_bundle(path), BundleVersionError);
        std::remove(path.c_str());
    }
}

TEST_CASE("predictions are invariant under uniform pixel rescaling") {
    const Catalog catalog = anchored_catalog();
    const std::vector<Scene> scenes = noiseless_dataset(120, 8);
    const PipelineOptions opts = fast_options();
    const std::vector<Scene> fresh = noiseless_dataset(10, 5678);

    for (const std::string method : {"gbdt", "setnet"}) {
        const TrainResult result = train_bundle(scenes, catalog, method, opts);
        for (const Scene& scene : fresh) {
            Scene scaled = scene;
            for (DetectedBox& b : scaled.boxes) {
                b.width_px *= 4.0;
                b.height_px *= 4.0;
            }
            const auto a = infer_scene(result.bundle, scene);
            const auto b = infer_scene(result.bundle, scaled);
            for (std::size_t i = 0; i < a.size(); ++i) {
                CHECK(a[i].predicted_class == b[i].predicted_class);
                for (std::size_t c = 0; c < a[i].probs.size(); ++c)
                    CHECK(a[i].probs[c].second == b[i].probs[c].second);
            }
        }
    }
}

TEST_CASE("evaluation reports are deterministic end to end") {
    const Catalog catalog = test_helpers::tiny_catalog();
    synth::SceneConfig scene_cfg;
    scene_cfg.groups_per_scene = {2, 2};
    scene_cfg.boxes_per_group = {2, 3};
    synth::NoiseConfig noise;
    noise.sigma = 0.05;
    const std::vector<Scene> scenes =
        synth::generate_dataset(catalog, scene_cfg, noise, 150, 9);
    const PipelineOptions opts = fast_options();

    auto run = [&](const std::string& method) {
        const auto [train, test] = split_scenes(scenes, 0.2, opts.seed);
        const TrainResult result = train_bundle(train, catalog, method, opts);
        return report_to_json(evaluate(result.bundle, test), method).dump();
    };
    CHECK(run("gbdt") == run("gbdt"));
    CHECK(run("setnet") == run("setnet"));
}
