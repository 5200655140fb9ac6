#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "sizevar/setnet.hpp"
#include "sizevar/synthgen.hpp"
#include "helpers.hpp"

using namespace sizevar;
using namespace sizevar::setnet;
using test_helpers::make_box;
using test_helpers::make_scene;

namespace {

SetFeatureItem make_item(const std::string& gw, double area_ratio, double own_r,
                         std::vector<double> posteriors) {
    return SetFeatureItem{gw, area_ratio, own_r, std::move(posteriors)};
}

std::vector<SetFeatureItem> random_items(SplitMix64& rng, int count, int n_classes,
                                         const std::vector<std::string>& groups) {
    std::vector<SetFeatureItem> items;
    for (int i = 0; i < count; ++i) {
        std::vector<double> post(static_cast<std::size_t>(n_classes));
        double sum = 0.0;
        for (double& p : post) {
            p = rng.uniform(0.01, 1.0);
            sum += p;
        }
        for (double& p : post) p /= sum;
        items.push_back(make_item(groups[static_cast<std::size_t>(rng.uniform_int(
                                      0, static_cast<std::int64_t>(groups.size()) - 1))],
                                  rng.uniform(0.1, 4.0), rng.uniform(0.3, 3.0), std::move(post)));
    }
    return items;
}

}  // namespace

TEST_CASE("assemble_set_features") {
    const Catalog catalog = test_helpers::tiny_catalog();
    synth::SceneConfig scene_cfg;
    scene_cfg.groups_per_scene = {2, 2};
    scene_cfg.boxes_per_group = {2, 3};
    synth::NoiseConfig noise;
    noise.sigma = 0.0;
    const std::vector<Scene> scenes = synth::generate_dataset(catalog, scene_cfg, noise, 150, 41);
    const gmm::GmmFeatureBank bank = gmm::build_feature_bank(scenes, catalog).bank;

    SECTION("single-box scene yields no items") {
        const Scene lone = make_scene("s", {make_box("b0", 40, 80, "G1", "G1_a")});
        CHECK(assemble_set_features(lone, 0, bank).empty());
    }
    SECTION("one item per other box, each a normalized posterior") {
        const Scene scene = make_scene("s", {make_box("b0", 40, 80, "G1", "G1_a"),
                                             make_box("b1", 30, 30, "G2", "G2_a"),
                                             make_box("b2", 39, 39, "G2", "G2_b"),
                                             make_box("b3", 52, 104, "G1", "G1_b")});
        const std::vector<SetFeatureItem> items = assemble_set_features(scene, 0, bank);
        REQUIRE(items.size() == 3);
        for (const SetFeatureItem& item : items) {
            double sum = 0.0;
            for (double p : item.posteriors) sum += p;
            CHECK(std::abs(sum - 1.0) <= 1e-9);
            CHECK(item.own_r == Catch::Approx(0.5).epsilon(1e-12));
        }
        CHECK(items[0].other_group == "G2");
        CHECK(items[2].other_group == "G1");
    }
    SECTION("noiseless posteriors point at the true class") {
        // candidate is the larger G1 variant next to a known-size G2 box
        const Scene scene = make_scene("s", {make_box("b0", 52, 104, "G1", "G1_b"),
                                             make_box("b1", 30, 30, "G2", "G2_a")});
        const std::vector<SetFeatureItem> items = assemble_set_features(scene, 0, bank);
        REQUIRE(items.size() == 1);
        // class order in the bank priors is catalog order: [G1_a, G1_b]
        CHECK(items[0].posteriors[1] >= 0.9);

        // hand Bayes from the fitted bank parameters must reproduce it
        const gmm::Vec2 x{aspect_ratio(scene.boxes[0]),
                          frontal_area(scene.boxes[1]) / frontal_area(scene.boxes[0])};
        const gmm::GroupPriors& priors = bank.priors.at("G1");
        double weighted[2] = {0.0, 0.0};
        for (int c = 0; c < 2; ++c) {
            const auto it = bank.entries.find({"G1", priors.classes[static_cast<std::size_t>(c)], "G2"});
            REQUIRE(it != bank.entries.end());
            weighted[c] = priors.p[static_cast<std::size_t>(c)] * gmm::gmm_pdf(x, it->second);
        }
        const double expected = weighted[1] / (weighted[0] + weighted[1]);
        CHECK(items[0].posteriors[1] == Catch::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("init_setnet") {
    const Catalog catalog = test_helpers::tiny_catalog();
    const SetNetModel a = init_setnet(catalog, "G1", 16, 99);
    const SetNetModel b = init_setnet(catalog, "G1", 16, 99);
    CHECK(model_to_json(a) == model_to_json(b));
    const SetNetModel c = init_setnet(catalog, "G1", 16, 100);
    CHECK(model_to_json(a) != model_to_json(c));

    CHECK(a.input_dim == 4);  // area_ratio + own_r + 2 posteriors
    const double bound_enc = std::sqrt(6.0 / (a.input_dim + a.hidden));
    for (const auto& [name, layer] : a.encoders) {
        for (double w : layer.W) CHECK(std::abs(w) <= bound_enc);
        for (double bias : layer.b) CHECK(bias == 0.0);
    }
    for (double bias : a.output.b) CHECK(bias == 0.0);
    CHECK_THROWS_AS(init_setnet(catalog, "NOPE", 16, 1), std::invalid_argument);
}

TEST_CASE("forward") {
    const Catalog catalog = test_helpers::tiny_catalog();
    SetNetModel model = init_setnet(catalog, "G1", 8, 7);

    SECTION("no items and a zeroed output layer give the uniform distribution") {
        std::fill(model.output.W.begin(), model.output.W.end(), 0.0);
        std::fill(model.output.b.begin(), model.output.b.end(), 0.0);
        const std::vector<double> p = forward(model, {});
        for (double v : p) CHECK(v == 0.5);
    }
    SECTION("output is a probability vector") {
        SplitMix64 rng(1);
        const std::vector<double> p = forward(model, random_items(rng, 5, 2, {"G1", "G2"}));
        double sum = 0.0;
        for (double v : p) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
    SECTION("permuting items leaves the output bit-identical") {
        SplitMix64 rng(2);
        std::vector<SetFeatureItem> items = random_items(rng, 7, 2, {"G1", "G2"});
        const std::vector<double> base = forward(model, items);
        for (int trial = 0; trial < 10; ++trial) {
            for (std::size_t i = items.size(); i > 1; --i)
                std::swap(items[i - 1],
                          items[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
            CHECK(forward(model, items) == base);
        }
    }
    SECTION("duplicating the item list keeps the mean unchanged") {
        SplitMix64 rng(3);
        std::vector<SetFeatureItem> items = random_items(rng, 4, 2, {"G1", "G2"});
        const std::vector<double> base = forward(model, items);
        std::vector<SetFeatureItem> doubled = items;
        doubled.insert(doubled.end(), items.begin(), items.end());
        const std::vector<double> dup = forward(model, doubled);
        for (std::size_t c = 0; c < base.size(); ++c)
            CHECK(dup[c] == Catch::Approx(base[c]).epsilon(1e-12));
    }
    SECTION("unknown group routes to the fallback encoder") {
        SplitMix64 rng(4);
        std::vector<SetFeatureItem> items = random_items(rng, 3, 2, {"ALIEN1"});
        std::vector<SetFeatureItem> renamed = items;
        for (SetFeatureItem& item : renamed) item.other_group = "ALIEN2";
        CHECK(forward(model, items) == forward(model, renamed));
    }
}

TEST_CASE("grad_check stays under 1e-4 on random models") {
    const Catalog catalog = test_helpers::tiny_catalog();
    SplitMix64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const SetNetModel model =
            init_setnet(catalog, trial % 2 ? "G1" : "G2", 4 + trial % 3,
                        derive_seed(500, static_cast<std::uint64_t>(trial)));
        LabeledSetSample sample;
        sample.items = random_items(rng, 1 + trial % 5, 2, {"G1", "G2", "UNSEEN"});
        sample.label = trial % 2;
        CHECK(grad_check(model, sample, 1e-5) < 1e-4);
        // the L2 path needs a coarser step: the weight-decay gradients of
        // untouched parameters are tiny, so a 1e-5 step is cancellation noise
        CHECK(grad_check(model, sample, 1e-4, 1e-4) < 1e-4);
    }
}

TEST_CASE("gradients vanish where inputs are zero") {
    const Catalog catalog = test_helpers::tiny_catalog();
    const SetNetModel model = init_setnet(catalog, "G1", 6, 3);
    LabeledSetSample sample;
    sample.items = {make_item("G2", 0.0, 0.0, {0.0, 0.0})};  // all-zero input vector
    sample.label = 1;

    SetNetGrads grads = SetNetGrads::zeros_like(model);
    accumulate_ce_grads(model, sample, 1.0, grads);
    for (double w : grads.encoders.at("G2").W) CHECK(w == 0.0);
    // bias gradients still flow
    double bias_mag = 0.0;
    for (double b : grads.encoders.at("G2").b) bias_mag += std::abs(b);
    CHECK(bias_mag > 0.0);
}

TEST_CASE("scaling the loss scales every gradient linearly") {
    const Catalog catalog = test_helpers::tiny_catalog();
    const SetNetModel model = init_setnet(catalog, "G1", 5, 9);
    SplitMix64 rng(13);
    LabeledSetSample sample;
    sample.items = random_items(rng, 4, 2, {"G1", "G2"});
    sample.label = 0;

    SetNetGrads g1 = SetNetGrads::zeros_like(model);
    SetNetGrads g2 = SetNetGrads::zeros_like(model);
    accumulate_ce_grads(model, sample, 1.0, g1);
    accumulate_ce_grads(model, sample, 2.0, g2);
    auto check_layer = [](const AffineLayer& a, const AffineLayer& b) {
        for (std::size_t i = 0; i < a.W.size(); ++i)
            CHECK(b.W[i] == Catch::Approx(2.0 * a.W[i]).margin(1e-15));
        for (std::size_t i = 0; i < a.b.size(); ++i)
            CHECK(b.b[i] == Catch::Approx(2.0 * a.b[i]).margin(1e-15));
    };
    check_layer(g1.output, g2.output);
    check_layer(g1.fallback, g2.fallback);
    for (const auto& [name, layer] : g1.encoders) check_layer(layer, g2.encoders.at(name));
}

TEST_CASE("train_setnet") {
    const Catalog catalog = test_helpers::tiny_catalog();

    SECTION("separable posteriors are learned quickly") {
        SplitMix64 rng(17);
        std::vector<LabeledSetSample> samples;
        for (int i = 0; i < 200; ++i) {
            const int label = i % 2;
            LabeledSetSample s;
            s.label = label;
            const int m = 1 + static_cast<int>(rng.uniform_int(0, 2));
            for (int j = 0; j < m; ++j) {
                const double hot = 0.9 + rng.uniform(-0.05, 0.05);
                std::vector<double> post{label == 0 ? hot : 1.0 - hot, label == 0 ? 1.0 - hot : hot};
                s.items.push_back(make_item(j % 2 ? "G1" : "G2", rng.uniform(0.5, 2.0),
                                            rng.uniform(0.4, 0.6), post));
            }
            samples.push_back(std::move(s));
        }
        SetNetModel model = init_setnet(catalog, "G1", 8, 23);
        SetNetHyperparams hp;
        hp.hidden = 8;
        hp.epochs = 200;
        const std::vector<double> history = train_setnet(model, samples, hp);
        REQUIRE(history.size() == 200);
        for (double loss : history) CHECK(std::isfinite(loss));

        int correct = 0;
        for (const LabeledSetSample& s : samples) {
            const std::vector<double> p = forward(model, s.items);
            if ((p[1] > p[0]) == (s.label == 1)) ++correct;
        }
        CHECK(static_cast<double>(correct) / static_cast<double>(samples.size()) >= 0.95);
    }
    SECTION("lr = 0 leaves the weights untouched") {
        std::vector<LabeledSetSample> samples{
            {{make_item("G1", 1.2, 0.5, {0.7, 0.3}), make_item("G2", 0.8, 0.5, {0.4, 0.6})}, 1}};
        SetNetModel model = init_setnet(catalog, "G1", 6, 29);
        const nlohmann::json before = model_to_json(model);
        SetNetHyperparams hp;
        hp.lr = 0.0;
        hp.epochs = 5;
        train_setnet(model, samples, hp);
        CHECK(model_to_json(model) == before);
    }
    SECTION("empty dataset throws") {
        SetNetModel model = init_setnet(catalog, "G1", 6, 31);
        CHECK_THROWS_AS(train_setnet(model, {}, {}), std::invalid_argument);
    }
    SECTION("training drops encoders for groups never seen") {
        SplitMix64 rng(23);
        std::vector<LabeledSetSample> samples;
        for (int i = 0; i < 40; ++i) samples.push_back({random_items(rng, 2, 2, {"G2"}), i % 2});
        SetNetModel model = init_setnet(catalog, "G1", 6, 37);
        REQUIRE(model.encoders.count("G1") == 1);
        SetNetHyperparams hp;
        hp.epochs = 3;
        train_setnet(model, samples, hp);
        CHECK(model.encoders.count("G1") == 0);
        CHECK(model.encoders.count("G2") == 1);
    }
}

TEST_CASE("uninformative features yield chance-level accuracy") {
    const Catalog catalog = test_helpers::tiny_catalog();
    SplitMix64 rng(43);
    std::vector<LabeledSetSample> samples;
    for (int i = 0; i < 400; ++i) {
        LabeledSetSample s;
        s.label = i % 2;  // exactly balanced
        for (int j = 0; j < 3; ++j) s.items.push_back(make_item("G2", 1.0, 1.0, {0.5, 0.5}));
        samples.push_back(std::move(s));
    }
    SetNetModel model = init_setnet(catalog, "G1", 8, 47);
    SetNetHyperparams hp;
    hp.epochs = 50;
    train_setnet(model, samples, hp);
    int correct = 0;
    for (const LabeledSetSample& s : samples) {
        const std::vector<double> p = forward(model, s.items);
        if ((p[1] > p[0]) == (s.label == 1)) ++correct;
    }
    const double accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    CHECK(accuracy >= 0.45);
    CHECK(accuracy <= 0.55);
}

TEST_CASE("model serialization preserves forward outputs exactly") {
    const Catalog catalog = test_helpers::tiny_catalog();
    SplitMix64 rng(53);
    std::vector<LabeledSetSample> samples;
    for (int i = 0; i < 60; ++i) samples.push_back({random_items(rng, 3, 2, {"G1", "G2"}), i % 2});
    SetNetModel model = init_setnet(catalog, "G1", 8, 59);
    SetNetHyperparams hp;
    hp.epochs = 10;
    train_setnet(model, samples, hp);

    const SetNetModel back = model_from_json(model_to_json(model));
    CHECK(model_to_json(back) == model_to_json(model));
    for (int i = 0; i < 20; ++i) {
        const std::vector<SetFeatureItem> items = random_items(rng, 4, 2, {"G1", "G2", "NEW"});
        CHECK(forward(back, items) == forward(model, items));
    }
}
