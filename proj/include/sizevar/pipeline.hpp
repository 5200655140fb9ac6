#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sizevar/catalog.hpp"
#include "sizevar/gbdt.hpp"
#include "sizevar/gmm.hpp"
#include "sizevar/io.hpp"
#include "sizevar/parallel.hpp"
#include "sizevar/rng.hpp"
#include "sizevar/setnet.hpp"

namespace sizevar::pipeline {

struct BundleVersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kBundleVersion = 1;

struct PipelineOptions {
    std::uint64_t seed = 0;
    int min_train_candidates = 20;
    int threads = 0;
    gbdt::BinOptions bin_opts;
    gbdt::GbdtParams gbdt_params;
    gmm::BankOptions bank_opts;
    setnet::SetNetHyperparams setnet_hp;
    std::string config_hash;  // provenance; filled from the run config when present
};

struct Provenance {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string train_fingerprint;
};

struct GbdtGroupArtifact {
    gbdt::BinnedFeatureSpec spec;
    gbdt::GbdtModel model;
};

struct ModelBundle {
    Catalog catalog;
    std::string method;  // "gbdt" | "setnet"
    std::map<std::string, GbdtGroupArtifact> gbdt_groups;
    std::map<std::string, setnet::SetNetModel> setnet_groups;
    std::optional<gmm::GmmFeatureBank> bank;  // setnet only
    Provenance provenance;

    bool has_model_for(const std::string& group_id) const {
        return gbdt_groups.count(group_id) > 0 || setnet_groups.count(group_id) > 0;
    }
};

struct TrainDiagnostics {
    std::map<std::string, std::size_t> train_candidates;
    std::vector<std::string> skipped_groups;         // too few candidates
    std::vector<std::string> single_variant_groups;  // nothing to classify
    std::map<std::string, std::vector<double>> loss_history;
    std::vector<std::string> warnings;
};

struct TrainResult {
    ModelBundle bundle;
    TrainDiagnostics diagnostics;
};

// --- dataset split -----------------------------------------------------------

inline std::pair<std::vector<Scene>, std::vector<Scene>> split_scenes(
    const std::vector<Scene>& scenes, double test_frac, std::uint64_t seed) {
    if (!(test_frac > 0.0) || !(test_frac < 1.0))
        throw std::invalid_argument("split_scenes: test_frac must be in (0, 1)");
    if (scenes.size() < 2) throw std::invalid_argument("split_scenes: need at least 2 scenes");

    std::vector<std::size_t> order(scenes.size());
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    std::size_t n_test = static_cast<std::size_t>(
        std::llround(test_frac * static_cast<double>(scenes.size())));
    n_test = std::clamp<std::size_t>(n_test, 1, scenes.size() - 1);

    std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::sort(test_idx.begin(), test_idx.end());
    std::set<std::size_t> test_set(test_idx.begin(), test_idx.end());

    std::pair<std::vector<Scene>, std::vector<Scene>> result;
    for (std::size_t i = 0; i < scenes.size(); ++i)
        (test_set.count(i) ? result.second : result.first).push_back(scenes[i]);
    return result;
}

// --- training ----------------------------------------------------------------

namespace detail_pipeline {

struct Candidate {
    std::size_t scene_index;
    std::size_t box_index;
    std::string class_id;
};

inline std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string fingerprint_scenes(const std::vector<Scene>& scenes) {
    std::uint64_t h = fnv1a("scenes");
    for (const Scene& s : scenes) {
        h = mix64(h ^ fnv1a(s.scene_id));
        h = mix64(h ^ static_cast<std::uint64_t>(s.boxes.size()));
    }
    return hex64(h);
}

// (aspect ratio, group) of every non-candidate box, aligned with the order of
// CandidateFeatures.context.
inline std::vector<std::pair<double, std::string>> other_boxes_r(const Scene& scene,
                                                                 std::size_t candidate_index) {
    std::vector<std::pair<double, std::string>> rs;
    rs.reserve(scene.boxes.size() - 1);
    for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
        if (i == candidate_index) continue;
        rs.emplace_back(aspect_ratio(scene.boxes[i]), scene.boxes[i].group_id);
    }
    return rs;
}

}  // namespace detail_pipeline

inline TrainResult train_bundle(const std::vector<Scene>& train_scenes, const Catalog& catalog,
                                const std::string& method, const PipelineOptions& opts) {
    if (method != "gbdt" && method != "setnet")
        throw std::invalid_argument("train_bundle: unknown method '" + method + "'");
    for (const Scene& scene : train_scenes) {
        const ValidationReport report = validate_scene(scene, catalog);
        if (!report.ok())
            throw std::runtime_error("invalid training scene " + scene.scene_id + ": " +
                                     report.violations.front().message);
    }

    TrainResult result;
    ModelBundle& bundle = result.bundle;
    bundle.catalog = catalog;
    bundle.method = method;
    bundle.provenance.seed = opts.seed;
    bundle.provenance.config_hash = opts.config_hash.empty()
                                        ? detail_pipeline::hex64(fnv1a("pipeline:" + method))
                                        : opts.config_hash;
    bundle.provenance.train_fingerprint = detail_pipeline::fingerprint_scenes(train_scenes);

    std::map<std::string, std::vector<detail_pipeline::Candidate>> candidates;
    for (std::size_t s = 0; s < train_scenes.size(); ++s) {
        const Scene& scene = train_scenes[s];
        for (std::size_t b = 0; b < scene.boxes.size(); ++b)
            if (scene.boxes[b].class_id)
                candidates[scene.boxes[b].group_id].push_back({s, b, *scene.boxes[b].class_id});
    }

    std::vector<std::string> trainable;
    for (const GroupSpec& group : catalog.groups) {
        const auto it = candidates.find(group.group_id);
        const std::size_t count = it == candidates.end() ? 0 : it->second.size();
        result.diagnostics.train_candidates[group.group_id] = count;
        if (group.variant_count() == 1) {
            result.diagnostics.single_variant_groups.push_back(group.group_id);
            continue;
        }
        if (count < static_cast<std::size_t>(opts.min_train_candidates)) {
            result.diagnostics.skipped_groups.push_back(group.group_id);
            continue;
        }
        trainable.push_back(group.group_id);
    }
    if (trainable.empty()) throw std::runtime_error("train_bundle: no trainable group");

    if (method == "setnet") {
        gmm::BankOptions bank_opts = opts.bank_opts;
        bank_opts.seed = derive_seed(opts.seed, fnv1a("bank"));
        bank_opts.threads = opts.threads;
        gmm::BankBuildResult bank_result = build_feature_bank(train_scenes, catalog, bank_opts);
        for (std::string& w : bank_result.diagnostics.warnings)
            result.diagnostics.warnings.push_back(std::move(w));
        bundle.bank = std::move(bank_result.bank);
    }

    struct GroupOutcome {
        std::optional<GbdtGroupArtifact> gbdt;
        std::optional<setnet::SetNetModel> setnet;
        std::vector<double> loss_history;
    };
    std::vector<GroupOutcome> outcomes(trainable.size());

    detail::parallel_for(trainable.size(), opts.threads, [&](std::size_t t) {
        const std::string& group_id = trainable[t];
        const std::vector<detail_pipeline::Candidate>& group_candidates = candidates.at(group_id);
        GroupOutcome& outcome = outcomes[t];

        if (method == "gbdt") {
            GbdtGroupArtifact artifact;
            artifact.spec = gbdt::fit_bins(train_scenes, catalog, group_id, opts.bin_opts);
            std::vector<std::vector<double>> X;
            std::vector<std::string> y;
            X.reserve(group_candidates.size());
            y.reserve(group_candidates.size());
            for (const auto& c : group_candidates) {
                const Scene& scene = train_scenes[c.scene_index];
                X.push_back(gbdt::encode(extract_candidate_features(scene, c.box_index),
                                         artifact.spec,
                                         detail_pipeline::other_boxes_r(scene, c.box_index)));
                y.push_back(c.class_id);
            }
            gbdt::GbdtParams params = opts.gbdt_params;
            params.seed = derive_seed(opts.seed, fnv1a("gbdt/" + group_id));
            gbdt::GbdtTrainResult trained = gbdt::train_gbdt(X, y, params, group_id);
            artifact.model = std::move(trained.model);
            outcome.loss_history = std::move(trained.loss_history);
            outcome.gbdt = std::move(artifact);
        } else {
            setnet::SetNetModel model = setnet::init_setnet(
                catalog, group_id, opts.setnet_hp.hidden, derive_seed(opts.seed, fnv1a("setnet/" + group_id)));
            std::map<std::string, int> class_index;
            for (std::size_t c = 0; c < model.class_order.size(); ++c)
                class_index[model.class_order[c]] = static_cast<int>(c);

            std::vector<setnet::LabeledSetSample> samples;
            samples.reserve(group_candidates.size());
            for (const auto& c : group_candidates) {
                const Scene& scene = train_scenes[c.scene_index];
                samples.push_back({setnet::assemble_set_features(scene, c.box_index, *bundle.bank),
                                   class_index.at(c.class_id)});
            }
            setnet::SetNetHyperparams hp = opts.setnet_hp;
            hp.seed = derive_seed(opts.seed, fnv1a("setnet-train/" + group_id));
            outcome.loss_history = setnet::train_setnet(model, samples, hp);
            outcome.setnet = std::move(model);
        }
    });

    for (std::size_t t = 0; t < trainable.size(); ++t) {
        result.diagnostics.loss_history[trainable[t]] = std::move(outcomes[t].loss_history);
        if (outcomes[t].gbdt)
            bundle.gbdt_groups.emplace(trainable[t], std::move(*outcomes[t].gbdt));
        if (outcomes[t].setnet)
            bundle.setnet_groups.emplace(trainable[t], std::move(*outcomes[t].setnet));
    }
    return result;
}

// --- inference ---------------------------------------------------------------

struct BoxPrediction {
    std::string box_id;
    std::string group_id;
    std::optional<std::string> predicted_class;  // empty: no model for the group
    std::vector<std::pair<std::string, double>> probs;
};

inline std::vector<BoxPrediction> infer_scene(const ModelBundle& bundle, const Scene& scene) {
    const ValidationReport report = validate_scene(scene, bundle.catalog);
    if (!report.ok())
        throw std::runtime_error("invalid scene " + scene.scene_id + ": " +
                                 report.violations.front().message);

    std::vector<BoxPrediction> predictions;
    predictions.reserve(scene.boxes.size());
    for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
        const DetectedBox& box = scene.boxes[i];
        BoxPrediction pred;
        pred.box_id = box.box_id;
        pred.group_id = box.group_id;

        const GroupSpec& group = bundle.catalog.group_or_throw(box.group_id);
        if (group.variant_count() == 1) {
            pred.predicted_class = group.variants.front().class_id;
            pred.probs = {{group.variants.front().class_id, 1.0}};
            predictions.push_back(std::move(pred));
            continue;
        }

        if (bundle.method == "gbdt" && bundle.gbdt_groups.count(box.group_id)) {
            const GbdtGroupArtifact& artifact = bundle.gbdt_groups.at(box.group_id);
            const std::vector<double> x =
                gbdt::encode(extract_candidate_features(scene, i), artifact.spec,
                             detail_pipeline::other_boxes_r(scene, i));
            const std::vector<double> probs = gbdt::predict_gbdt(artifact.model, x);
            std::size_t best = 0;
            for (std::size_t c = 0; c < probs.size(); ++c) {
                pred.probs.emplace_back(artifact.model.class_order[c], probs[c]);
                if (probs[c] > probs[best]) best = c;
            }
            pred.predicted_class = artifact.model.class_order[best];
        } else if (bundle.method == "setnet" && bundle.setnet_groups.count(box.group_id)) {
            const setnet::SetNetModel& model = bundle.setnet_groups.at(box.group_id);
            const std::vector<double> probs =
                setnet::forward(model, setnet::assemble_set_features(scene, i, *bundle.bank));
            std::size_t best = 0;
            for (std::size_t c = 0; c < probs.size(); ++c) {
                pred.probs.emplace_back(model.class_order[c], probs[c]);
                if (probs[c] > probs[best]) best = c;
            }
            pred.predicted_class = model.class_order[best];
        }
        // otherwise: no model for this group; predicted_class stays empty
        predictions.push_back(std::move(pred));
    }
    return predictions;
}

// --- evaluation --------------------------------------------------------------

struct GroupEval {
    std::string group_id;
    std::size_t n_test = 0;
    double accuracy = 0.0;
    std::vector<std::string> class_order;                // catalog order
    std::vector<std::vector<std::size_t>> confusion;     // [true][predicted]
};

struct EvalReport {
    std::vector<GroupEval> per_group;  // sorted by group_id
    double macro_accuracy = 0.0;
    double micro_accuracy = 0.0;
    std::size_t n_candidates = 0;
};

// Accuracy over labeled candidates whose group has a trained model;
// single-variant and skipped groups are context only.
inline EvalReport evaluate(const ModelBundle& bundle, const std::vector<Scene>& test_scenes) {
    std::map<std::string, GroupEval> evals;
    for (const GroupSpec& group : bundle.catalog.groups) {
        if (!bundle.has_model_for(group.group_id)) continue;
        GroupEval ev;
        ev.group_id = group.group_id;
        ev.class_order = bundle.catalog.class_ids_of(group.group_id);
        ev.confusion.assign(ev.class_order.size(),
                            std::vector<std::size_t>(ev.class_order.size(), 0));
        evals.emplace(group.group_id, std::move(ev));
    }

    for (const Scene& scene : test_scenes) {
        const std::vector<BoxPrediction> predictions = infer_scene(bundle, scene);
        for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
            const DetectedBox& box = scene.boxes[i];
            if (!box.class_id) continue;
            const auto ev_it = evals.find(box.group_id);
            if (ev_it == evals.end() || !predictions[i].predicted_class) continue;
            GroupEval& ev = ev_it->second;
            const auto index_of = [&](const std::string& cls) {
                return static_cast<std::size_t>(
                    std::find(ev.class_order.begin(), ev.class_order.end(), cls) -
                    ev.class_order.begin());
            };
            const std::size_t true_idx = index_of(*box.class_id);
            const std::size_t pred_idx = index_of(*predictions[i].predicted_class);
            ++ev.confusion[true_idx][pred_idx];
            ++ev.n_test;
        }
    }

    EvalReport report;
    std::size_t total_correct = 0;
    double macro_sum = 0.0;
    std::size_t macro_groups = 0;
    for (auto& [group_id, ev] : evals) {
        if (ev.n_test == 0) continue;
        std::size_t correct = 0;
        for (std::size_t c = 0; c < ev.class_order.size(); ++c) correct += ev.confusion[c][c];
        ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.n_test);
        total_correct += correct;
        report.n_candidates += ev.n_test;
        macro_sum += ev.accuracy;
        ++macro_groups;
        report.per_group.push_back(std::move(ev));
    }
    if (report.n_candidates == 0) throw std::runtime_error("evaluate: zero evaluable candidates");
    report.macro_accuracy = macro_sum / static_cast<double>(macro_groups);
    report.micro_accuracy =
        static_cast<double>(total_correct) / static_cast<double>(report.n_candidates);
    return report;
}

inline nlohmann::json report_to_json(const EvalReport& report, const std::string& method) {
    nlohmann::json groups = nlohmann::json::array();
    for (const GroupEval& ev : report.per_group)
        groups.push_back({{"group_id", ev.group_id},
                          {"n_test", ev.n_test},
                          {"accuracy", ev.accuracy},
                          {"classes", ev.class_order},
                          {"confusion", ev.confusion}});
    return nlohmann::json{{"version", 1},
                          {"method", method},
                          {"per_group", std::move(groups)},
                          {"macro_accuracy", report.macro_accuracy},
                          {"micro_accuracy", report.micro_accuracy},
                          {"n_candidates", report.n_candidates}};
}

inline std::string report_to_csv(const EvalReport& report, const std::string& method) {
    std::string csv = "group_id,n_test,accuracy_" + method + "\n";
    char line[128];
    for (const GroupEval& ev : report.per_group) {
        std::snprintf(line, sizeof(line), "%s,%zu,%.6f\n", ev.group_id.c_str(), ev.n_test,
                      ev.accuracy);
        csv += line;
    }
    return csv;
}

// --- bundle persistence ------------------------------------------------------

inline nlohmann::json bundle_to_json(const ModelBundle& bundle) {
    nlohmann::json j{{"version", kBundleVersion},
                     {"method", bundle.method},
                     {"catalog", catalog_to_json(bundle.catalog)},
                     {"provenance",
                      {{"config_hash", bundle.provenance.config_hash},
                       {"seed", bundle.provenance.seed},
                       {"train_fingerprint", bundle.provenance.train_fingerprint}}}};
    if (bundle.method == "gbdt") {
        nlohmann::json groups = nlohmann::json::object();
        for (const auto& [group_id, artifact] : bundle.gbdt_groups)
            groups[group_id] = {{"spec", gbdt::spec_to_json(artifact.spec)},
                                {"model", gbdt::model_to_json(artifact.model)}};
        j["gbdt_groups"] = std::move(groups);
    } else {
        nlohmann::json groups = nlohmann::json::object();
        for (const auto& [group_id, model] : bundle.setnet_groups)
            groups[group_id] = setnet::model_to_json(model);
        j["setnet_groups"] = std::move(groups);
        j["bank"] = gmm::bank_to_json(*bundle.bank);
    }
    return j;
}

inline ModelBundle bundle_from_json(const nlohmann::json& j) {
    if (!j.contains("version") || !j.at("version").is_number_integer() ||
        j.at("version").get<int>() != kBundleVersion)
        throw BundleVersionError("unsupported bundle version (expected " +
                                 std::to_string(kBundleVersion) + ")");
    ModelBundle bundle;
    bundle.method = j.at("method").get<std::string>();
    bundle.catalog = catalog_from_json(j.at("catalog"));
    const nlohmann::json& prov = j.at("provenance");
    bundle.provenance.config_hash = prov.at("config_hash").get<std::string>();
    bundle.provenance.seed = prov.at("seed").get<std::uint64_t>();
    bundle.provenance.train_fingerprint = prov.at("train_fingerprint").get<std::string>();
    if (bundle.method == "gbdt") {
        for (const auto& [group_id, jg] : j.at("gbdt_groups").items())
            bundle.gbdt_groups.emplace(
                group_id, GbdtGroupArtifact{gbdt::spec_from_json(jg.at("spec")),
                                            gbdt::model_from_json(jg.at("model"))});
    } else if (bundle.method == "setnet") {
        for (const auto& [group_id, jm] : j.at("setnet_groups").items())
            bundle.setnet_groups.emplace(group_id, setnet::model_from_json(jm));
        bundle.bank = gmm::bank_from_json(j.at("bank"));
    } else {
        throw std::runtime_error("bundle has unknown method: " + bundle.method);
    }
    return bundle;
}

inline void save_bundle(const ModelBundle& bundle, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << bundle_to_json(bundle).dump() << "\n";
}

inline ModelBundle load_bundle(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open bundle file: " + path);
    nlohmann::json j;
    in >> j;  // malformed JSON surfaces as nlohmann's parse_error
    return bundle_from_json(j);
}

}  // namespace sizevar::pipeline
