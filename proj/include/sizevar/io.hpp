#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "sizevar/catalog.hpp"

namespace sizevar {

using json = nlohmann::json;

// File schemas:
//   catalog: {"groups": [{"group_id": str, "variants": [{"class_id": str, "w_mm": f, "h_mm": f}]}]}
//   scenes:  JSON Lines, one scene per line:
//            {"scene_id": str, "boxes": [{"box_id": str, "w": f, "h": f, "group": str, "class": str|null}]}
// nlohmann::json keeps object keys sorted and prints doubles with the
// shortest round-trip representation, so identical data serializes to
// identical bytes.

inline json catalog_to_json(const Catalog& catalog) {
    json groups = json::array();
    for (const GroupSpec& g : catalog.groups) {
        json variants = json::array();
        for (const VariantSpec& v : g.variants)
            variants.push_back({{"class_id", v.class_id}, {"w_mm", v.width_mm}, {"h_mm", v.height_mm}});
        groups.push_back({{"group_id", g.group_id}, {"variants", std::move(variants)}});
    }
    return json{{"groups", std::move(groups)}};
}

inline Catalog catalog_from_json(const json& j) {
    Catalog catalog;
    for (const json& jg : j.at("groups")) {
        GroupSpec g;
        g.group_id = jg.at("group_id").get<std::string>();
        for (const json& jv : jg.at("variants"))
            g.variants.push_back({jv.at("class_id").get<std::string>(),
                                  jv.at("w_mm").get<double>(),
                                  jv.at("h_mm").get<double>()});
        catalog.groups.push_back(std::move(g));
    }
    ValidationReport report = validate_catalog(catalog);
    if (!report.ok())
        throw std::runtime_error("invalid catalog: " + report.violations.front().message);
    return catalog;
}

inline json scene_to_json(const Scene& scene) {
    json boxes = json::array();
    for (const DetectedBox& b : scene.boxes) {
        json jb = {{"box_id", b.box_id}, {"w", b.width_px}, {"h", b.height_px}, {"group", b.group_id}};
        jb["class"] = b.class_id ? json(*b.class_id) : json(nullptr);
        boxes.push_back(std::move(jb));
    }
    return json{{"scene_id", scene.scene_id}, {"boxes", std::move(boxes)}};
}

inline Scene scene_from_json(const json& j) {
    Scene scene;
    scene.scene_id = j.at("scene_id").get<std::string>();
    for (const json& jb : j.at("boxes")) {
        DetectedBox b;
        b.box_id = jb.at("box_id").get<std::string>();
        b.width_px = jb.at("w").get<double>();
        b.height_px = jb.at("h").get<double>();
        b.group_id = jb.at("group").get<std::string>();
        if (jb.contains("class") && !jb.at("class").is_null())
            b.class_id = jb.at("class").get<std::string>();
        scene.boxes.push_back(std::move(b));
    }
    return scene;
}

inline void save_catalog(const Catalog& catalog, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << catalog_to_json(catalog).dump(2) << "\n";
}

inline Catalog load_catalog(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open catalog file: " + path);
    json j;
    in >> j;
    return catalog_from_json(j);
}

inline void save_scenes_jsonl(const std::vector<Scene>& scenes, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const Scene& s : scenes) out << scene_to_json(s).dump() << "\n";
}

inline std::vector<Scene> load_scenes_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open scenes file: " + path);
    std::vector<Scene> scenes;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            scenes.push_back(scene_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            std::ostringstream msg;
            msg << path << ": line " << line_no << ": " << e.what();
            throw std::runtime_error(msg.str());
        }
    }
    return scenes;
}

}  // namespace sizevar
