#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sizevar/catalog.hpp"

namespace test_helpers {

inline sizevar::DetectedBox make_box(const std::string& id, double w, double h,
                                     const std::string& group,
                                     std::optional<std::string> cls = std::nullopt) {
    sizevar::DetectedBox box;
    box.box_id = id;
    box.width_px = w;
    box.height_px = h;
    box.group_id = group;
    box.class_id = std::move(cls);
    return box;
}

inline sizevar::Scene make_scene(const std::string& id, std::vector<sizevar::DetectedBox> boxes) {
    return sizevar::Scene{id, std::move(boxes)};
}

// Two groups, two variants each, sizes chosen so every class pair has a
// distinct area ratio.
inline sizevar::Catalog tiny_catalog() {
    sizevar::Catalog catalog;
    catalog.groups.push_back({"G1",
                              {{"G1_a", 40.0, 80.0}, {"G1_b", 52.0, 104.0}}});
    catalog.groups.push_back({"G2",
                              {{"G2_a", 30.0, 30.0}, {"G2_b", 39.0, 39.0}}});
    return catalog;
}

}  // namespace test_helpers
