#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace sizevar {

// Domain model: a shelf image yields detected boxes; each box carries the
// brand ("group") assigned upstream and, in labeled data, the size variant
// ("class") it truly is. Only widths and heights matter here; pixel positions
// never enter any feature.

// One size variant of a group, with its true physical dimensions.
struct VariantSpec {
    std::string class_id;
    double width_mm = 0.0;
    double height_mm = 0.0;
};

// A brand: visually identical size variants, ordered smallest first by
// convention of the generator (not relied upon anywhere).
struct GroupSpec {
    std::string group_id;
    std::vector<VariantSpec> variants;

    std::size_t variant_count() const { return variants.size(); }

    const VariantSpec* find_variant(const std::string& class_id) const {
        for (const auto& v : variants)
            if (v.class_id == class_id) return &v;
        return nullptr;
    }
};

struct Catalog {
    std::vector<GroupSpec> groups;

    const GroupSpec* find_group(const std::string& group_id) const {
        for (const auto& g : groups)
            if (g.group_id == group_id) return &g;
        return nullptr;
    }

    const GroupSpec& group_or_throw(const std::string& group_id) const {
        const GroupSpec* g = find_group(group_id);
        if (!g) throw std::invalid_argument("unknown group: " + group_id);
        return *g;
    }

    // u in the sense of "maximum mixture components when this group is the
    // context group".
    std::size_t variant_count(const std::string& group_id) const {
        return group_or_throw(group_id).variants.size();
    }

    std::vector<std::string> group_ids() const {
        std::vector<std::string> ids;
        ids.reserve(groups.size());
        for (const auto& g : groups) ids.push_back(g.group_id);
        return ids;
    }

    std::vector<std::string> class_ids_of(const std::string& group_id) const {
        const GroupSpec& g = group_or_throw(group_id);
        std::vector<std::string> ids;
        ids.reserve(g.variants.size());
        for (const auto& v : g.variants) ids.push_back(v.class_id);
        return ids;
    }
};

// One detected product box. class_id is present only in labeled data.
struct DetectedBox {
    std::string box_id;
    double width_px = 0.0;
    double height_px = 0.0;
    std::string group_id;
    std::optional<std::string> class_id;
};

// All boxes from one shelf image. Boxes share one latent camera scale, which
// is why only ratios between them carry information.
struct Scene {
    std::string scene_id;
    std::vector<DetectedBox> boxes;
};

struct ContextEntry {
    double area_ratio = 0.0;  // area(other) / area(candidate)
    std::string other_group;
};

// Scale-invariant view of one candidate box: its own aspect ratio plus the
// area ratio against every other box in the scene, in scene order.
struct CandidateFeatures {
    double r = 0.0;
    std::vector<ContextEntry> context;
};

inline double aspect_ratio(const DetectedBox& box) {
    if (!(box.width_px > 0.0) || !(box.height_px > 0.0))
        throw std::invalid_argument("invalid box " + box.box_id + ": non-positive dimension");
    return box.width_px / box.height_px;
}

inline double frontal_area(const DetectedBox& box) {
    if (!(box.width_px > 0.0) || !(box.height_px > 0.0))
        throw std::invalid_argument("invalid box " + box.box_id + ": non-positive dimension");
    return box.width_px * box.height_px;
}

inline CandidateFeatures extract_candidate_features(const Scene& scene, std::size_t candidate_index) {
    if (candidate_index >= scene.boxes.size())
        throw std::out_of_range("candidate_index out of range in scene " + scene.scene_id);
    const DetectedBox& candidate = scene.boxes[candidate_index];
    CandidateFeatures features;
    features.r = aspect_ratio(candidate);
    const double candidate_area = frontal_area(candidate);
    features.context.reserve(scene.boxes.size() - 1);
    for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
        if (i == candidate_index) continue;
        const DetectedBox& other = scene.boxes[i];
        features.context.push_back({frontal_area(other) / candidate_area, other.group_id});
    }
    return features;
}

// --- scene validation -------------------------------------------------------

enum class ViolationKind {
    UnknownGroup,
    ClassNotInGroup,
    NonPositiveDimension,
    DuplicateBoxId,
};

inline const char* violation_kind_name(ViolationKind k) {
    switch (k) {
        case ViolationKind::UnknownGroup: return "unknown group";
        case ViolationKind::ClassNotInGroup: return "class not in group";
        case ViolationKind::NonPositiveDimension: return "non-positive dimension";
        case ViolationKind::DuplicateBoxId: return "duplicate box_id";
    }
    return "unknown";
}

struct Violation {
    ViolationKind kind;
    std::string box_id;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

inline ValidationReport validate_scene(const Scene& scene, const Catalog& catalog) {
    ValidationReport report;
    std::set<std::string> seen_ids;
    for (const DetectedBox& box : scene.boxes) {
        if (!seen_ids.insert(box.box_id).second)
            report.violations.push_back({ViolationKind::DuplicateBoxId, box.box_id,
                                         "box_id repeated within scene " + scene.scene_id});
        if (!(box.width_px > 0.0) || !(box.height_px > 0.0))
            report.violations.push_back({ViolationKind::NonPositiveDimension, box.box_id,
                                         "box dimensions must be positive"});
        const GroupSpec* group = catalog.find_group(box.group_id);
        if (!group) {
            report.violations.push_back({ViolationKind::UnknownGroup, box.box_id,
                                         "group " + box.group_id + " not in catalog"});
            continue;
        }
        if (box.class_id && !group->find_variant(*box.class_id))
            report.violations.push_back({ViolationKind::ClassNotInGroup, box.box_id,
                                         "class " + *box.class_id + " not a variant of " + box.group_id});
    }
    return report;
}

inline ValidationReport validate_catalog(const Catalog& catalog) {
    ValidationReport report;
    std::set<std::string> group_ids;
    std::set<std::string> class_ids;
    for (const GroupSpec& g : catalog.groups) {
        if (!group_ids.insert(g.group_id).second)
            report.violations.push_back({ViolationKind::DuplicateBoxId, g.group_id,
                                         "group_id repeated in catalog"});
        if (g.variants.empty())
            report.violations.push_back({ViolationKind::ClassNotInGroup, g.group_id,
                                         "group has no variants"});
        for (const VariantSpec& v : g.variants) {
            if (!class_ids.insert(v.class_id).second)
                report.violations.push_back({ViolationKind::DuplicateBoxId, v.class_id,
                                             "class_id repeated in catalog"});
            if (!(v.width_mm > 0.0) || !(v.height_mm > 0.0))
                report.violations.push_back({ViolationKind::NonPositiveDimension, v.class_id,
                                             "variant dimensions must be positive"});
        }
    }
    return report;
}

}  // namespace sizevar
