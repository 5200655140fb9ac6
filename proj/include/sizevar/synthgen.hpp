#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sizevar/catalog.hpp"
#include "sizevar/rng.hpp"

namespace sizevar::synth {

// Synthetic shelves: a catalog of same-look, different-size variants, and
// scenes whose boxes are the true mm dimensions times one shared camera
// scale, corrupted by multiplicative per-dimension Gaussian noise plus rare
// heavy outliers (badly detected boxes).

struct NoiseConfig {
    double sigma = 0.05;                               // relative std-dev per dimension
    double outlier_prob = 0.0;                         // per-box probability
    std::pair<double, double> outlier_scale_range{1.5, 3.0};  // per-dimension factor
    std::pair<double, double> scale_range{2.0, 10.0};  // pixels per mm, one draw per scene
};

struct SceneConfig {
    std::pair<int, int> groups_per_scene{4, 6};
    std::pair<int, int> boxes_per_group{3, 5};
    std::uint64_t rng_seed = 0;
};

struct CatalogGenConfig {
    int n_groups = 6;
    std::pair<int, int> variants_per_group{2, 3};
    double size_gap = 0.30;  // variant i is (1 + size_gap)^i times variant 0, linearly
    std::pair<double, double> base_width_mm{20.0, 80.0};
    std::pair<double, double> base_aspect{0.4, 2.2};
    std::uint64_t rng_seed = 0;
};

inline void validate(const NoiseConfig& cfg) {
    if (cfg.sigma < 0.0) throw std::invalid_argument("noise.sigma must be >= 0");
    if (cfg.outlier_prob < 0.0 || cfg.outlier_prob > 1.0)
        throw std::invalid_argument("noise.outlier_prob must be in [0, 1]");
    if (!(cfg.outlier_scale_range.first > 0.0) ||
        cfg.outlier_scale_range.first > cfg.outlier_scale_range.second)
        throw std::invalid_argument("noise.outlier_scale_range must be positive and ordered");
    if (!(cfg.scale_range.first > 0.0) || cfg.scale_range.first > cfg.scale_range.second)
        throw std::invalid_argument("noise.scale_range must be positive and ordered");
}

inline void validate(const SceneConfig& cfg) {
    if (cfg.groups_per_scene.first < 1 || cfg.groups_per_scene.first > cfg.groups_per_scene.second)
        throw std::invalid_argument("scene.groups_per_scene must satisfy 1 <= min <= max");
    if (cfg.boxes_per_group.first < 1 || cfg.boxes_per_group.first > cfg.boxes_per_group.second)
        throw std::invalid_argument("scene.boxes_per_group must satisfy 1 <= min <= max");
}

inline void validate(const CatalogGenConfig& cfg) {
    if (cfg.n_groups < 1) throw std::invalid_argument("catalog.n_groups must be >= 1");
    if (cfg.variants_per_group.first < 1 ||
        cfg.variants_per_group.first > cfg.variants_per_group.second)
        throw std::invalid_argument("catalog.variants_per_group must satisfy 1 <= min <= max");
    if (!(cfg.size_gap > 0.0)) throw std::invalid_argument("catalog.size_gap must be > 0");
    if (!(cfg.base_width_mm.first > 0.0) || cfg.base_width_mm.first > cfg.base_width_mm.second)
        throw std::invalid_argument("catalog.base_width_mm must be positive and ordered");
    if (!(cfg.base_aspect.first > 0.0) || cfg.base_aspect.first > cfg.base_aspect.second)
        throw std::invalid_argument("catalog.base_aspect must be positive and ordered");
}

inline std::string format_index(const char* prefix, std::size_t index, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%0*zu", prefix, width, index);
    return buf;
}

// All variants of a group share the base aspect ratio; only linear size
// changes from one variant to the next.
inline Catalog generate_catalog(const CatalogGenConfig& cfg) {
    validate(cfg);
    Catalog catalog;
    SplitMix64 rng(cfg.rng_seed);
    for (int gi = 0; gi < cfg.n_groups; ++gi) {
        GroupSpec group;
        group.group_id = format_index("G", static_cast<std::size_t>(gi), 2);
        const double base_w = rng.uniform(cfg.base_width_mm.first, cfg.base_width_mm.second);
        const double aspect = rng.uniform(cfg.base_aspect.first, cfg.base_aspect.second);
        const double base_h = base_w / aspect;
        const int k = static_cast<int>(
            rng.uniform_int(cfg.variants_per_group.first, cfg.variants_per_group.second));
        double factor = 1.0;
        for (int vi = 0; vi < k; ++vi) {
            VariantSpec v;
            v.class_id = group.group_id + "_v" + std::to_string(vi);
            v.width_mm = base_w * factor;
            v.height_mm = base_h * factor;
            group.variants.push_back(std::move(v));
            factor *= 1.0 + cfg.size_gap;
        }
        catalog.groups.push_back(std::move(group));
    }
    return catalog;
}

inline Scene generate_scene(const Catalog& catalog, const SceneConfig& scene_cfg,
                            const NoiseConfig& noise_cfg, std::uint64_t scene_seed,
                            const std::string& scene_id) {
    validate(scene_cfg);
    validate(noise_cfg);
    if (catalog.groups.empty()) throw std::invalid_argument("catalog is empty");

    SplitMix64 rng(scene_seed);
    Scene scene;
    scene.scene_id = scene_id;

    const int n_catalog = static_cast<int>(catalog.groups.size());
    int n_groups = static_cast<int>(
        rng.uniform_int(scene_cfg.groups_per_scene.first, scene_cfg.groups_per_scene.second));
    n_groups = std::clamp(n_groups, 1, n_catalog);

    // Partial Fisher-Yates picks the group subset.
    std::vector<int> order(catalog.groups.size());
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < n_groups; ++i) {
        const int j = static_cast<int>(rng.uniform_int(i, n_catalog - 1));
        std::swap(order[i], order[j]);
    }

    const double scale = rng.uniform(noise_cfg.scale_range.first, noise_cfg.scale_range.second);

    std::size_t box_index = 0;
    for (int i = 0; i < n_groups; ++i) {
        const GroupSpec& group = catalog.groups[order[i]];
        const int n_boxes = static_cast<int>(
            rng.uniform_int(scene_cfg.boxes_per_group.first, scene_cfg.boxes_per_group.second));
        for (int b = 0; b < n_boxes; ++b) {
            const auto variant_index =
                rng.uniform_int(0, static_cast<std::int64_t>(group.variants.size()) - 1);
            const VariantSpec& variant = group.variants[static_cast<std::size_t>(variant_index)];

            double factor_w = 1.0 + noise_cfg.sigma * rng.normal();
            double factor_h = 1.0 + noise_cfg.sigma * rng.normal();
            if (rng.next_double() < noise_cfg.outlier_prob) {
                factor_w *= rng.uniform(noise_cfg.outlier_scale_range.first,
                                        noise_cfg.outlier_scale_range.second);
                factor_h *= rng.uniform(noise_cfg.outlier_scale_range.first,
                                        noise_cfg.outlier_scale_range.second);
            }
            // Dimensions must stay positive even under extreme noise draws.
            factor_w = std::max(factor_w, 0.01);
            factor_h = std::max(factor_h, 0.01);

            DetectedBox box;
            box.box_id = format_index("B", box_index++, 2);
            box.width_px = variant.width_mm * scale * factor_w;
            box.height_px = variant.height_mm * scale * factor_h;
            box.group_id = group.group_id;
            box.class_id = variant.class_id;
            scene.boxes.push_back(std::move(box));
        }
    }
    return scene;
}

inline std::vector<Scene> generate_dataset(const Catalog& catalog, const SceneConfig& scene_cfg,
                                           const NoiseConfig& noise_cfg, std::size_t n_scenes,
                                           std::uint64_t rng_seed) {
    if (n_scenes < 1) throw std::invalid_argument("n_scenes must be >= 1");
    std::vector<Scene> scenes;
    scenes.reserve(n_scenes);
    for (std::size_t i = 0; i < n_scenes; ++i) {
        scenes.push_back(generate_scene(catalog, scene_cfg, noise_cfg, derive_seed(rng_seed, i),
                                        format_index("S", i, 6)));
    }
    return scenes;
}

}  // namespace sizevar::synth
