#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sizevar/catalog.hpp"

namespace sizevar::gbdt {

// Method 1: coalesce a candidate's variable-length context into a fixed
// vector of per-group histograms (own aspect ratio up front), then train a
// one-vs-rest gradient boosted tree ensemble per group on those vectors.

enum class BinQuantity { AspectRatio, AreaRatio };

inline const char* bin_quantity_name(BinQuantity q) {
    return q == BinQuantity::AspectRatio ? "aspect_ratio" : "area_ratio";
}

struct FeatureBlock {
    std::string other_group;
    BinQuantity quantity = BinQuantity::AspectRatio;
    std::vector<double> bin_edges;  // strictly ascending, B+1 entries

    std::size_t bins() const { return bin_edges.size() - 1; }
};

struct BinnedFeatureSpec {
    std::string target_group;
    std::vector<FeatureBlock> blocks;           // sorted by group then quantity
    std::vector<std::string> included_groups;   // groups passing the co-occurrence filter

    std::size_t encoded_length() const {
        std::size_t len = 1;  // own aspect ratio
        for (const FeatureBlock& b : blocks) len += b.bins();
        return len;
    }
};

struct BinOptions {
    int bins = 10;  // B
    double cooccur_min_frac = 0.05;
    std::pair<double, double> range_percentiles{1.0, 99.0};
};

namespace detail_bins {

// Linear-interpolation percentile on a sorted copy.
inline double percentile(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    if (values.size() == 1) return values.front();
    const double h = (static_cast<double>(values.size()) - 1.0) * p / 100.0;
    const std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = h - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

inline std::vector<double> equal_width_edges(double lo, double hi, int bins) {
    if (!(hi > lo)) hi = lo + 1e-9;
    std::vector<double> edges(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i)
        edges[static_cast<std::size_t>(i)] =
            lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
    return edges;
}

}  // namespace detail_bins

inline BinnedFeatureSpec fit_bins(const std::vector<Scene>& train_scenes, const Catalog& catalog,
                                  const std::string& target_group, const BinOptions& opts = {}) {
    if (opts.bins < 2) throw std::invalid_argument("fit_bins: need at least 2 bins");
    catalog.group_or_throw(target_group);

    // Pool, per context group, exactly the values encode() will histogram:
    // one (aspect ratio, area ratio) contribution per candidate/context pair.
    std::size_t target_scenes = 0;
    std::map<std::string, std::size_t> cooccur_scenes;
    std::map<std::string, std::vector<double>> pooled_aspect;
    std::map<std::string, std::vector<double>> pooled_area;

    for (const Scene& scene : train_scenes) {
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < scene.boxes.size(); ++i)
            if (scene.boxes[i].group_id == target_group) candidates.push_back(i);
        if (candidates.empty()) continue;
        ++target_scenes;

        std::vector<double> areas(scene.boxes.size());
        std::vector<double> ratios(scene.boxes.size());
        for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
            areas[i] = frontal_area(scene.boxes[i]);
            ratios[i] = aspect_ratio(scene.boxes[i]);
        }

        std::set<std::string> groups_seen;
        for (std::size_t ci : candidates) {
            for (std::size_t k = 0; k < scene.boxes.size(); ++k) {
                if (k == ci) continue;
                const std::string& gw = scene.boxes[k].group_id;
                groups_seen.insert(gw);
                pooled_aspect[gw].push_back(ratios[k]);
                pooled_area[gw].push_back(areas[k] / areas[ci]);
            }
        }
        for (const std::string& gw : groups_seen) ++cooccur_scenes[gw];
    }
    if (target_scenes == 0)
        throw std::runtime_error("fit_bins: no training candidates of group " + target_group);

    BinnedFeatureSpec spec;
    spec.target_group = target_group;
    for (const auto& [gw, count] : cooccur_scenes) {
        const double frac = static_cast<double>(count) / static_cast<double>(target_scenes);
        if (frac >= opts.cooccur_min_frac) spec.included_groups.push_back(gw);
    }
    std::sort(spec.included_groups.begin(), spec.included_groups.end());

    for (const std::string& gw : spec.included_groups) {
        for (BinQuantity q : {BinQuantity::AspectRatio, BinQuantity::AreaRatio}) {
            const std::vector<double>& values =
                q == BinQuantity::AspectRatio ? pooled_aspect[gw] : pooled_area[gw];
            const double lo = detail_bins::percentile(values, opts.range_percentiles.first);
            const double hi = detail_bins::percentile(values, opts.range_percentiles.second);
            spec.blocks.push_back({gw, q, detail_bins::equal_width_edges(lo, hi, opts.bins)});
        }
    }
    return spec;
}

// Encodes one candidate. other_boxes_r must list (aspect ratio, group) of the
// same boxes as features.context, in the same order. Values outside the edge
// range clamp into the first/last bin; groups absent from the scene leave
// their block at zero.
inline std::vector<double> encode(const CandidateFeatures& features, const BinnedFeatureSpec& spec,
                                  const std::vector<std::pair<double, std::string>>& other_boxes_r) {
    std::vector<double> out(spec.encoded_length(), 0.0);
    out[0] = features.r;

    std::size_t offset = 1;
    for (const FeatureBlock& block : spec.blocks) {
        const std::size_t bins = block.bins();
        const double lo = block.bin_edges.front();
        const double hi = block.bin_edges.back();
        const double width = (hi - lo) / static_cast<double>(bins);
        std::size_t total = 0;

        auto add_value = [&](double v) {
            auto idx = static_cast<std::int64_t>(std::floor((v - lo) / width));
            idx = std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(bins) - 1);
            out[offset + static_cast<std::size_t>(idx)] += 1.0;
            ++total;
        };

        if (block.quantity == BinQuantity::AspectRatio) {
            for (const auto& [r, group] : other_boxes_r)
                if (group == block.other_group) add_value(r);
        } else {
            for (const ContextEntry& entry : features.context)
                if (entry.other_group == block.other_group) add_value(entry.area_ratio);
        }
        if (total > 0) {
            for (std::size_t b = 0; b < bins; ++b) out[offset + b] /= static_cast<double>(total);
        }
        offset += bins;
    }
    return out;
}

// --- regression trees --------------------------------------------------------

struct TreeNode {
    int feature = -1;  // -1: leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
};

struct RegressionTree {
    std::vector<TreeNode> nodes;

    double eval(const std::vector<double>& x) const {
        int i = 0;
        while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
            const TreeNode& n = nodes[static_cast<std::size_t>(i)];
            i = x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right;
        }
        return nodes[static_cast<std::size_t>(i)].value;
    }
};

struct GbdtParams {
    int n_rounds = 200;
    int max_depth = 3;
    double learning_rate = 0.1;
    int min_leaf = 3;
    std::uint64_t seed = 0;  // reserved; training itself is deterministic
};

struct GbdtModel {
    std::string target_group;
    std::vector<std::string> class_order;
    std::size_t n_features = 0;
    double learning_rate = 0.1;
    std::vector<double> base_scores;
    std::vector<std::vector<RegressionTree>> class_trees;  // [class][round]
};

struct GbdtTrainResult {
    GbdtModel model;
    std::vector<double> loss_history;  // multiclass log-loss, initial state first
};

namespace detail_tree {

// Exact greedy builder over presorted feature columns. Split gain is the
// least-squares improvement on the residuals; ties keep the lowest feature
// index, then the lowest threshold (candidates are scanned in that order and
// only strictly better gains replace the incumbent).
class TreeBuilder {
public:
    TreeBuilder(const std::vector<std::vector<double>>& columns,
                const std::vector<std::vector<int>>& sorted_idx, int max_depth, int min_leaf)
        : columns_(columns), sorted_idx_(sorted_idx), max_depth_(max_depth), min_leaf_(min_leaf),
          in_node_(columns.empty() ? 0 : columns[0].size(), 0) {}

    RegressionTree build(const std::vector<double>& grad, const std::vector<int>& samples) {
        grad_ = &grad;
        RegressionTree tree;
        build_node(tree, samples, 0);
        return tree;
    }

private:
    struct Split {
        double gain = 0.0;
        int feature = -1;
        double threshold = 0.0;
    };

    int build_node(RegressionTree& tree, const std::vector<int>& samples, int depth) {
        const int node_index = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();

        double sum = 0.0;
        for (int i : samples) sum += (*grad_)[static_cast<std::size_t>(i)];
        const double n = static_cast<double>(samples.size());

        Split split;
        if (depth < max_depth_ && samples.size() >= 2 * static_cast<std::size_t>(min_leaf_))
            split = find_split(samples, sum);

        if (split.feature < 0) {
            tree.nodes[static_cast<std::size_t>(node_index)].value = sum / n;
            return node_index;
        }

        std::vector<int> left, right;
        left.reserve(samples.size());
        right.reserve(samples.size());
        for (int i : samples) {
            if (columns_[static_cast<std::size_t>(split.feature)][static_cast<std::size_t>(i)] <
                split.threshold)
                left.push_back(i);
            else
                right.push_back(i);
        }
        const int left_index = build_node(tree, left, depth + 1);
        const int right_index = build_node(tree, right, depth + 1);
        TreeNode& node = tree.nodes[static_cast<std::size_t>(node_index)];
        node.feature = split.feature;
        node.threshold = split.threshold;
        node.left = left_index;
        node.right = right_index;
        return node_index;
    }

    Split find_split(const std::vector<int>& samples, double total_sum) {
        const double total_n = static_cast<double>(samples.size());
        const double base_score = total_sum * total_sum / total_n;

        for (int i : samples) in_node_[static_cast<std::size_t>(i)] = 1;
        Split best;
        for (std::size_t f = 0; f < columns_.size(); ++f) {
            const std::vector<double>& col = columns_[f];
            double left_sum = 0.0;
            double left_n = 0.0;
            double prev_value = 0.0;
            bool have_prev = false;
            for (int i : sorted_idx_[f]) {
                if (!in_node_[static_cast<std::size_t>(i)]) continue;
                const double v = col[static_cast<std::size_t>(i)];
                if (have_prev && v > prev_value && left_n >= min_leaf_ &&
                    total_n - left_n >= min_leaf_) {
                    const double right_sum = total_sum - left_sum;
                    const double gain = left_sum * left_sum / left_n +
                                        right_sum * right_sum / (total_n - left_n) - base_score;
                    if (gain > best.gain + 1e-12) {
                        best.gain = gain;
                        best.feature = static_cast<int>(f);
                        best.threshold = 0.5 * (prev_value + v);
                    }
                }
                left_sum += (*grad_)[static_cast<std::size_t>(i)];
                left_n += 1.0;
                prev_value = v;
                have_prev = true;
            }
        }
        for (int i : samples) in_node_[static_cast<std::size_t>(i)] = 0;
        return best;
    }

    const std::vector<std::vector<double>>& columns_;
    const std::vector<std::vector<int>>& sorted_idx_;
    const int max_depth_;
    const int min_leaf_;
    std::vector<char> in_node_;
    const std::vector<double>* grad_ = nullptr;
};

inline void softmax_rows(const std::vector<double>& scores, std::size_t n, std::size_t k,
                         std::vector<double>& probs) {
    probs.resize(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        double max_score = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) max_score = std::max(max_score, scores[i * k + c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            probs[i * k + c] = std::exp(scores[i * k + c] - max_score);
            sum += probs[i * k + c];
        }
        for (std::size_t c = 0; c < k; ++c) probs[i * k + c] /= sum;
    }
}

}  // namespace detail_tree

// One-vs-rest logistic boosting: each round fits one least-squares tree per
// class to the softmax residuals y_c - p_c. A round that fails to improve the
// training loss is rolled back and training stops, which keeps the recorded
// loss history non-increasing.
inline GbdtTrainResult train_gbdt(const std::vector<std::vector<double>>& X,
                                  const std::vector<std::string>& y, const GbdtParams& params,
                                  const std::string& target_group = "") {
    if (X.empty()) throw std::invalid_argument("train_gbdt: empty dataset");
    if (X.size() != y.size()) throw std::invalid_argument("train_gbdt: X and y lengths differ");
    const std::size_t n = X.size();
    const std::size_t n_features = X[0].size();
    for (const auto& row : X)
        if (row.size() != n_features) throw std::invalid_argument("train_gbdt: ragged feature matrix");

    GbdtTrainResult result;
    GbdtModel& model = result.model;
    model.target_group = target_group;
    model.n_features = n_features;
    model.learning_rate = params.learning_rate;

    std::set<std::string> label_set(y.begin(), y.end());
    model.class_order.assign(label_set.begin(), label_set.end());
    const std::size_t k = model.class_order.size();
    std::map<std::string, std::size_t> class_index;
    for (std::size_t c = 0; c < k; ++c) class_index[model.class_order[c]] = c;
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = class_index.at(y[i]);

    model.base_scores.assign(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) model.base_scores[labels[i]] += 1.0;
    for (double& s : model.base_scores) s = std::log(s / static_cast<double>(n));
    model.class_trees.resize(k);

    std::vector<double> scores(n * k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) scores[i * k + c] = model.base_scores[c];

    std::vector<double> probs;
    auto log_loss = [&]() {
        detail_tree::softmax_rows(scores, n, k, probs);
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            loss -= std::log(std::max(probs[i * k + labels[i]], 1e-300));
        return loss / static_cast<double>(n);
    };
    result.loss_history.push_back(log_loss());

    if (k == 1) return result;  // constant base score, no trees

    // Presorted feature order is shared by every tree.
    std::vector<std::vector<double>> columns(n_features, std::vector<double>(n));
    for (std::size_t f = 0; f < n_features; ++f)
        for (std::size_t i = 0; i < n; ++i) columns[f][i] = X[i][f];
    std::vector<std::vector<int>> sorted_idx(n_features);
    for (std::size_t f = 0; f < n_features; ++f) {
        sorted_idx[f].resize(n);
        for (std::size_t i = 0; i < n; ++i) sorted_idx[f][i] = static_cast<int>(i);
        std::stable_sort(sorted_idx[f].begin(), sorted_idx[f].end(),
                         [&](int a, int b) { return columns[f][static_cast<std::size_t>(a)] <
                                                    columns[f][static_cast<std::size_t>(b)]; });
    }

    detail_tree::TreeBuilder builder(columns, sorted_idx, params.max_depth, params.min_leaf);
    std::vector<int> all_samples(n);
    for (std::size_t i = 0; i < n; ++i) all_samples[i] = static_cast<int>(i);

    std::vector<double> grad(n);
    std::vector<double> scores_backup;
    for (int round = 0; round < params.n_rounds; ++round) {
        detail_tree::softmax_rows(scores, n, k, probs);
        scores_backup = scores;
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t i = 0; i < n; ++i)
                grad[i] = (labels[i] == c ? 1.0 : 0.0) - probs[i * k + c];
            RegressionTree tree = builder.build(grad, all_samples);
            for (std::size_t i = 0; i < n; ++i)
                scores[i * k + c] += params.learning_rate * tree.eval(X[i]);
            model.class_trees[c].push_back(std::move(tree));
        }
        const double loss = log_loss();
        if (loss > result.loss_history.back() + 1e-12) {
            scores = scores_backup;
            for (std::size_t c = 0; c < k; ++c) model.class_trees[c].pop_back();
            break;
        }
        result.loss_history.push_back(loss);
    }
    return result;
}

inline std::vector<double> predict_scores(const GbdtModel& model, const std::vector<double>& x) {
    if (x.size() != model.n_features)
        throw std::invalid_argument("predict_gbdt: feature vector length mismatch");
    std::vector<double> scores(model.class_order.size());
    for (std::size_t c = 0; c < scores.size(); ++c) {
        double s = model.base_scores[c];
        for (const RegressionTree& tree : model.class_trees[c]) s += model.learning_rate * tree.eval(x);
        scores[c] = s;
    }
    return scores;
}

inline std::vector<double> predict_gbdt(const GbdtModel& model, const std::vector<double>& x) {
    std::vector<double> scores = predict_scores(model, x);
    double max_score = -std::numeric_limits<double>::infinity();
    for (double s : scores) max_score = std::max(max_score, s);
    double sum = 0.0;
    for (double& s : scores) {
        s = std::exp(s - max_score);
        sum += s;
    }
    for (double& s : scores) s /= sum;
    return scores;
}

// --- serialization -----------------------------------------------------------

inline nlohmann::json tree_to_json(const RegressionTree& tree) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TreeNode& n : tree.nodes)
        nodes.push_back({{"f", n.feature}, {"t", n.threshold}, {"l", n.left}, {"r", n.right}, {"v", n.value}});
    return nodes;
}

inline RegressionTree tree_from_json(const nlohmann::json& j) {
    RegressionTree tree;
    for (const nlohmann::json& jn : j)
        tree.nodes.push_back({jn.at("f").get<int>(), jn.at("t").get<double>(), jn.at("l").get<int>(),
                              jn.at("r").get<int>(), jn.at("v").get<double>()});
    return tree;
}

inline nlohmann::json spec_to_json(const BinnedFeatureSpec& spec) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const FeatureBlock& b : spec.blocks)
        blocks.push_back({{"group", b.other_group},
                          {"quantity", bin_quantity_name(b.quantity)},
                          {"edges", b.bin_edges}});
    return nlohmann::json{{"target_group", spec.target_group},
                          {"included_groups", spec.included_groups},
                          {"blocks", std::move(blocks)}};
}

inline BinnedFeatureSpec spec_from_json(const nlohmann::json& j) {
    BinnedFeatureSpec spec;
    spec.target_group = j.at("target_group").get<std::string>();
    spec.included_groups = j.at("included_groups").get<std::vector<std::string>>();
    for (const nlohmann::json& jb : j.at("blocks")) {
        FeatureBlock b;
        b.other_group = jb.at("group").get<std::string>();
        b.quantity = jb.at("quantity").get<std::string>() == "aspect_ratio"
                         ? BinQuantity::AspectRatio
                         : BinQuantity::AreaRatio;
        b.bin_edges = jb.at("edges").get<std::vector<double>>();
        spec.blocks.push_back(std::move(b));
    }
    return spec;
}

inline nlohmann::json model_to_json(const GbdtModel& model) {
    nlohmann::json class_trees = nlohmann::json::array();
    for (const auto& trees : model.class_trees) {
        nlohmann::json jt = nlohmann::json::array();
        for (const RegressionTree& tree : trees) jt.push_back(tree_to_json(tree));
        class_trees.push_back(std::move(jt));
    }
    return nlohmann::json{{"target_group", model.target_group},
                          {"classes", model.class_order},
                          {"n_features", model.n_features},
                          {"learning_rate", model.learning_rate},
                          {"base_scores", model.base_scores},
                          {"class_trees", std::move(class_trees)}};
}

inline GbdtModel model_from_json(const nlohmann::json& j) {
    GbdtModel model;
    model.target_group = j.at("target_group").get<std::string>();
    model.class_order = j.at("classes").get<std::vector<std::string>>();
    model.n_features = j.at("n_features").get<std::size_t>();
    model.learning_rate = j.at("learning_rate").get<double>();
    model.base_scores = j.at("base_scores").get<std::vector<double>>();
    for (const nlohmann::json& jt : j.at("class_trees")) {
        std::vector<RegressionTree> trees;
        for (const nlohmann::json& tree : jt) trees.push_back(tree_from_json(tree));
        model.class_trees.push_back(std::move(trees));
    }
    return model;
}

}  // namespace sizevar::gbdt
