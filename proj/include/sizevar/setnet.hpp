#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sizevar/catalog.hpp"
#include "sizevar/gmm.hpp"
#include "sizevar/rng.hpp"

namespace sizevar::setnet {

// Method 2: each context box becomes one item (area ratio, candidate aspect
// ratio, class posteriors from the GMM bank). Items pass through an encoder
// chosen by the context box's group, the hidden representations are averaged,
// and an output layer maps the pooled vector to class probabilities. Mean
// pooling makes the prediction independent of item order and count.

struct SetFeatureItem {
    std::string other_group;
    double area_ratio = 0.0;
    double own_r = 0.0;
    std::vector<double> posteriors;  // over the candidate group's classes
};

inline std::vector<SetFeatureItem> assemble_set_features(const Scene& scene,
                                                         std::size_t candidate_index,
                                                         const gmm::GmmFeatureBank& bank) {
    const CandidateFeatures features = extract_candidate_features(scene, candidate_index);
    const std::string& g = scene.boxes[candidate_index].group_id;
    std::vector<SetFeatureItem> items;
    items.reserve(features.context.size());
    for (const ContextEntry& entry : features.context) {
        SetFeatureItem item;
        item.other_group = entry.other_group;
        item.area_ratio = entry.area_ratio;
        item.own_r = features.r;
        item.posteriors =
            gmm::class_posteriors(bank, g, entry.other_group, {features.r, entry.area_ratio});
        items.push_back(std::move(item));
    }
    return items;
}

struct AffineLayer {
    int out_dim = 0;
    int in_dim = 0;
    std::vector<double> W;  // row-major, out_dim x in_dim
    std::vector<double> b;  // out_dim

    void resize(int out, int in) {
        out_dim = out;
        in_dim = in;
        W.assign(static_cast<std::size_t>(out) * static_cast<std::size_t>(in), 0.0);
        b.assign(static_cast<std::size_t>(out), 0.0);
    }
};

struct SetNetModel {
    std::string target_group;
    std::vector<std::string> class_order;  // catalog order for the target group
    int hidden = 32;
    int input_dim = 0;                              // 2 + class_order.size()
    std::map<std::string, AffineLayer> encoders;    // one per context group
    AffineLayer fallback;                           // shared, trained on all groups pooled
    AffineLayer output;
};

struct SetNetHyperparams {
    int hidden = 32;
    int epochs = 300;
    double lr = 0.01;
    double momentum = 0.9;
    int batch_size = 32;
    double l2 = 1e-4;
    std::uint64_t seed = 0;
};

struct LabeledSetSample {
    std::vector<SetFeatureItem> items;
    int label = 0;  // index into class_order
};

namespace detail_net {

inline void glorot_init(AffineLayer& layer, SplitMix64& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(layer.in_dim + layer.out_dim));
    for (double& w : layer.W) w = rng.uniform(-a, a);
    // biases stay zero
}

inline std::vector<double> item_input(const SetFeatureItem& item, int input_dim) {
    if (static_cast<int>(item.posteriors.size()) + 2 != input_dim)
        throw std::invalid_argument("set feature item has wrong posterior length");
    std::vector<double> x(static_cast<std::size_t>(input_dim));
    x[0] = item.area_ratio;
    x[1] = item.own_r;
    std::copy(item.posteriors.begin(), item.posteriors.end(), x.begin() + 2);
    return x;
}

inline void affine(const AffineLayer& layer, const std::vector<double>& x, std::vector<double>& out) {
    out.assign(static_cast<std::size_t>(layer.out_dim), 0.0);
    for (int o = 0; o < layer.out_dim; ++o) {
        const double* row = layer.W.data() + static_cast<std::size_t>(o) * layer.in_dim;
        double acc = layer.b[static_cast<std::size_t>(o)];
        for (int i = 0; i < layer.in_dim; ++i) acc += row[i] * x[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(o)] = acc;
    }
}

inline std::vector<double> softmax(std::vector<double> z) {
    double max_z = -std::numeric_limits<double>::infinity();
    for (double v : z) max_z = std::max(max_z, v);
    double sum = 0.0;
    for (double& v : z) {
        v = std::exp(v - max_z);
        sum += v;
    }
    for (double& v : z) v /= sum;
    return z;
}

// Mean over item representations, summed per coordinate in ascending value
// order. Floating-point addition is not associative, so a naive accumulation
// would make the output depend on item order; sorting first makes the pooled
// vector a function of the item multiset, i.e. exactly permutation invariant.
inline void pooled_mean(const std::vector<std::vector<double>>& hs, int hidden,
                        std::vector<double>& pooled) {
    pooled.assign(static_cast<std::size_t>(hidden), 0.0);
    if (hs.empty()) return;
    std::vector<double> column(hs.size());
    for (int h = 0; h < hidden; ++h) {
        for (std::size_t j = 0; j < hs.size(); ++j) column[j] = hs[j][static_cast<std::size_t>(h)];
        std::sort(column.begin(), column.end());
        double acc = 0.0;
        for (double v : column) acc += v;
        pooled[static_cast<std::size_t>(h)] = acc / static_cast<double>(hs.size());
    }
}

}  // namespace detail_net

inline SetNetModel init_setnet(const Catalog& catalog, const std::string& target_group, int hidden,
                               std::uint64_t seed) {
    if (hidden < 1) throw std::invalid_argument("init_setnet: hidden size must be >= 1");
    const GroupSpec& group = catalog.group_or_throw(target_group);

    SetNetModel model;
    model.target_group = target_group;
    for (const VariantSpec& v : group.variants) model.class_order.push_back(v.class_id);
    model.hidden = hidden;
    model.input_dim = 2 + static_cast<int>(model.class_order.size());

    // Every layer draws from its own seed stream so the weights do not depend
    // on catalog order or map iteration.
    std::vector<std::string> group_ids = catalog.group_ids();
    std::sort(group_ids.begin(), group_ids.end());
    for (std::size_t i = 0; i < group_ids.size(); ++i) {
        AffineLayer layer;
        layer.resize(hidden, model.input_dim);
        SplitMix64 rng(derive_seed(seed, fnv1a(group_ids[i])));
        detail_net::glorot_init(layer, rng);
        model.encoders.emplace(group_ids[i], std::move(layer));
    }
    model.fallback.resize(hidden, model.input_dim);
    {
        SplitMix64 rng(derive_seed(seed, fnv1a("__fallback__")));
        detail_net::glorot_init(model.fallback, rng);
    }
    model.output.resize(static_cast<int>(model.class_order.size()), hidden);
    {
        SplitMix64 rng(derive_seed(seed, fnv1a("__output__")));
        detail_net::glorot_init(model.output, rng);
    }
    return model;
}

inline const AffineLayer& encoder_for(const SetNetModel& model, const std::string& gw) {
    const auto it = model.encoders.find(gw);
    return it == model.encoders.end() ? model.fallback : it->second;
}

inline std::vector<double> forward(const SetNetModel& model, const std::vector<SetFeatureItem>& items) {
    std::vector<std::vector<double>> hs(items.size());
    std::vector<double> u;
    for (std::size_t j = 0; j < items.size(); ++j) {
        const std::vector<double> x = detail_net::item_input(items[j], model.input_dim);
        detail_net::affine(encoder_for(model, items[j].other_group), x, u);
        hs[j].resize(static_cast<std::size_t>(model.hidden));
        for (int h = 0; h < model.hidden; ++h)
            hs[j][static_cast<std::size_t>(h)] = std::tanh(u[static_cast<std::size_t>(h)]);
    }
    std::vector<double> pooled;
    detail_net::pooled_mean(hs, model.hidden, pooled);
    std::vector<double> z;
    detail_net::affine(model.output, pooled, z);
    return detail_net::softmax(std::move(z));
}

// --- training: exact backprop through pooling and shared encoders -------------

// Gradient (and velocity) storage shaped like the model parameters.
struct SetNetGrads {
    std::map<std::string, AffineLayer> encoders;
    AffineLayer fallback;
    AffineLayer output;

    static SetNetGrads zeros_like(const SetNetModel& model) {
        SetNetGrads g;
        for (const auto& [name, layer] : model.encoders) {
            AffineLayer zero;
            zero.resize(layer.out_dim, layer.in_dim);
            g.encoders.emplace(name, std::move(zero));
        }
        g.fallback.resize(model.fallback.out_dim, model.fallback.in_dim);
        g.output.resize(model.output.out_dim, model.output.in_dim);
        return g;
    }
};

namespace detail_net {

// Cross-entropy of one branch (per-group routing or fallback-for-all) plus
// its gradient contributions, scaled by `scale`. Returns the branch loss.
template <bool UseFallback>
inline double branch_backward(const SetNetModel& model, const LabeledSetSample& sample, double scale,
                              SetNetGrads& grads) {
    const std::size_t m = sample.items.size();
    const int H = model.hidden;

    std::vector<std::vector<double>> xs(m), hs(m);
    std::vector<const AffineLayer*> enc(m);
    std::vector<AffineLayer*> genc(m);
    std::vector<double> u;
    for (std::size_t j = 0; j < m; ++j) {
        const SetFeatureItem& item = sample.items[j];
        xs[j] = item_input(item, model.input_dim);
        if constexpr (UseFallback) {
            enc[j] = &model.fallback;
            genc[j] = &grads.fallback;
        } else {
            const auto it = model.encoders.find(item.other_group);
            if (it == model.encoders.end()) {
                enc[j] = &model.fallback;
                genc[j] = &grads.fallback;
            } else {
                enc[j] = &it->second;
                genc[j] = &grads.encoders.at(item.other_group);
            }
        }
        affine(*enc[j], xs[j], u);
        hs[j].resize(static_cast<std::size_t>(H));
        for (int h = 0; h < H; ++h)
            hs[j][static_cast<std::size_t>(h)] = std::tanh(u[static_cast<std::size_t>(h)]);
    }
    std::vector<double> pooled;
    pooled_mean(hs, H, pooled);

    std::vector<double> z;
    affine(model.output, pooled, z);
    const std::vector<double> p = softmax(z);
    const double loss = -std::log(std::max(p[static_cast<std::size_t>(sample.label)], 1e-300));

    const int C = model.output.out_dim;
    std::vector<double> dz(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c)
        dz[static_cast<std::size_t>(c)] =
            scale * (p[static_cast<std::size_t>(c)] - (c == sample.label ? 1.0 : 0.0));

    for (int c = 0; c < C; ++c) {
        double* grow = grads.output.W.data() + static_cast<std::size_t>(c) * H;
        for (int h = 0; h < H; ++h) grow[h] += dz[static_cast<std::size_t>(c)] * pooled[static_cast<std::size_t>(h)];
        grads.output.b[static_cast<std::size_t>(c)] += dz[static_cast<std::size_t>(c)];
    }
    if (m == 0) return loss;

    std::vector<double> dpooled(static_cast<std::size_t>(H), 0.0);
    for (int h = 0; h < H; ++h) {
        double acc = 0.0;
        for (int c = 0; c < C; ++c)
            acc += model.output.W[static_cast<std::size_t>(c) * H + static_cast<std::size_t>(h)] *
                   dz[static_cast<std::size_t>(c)];
        dpooled[static_cast<std::size_t>(h)] = acc / static_cast<double>(m);
    }

    std::vector<double> du(static_cast<std::size_t>(H));
    for (std::size_t j = 0; j < m; ++j) {
        for (int h = 0; h < H; ++h) {
            const double hj = hs[j][static_cast<std::size_t>(h)];
            du[static_cast<std::size_t>(h)] = dpooled[static_cast<std::size_t>(h)] * (1.0 - hj * hj);
        }
        AffineLayer& g = *genc[j];
        const int D = model.input_dim;
        for (int h = 0; h < H; ++h) {
            double* grow = g.W.data() + static_cast<std::size_t>(h) * D;
            const double duh = du[static_cast<std::size_t>(h)];
            for (int d = 0; d < D; ++d) grow[d] += duh * xs[j][static_cast<std::size_t>(d)];
            g.b[static_cast<std::size_t>(h)] += duh;
        }
    }
    return loss;
}

inline void visit_layers(SetNetModel& model, const std::function<void(AffineLayer&)>& fn) {
    for (auto& [name, layer] : model.encoders) fn(layer);
    fn(model.fallback);
    fn(model.output);
}

inline void visit_layers(SetNetGrads& grads, const std::function<void(AffineLayer&)>& fn) {
    for (auto& [name, layer] : grads.encoders) fn(layer);
    fn(grads.fallback);
    fn(grads.output);
}

}  // namespace detail_net

// The training objective for one sample: cross-entropy of the routed branch
// plus cross-entropy of the fallback branch (that is how the shared fallback
// encoder learns a pooled representation of every group), plus the L2 term.
inline double accumulate_ce_grads(const SetNetModel& model, const LabeledSetSample& sample,
                                  double scale, SetNetGrads& grads) {
    const double main_loss = detail_net::branch_backward<false>(model, sample, scale, grads);
    const double aux_loss = detail_net::branch_backward<true>(model, sample, scale, grads);
    return main_loss + aux_loss;
}

inline void add_l2_grads(SetNetModel& model, double l2, SetNetGrads& grads) {
    if (l2 == 0.0) return;
    auto it = grads.encoders.begin();
    for (auto& [name, layer] : model.encoders) {
        AffineLayer& g = it->second;
        for (std::size_t i = 0; i < layer.W.size(); ++i) g.W[i] += l2 * layer.W[i];
        ++it;
    }
    for (std::size_t i = 0; i < model.fallback.W.size(); ++i)
        grads.fallback.W[i] += l2 * model.fallback.W[i];
    for (std::size_t i = 0; i < model.output.W.size(); ++i)
        grads.output.W[i] += l2 * model.output.W[i];
}

inline double l2_penalty(const SetNetModel& model, double l2) {
    if (l2 == 0.0) return 0.0;
    double sum = 0.0;
    for (const auto& [name, layer] : model.encoders)
        for (double w : layer.W) sum += w * w;
    for (double w : model.fallback.W) sum += w * w;
    for (double w : model.output.W) sum += w * w;
    return 0.5 * l2 * sum;
}

// Full objective on one example; the quantity grad_check differentiates.
inline double example_loss(const SetNetModel& model, const LabeledSetSample& sample, double l2) {
    SetNetGrads scratch = SetNetGrads::zeros_like(model);
    const double ce = accumulate_ce_grads(model, sample, 0.0, scratch);
    return ce + l2_penalty(model, l2);
}

inline std::vector<double> train_setnet(SetNetModel& model,
                                        const std::vector<LabeledSetSample>& samples,
                                        const SetNetHyperparams& hp) {
    if (samples.empty()) throw std::invalid_argument("train_setnet: empty dataset");
    for (const LabeledSetSample& s : samples)
        if (s.label < 0 || s.label >= static_cast<int>(model.class_order.size()))
            throw std::invalid_argument("train_setnet: label outside target group classes");

    SetNetGrads velocity = SetNetGrads::zeros_like(model);
    SetNetGrads grads = SetNetGrads::zeros_like(model);
    std::vector<double> loss_history;
    loss_history.reserve(static_cast<std::size_t>(hp.epochs));

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const int batch_size = std::max(1, hp.batch_size);

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        SplitMix64 rng(derive_seed(hp.seed, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }

        double epoch_ce = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
            const double scale = 1.0 / static_cast<double>(end - start);

            detail_net::visit_layers(grads, [](AffineLayer& l) {
                std::fill(l.W.begin(), l.W.end(), 0.0);
                std::fill(l.b.begin(), l.b.end(), 0.0);
            });
            for (std::size_t i = start; i < end; ++i)
                epoch_ce += accumulate_ce_grads(model, samples[order[i]], scale, grads);
            add_l2_grads(model, hp.l2, grads);

            // SGD with momentum.
            auto venc = velocity.encoders.begin();
            auto genc = grads.encoders.begin();
            for (auto& [name, layer] : model.encoders) {
                AffineLayer& v = venc->second;
                AffineLayer& g = genc->second;
                for (std::size_t i = 0; i < layer.W.size(); ++i) {
                    v.W[i] = hp.momentum * v.W[i] - hp.lr * g.W[i];
                    layer.W[i] += v.W[i];
                }
                for (std::size_t i = 0; i < layer.b.size(); ++i) {
                    v.b[i] = hp.momentum * v.b[i] - hp.lr * g.b[i];
                    layer.b[i] += v.b[i];
                }
                ++venc;
                ++genc;
            }
            for (int which = 0; which < 2; ++which) {
                AffineLayer& v = which == 0 ? velocity.fallback : velocity.output;
                AffineLayer& g = which == 0 ? grads.fallback : grads.output;
                AffineLayer& layer = which == 0 ? model.fallback : model.output;
                for (std::size_t i = 0; i < layer.W.size(); ++i) {
                    v.W[i] = hp.momentum * v.W[i] - hp.lr * g.W[i];
                    layer.W[i] += v.W[i];
                }
                for (std::size_t i = 0; i < layer.b.size(); ++i) {
                    v.b[i] = hp.momentum * v.b[i] - hp.lr * g.b[i];
                    layer.b[i] += v.b[i];
                }
            }
        }
        loss_history.push_back(epoch_ce / static_cast<double>(samples.size()) +
                               l2_penalty(model, hp.l2));
    }

    // Encoders that never saw a training item are still at their random
    // initialization; drop them so inference routes those groups to the
    // trained fallback.
    std::set<std::string> seen;
    for (const LabeledSetSample& s : samples)
        for (const SetFeatureItem& item : s.items) seen.insert(item.other_group);
    for (auto it = model.encoders.begin(); it != model.encoders.end();) {
        if (seen.count(it->first) == 0)
            it = model.encoders.erase(it);
        else
            ++it;
    }
    return loss_history;
}

// Central finite differences over every weight and bias; returns the largest
// relative disagreement with the analytic gradient. The default objective is
// the cross-entropy alone: with an L2 term, parameters the example never
// touches carry gradients of order l2*w, small enough at tiny initial
// weights that the finite difference is pure cancellation noise; pass l2
// explicitly (with epsilon around 1e-4) to exercise that path.
inline double grad_check(const SetNetModel& model, const LabeledSetSample& sample, double epsilon,
                         double l2 = 0.0) {
    if (epsilon < 1e-7 || epsilon > 1e-3)
        throw std::invalid_argument("grad_check: epsilon outside [1e-7, 1e-3]");

    SetNetModel work = model;
    SetNetGrads grads = SetNetGrads::zeros_like(work);
    accumulate_ce_grads(work, sample, 1.0, grads);
    add_l2_grads(work, l2, grads);

    std::vector<double*> param_ptrs;
    std::vector<double*> grad_ptrs;
    detail_net::visit_layers(work, [&](AffineLayer& l) {
        for (double& w : l.W) param_ptrs.push_back(&w);
        for (double& b : l.b) param_ptrs.push_back(&b);
    });
    detail_net::visit_layers(grads, [&](AffineLayer& l) {
        for (double& w : l.W) grad_ptrs.push_back(&w);
        for (double& b : l.b) grad_ptrs.push_back(&b);
    });

    double max_rel_err = 0.0;
    for (std::size_t i = 0; i < param_ptrs.size(); ++i) {
        const double saved = *param_ptrs[i];
        *param_ptrs[i] = saved + epsilon;
        const double loss_plus = example_loss(work, sample, l2);
        *param_ptrs[i] = saved - epsilon;
        const double loss_minus = example_loss(work, sample, l2);
        *param_ptrs[i] = saved;
        const double numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
        const double analytic = *grad_ptrs[i];
        const double rel =
            std::abs(analytic - numeric) / std::max(1e-12, std::abs(analytic) + std::abs(numeric));
        max_rel_err = std::max(max_rel_err, rel);
    }
    return max_rel_err;
}

// --- serialization -----------------------------------------------------------

inline nlohmann::json layer_to_json(const AffineLayer& layer) {
    nlohmann::json rows = nlohmann::json::array();
    for (int o = 0; o < layer.out_dim; ++o) {
        nlohmann::json row = nlohmann::json::array();
        for (int i = 0; i < layer.in_dim; ++i)
            row.push_back(layer.W[static_cast<std::size_t>(o) * layer.in_dim + static_cast<std::size_t>(i)]);
        rows.push_back(std::move(row));
    }
    return nlohmann::json{{"W", std::move(rows)}, {"b", layer.b}};
}

inline AffineLayer layer_from_json(const nlohmann::json& j) {
    AffineLayer layer;
    const nlohmann::json& rows = j.at("W");
    layer.out_dim = static_cast<int>(rows.size());
    layer.in_dim = rows.empty() ? 0 : static_cast<int>(rows[0].size());
    layer.W.reserve(static_cast<std::size_t>(layer.out_dim) * static_cast<std::size_t>(layer.in_dim));
    for (const nlohmann::json& row : rows)
        for (const nlohmann::json& v : row) layer.W.push_back(v.get<double>());
    layer.b = j.at("b").get<std::vector<double>>();
    return layer;
}

inline nlohmann::json model_to_json(const SetNetModel& model) {
    nlohmann::json encoders = nlohmann::json::object();
    for (const auto& [name, layer] : model.encoders) encoders[name] = layer_to_json(layer);
    return nlohmann::json{{"target_group", model.target_group},
                          {"classes", model.class_order},
                          {"hidden", model.hidden},
                          {"input_dim", model.input_dim},
                          {"encoders", std::move(encoders)},
                          {"fallback", layer_to_json(model.fallback)},
                          {"output", layer_to_json(model.output)}};
}

inline SetNetModel model_from_json(const nlohmann::json& j) {
    SetNetModel model;
    model.target_group = j.at("target_group").get<std::string>();
    model.class_order = j.at("classes").get<std::vector<std::string>>();
    model.hidden = j.at("hidden").get<int>();
    model.input_dim = j.at("input_dim").get<int>();
    for (const auto& [name, jl] : j.at("encoders").items())
        model.encoders.emplace(name, layer_from_json(jl));
    model.fallback = layer_from_json(j.at("fallback"));
    model.output = layer_from_json(j.at("output"));
    return model;
}

}  // namespace sizevar::setnet
