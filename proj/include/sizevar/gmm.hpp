#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "sizevar/catalog.hpp"
#include "sizevar/parallel.hpp"
#include "sizevar/rng.hpp"

namespace sizevar::gmm {

using Vec2 = std::array<double, 2>;

struct DegenerateCovarianceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// 2D Gaussian with full covariance [[a, b], [b, d]].
struct Gaussian2D {
    Vec2 mean{0.0, 0.0};
    std::array<std::array<double, 2>, 2> cov{{{1.0, 0.0}, {0.0, 1.0}}};
};

struct GmmComponent {
    double weight = 1.0;
    Gaussian2D gaussian;
};

struct Gmm2D {
    std::vector<GmmComponent> components;
};

inline double log_gaussian_pdf(const Vec2& x, const Gaussian2D& g) {
    const double a = g.cov[0][0];
    const double b = g.cov[0][1];
    const double d = g.cov[1][1];
    const double det = a * d - b * b;
    if (!(det > 0.0) || !(a + d > 0.0))
        throw DegenerateCovarianceError("covariance matrix is not positive definite");
    const double dx = x[0] - g.mean[0];
    const double dy = x[1] - g.mean[1];
    const double quad = (dx * (d * dx - b * dy) + dy * (a * dy - b * dx)) / det;
    constexpr double log_two_pi = 1.8378770664093454835606594728112;
    return -log_two_pi - 0.5 * std::log(det) - 0.5 * quad;
}

inline double gaussian_pdf(const Vec2& x, const Gaussian2D& g) {
    return std::exp(log_gaussian_pdf(x, g));
}

inline double log_gmm_pdf(const Vec2& x, const Gmm2D& m) {
    if (m.components.empty()) throw std::invalid_argument("mixture has no components");
    double max_term = -std::numeric_limits<double>::infinity();
    std::vector<double> terms;
    terms.reserve(m.components.size());
    for (const GmmComponent& c : m.components) {
        const double t = std::log(c.weight) + log_gaussian_pdf(x, c.gaussian);
        terms.push_back(t);
        max_term = std::max(max_term, t);
    }
    double sum = 0.0;
    for (double t : terms) sum += std::exp(t - max_term);
    return max_term + std::log(sum);
}

inline double gmm_pdf(const Vec2& x, const Gmm2D& m) {
    return std::exp(log_gmm_pdf(x, m));
}

// --- EM fitting --------------------------------------------------------------

struct EmOptions {
    int max_iters = 200;
    double tol = 1e-6;       // relative log-likelihood change
    double reg_eps = 1e-6;   // added to covariance diagonal every M-step
    int n_restarts = 5;
    std::uint64_t seed = 0;
    int min_support = 2;     // components below this responsibility mass are dropped
};

struct FitDiagnostics {
    double final_log_likelihood = 0.0;
    int iterations = 0;
    int k_effective = 0;
    // Per-iteration total log-likelihood of the winning restart, restarted
    // whenever a low-support component was dropped, so the recorded sequence
    // always refers to one fixed mixture structure.
    std::vector<double> log_likelihood_history;
};

struct FitResult {
    Gmm2D model;
    FitDiagnostics diagnostics;
};

namespace detail_em {

inline double dist2(const Vec2& p, const Vec2& q) {
    const double dx = p[0] - q[0];
    const double dy = p[1] - q[1];
    return dx * dx + dy * dy;
}

inline std::vector<Vec2> kmeanspp_centers(const std::vector<Vec2>& points, int k, SplitMix64& rng) {
    const std::size_t n = points.size();
    std::vector<Vec2> centers;
    centers.reserve(static_cast<std::size_t>(k));
    centers.push_back(points[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1))]);
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = dist2(points[i], centers[0]);
    while (centers.size() < static_cast<std::size_t>(k)) {
        double total = 0.0;
        for (double v : d2) total += v;
        const double u = rng.next_double() * total;
        double cum = 0.0;
        std::size_t pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            cum += d2[i];
            if (cum > u) {
                pick = i;
                break;
            }
        }
        centers.push_back(points[pick]);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], dist2(points[i], centers.back()));
    }
    return centers;
}

struct RunOutcome {
    Gmm2D model;
    std::vector<double> history;
    int iterations = 0;
};

inline RunOutcome run_em_once(const std::vector<Vec2>& points, int k, const EmOptions& opts,
                              std::uint64_t seed) {
    const std::size_t n = points.size();
    SplitMix64 rng(seed);

    // Hard-assignment initialization from k-means++ centers.
    std::vector<Vec2> centers = kmeanspp_centers(points, k, rng);
    Gmm2D model;
    {
        std::vector<int> assign(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            double best = dist2(points[i], centers[0]);
            for (int c = 1; c < k; ++c) {
                const double d = dist2(points[i], centers[static_cast<std::size_t>(c)]);
                if (d < best) {
                    best = d;
                    assign[i] = c;
                }
            }
        }
        for (int c = 0; c < k; ++c) {
            double count = 0.0, sx = 0.0, sy = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (assign[i] != c) continue;
                count += 1.0;
                sx += points[i][0];
                sy += points[i][1];
            }
            GmmComponent comp;
            if (count > 0.0) {
                comp.weight = count / static_cast<double>(n);
                comp.gaussian.mean = {sx / count, sy / count};
                double sxx = 0.0, sxy = 0.0, syy = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (assign[i] != c) continue;
                    const double dx = points[i][0] - comp.gaussian.mean[0];
                    const double dy = points[i][1] - comp.gaussian.mean[1];
                    sxx += dx * dx;
                    sxy += dx * dy;
                    syy += dy * dy;
                }
                comp.gaussian.cov = {{{sxx / count + opts.reg_eps, sxy / count},
                                      {sxy / count, syy / count + opts.reg_eps}}};
            } else {
                comp.weight = 1.0 / static_cast<double>(n);
                comp.gaussian.mean = centers[static_cast<std::size_t>(c)];
                comp.gaussian.cov = {{{opts.reg_eps, 0.0}, {0.0, opts.reg_eps}}};
            }
            model.components.push_back(comp);
        }
        double wsum = 0.0;
        for (const auto& comp : model.components) wsum += comp.weight;
        for (auto& comp : model.components) comp.weight /= wsum;
    }

    RunOutcome out;
    double prev_ll = -std::numeric_limits<double>::infinity();
    Gmm2D before_mstep;
    std::vector<double> resp;
    const int max_iters = std::max(1, opts.max_iters);
    for (int iter = 0; iter < max_iters; ++iter) {
        const std::size_t kk = model.components.size();
        resp.assign(n * kk, 0.0);
        double ll = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double max_term = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < kk; ++c) {
                const double t = std::log(model.components[c].weight) +
                                 log_gaussian_pdf(points[i], model.components[c].gaussian);
                resp[i * kk + c] = t;
                max_term = std::max(max_term, t);
            }
            double sum = 0.0;
            for (std::size_t c = 0; c < kk; ++c) sum += std::exp(resp[i * kk + c] - max_term);
            const double lse = max_term + std::log(sum);
            ll += lse;
            for (std::size_t c = 0; c < kk; ++c) resp[i * kk + c] = std::exp(resp[i * kk + c] - lse);
        }

        // The ridge on the covariance makes the M-step approximate, so the
        // classic EM guarantee can fail once clusters shrink to the
        // regularization scale. A step that lowered the likelihood is rolled
        // back and the run stops there, keeping the recorded history
        // non-decreasing.
        if (!out.history.empty() &&
            ll < out.history.back() - 1e-12 * (1.0 + std::abs(out.history.back()))) {
            model = before_mstep;
            break;
        }
        out.history.push_back(ll);
        ++out.iterations;
        if (std::abs(ll - prev_ll) <= opts.tol * (1.0 + std::abs(ll))) break;
        prev_ll = ll;

        std::vector<double> mass(kk, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < kk; ++c) mass[c] += resp[i * kk + c];

        // Drop the weakest component when its support falls below the
        // threshold; the likelihood sequence restarts because the model
        // structure changed.
        if (kk > 1) {
            const auto weakest = std::min_element(mass.begin(), mass.end());
            if (*weakest < static_cast<double>(opts.min_support)) {
                const std::size_t drop = static_cast<std::size_t>(weakest - mass.begin());
                model.components.erase(model.components.begin() + static_cast<std::ptrdiff_t>(drop));
                double wsum = 0.0;
                for (const auto& comp : model.components) wsum += comp.weight;
                for (auto& comp : model.components) comp.weight /= wsum;
                out.history.clear();
                prev_ll = -std::numeric_limits<double>::infinity();
                continue;
            }
        }

        before_mstep = model;
        for (std::size_t c = 0; c < kk; ++c) {
            double sx = 0.0, sy = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                sx += resp[i * kk + c] * points[i][0];
                sy += resp[i * kk + c] * points[i][1];
            }
            GmmComponent& comp = model.components[c];
            comp.weight = mass[c] / static_cast<double>(n);
            comp.gaussian.mean = {sx / mass[c], sy / mass[c]};
            double sxx = 0.0, sxy = 0.0, syy = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double dx = points[i][0] - comp.gaussian.mean[0];
                const double dy = points[i][1] - comp.gaussian.mean[1];
                const double w = resp[i * kk + c];
                sxx += w * dx * dx;
                sxy += w * dx * dy;
                syy += w * dy * dy;
            }
            comp.gaussian.cov = {{{sxx / mass[c] + opts.reg_eps, sxy / mass[c]},
                                  {sxy / mass[c], syy / mass[c] + opts.reg_eps}}};
        }
    }
    // A prune on the very last iteration leaves the history cleared; score the
    // final structure so every run reports at least one likelihood value.
    if (out.history.empty()) {
        double ll = 0.0;
        for (const Vec2& p : points) ll += log_gmm_pdf(p, model);
        out.history.push_back(ll);
        ++out.iterations;
    }
    out.model = std::move(model);
    return out;
}

}  // namespace detail_em

inline FitResult fit_gmm_em(const std::vector<Vec2>& points, int k_max, const EmOptions& opts = {}) {
    if (points.empty()) throw std::invalid_argument("fit_gmm_em: no points");
    if (k_max < 1) throw std::invalid_argument("fit_gmm_em: k_max must be >= 1");

    std::set<std::pair<double, double>> distinct;
    for (const Vec2& p : points) distinct.insert({p[0], p[1]});
    const int support_cap =
        std::max<int>(1, static_cast<int>(points.size()) / std::max(1, opts.min_support));
    const int k = std::max(
        1, std::min({k_max, static_cast<int>(distinct.size()), support_cap}));

    FitResult best;
    double best_ll = -std::numeric_limits<double>::infinity();
    const int restarts = std::max(1, opts.n_restarts);
    for (int r = 0; r < restarts; ++r) {
        detail_em::RunOutcome out =
            detail_em::run_em_once(points, k, opts, derive_seed(opts.seed, static_cast<std::uint64_t>(r)));
        const double ll = out.history.back();
        if (best.model.components.empty() || ll > best_ll) {
            best_ll = ll;
            best.model = std::move(out.model);
            best.diagnostics.log_likelihood_history = std::move(out.history);
            best.diagnostics.iterations = out.iterations;
        }
    }
    best.diagnostics.final_log_likelihood = best_ll;
    best.diagnostics.k_effective = static_cast<int>(best.model.components.size());
    return best;
}

// --- per-(group, class, other-group) feature bank ----------------------------

struct BankKey {
    std::string group;
    std::string cls;
    std::string other_group;

    auto operator<=>(const BankKey&) const = default;

    std::string to_string() const { return group + "|" + cls + "|" + other_group; }
};

struct GroupPriors {
    std::vector<std::string> classes;  // catalog order
    std::vector<double> p;             // Laplace-smoothed class frequencies, sums to 1
};

struct GmmFeatureBank {
    std::map<BankKey, Gmm2D> entries;
    std::map<std::string, GroupPriors> priors;
    int min_points = 10;
};

struct BankOptions {
    EmOptions em;
    int min_points = 10;
    std::uint64_t seed = 0;
    int threads = 0;  // <= 0: hardware concurrency
};

struct BankDiagnostics {
    std::size_t n_entries = 0;
    std::size_t n_skipped_low_support = 0;
    std::vector<std::string> warnings;
};

struct BankBuildResult {
    GmmFeatureBank bank;
    BankDiagnostics diagnostics;
};

// Pools (candidate aspect ratio, area ratio to a context box) pairs per
// (group, class, context group) and fits a mixture with at most u(context
// group) components to each pool.
inline BankBuildResult build_feature_bank(const std::vector<Scene>& train_scenes,
                                          const Catalog& catalog, const BankOptions& opts = {}) {
    BankBuildResult result;
    result.bank.min_points = opts.min_points;

    std::map<BankKey, std::vector<Vec2>> pools;
    std::map<std::string, std::map<std::string, std::size_t>> class_counts;

    for (const Scene& scene : train_scenes) {
        std::vector<double> areas(scene.boxes.size());
        std::vector<double> ratios(scene.boxes.size());
        for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
            areas[i] = frontal_area(scene.boxes[i]);
            ratios[i] = aspect_ratio(scene.boxes[i]);
        }
        for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
            const DetectedBox& candidate = scene.boxes[i];
            if (!candidate.class_id) continue;
            ++class_counts[candidate.group_id][*candidate.class_id];
            for (std::size_t k = 0; k < scene.boxes.size(); ++k) {
                if (k == i) continue;
                pools[{candidate.group_id, *candidate.class_id, scene.boxes[k].group_id}].push_back(
                    {ratios[i], areas[k] / areas[i]});
            }
        }
    }

    // Priors over the catalog's class list, +1 smoothing, for every group
    // that produced at least one training candidate.
    for (const GroupSpec& group : catalog.groups) {
        const auto counts_it = class_counts.find(group.group_id);
        if (counts_it == class_counts.end()) {
            result.diagnostics.warnings.push_back("group " + group.group_id +
                                                  " has no training candidates; omitted");
            continue;
        }
        GroupPriors priors;
        double total = 0.0;
        for (const VariantSpec& v : group.variants) {
            priors.classes.push_back(v.class_id);
            const auto it = counts_it->second.find(v.class_id);
            const double c = (it == counts_it->second.end() ? 0.0 : static_cast<double>(it->second)) + 1.0;
            priors.p.push_back(c);
            total += c;
        }
        for (double& p : priors.p) p /= total;
        result.bank.priors.emplace(group.group_id, std::move(priors));
    }

    std::vector<std::pair<const BankKey*, const std::vector<Vec2>*>> jobs;
    for (const auto& [key, points] : pools) {
        if (static_cast<int>(points.size()) < opts.min_points) {
            ++result.diagnostics.n_skipped_low_support;
            continue;
        }
        jobs.emplace_back(&key, &points);
    }

    std::vector<Gmm2D> fitted(jobs.size());
    detail::parallel_for(jobs.size(), opts.threads, [&](std::size_t j) {
        const BankKey& key = *jobs[j].first;
        EmOptions em = opts.em;
        em.seed = derive_seed(opts.seed, fnv1a(key.to_string()));
        const int k_max = static_cast<int>(catalog.variant_count(key.other_group));
        fitted[j] = fit_gmm_em(*jobs[j].second, k_max, em).model;
    });
    for (std::size_t j = 0; j < jobs.size(); ++j)
        result.bank.entries.emplace(*jobs[j].first, std::move(fitted[j]));
    result.diagnostics.n_entries = result.bank.entries.size();
    return result;
}

// Log-density assigned to classes whose (group, class, context-group) pool was
// never fitted; keeps them reachable without dominating.
constexpr double kLogMissingEntryFloor = -27.631021115928547;  // log(1e-12)
constexpr double kLogUnderflow = -690.77552789821371;          // log(1e-300)

// Posterior over g's classes given one context observation x = (candidate
// aspect ratio, area ratio to the context box). Falls back to the priors when
// every class density underflows.
inline std::vector<double> class_posteriors(const GmmFeatureBank& bank, const std::string& g,
                                            const std::string& gw, const Vec2& x) {
    const auto priors_it = bank.priors.find(g);
    if (priors_it == bank.priors.end())
        throw std::invalid_argument("class_posteriors: group " + g + " not in bank");
    const GroupPriors& priors = priors_it->second;
    const std::size_t n = priors.classes.size();

    std::vector<double> log_lik(n, kLogMissingEntryFloor);
    bool any_above_underflow = false;
    for (std::size_t c = 0; c < n; ++c) {
        const auto entry = bank.entries.find({g, priors.classes[c], gw});
        if (entry != bank.entries.end()) log_lik[c] = log_gmm_pdf(x, entry->second);
        if (log_lik[c] >= kLogUnderflow) any_above_underflow = true;
    }
    if (!any_above_underflow) return priors.p;

    std::vector<double> post(n);
    double max_term = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
        post[c] = std::log(priors.p[c]) + log_lik[c];
        max_term = std::max(max_term, post[c]);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
        post[c] = std::exp(post[c] - max_term);
        sum += post[c];
    }
    for (double& p : post) p /= sum;
    return post;
}

// --- serialization -----------------------------------------------------------

inline nlohmann::json gmm_to_json(const Gmm2D& m) {
    nlohmann::json components = nlohmann::json::array();
    for (const GmmComponent& c : m.components) {
        components.push_back({{"w", c.weight},
                              {"mean", {c.gaussian.mean[0], c.gaussian.mean[1]}},
                              {"cov",
                               {{c.gaussian.cov[0][0], c.gaussian.cov[0][1]},
                                {c.gaussian.cov[1][0], c.gaussian.cov[1][1]}}}});
    }
    return nlohmann::json{{"components", std::move(components)}};
}

inline Gmm2D gmm_from_json(const nlohmann::json& j) {
    Gmm2D m;
    for (const nlohmann::json& jc : j.at("components")) {
        GmmComponent c;
        c.weight = jc.at("w").get<double>();
        c.gaussian.mean = {jc.at("mean")[0].get<double>(), jc.at("mean")[1].get<double>()};
        c.gaussian.cov = {{{jc.at("cov")[0][0].get<double>(), jc.at("cov")[0][1].get<double>()},
                           {jc.at("cov")[1][0].get<double>(), jc.at("cov")[1][1].get<double>()}}};
        m.components.push_back(c);
    }
    return m;
}

inline nlohmann::json bank_to_json(const GmmFeatureBank& bank) {
    nlohmann::json entries = nlohmann::json::object();
    for (const auto& [key, model] : bank.entries) {
        for (const std::string* part : {&key.group, &key.cls, &key.other_group})
            if (part->find('|') != std::string::npos)
                throw std::invalid_argument("bank ids must not contain '|': " + *part);
        entries[key.to_string()] = gmm_to_json(model);
    }
    nlohmann::json priors = nlohmann::json::object();
    for (const auto& [group, gp] : bank.priors)
        priors[group] = {{"classes", gp.classes}, {"p", gp.p}};
    return nlohmann::json{
        {"min_points", bank.min_points}, {"priors", std::move(priors)}, {"entries", std::move(entries)}};
}

inline GmmFeatureBank bank_from_json(const nlohmann::json& j) {
    GmmFeatureBank bank;
    bank.min_points = j.at("min_points").get<int>();
    for (const auto& [group, jp] : j.at("priors").items()) {
        GroupPriors gp;
        gp.classes = jp.at("classes").get<std::vector<std::string>>();
        gp.p = jp.at("p").get<std::vector<double>>();
        bank.priors.emplace(group, std::move(gp));
    }
    for (const auto& [key_str, jm] : j.at("entries").items()) {
        const std::size_t p1 = key_str.find('|');
        const std::size_t p2 = key_str.find('|', p1 + 1);
        if (p1 == std::string::npos || p2 == std::string::npos)
            throw std::runtime_error("malformed bank entry key: " + key_str);
        BankKey key{key_str.substr(0, p1), key_str.substr(p1 + 1, p2 - p1 - 1),
                    key_str.substr(p2 + 1)};
        bank.entries.emplace(std::move(key), gmm_from_json(jm));
    }
    return bank;
}

}  // namespace sizevar::gmm
