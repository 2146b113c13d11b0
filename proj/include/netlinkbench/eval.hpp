#pragma once

#include "common.hpp"
#include "features.hpp"
#include "gnn.hpp"
#include "graph.hpp"
#include "pgm.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>

namespace nlb {

/// Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg), via one sort with midranks.
inline double auc(std::span<const double> pos, std::span<const double> neg) {
    if (pos.empty() || neg.empty()) throw Error("auc needs nonempty positive and negative score lists");
    struct Item {
        double score;
        bool positive;
    };
    std::vector<Item> items;
    items.reserve(pos.size() + neg.size());
    for (double s : pos) items.push_back({s, true});
    for (double s : neg) items.push_back({s, false});
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
    // Rank sums are kept doubled so that midranks stay integral.
    long double doubled_rank_sum = 0;
    for (std::size_t i = 0; i < items.size();) {
        std::size_t j = i;
        std::size_t n_pos = 0;
        while (j < items.size() && items[j].score == items[i].score) n_pos += items[j++].positive;
        doubled_rank_sum += static_cast<long double>(n_pos) * static_cast<long double>(i + 1 + j);
        i = j;
    }
    const auto P = static_cast<long double>(pos.size());
    const auto N = static_cast<long double>(neg.size());
    const long double doubled_u = doubled_rank_sum - P * (P + 1);
    return static_cast<double>(doubled_u / 2) / static_cast<double>(P * N);
}

inline double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
    return auc(std::span<const double>(pos), std::span<const double>(neg));
}

enum class Family { mt, mtcov, gae, vgae };
enum class FeaturePolicy { none, structure, attribute, clustered };

inline const char* to_string(Family f) {
    switch (f) {
    case Family::mt: return "mt";
    case Family::mtcov: return "mtcov";
    case Family::gae: return "gae";
    case Family::vgae: return "vgae";
    }
    return "?";
}

inline const char* to_string(FeaturePolicy p) {
    switch (p) {
    case FeaturePolicy::none: return "none";
    case FeaturePolicy::structure: return "structure";
    case FeaturePolicy::attribute: return "attribute";
    case FeaturePolicy::clustered: return "clustered";
    }
    return "?";
}

inline Family family_from_string(const std::string& s) {
    if (s == "mt" || s == "multitensor") return Family::mt;
    if (s == "mtcov") return Family::mtcov;
    if (s == "gae") return Family::gae;
    if (s == "vgae") return Family::vgae;
    throw Error("unknown model family '" + s + "'");
}

inline FeaturePolicy policy_from_string(const std::string& s) {
    if (s == "none") return FeaturePolicy::none;
    if (s == "structure") return FeaturePolicy::structure;
    if (s == "attribute") return FeaturePolicy::attribute;
    if (s == "clustered") return FeaturePolicy::clustered;
    throw Error("unknown feature policy '" + s + "'");
}

inline bool is_gnn(Family f) { return f == Family::gae || f == Family::vgae; }

struct ModelSpec {
    Family family = Family::mt;
    FeaturePolicy feature_policy = FeaturePolicy::none;
    PgmFitConfig pgm;       // mt, mtcov
    double gamma = 0.5;     // mtcov
    GnnConfig gnn;          // gae, vgae
    std::size_t clusters = 0;  // k-means clusters for the clustered policy; 0 = dataset default

    void validate() const {
        if (feature_policy == FeaturePolicy::none && family != Family::mt)
            throw Error(std::string("feature policy 'none' is only valid for mt, not ") + to_string(family));
        if (family == Family::mt && feature_policy != FeaturePolicy::none)
            throw Error("mt takes no node features");
        if (is_gnn(family) && gnn.variational != (family == Family::vgae))
            throw Error("GNN variational flag disagrees with the model family");
    }

    /// Number of fitted parameters for a graph of n nodes and input dimension f.
    std::size_t parameter_count(std::size_t n, std::size_t f, std::size_t z) const {
        if (!is_gnn(family)) return 2 * n * pgm.K + pgm.K * pgm.K + (family == Family::mtcov ? pgm.K * z : 0);
        const std::size_t h = gnn.hidden_dim;
        std::size_t count = (gnn.n_layers == 2 ? f * h + h * h : f * h);
        if (gnn.variational) count += gnn.n_layers == 2 ? h * h : f * h;
        return count;
    }
};

inline nlohmann::json to_json(const ModelSpec& s) {
    nlohmann::json j{{"family", to_string(s.family)}, {"feature_policy", to_string(s.feature_policy)}};
    if (is_gnn(s.family)) {
        j["gnn"] = to_json(s.gnn);
        if (s.feature_policy == FeaturePolicy::clustered) j["clusters"] = s.clusters;
    } else {
        j["pgm"] = to_json(s.pgm);
        if (s.family == Family::mtcov) j["gamma"] = s.gamma;
    }
    return j;
}

/// Inverse of to_json; missing blocks take their defaults. A VGAE's variational flag follows the family.
inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.family = family_from_string(j.at("family").get<std::string>());
    const std::string default_policy = s.family == Family::mt ? "none" : s.family == Family::mtcov ? "clustered" : "structure";
    s.feature_policy = policy_from_string(j.value("feature_policy", default_policy));
    if (j.contains("pgm")) s.pgm = pgm_config_from_json(j.at("pgm"));
    s.gamma = j.value("gamma", s.gamma);
    if (j.contains("gnn")) s.gnn = gnn_config_from_json(j.at("gnn"));
    s.gnn.variational = s.family == Family::vgae;
    s.clusters = j.value("clusters", s.clusters);
    s.validate();
    return s;
}

/// Compact, stable one-line description of the hyperparameters (used in CSV rows).
inline std::string describe(const ModelSpec& s) {
    std::ostringstream o;
    if (is_gnn(s.family))
        o << "lr=" << s.gnn.learning_rate << ";wd=" << s.gnn.weight_decay << ";dropout=" << s.gnn.dropout
          << ";hidden=" << s.gnn.hidden_dim << ";layers=" << s.gnn.n_layers << ";epochs=" << s.gnn.epochs
          << ";patience=" << s.gnn.patience << ";seed=" << s.gnn.seed;
    else
        o << "K=" << s.pgm.K << (s.family == Family::mtcov ? ";gamma=" + std::to_string(s.gamma) : std::string())
          << ";restarts=" << s.pgm.n_restarts << ";max_iter=" << s.pgm.max_iter << ";seed=" << s.pgm.seed;
    return o.str();
}

/// Graph plus whatever node information the models may consume.
struct Dataset {
    Graph graph;
    std::optional<FeatureMatrix> attributes;   // attribute-based GNN features
    std::optional<NodeLabels> scalar_attribute;  // MTCOV's categorical attribute
    std::size_t n_categories = 0;                // range of scalar_attribute
    std::optional<NodeLabels> labels;            // class labels (homophily, cluster count)
    std::size_t default_clusters = 5;            // k-means k when neither spec nor labels decide
    std::uint64_t cluster_seed = 0;

    std::size_t cluster_count(const ModelSpec& s) const {
        if (s.clusters > 0) return s.clusters;
        if (labels) return static_cast<std::size_t>(labels->n_classes());
        return default_clusters;
    }
};

/// Scores a dyad as seen from a given evaluation phase.
using PhaseScorer = std::function<double(Phase, NodeId, NodeId)>;
using Fitter = std::function<PhaseScorer(const EdgeSplit&)>;

struct FoldAuc {
    double val = 0.0;
    double test = 0.0;
};

inline FoldAuc score_split(const PhaseScorer& scorer, const EdgeSplit& split) {
    auto collect = [&](Phase ph, const std::vector<Dyad>& list) {
        std::vector<double> s;
        s.reserve(list.size());
        for (const auto& d : list) s.push_back(scorer(ph, d.src, d.dst));
        return s;
    };
    FoldAuc r;
    if (!split.val_pos.empty() && !split.val_neg.empty())
        r.val = auc(collect(Phase::val, split.val_pos), collect(Phase::val, split.val_neg));
    else
        r.val = std::numeric_limits<double>::quiet_NaN();
    r.test = auc(collect(Phase::test, split.test_pos), collect(Phase::test, split.test_neg));
    return r;
}

struct AucReport {
    std::vector<double> per_fold;      // test AUC
    std::vector<double> val_per_fold;  // validation AUC
    double mean = 0.0;
    double std = 0.0;
    double val_mean = 0.0;
    ModelSpec spec;
    std::uint64_t split_seed = 0;
};

/// Mean and population standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), 0.0};
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / static_cast<double>(v.size()))};
}

inline AucReport make_report(std::vector<FoldAuc> folds, const ModelSpec& spec, std::uint64_t split_seed) {
    AucReport r;
    r.spec = spec;
    r.split_seed = split_seed;
    for (const auto& f : folds) {
        r.per_fold.push_back(f.test);
        r.val_per_fold.push_back(f.val);
    }
    std::tie(r.mean, r.std) = mean_std(r.per_fold);
    r.val_mean = mean_std(r.val_per_fold).first;
    return r;
}

/// Runs `fit` on every split and collects validation and test AUC. Fold errors are rethrown
/// with the fold index.
inline std::vector<FoldAuc> evaluate_folds(const Fitter& fit, const std::vector<EdgeSplit>& splits,
                                           std::size_t jobs = 1) {
    std::vector<FoldAuc> out(splits.size());
    parallel_for(splits.size(), jobs, [&](std::size_t f) {
        try {
            out[f] = score_split(fit(splits[f]), splits[f]);
        } catch (const std::exception& e) {
            throw Error("fold " + std::to_string(splits[f].fold_index) + ": " + e.what());
        }
    });
    return out;
}

namespace detail {

/// Train-phase structure rows clustered by k-means, as the fold's scalar attribute.
inline NodeLabels structure_clusters(const Dataset& d, const EdgeSplit& split, std::size_t k) {
    return kmeans(masked_adjacency(d.graph, split, Phase::train), k, d.cluster_seed).assignments;
}

inline PhaseFeatures gnn_features(const Dataset& d, const ModelSpec& spec, const EdgeSplit& split) {
    switch (spec.feature_policy) {
    case FeaturePolicy::structure: return PhaseFeatures::structure(d.graph, split);
    case FeaturePolicy::attribute:
        if (!d.attributes) throw Error("attribute policy requires attribute features");
        return PhaseFeatures::fixed(*d.attributes);
    case FeaturePolicy::clustered: {
        const std::size_t k = d.cluster_count(spec);
        if (d.attributes) return PhaseFeatures::fixed(clustered_feature(*d.attributes, k, d.cluster_seed));
        // Clusters of the training-visible structure rows, shared by every phase.
        const auto labels = structure_clusters(d, split, k);
        FeatureMatrix x{Matrix(static_cast<Eigen::Index>(labels.size()), 1), FeatureKind::clustered};
        for (std::size_t i = 0; i < labels.size(); ++i) x.values(static_cast<Eigen::Index>(i), 0) = labels[i];
        return PhaseFeatures::fixed(x);
    }
    case FeaturePolicy::none: break;
    }
    throw Error("GNN models need a feature policy");
}

}  // namespace detail

/// Fits one model on a fold and returns its dyad scorer.
inline PhaseScorer fit_model(const ModelSpec& spec, const Dataset& d, const EdgeSplit& split) {
    spec.validate();
    switch (spec.family) {
    case Family::mt: {
        auto fit = mt_fit(d.graph, split, spec.pgm);
        return [p = std::move(fit.params.base)](Phase, NodeId i, NodeId j) { return mt_score(p, i, j); };
    }
    case Family::mtcov: {
        NodeLabels attrs;
        std::size_t z = 0;
        if (d.scalar_attribute) {
            attrs = *d.scalar_attribute;
            z = d.n_categories ? d.n_categories : static_cast<std::size_t>(attrs.n_classes());
        } else {
            z = d.cluster_count(spec);
            attrs = detail::structure_clusters(d, split, z);
        }
        auto fit = mtcov_fit(d.graph, split, attrs, z, spec.gamma, spec.pgm);
        return [p = std::move(fit.params.base)](Phase, NodeId i, NodeId j) { return mt_score(p, i, j); };
    }
    case Family::gae:
    case Family::vgae: {
        const auto X = detail::gnn_features(d, spec, split);
        const auto trained = train(d.graph, split, X, spec.gnn);
        auto Zval = embed(trained.model, d.graph, split, X, Phase::val).Z;
        auto Ztest = embed(trained.model, d.graph, split, X, Phase::test).Z;
        return [Zval = std::move(Zval), Ztest = std::move(Ztest)](Phase ph, NodeId i, NodeId j) {
            return gnn_score(ph == Phase::test ? Ztest : Zval, i, j);
        };
    }
    }
    throw Error("unknown model family");
}

inline AucReport evaluate(const ModelSpec& spec, const Dataset& d, const std::vector<EdgeSplit>& splits,
                          std::size_t jobs = 1) {
    spec.validate();
    auto folds = evaluate_folds([&](const EdgeSplit& s) { return fit_model(spec, d, s); }, splits, jobs);
    return make_report(std::move(folds), spec, splits.empty() ? 0 : splits.front().seed);
}

struct Candidate {
    std::size_t param_count = 0;
    std::vector<FoldAuc> folds;

    double val_mean() const {
        std::vector<double> v;
        for (const auto& f : folds) v.push_back(f.val);
        return mean_std(v).first;
    }
};

/// Highest mean validation AUC; ties go to fewer parameters, then to the earlier candidate.
/// Only validation AUC is inspected.
inline std::size_t select_best(const std::vector<Candidate>& cands) {
    if (cands.empty()) throw Error("grid search over an empty grid");
    std::size_t best = 0;
    for (std::size_t c = 1; c < cands.size(); ++c) {
        const double a = cands[c].val_mean(), b = cands[best].val_mean();
        if (a > b || (a == b && cands[c].param_count < cands[best].param_count)) best = c;
    }
    return best;
}

struct GridResult {
    ModelSpec best;
    AucReport report;
    std::vector<AucReport> all;  // one per grid point, in grid order
};

inline GridResult grid_search(const std::vector<ModelSpec>& grid, const Dataset& d,
                              const std::vector<EdgeSplit>& splits, std::size_t jobs = 1) {
    if (grid.empty()) throw Error("grid search over an empty grid");
    std::vector<Candidate> cands(grid.size());
    const std::size_t n_folds = splits.size();
    std::vector<std::vector<FoldAuc>> results(grid.size(), std::vector<FoldAuc>(n_folds));
    parallel_for(grid.size() * n_folds, jobs, [&](std::size_t job) {
        const std::size_t c = job / n_folds, f = job % n_folds;
        try {
            results[c][f] = score_split(fit_model(grid[c], d, splits[f]), splits[f]);
        } catch (const std::exception& e) {
            throw Error("fold " + std::to_string(splits[f].fold_index) + ": " + e.what());
        }
    });
    const std::size_t n = d.graph.n_nodes();
    GridResult out;
    for (std::size_t c = 0; c < grid.size(); ++c) {
        std::size_t f_dim = 1;
        if (grid[c].feature_policy == FeaturePolicy::structure) f_dim = n;
        if (grid[c].feature_policy == FeaturePolicy::attribute && d.attributes)
            f_dim = static_cast<std::size_t>(d.attributes->n_features());
        cands[c].param_count = grid[c].parameter_count(n, f_dim, d.n_categories);
        cands[c].folds = results[c];
        out.all.push_back(make_report(results[c], grid[c], splits.empty() ? 0 : splits.front().seed));
    }
    const std::size_t best = select_best(cands);
    out.best = grid[best];
    out.report = out.all[best];
    return out;
}

/// Cartesian product of per-hyperparameter value lists, in lexicographic order.
struct HyperGrid {
    std::vector<std::size_t> K{2, 3, 4, 5, 6, 7, 8, 9, 10};
    std::vector<double> gamma{0.1, 0.5, 0.9};
    std::vector<double> learning_rate{0.001, 0.01, 0.1};
    std::vector<double> weight_decay{0.0001, 0.001, 0.01};
    std::vector<double> dropout{0.0, 0.3, 0.5};
    std::vector<std::size_t> hidden_dim{32, 64, 128};
    std::vector<std::size_t> n_layers{1, 2};
};

inline HyperGrid hyper_grid_from_json(const nlohmann::json& j) {
    HyperGrid g;
    g.K = j.value("K", g.K);
    g.gamma = j.value("gamma", g.gamma);
    g.learning_rate = j.value("learning_rate", g.learning_rate);
    g.weight_decay = j.value("weight_decay", g.weight_decay);
    g.dropout = j.value("dropout", g.dropout);
    g.hidden_dim = j.value("hidden_dim", g.hidden_dim);
    g.n_layers = j.value("n_layers", g.n_layers);
    return g;
}

inline nlohmann::json to_json(const HyperGrid& g) {
    return {{"K", g.K},         {"gamma", g.gamma},         {"learning_rate", g.learning_rate},
            {"weight_decay", g.weight_decay}, {"dropout", g.dropout}, {"hidden_dim", g.hidden_dim},
            {"n_layers", g.n_layers}};
}

inline std::vector<ModelSpec> expand_grid(const ModelSpec& base, const HyperGrid& g) {
    std::vector<ModelSpec> out;
    if (!is_gnn(base.family)) {
        const std::vector<double> gammas = base.family == Family::mtcov ? g.gamma : std::vector<double>{base.gamma};
        for (auto k : g.K)
            for (auto gm : gammas) {
                ModelSpec s = base;
                s.pgm.K = k;
                s.gamma = gm;
                out.push_back(s);
            }
        return out;
    }
    for (auto lr : g.learning_rate)
        for (auto wd : g.weight_decay)
            for (auto dr : g.dropout)
                for (auto h : g.hidden_dim)
                    for (auto l : g.n_layers) {
                        ModelSpec s = base;
                        s.gnn.learning_rate = lr;
                        s.gnn.weight_decay = wd;
                        s.gnn.dropout = dr;
                        s.gnn.hidden_dim = h;
                        s.gnn.n_layers = l;
                        out.push_back(s);
                    }
    return out;
}

}  // namespace nlb
