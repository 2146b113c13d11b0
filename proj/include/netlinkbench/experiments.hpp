#pragma once

#include "eval.hpp"
#include "features.hpp"
#include "gnn.hpp"
#include "graph.hpp"
#include "io.hpp"
#include "pgm.hpp"
#include "synthgen.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace nlb::bench {

namespace fs = std::filesystem;

/// Where the graph comes from: a synthetic block or files on disk.
struct DatasetSource {
    std::optional<SynthConfig> synth;
    bool synth_features = false;  // expose ground-truth memberships as attribute features
    std::string edges, labels, features, attribute;
    bool directed = true;
    bool features_id_column = false;
    std::string name;
};

struct ModelEntry {
    ModelSpec spec;
    std::optional<HyperGrid> grid;
    bool fixed_seed = false;  // otherwise the replicate seed is used
};

struct ExperimentConfig {
    std::string experiment = "evaluate";
    std::uint64_t seed = 0;
    std::size_t replicates = 1;
    std::string output_dir = "results";
    DatasetSource dataset;
    std::vector<ModelEntry> models;
    std::vector<FeaturePolicy> policies{FeaturePolicy::structure, FeaturePolicy::attribute, FeaturePolicy::clustered};
    std::vector<double> rhos{0.0, 0.5, 1.0};
    std::size_t n_folds = 5;
    double val_fraction = 0.1;
    std::size_t clusters = 0;
    std::size_t fold = 0;
    std::size_t jobs = 1;

    void validate() const {
        static const std::vector<std::string> known{"features", "noise", "heterophily", "stats",
                                                    "generate", "evaluate", "fit"};
        if (std::find(known.begin(), known.end(), experiment) == known.end())
            throw Error("unknown experiment '" + experiment + "'");
        if (replicates < 1) throw Error("replicates must be at least 1");
        if (n_folds < 2) throw Error("n_folds must be at least 2");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw Error("val_fraction must lie in [0, 1)");
        if (fold >= n_folds) throw Error("fold index out of range");
        if (jobs < 1) throw Error("jobs must be at least 1");
        for (double r : rhos)
            if (!(r >= 0.0 && r <= 1.0)) throw Error("rho values must lie in [0, 1]");
        if (dataset.synth) dataset.synth->validate();
    }
};

inline ModelEntry model_entry_from_json(const nlohmann::json& j) {
    ModelEntry m;
    m.spec = model_spec_from_json(j);
    if (j.contains("grid")) m.grid = hyper_grid_from_json(j.at("grid"));
    m.fixed_seed = (j.contains("pgm") && j["pgm"].contains("seed")) || (j.contains("gnn") && j["gnn"].contains("seed"));
    return m;
}

inline nlohmann::json to_json(const ModelEntry& m) {
    auto j = to_json(m.spec);
    if (m.grid) j["grid"] = to_json(*m.grid);
    return j;
}

inline DatasetSource dataset_source_from_json(const nlohmann::json& j) {
    DatasetSource d;
    if (j.contains("synth")) d.synth = synth_config_from_json(j.at("synth"));
    d.synth_features = j.value("synth_features", false);
    d.edges = j.value("edges", std::string());
    d.labels = j.value("labels", std::string());
    d.features = j.value("features", std::string());
    d.attribute = j.value("attribute", std::string());
    d.directed = j.value("directed", true);
    d.features_id_column = j.value("features_id_column", false);
    d.name = j.value("name", std::string());
    if (!d.synth && d.edges.empty()) throw Error("dataset needs either 'synth' or 'edges'");
    return d;
}

inline nlohmann::json to_json(const DatasetSource& d) {
    nlohmann::json j{{"name", d.name}, {"directed", d.directed}};
    if (d.synth) {
        j["synth"] = to_json(*d.synth);
        j["synth_features"] = d.synth_features;
    } else {
        j["edges"] = d.edges;
        j["labels"] = d.labels;
        j["features"] = d.features;
        j["attribute"] = d.attribute;
        j["features_id_column"] = d.features_id_column;
    }
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.experiment = j.value("experiment", c.experiment);
    c.seed = j.value("seed", c.seed);
    c.replicates = j.value("replicates", c.replicates);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("dataset")) c.dataset = dataset_source_from_json(j.at("dataset"));
    if (j.contains("models"))
        for (const auto& m : j.at("models")) c.models.push_back(model_entry_from_json(m));
    if (j.contains("policies")) {
        c.policies.clear();
        for (const auto& p : j.at("policies")) c.policies.push_back(policy_from_string(p.get<std::string>()));
    }
    c.rhos = j.value("rhos", c.rhos);
    if (j.contains("split")) {
        c.n_folds = j["split"].value("n_folds", c.n_folds);
        c.val_fraction = j["split"].value("val_fraction", c.val_fraction);
    }
    c.clusters = j.value("clusters", c.clusters);
    c.fold = j.value("fold", c.fold);
    c.jobs = j.value("jobs", c.jobs);
    c.validate();
    return c;
}

/// The configuration with every default filled in.
inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json models = nlohmann::json::array();
    for (const auto& m : c.models) models.push_back(to_json(m));
    nlohmann::json policies = nlohmann::json::array();
    for (auto p : c.policies) policies.push_back(to_string(p));
    return {{"experiment", c.experiment},
            {"seed", c.seed},
            {"replicates", c.replicates},
            {"output_dir", c.output_dir},
            {"dataset", to_json(c.dataset)},
            {"models", models},
            {"policies", policies},
            {"rhos", c.rhos},
            {"split", {{"n_folds", c.n_folds}, {"val_fraction", c.val_fraction}}},
            {"clusters", c.clusters},
            {"fold", c.fold},
            {"jobs", c.jobs}};
}

inline std::uint64_t replicate_seed(std::uint64_t base, std::size_t replicate) { return base + replicate; }

/// One concrete graph plus its node information.
struct Instance {
    Dataset data;
    std::string name;
    std::uint64_t seed = 0;
    std::optional<GroundTruth> gt;
    std::optional<SynthConfig> synth;

    std::optional<double> homophily() const {
        if (!data.labels) return std::nullopt;
        return edge_homophily(data.graph, *data.labels);
    }
};

inline void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw Error(what + " file '" + path + "' does not exist");
}

/// Builds the instance for `seed`. Synthetic data use the ground-truth argmax as class labels
/// and as MTCOV's attribute; the memberships themselves become attribute features when asked.
inline Instance load_instance(const DatasetSource& src, std::uint64_t seed, std::size_t clusters = 0,
                              bool gt_features = false, std::optional<Structure> structure = std::nullopt) {
    Instance inst;
    inst.seed = seed;
    if (src.synth) {
        SynthConfig cfg = *src.synth;
        cfg.seed = seed;
        if (structure) cfg.structure = *structure;
        auto [g, gt] = generate(cfg);
        inst.data.graph = std::move(g);
        const auto argmax = gt_scalar_feature(gt);
        inst.data.labels = argmax;
        inst.data.scalar_attribute = argmax;
        inst.data.n_categories = cfg.n_communities;
        if (gt_features || src.synth_features) inst.data.attributes = FeatureMatrix{gt.U, FeatureKind::attribute};
        inst.data.default_clusters = cfg.n_communities;
        inst.gt = std::move(gt);
        inst.synth = cfg;
        inst.name = src.name.empty() ? std::string("synthetic-") + to_string(cfg.structure) : src.name;
    } else {
        require_file(src.edges, "edge list");
        inst.data.graph = load_edge_list(src.edges, src.directed);
        if (!src.labels.empty()) {
            require_file(src.labels, "label");
            inst.data.labels = load_labels(src.labels, inst.data.graph);
        }
        if (!src.features.empty()) {
            require_file(src.features, "feature");
            inst.data.attributes = load_features(src.features, inst.data.graph, src.features_id_column);
        }
        if (!src.attribute.empty()) {
            require_file(src.attribute, "attribute");
            inst.data.scalar_attribute = load_labels(src.attribute, inst.data.graph);
            inst.data.n_categories = static_cast<std::size_t>(inst.data.scalar_attribute->n_classes());
        }
        inst.name = src.name.empty() ? fs::path(src.edges).stem().string() : src.name;
    }
    if (clusters > 0) inst.data.default_clusters = clusters;
    inst.data.cluster_seed = seed;
    return inst;
}

inline std::vector<EdgeSplit> make_splits(const Instance& inst, const ExperimentConfig& cfg) {
    return split_edges(inst.data.graph, cfg.n_folds, cfg.val_fraction, inst.seed);
}

// ---------------------------------------------------------------------------------------------
// Results

struct ResultRow {
    std::string experiment, dataset;
    std::size_t replicate = 0;
    std::uint64_t seed = 0;
    std::string family, feature_policy, hyperparameters;
    std::optional<double> rho, h;
    std::string fold;  // fold index, "mean" or "std"
    std::string metric;
    std::optional<double> value;
    std::string status = "OK";
    std::string message;
};

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
}

inline std::string format_number(double x) {
    std::ostringstream o;
    o << std::setprecision(17) << x;
    return o.str();
}

/// Long-format CSV; every row is flushed as soon as it is written.
class ResultWriter {
public:
    static constexpr const char* header =
        "experiment,dataset,replicate,seed,family,feature_policy,hyperparameters,rho,h,fold,metric,value,status,message";

    explicit ResultWriter(const std::string& path) : out_(path) {
        if (!out_) throw Error("cannot write '" + path + "'");
        out_ << header << '\n' << std::flush;
    }

    void write(const ResultRow& r) {
        std::lock_guard<std::mutex> lock(mu_);
        auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
        out_ << csv_field(r.experiment) << ',' << csv_field(r.dataset) << ',' << r.replicate << ',' << r.seed << ','
             << r.family << ',' << r.feature_policy << ',' << csv_field(r.hyperparameters) << ',' << opt(r.rho) << ','
             << opt(r.h) << ',' << r.fold << ',' << r.metric << ',' << opt(r.value) << ',' << r.status << ','
             << csv_field(r.message) << '\n'
             << std::flush;
        ++rows_;
        if (r.status != "OK") ++failed_;
    }

    std::size_t rows() const { return rows_; }
    std::size_t failed() const { return failed_; }

private:
    std::ofstream out_;
    std::mutex mu_;
    std::size_t rows_ = 0, failed_ = 0;
};

/// Outcome of one (model, feature policy) arm on one instance. Folds fail independently.
struct ArmResult {
    ModelSpec spec;
    std::vector<std::optional<FoldAuc>> folds;
    std::vector<std::string> fold_errors;
    std::string error;             // whole-arm failure (e.g. during grid search)
    nlohmann::json grid = nullptr;  // per grid point validation/test means

    bool ok() const {
        if (!error.empty()) return false;
        for (const auto& f : folds)
            if (!f) return false;
        return true;
    }
    std::vector<double> test() const {
        std::vector<double> v;
        for (const auto& f : folds)
            if (f) v.push_back(f->test);
        return v;
    }
    std::vector<double> val() const {
        std::vector<double> v;
        for (const auto& f : folds)
            if (f) v.push_back(f->val);
        return v;
    }
};

/// Applies replicate-level defaults to a configured model.
inline ModelSpec concretize(const ModelEntry& m, std::optional<FeaturePolicy> policy, std::uint64_t seed,
                            std::size_t clusters) {
    ModelSpec s = m.spec;
    if (policy) s.feature_policy = *policy;
    if (!m.fixed_seed) {
        s.pgm.seed = seed;
        s.gnn.seed = seed;
    }
    if (s.clusters == 0 && clusters > 0) s.clusters = clusters;
    return s;
}

inline ArmResult run_arm(const ModelEntry& m, const ModelSpec& spec, const Dataset& d,
                         const std::vector<EdgeSplit>& splits, std::size_t jobs) {
    ArmResult r;
    r.spec = spec;
    r.folds.resize(splits.size());
    r.fold_errors.resize(splits.size());
    try {
        if (m.grid) {
            const auto grid = grid_search(expand_grid(spec, *m.grid), d, splits, jobs);
            r.spec = grid.best;
            r.grid = nlohmann::json::array();
            for (const auto& rep : grid.all)
                r.grid.push_back({{"hyperparameters", describe(rep.spec)}, {"val_mean", rep.val_mean}, {"test_mean", rep.mean}});
            for (std::size_t f = 0; f < splits.size(); ++f)
                r.folds[f] = FoldAuc{grid.report.val_per_fold[f], grid.report.per_fold[f]};
            return r;
        }
        spec.validate();
        parallel_for(splits.size(), jobs, [&](std::size_t f) {
            try {
                r.folds[f] = score_split(fit_model(spec, d, splits[f]), splits[f]);
            } catch (const std::exception& e) {
                r.fold_errors[f] = "fold " + std::to_string(splits[f].fold_index) + ": " + e.what();
            }
        });
    } catch (const std::exception& e) {
        r.error = e.what();
    }
    return r;
}

struct RowContext {
    std::string experiment, dataset;
    std::size_t replicate = 0;
    std::uint64_t seed = 0;
    std::optional<double> rho, h;
};

inline ResultRow base_row(const RowContext& ctx, const ArmResult& arm) {
    ResultRow row;
    row.experiment = ctx.experiment;
    row.dataset = ctx.dataset;
    row.replicate = ctx.replicate;
    row.seed = ctx.seed;
    row.family = to_string(arm.spec.family);
    row.feature_policy = to_string(arm.spec.feature_policy);
    row.hyperparameters = describe(arm.spec);
    row.rho = ctx.rho;
    row.h = ctx.h;
    return row;
}

/// Per-fold rows of `metric` plus mean and std rows. `values[f]` empty marks a failed fold.
inline void write_metric(ResultWriter& w, const RowContext& ctx, const ArmResult& arm, const std::string& metric,
                         const std::vector<std::optional<double>>& values) {
    std::vector<double> ok;
    std::string first_error = arm.error;
    for (std::size_t f = 0; f < values.size(); ++f) {
        auto row = base_row(ctx, arm);
        row.fold = std::to_string(f);
        row.metric = metric;
        if (values[f]) {
            row.value = values[f];
            ok.push_back(*values[f]);
        } else {
            row.status = "FAILED";
            row.message = f < arm.fold_errors.size() && !arm.fold_errors[f].empty() ? arm.fold_errors[f] : arm.error;
            if (first_error.empty()) first_error = row.message;
        }
        w.write(row);
    }
    const bool complete = ok.size() == values.size() && !values.empty();
    const auto [m, s] = mean_std(ok);
    for (const char* agg : {"mean", "std"}) {
        auto row = base_row(ctx, arm);
        row.fold = agg;
        row.metric = metric;
        if (complete) {
            row.value = std::string(agg) == "mean" ? m : s;
        } else {
            row.status = "FAILED";
            row.message = first_error.empty() ? "incomplete folds" : first_error;
        }
        w.write(row);
    }
}

inline std::vector<std::optional<double>> test_values(const ArmResult& arm) {
    std::vector<std::optional<double>> v;
    for (const auto& f : arm.folds) v.push_back(f ? std::optional<double>(f->test) : std::nullopt);
    return v;
}

inline nlohmann::json arm_summary(const RowContext& ctx, const ArmResult& arm) {
    nlohmann::json j{{"dataset", ctx.dataset},
                     {"replicate", ctx.replicate},
                     {"seed", ctx.seed},
                     {"spec", to_json(arm.spec)},
                     {"hyperparameters", describe(arm.spec)},
                     {"status", arm.ok() ? "OK" : "FAILED"}};
    if (ctx.rho) j["rho"] = *ctx.rho;
    if (ctx.h) j["h"] = *ctx.h;
    const auto test = arm.test();
    const auto val = arm.val();
    j["test_per_fold"] = test;
    j["val_per_fold"] = val;
    if (arm.ok()) {
        const auto [m, s] = mean_std(test);
        j["mean"] = m;
        j["std"] = s;
        j["val_mean"] = mean_std(val).first;
    }
    if (!arm.error.empty()) j["error"] = arm.error;
    if (!arm.grid.is_null()) j["grid"] = arm.grid;
    return j;
}

/// Aggregated output of an experiment command.
struct RunSummary {
    nlohmann::json json;
    std::size_t rows = 0;
    std::size_t failed_rows = 0;

    bool ok() const { return failed_rows == 0; }
};

// ---------------------------------------------------------------------------------------------
// Arm enumeration

/// Feature policies a model runs under. PGMs keep their own policy; GNNs take every requested
/// policy the data can serve.
inline std::vector<FeaturePolicy> arm_policies(const ModelEntry& m, const std::vector<FeaturePolicy>& requested,
                                               const Dataset& d, std::ostream* warn) {
    if (!is_gnn(m.spec.family)) return {m.spec.feature_policy};
    std::vector<FeaturePolicy> out;
    for (auto p : requested) {
        if (p == FeaturePolicy::none) continue;
        if (p == FeaturePolicy::attribute && !d.attributes) {
            if (warn) *warn << "skipping attribute arm of " << to_string(m.spec.family) << ": no attribute features\n";
            continue;
        }
        out.push_back(p);
    }
    return out;
}

inline void run_instance_arms(const ExperimentConfig& cfg, const RowContext& ctx, const Instance& inst,
                              const std::vector<EdgeSplit>& splits, ResultWriter& w, nlohmann::json& arms,
                              std::ostream* log) {
    for (const auto& m : cfg.models)
        for (auto policy : arm_policies(m, cfg.policies, inst.data, log)) {
            const auto spec = concretize(m, policy, inst.seed, cfg.clusters);
            if (log) *log << ctx.dataset << " replicate " << ctx.replicate << ": " << to_string(spec.family) << " / "
                          << to_string(spec.feature_policy) << std::endl;
            const auto arm = run_arm(m, spec, inst.data, splits, cfg.jobs);
            write_metric(w, ctx, arm, "test_auc", test_values(arm));
            arms.push_back(arm_summary(ctx, arm));
        }
}

inline void require_models(const ExperimentConfig& cfg) {
    if (cfg.models.empty()) throw Error("config lists no models");
}

inline RunSummary finish(const ExperimentConfig& cfg, ResultWriter& w, nlohmann::json arms,
                         nlohmann::json extra = nlohmann::json::object()) {
    RunSummary s;
    s.rows = w.rows();
    s.failed_rows = w.failed();
    s.json = {{"config", to_json(cfg)}, {"rows", s.rows}, {"failed_rows", s.failed_rows}, {"arms", std::move(arms)}};
    for (auto it = extra.begin(); it != extra.end(); ++it) s.json[it.key()] = it.value();
    io::write_json(s.json, io::join(cfg.output_dir, "summary.json"));
    return s;
}

// ---------------------------------------------------------------------------------------------
// Commands

/// Edge lists and ground truth for every replicate, plus a manifest of seeds.
inline nlohmann::json cmd_generate(const ExperimentConfig& cfg) {
    if (!cfg.dataset.synth) throw Error("generate needs a 'synth' dataset block");
    fs::create_directories(cfg.output_dir);
    nlohmann::json reps = nlohmann::json::array();
    for (std::size_t r = 0; r < cfg.replicates; ++r) {
        SynthConfig sc = *cfg.dataset.synth;
        sc.seed = replicate_seed(cfg.seed, r);
        const auto [g, gt] = generate(sc);
        const auto dir = fs::path(cfg.output_dir) / ("replicate_" + std::to_string(r));
        fs::create_directories(dir);
        save_edge_list(g, io::join(dir, "edges.txt"));
        save_ground_truth(gt, sc, dir);
        std::ofstream labels(io::join(dir, "labels.txt"));
        const auto argmax = gt_scalar_feature(gt);
        for (std::size_t i = 0; i < argmax.size(); ++i) labels << i << ' ' << argmax[i] << '\n';
        reps.push_back({{"index", r},
                        {"seed", sc.seed},
                        {"edges", "replicate_" + std::to_string(r) + "/edges.txt"},
                        {"n_edges", g.n_edges()},
                        {"average_degree", average_degree(g)}});
    }
    nlohmann::json manifest{{"config", to_json(cfg)}, {"replicates", reps}};
    io::write_json(manifest, io::join(cfg.output_dir, "manifest.json"));
    return manifest;
}

struct StatsRow {
    std::string name;
    std::size_t n_nodes = 0, n_edges = 0;
    bool directed = true;
    double average_degree = 0.0;
    std::optional<double> homophily;
    std::optional<std::size_t> n_features;
};

inline StatsRow dataset_stats(const Instance& inst) {
    StatsRow s;
    s.name = inst.name;
    s.n_nodes = inst.data.graph.n_nodes();
    s.n_edges = inst.data.graph.n_edges();
    s.directed = inst.data.graph.directed();
    s.average_degree = average_degree(inst.data.graph);
    s.homophily = inst.homophily();
    if (inst.data.attributes) s.n_features = static_cast<std::size_t>(inst.data.attributes->n_features());
    return s;
}

/// Table with N, <k>, h and F; absent columns print as "-".
inline std::string format_stats(const std::vector<StatsRow>& rows) {
    std::ostringstream o;
    o << std::left << std::setw(28) << "dataset" << std::right << std::setw(9) << "N" << std::setw(10) << "<k>"
      << std::setw(8) << "h" << std::setw(8) << "F" << '\n';
    for (const auto& r : rows) {
        std::ostringstream k, h;
        k << std::fixed << std::setprecision(2) << r.average_degree;
        if (r.homophily) h << std::fixed << std::setprecision(2) << *r.homophily;
        o << std::left << std::setw(28) << r.name << std::right << std::setw(9) << r.n_nodes << std::setw(10) << k.str()
          << std::setw(8) << (r.homophily ? h.str() : "-") << std::setw(8)
          << (r.n_features ? std::to_string(*r.n_features) : "-") << '\n';
    }
    return o.str();
}

/// One row per replicate for synthetic data, one row otherwise. Synthetic features are the
/// ground-truth memberships.
inline std::vector<StatsRow> cmd_stats(const ExperimentConfig& cfg, std::ostream* out = &std::cout) {
    std::vector<StatsRow> rows;
    const std::size_t n = cfg.dataset.synth ? cfg.replicates : 1;
    for (std::size_t r = 0; r < n; ++r) {
        auto row = dataset_stats(load_instance(cfg.dataset, replicate_seed(cfg.seed, r), cfg.clusters, true));
        if (n > 1) row.name += "#" + std::to_string(r);
        rows.push_back(row);
    }
    if (out) *out << format_stats(rows);
    if (!cfg.output_dir.empty()) {
        fs::create_directories(cfg.output_dir);
        std::ofstream csv(io::join(cfg.output_dir, "stats.csv"));
        csv << "dataset,n_nodes,n_edges,directed,average_degree,h,F\n";
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : rows) {
            csv << csv_field(r.name) << ',' << r.n_nodes << ',' << r.n_edges << ',' << (r.directed ? 1 : 0) << ','
                << format_number(r.average_degree) << ',' << (r.homophily ? format_number(*r.homophily) : "-") << ','
                << (r.n_features ? std::to_string(*r.n_features) : "-") << '\n';
            j.push_back({{"dataset", r.name},
                         {"n_nodes", r.n_nodes},
                         {"n_edges", r.n_edges},
                         {"directed", r.directed},
                         {"average_degree", r.average_degree},
                         {"h", r.homophily ? nlohmann::json(*r.homophily) : nlohmann::json("-")},
                         {"F", r.n_features ? nlohmann::json(*r.n_features) : nlohmann::json("-")}});
        }
        io::write_json({{"config", to_json(cfg)}, {"datasets", j}}, io::join(cfg.output_dir, "stats.json"));
    }
    return rows;
}

/// Fits every configured model on one fold of replicate 0 and writes a checkpoint directory per
/// model. Models with a grid are first selected by cross-validation.
inline nlohmann::json cmd_fit(const ExperimentConfig& cfg, std::ostream* log = &std::cerr) {
    require_models(cfg);
    const auto inst = load_instance(cfg.dataset, cfg.seed, cfg.clusters);
    const auto splits = make_splits(inst, cfg);
    const auto& split = splits.at(cfg.fold);
    fs::create_directories(cfg.output_dir);
    nlohmann::json fitted = nlohmann::json::array();
    for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
        const auto& m = cfg.models[mi];
        auto spec = concretize(m, std::nullopt, inst.seed, cfg.clusters);
        if (m.grid) spec = grid_search(expand_grid(spec, *m.grid), inst.data, splits, cfg.jobs).best;
        const auto dir = fs::path(cfg.output_dir) / (std::to_string(mi) + "_" + to_string(spec.family));
        if (log) *log << "fitting " << describe(spec) << " -> " << dir.string() << std::endl;
        nlohmann::json meta{{"family", to_string(spec.family)},
                            {"spec", to_json(spec)},
                            {"hyperparameters", describe(spec)},
                            {"dataset", inst.name},
                            {"seed", inst.seed},
                            {"fold", cfg.fold}};
        PhaseScorer scorer;
        if (!is_gnn(spec.family)) {
            PgmFit fit;
            if (spec.family == Family::mt) {
                fit = mt_fit(inst.data.graph, split, spec.pgm);
            } else {
                NodeLabels attrs;
                std::size_t z;
                if (inst.data.scalar_attribute) {
                    attrs = *inst.data.scalar_attribute;
                    z = inst.data.n_categories;
                } else {
                    z = inst.data.cluster_count(spec);
                    attrs = detail::structure_clusters(inst.data, split, z);
                }
                fit = mtcov_fit(inst.data.graph, split, attrs, z, spec.gamma, spec.pgm);
            }
            meta["objective"] = fit.objective();
            meta["iterations"] = fit.iterations;
            meta["converged"] = fit.converged;
            meta["gamma"] = fit.params.gamma;
            save_pgm(fit.params, meta, dir);
            const auto p = fit.params.base;
            scorer = [p](Phase, NodeId i, NodeId j) { return mt_score(p, i, j); };
        } else {
            const auto X = detail::gnn_features(inst.data, spec, split);
            const auto trained = train(inst.data.graph, split, X, spec.gnn);
            meta["best_epoch"] = trained.best_epoch;
            meta["best_val_loss"] = trained.best_val_loss;
            save_gnn(trained.model, meta, dir);
            save_history(trained.history, io::join(dir, "history.csv"));
            const auto Zval = embed(trained.model, inst.data.graph, split, X, Phase::val).Z;
            const auto Ztest = embed(trained.model, inst.data.graph, split, X, Phase::test).Z;
            io::write_csv(Ztest, io::join(dir, "embeddings.csv"));
            scorer = [Zval, Ztest](Phase ph, NodeId i, NodeId j) { return gnn_score(ph == Phase::test ? Ztest : Zval, i, j); };
        }
        const auto fa = score_split(scorer, split);
        io::write_json(to_json(split), io::join(dir, "split.json"));
        std::ofstream ids(io::join(dir, "node_ids.txt"));
        const auto& table = inst.data.graph.node_ids();
        for (std::size_t i = 0; i < inst.data.graph.n_nodes(); ++i) ids << (table.empty() ? std::to_string(i) : table[i]) << '\n';
        fitted.push_back({{"dir", dir.string()}, {"hyperparameters", describe(spec)}, {"val_auc", fa.val}, {"test_auc", fa.test}});
        auto j = io::read_json(io::join(dir, "model.json"));
        j["val_auc"] = fa.val;
        j["test_auc"] = fa.test;
        io::write_json(j, io::join(dir, "model.json"));
    }
    nlohmann::json out{{"config", to_json(cfg)}, {"models", fitted}};
    io::write_json(out, io::join(cfg.output_dir, "fit.json"));
    return out;
}

/// Cross-validated AUC of every model under its own feature policy, per replicate.
inline RunSummary cmd_evaluate(const ExperimentConfig& cfg, std::ostream* log = &std::cerr) {
    require_models(cfg);
    fs::create_directories(cfg.output_dir);
    ResultWriter w(io::join(cfg.output_dir, "results.csv"));
    nlohmann::json arms = nlohmann::json::array();
    for (std::size_t r = 0; r < cfg.replicates; ++r) {
        const auto inst = load_instance(cfg.dataset, replicate_seed(cfg.seed, r), cfg.clusters);
        const auto splits = make_splits(inst, cfg);
        const RowContext ctx{"evaluate", inst.name, r, inst.seed, std::nullopt, std::nullopt};
        for (const auto& m : cfg.models) {
            const auto spec = concretize(m, std::nullopt, inst.seed, cfg.clusters);
            if (log) *log << inst.name << " replicate " << r << ": " << describe(spec) << std::endl;
            const auto arm = run_arm(m, spec, inst.data, splits, cfg.jobs);
            write_metric(w, ctx, arm, "test_auc", test_values(arm));
            arms.push_back(arm_summary(ctx, arm));
        }
    }
    return finish(cfg, w, std::move(arms));
}

/// Every model under every applicable feature policy. PGM rows keep their own policy.
inline RunSummary cmd_experiment_features(const ExperimentConfig& cfg, std::ostream* log = &std::cerr) {
    require_models(cfg);
    fs::create_directories(cfg.output_dir);
    ResultWriter w(io::join(cfg.output_dir, "results.csv"));
    nlohmann::json arms = nlohmann::json::array();
    for (std::size_t r = 0; r < cfg.replicates; ++r) {
        const auto inst = load_instance(cfg.dataset, replicate_seed(cfg.seed, r), cfg.clusters);
        const auto splits = make_splits(inst, cfg);
        run_instance_arms(cfg, {"features", inst.name, r, inst.seed, std::nullopt, std::nullopt}, inst, splits, w, arms, log);
    }
    return finish(cfg, w, std::move(arms));
}

/// Paired assortative/disassortative synthetic instances, or the labelled real graph. Every row
/// carries its instance's homophily.
inline RunSummary cmd_experiment_heterophily(const ExperimentConfig& cfg, std::ostream* log = &std::cerr) {
    require_models(cfg);
    if (!cfg.dataset.synth && cfg.dataset.labels.empty())
        throw Error("heterophily needs a synthetic block or class labels");
    fs::create_directories(cfg.output_dir);
    ResultWriter w(io::join(cfg.output_dir, "results.csv"));
    nlohmann::json arms = nlohmann::json::array();
    nlohmann::json h_table = nlohmann::json::array();
    std::vector<std::optional<Structure>> structures{std::nullopt};
    if (cfg.dataset.synth) structures = {Structure::assortative, Structure::disassortative};
    for (const auto& st : structures)
        for (std::size_t r = 0; r < cfg.replicates; ++r) {
            const auto inst = load_instance(cfg.dataset, replicate_seed(cfg.seed, r), cfg.clusters, false, st);
            const auto splits = make_splits(inst, cfg);
            const auto h = inst.homophily();
            h_table.push_back({{"dataset", inst.name}, {"replicate", r}, {"seed", inst.seed}, {"h", *h}});
            run_instance_arms(cfg, {"heterophily", inst.name, r, inst.seed, std::nullopt, h}, inst, splits, w, arms, log);
        }
    return finish(cfg, w, std::move(arms), {{"homophily", h_table}});
}

/// Whether a model's input changes when attributes are perturbed.
inline bool consumes_attributes(const ModelSpec& s, const Dataset& d) {
    if (s.family == Family::mtcov) return true;
    if (!is_gnn(s.family)) return false;
    return s.feature_policy == FeaturePolicy::attribute || (s.feature_policy == FeaturePolicy::clustered && d.attributes);
}

struct NoiseArm {
    ModelSpec spec;
    std::vector<double> rhos;
    std::vector<ArmResult> results;  // aligned with rhos
};

/// Perturbed copy of the dataset: attribute rows shuffled, MTCOV's scalar attribute randomized.
/// Nodes are drawn with the replicate seed, so the selected sets are nested in rho.
inline Dataset perturb_dataset(const Dataset& base, double rho, std::uint64_t seed, nlohmann::json* manifest) {
    Dataset d = base;
    nlohmann::json m = nlohmann::json::object();
    if (base.attributes) {
        std::vector<NodeId> sel;
        d.attributes = shuffle_features(*base.attributes, rho, seed, &sel);
        m["features"] = perturbation_manifest("shuffle_features", rho, seed, sel);
    }
    if (base.scalar_attribute) {
        std::vector<NodeId> sel;
        d.scalar_attribute = randomize_scalar(*base.scalar_attribute, rho, base.n_categories, seed, &sel);
        m["scalar_attribute"] = perturbation_manifest("randomize_scalar", rho, seed, sel);
    }
    if (manifest) *manifest = m;
    return d;
}

/// Runs every model at every rho on one instance. Models that do not read attributes are fitted
/// once and reused.
inline std::vector<NoiseArm> noise_arms(const ExperimentConfig& cfg, const Instance& inst,
                                        const std::vector<EdgeSplit>& splits, std::vector<nlohmann::json>* manifests,
                                        std::ostream* log) {
    Dataset base = inst.data;
    if (!base.attributes && !base.scalar_attribute) throw Error("noise experiment needs attribute features");
    if (!base.scalar_attribute) {
        // Clustered attributes stand in for MTCOV's categorical input.
        const auto k = base.default_clusters;
        base.scalar_attribute = kmeans(*base.attributes, k, inst.seed).assignments;
        base.n_categories = static_cast<std::size_t>(base.scalar_attribute->n_classes());
    }
    std::vector<Dataset> perturbed;
    if (manifests) manifests->clear();
    for (double rho : cfg.rhos) {
        nlohmann::json man;
        perturbed.push_back(perturb_dataset(base, rho, inst.seed, &man));
        if (manifests) manifests->push_back(man);
    }
    std::vector<NoiseArm> out;
    for (const auto& m : cfg.models) {
        NoiseArm arm;
        arm.spec = concretize(m, std::nullopt, inst.seed, cfg.clusters);
        arm.rhos = cfg.rhos;
        const bool reads = consumes_attributes(arm.spec, base);
        std::optional<ArmResult> shared;
        for (std::size_t k = 0; k < cfg.rhos.size(); ++k) {
            if (!reads && shared) {
                arm.results.push_back(*shared);
                continue;
            }
            if (log) *log << inst.name << " rho " << cfg.rhos[k] << ": " << describe(arm.spec) << std::endl;
            arm.results.push_back(run_arm(m, arm.spec, perturbed[k], splits, cfg.jobs));
            if (!reads) shared = arm.results.back();
        }
        out.push_back(std::move(arm));
    }
    return out;
}

/// Per-fold AUC_rho - AUC_0, where AUC_0 comes from the rho == 0 entry (or the first rho).
inline std::vector<std::optional<double>> delta_auc(const NoiseArm& arm, std::size_t k) {
    std::size_t ref = 0;
    for (std::size_t i = 0; i < arm.rhos.size(); ++i)
        if (arm.rhos[i] == 0.0) {
            ref = i;
            break;
        }
    const auto& a = arm.results[k];
    const auto& b = arm.results[ref];
    std::vector<std::optional<double>> d(a.folds.size());
    for (std::size_t f = 0; f < d.size(); ++f)
        if (a.folds[f] && b.folds[f]) d[f] = a.folds[f]->test - b.folds[f]->test;
    return d;
}

inline double mean_of(const std::vector<std::optional<double>>& v) {
    std::vector<double> ok;
    for (const auto& x : v)
        if (x) ok.push_back(*x);
    return mean_std(ok).first;
}

inline std::string rho_label(double rho) {
    std::ostringstream o;
    o << rho;
    return o.str();
}

/// AUC and Delta AUC at each rho. Synthetic instances expose ground-truth memberships as features.
inline RunSummary cmd_experiment_noise(const ExperimentConfig& cfg, std::ostream* log = &std::cerr) {
    require_models(cfg);
    fs::create_directories(cfg.output_dir);
    ResultWriter w(io::join(cfg.output_dir, "results.csv"));
    nlohmann::json arms = nlohmann::json::array();
    for (std::size_t r = 0; r < cfg.replicates; ++r) {
        const auto inst = load_instance(cfg.dataset, replicate_seed(cfg.seed, r), cfg.clusters, true);
        const auto splits = make_splits(inst, cfg);
        std::vector<nlohmann::json> manifests;
        const auto results = noise_arms(cfg, inst, splits, &manifests, log);
        for (std::size_t k = 0; k < cfg.rhos.size(); ++k) {
            const auto dir = fs::path(cfg.output_dir) / "perturbations" / ("replicate_" + std::to_string(r)) /
                             ("rho_" + rho_label(cfg.rhos[k]));
            fs::create_directories(dir);
            io::write_json(manifests[k], io::join(dir, "manifest.json"));
        }
        for (const auto& arm : results)
            for (std::size_t k = 0; k < cfg.rhos.size(); ++k) {
                const RowContext ctx{"noise", inst.name, r, inst.seed, cfg.rhos[k], std::nullopt};
                const auto& res = arm.results[k];
                write_metric(w, ctx, res, "test_auc", test_values(res));
                const auto delta = delta_auc(arm, k);
                write_metric(w, ctx, res, "delta_auc", delta);
                auto j = arm_summary(ctx, res);
                j["delta_auc"] = mean_of(delta);
                arms.push_back(j);
            }
    }
    return finish(cfg, w, std::move(arms));
}

// ---------------------------------------------------------------------------------------------
// Partitions

struct Partition {
    std::vector<std::string> ids;  // in node-index order
    NodeLabels labels;
    Matrix values;  // memberships (PGM) or embeddings (GNN)
};

inline std::vector<std::string> read_node_ids(const fs::path& dir, std::size_t n) {
    std::vector<std::string> ids;
    std::ifstream in(dir / "node_ids.txt");
    for (std::string line; std::getline(in, line);) ids.push_back(line);
    if (ids.size() != n) {
        ids.clear();
        for (std::size_t i = 0; i < n; ++i) ids.push_back(std::to_string(i));
    }
    return ids;
}

/// PGM: U rows (optionally row-normalized) with argmax labels. GNN: embeddings with k-means labels.
inline Partition partition_of(const fs::path& model_dir, std::size_t k, bool normalize, std::uint64_t seed = 0) {
    const auto meta = io::read_json(io::join(model_dir, "model.json"));
    const auto family = family_from_string(meta.at("family").get<std::string>());
    Partition p;
    if (!is_gnn(family)) {
        const auto params = load_pgm(model_dir);
        p.values = params.base.U;
        if (normalize)
            for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
                const double s = p.values.row(i).sum();
                if (s > 0.0) p.values.row(i) /= s;
            }
        p.labels = hard_memberships(params.base);
    } else {
        if (k < 1) throw Error("export of GNN embeddings needs k >= 1");
        p.values = io::read_csv(io::join(model_dir, "embeddings.csv"));
        p.labels = kmeans(FeatureMatrix{p.values, FeatureKind::attribute}, k, seed).assignments;
    }
    p.ids = read_node_ids(model_dir, static_cast<std::size_t>(p.values.rows()));
    return p;
}

/// CSV "node,id,community,x0,...", rows ordered by community then node index.
inline void write_partition(const Partition& p, const std::string& path) {
    std::vector<std::size_t> order(p.labels.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p.labels[a] < p.labels[b]; });
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out << "node,id,community";
    for (Eigen::Index c = 0; c < p.values.cols(); ++c) out << ",x" << c;
    out << '\n' << std::setprecision(17);
    for (auto i : order) {
        out << i << ',' << csv_field(p.ids[i]) << ',' << p.labels[i];
        for (Eigen::Index c = 0; c < p.values.cols(); ++c) out << ',' << p.values(static_cast<Eigen::Index>(i), c);
        out << '\n';
    }
}

inline Partition read_partition(const std::string& path) {
    const auto cells = io::read_csv_cells(path);
    if (cells.empty()) throw Error(path + ": empty partition file");
    const std::size_t n = cells.size() - 1;
    const auto cols = static_cast<Eigen::Index>(cells[0].size()) - 3;
    Partition p;
    p.ids.resize(n);
    p.labels.labels.assign(n, 0);
    p.values = Matrix(static_cast<Eigen::Index>(n), cols);
    for (std::size_t r = 1; r < cells.size(); ++r) {
        const auto i = static_cast<std::size_t>(std::stoul(cells[r].at(0)));
        if (i >= n) throw Error(path + ": node index out of range");
        p.ids[i] = cells[r].at(1);
        p.labels.labels[i] = std::stoi(cells[r].at(2));
        for (Eigen::Index c = 0; c < cols; ++c)
            p.values(static_cast<Eigen::Index>(i), c) = io::parse_double(cells[r].at(static_cast<std::size_t>(c) + 3), path);
    }
    return p;
}

inline Partition cmd_export_partitions(const fs::path& model_dir, std::size_t k, bool normalize,
                                       const std::string& out_path, std::uint64_t seed = 0) {
    auto p = partition_of(model_dir, k, normalize, seed);
    if (const auto parent = fs::path(out_path).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_partition(p, out_path);
    return p;
}

}  // namespace nlb::bench
