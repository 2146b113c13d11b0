#include "netlinkbench/experiments.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

using namespace nlb;
using namespace nlb::bench;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::string output;
};

nlohmann::json read_config(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    return io::read_json(path);
}

/// Config file, then NETLINKBENCH_SEED, then command-line flags.
ExperimentConfig resolve(nlohmann::json j, const Globals& g, const std::string& experiment) {
    j["experiment"] = experiment;
    if (const char* env = std::getenv("NETLINKBENCH_SEED")) {
        try {
            j["seed"] = std::stoull(env);
        } catch (const std::exception&) {
            throw Error(std::string("NETLINKBENCH_SEED is not an integer: '") + env + "'");
        }
    }
    if (g.seed) j["seed"] = *g.seed;
    if (g.jobs) j["jobs"] = *g.jobs;
    if (!g.output.empty()) j["output_dir"] = g.output;
    return config_from_json(j);
}

int report(const RunSummary& s) {
    std::cerr << s.rows << " rows written";
    if (!s.ok()) std::cerr << ", " << s.failed_rows << " FAILED";
    std::cerr << '\n';
    return s.ok() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Link-prediction benchmark for probabilistic and neural graph models"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "JSON experiment configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "base seed (overrides config and NETLINKBENCH_SEED)");
    app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber);
    app.add_option("--output", g.output, "output directory");

    // generate
    auto* gen = app.add_subcommand("generate", "sample synthetic replicates");
    std::optional<std::size_t> nodes, communities, replicates;
    std::optional<double> degree;
    std::string structure;
    bool undirected = false;
    gen->add_option("--nodes", nodes, "number of nodes");
    gen->add_option("--communities", communities, "number of communities");
    gen->add_option("--degree", degree, "target average degree");
    gen->add_option("--structure", structure, "assortative or disassortative");
    gen->add_option("--replicates", replicates, "number of replicates");
    gen->add_flag("--undirected", undirected, "generate undirected graphs");

    // stats
    auto* stats = app.add_subcommand("stats", "dataset statistics: N, <k>, h, F");
    std::string edges, labels, features;
    bool id_column = false;
    stats->add_option("--edges", edges, "edge list")->check(CLI::ExistingFile);
    stats->add_option("--labels", labels, "node labels")->check(CLI::ExistingFile);
    stats->add_option("--features", features, "node feature CSV")->check(CLI::ExistingFile);
    stats->add_flag("--id-column", id_column, "feature rows start with a node id");
    stats->add_flag("--undirected", undirected, "treat the edge list as undirected");

    auto* fit = app.add_subcommand("fit", "fit the configured models on one fold and save checkpoints");
    std::optional<std::size_t> fold;
    fit->add_option("--fold", fold, "fold index");

    auto* evaluate = app.add_subcommand("evaluate", "cross-validated AUC of the configured models");

    auto* experiment = app.add_subcommand("experiment", "run one of the comparison experiments");
    std::string which;
    experiment->add_option("name", which, "features, noise or heterophily")
        ->required()
        ->check(CLI::IsMember({"features", "noise", "heterophily"}));

    auto* exporter = app.add_subcommand("export-partitions", "export memberships or clustered embeddings");
    std::string model_dir;
    std::size_t k = 5;
    bool normalize = false;
    exporter->add_option("--model", model_dir, "checkpoint directory written by fit")->required()->check(CLI::ExistingDirectory);
    exporter->add_option("--k", k, "k-means clusters for GNN embeddings");
    exporter->add_flag("--normalize", normalize, "row-normalize PGM memberships");

    CLI11_PARSE(app, argc, argv);

    try {
        auto j = read_config(g.config);
        if (*gen) {
            auto& s = j["dataset"]["synth"];
            if (!s.is_object()) s = nlohmann::json::object();
            if (nodes) s["n_nodes"] = *nodes;
            if (communities) s["n_communities"] = *communities;
            if (degree) s["target_avg_degree"] = *degree;
            if (!structure.empty()) s["structure"] = structure;
            if (undirected) s["directed"] = false;
            if (replicates) j["replicates"] = *replicates;
            const auto cfg = resolve(j, g, "generate");
            const auto manifest = cmd_generate(cfg);
            std::cerr << manifest["replicates"].size() << " replicates written to " << cfg.output_dir << '\n';
            return 0;
        }
        if (*stats) {
            if (!edges.empty()) {
                j["dataset"] = {{"edges", edges}, {"directed", !undirected}, {"labels", labels},
                                {"features", features}, {"features_id_column", id_column}};
            }
            if (g.output.empty() && !j.contains("output_dir")) j["output_dir"] = "";
            cmd_stats(resolve(j, g, "stats"));
            return 0;
        }
        if (*fit) {
            if (fold) j["fold"] = *fold;
            const auto out = cmd_fit(resolve(j, g, "fit"));
            std::cout << out["models"].dump(2) << '\n';
            return 0;
        }
        if (*evaluate) return report(cmd_evaluate(resolve(j, g, "evaluate")));
        if (*experiment) {
            const auto cfg = resolve(j, g, which);
            if (which == "features") return report(cmd_experiment_features(cfg));
            if (which == "noise") return report(cmd_experiment_noise(cfg));
            return report(cmd_experiment_heterophily(cfg));
        }
        if (*exporter) {
            const auto out = (g.output.empty() ? std::filesystem::path(model_dir) : std::filesystem::path(g.output)) /
                             "partitions.csv";
            const auto p = cmd_export_partitions(model_dir, k, normalize, out.string(), g.seed.value_or(0));
            std::cerr << p.labels.size() << " nodes written to " << out.string() << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
