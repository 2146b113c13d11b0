#pragma once

#include "common.hpp"
#include "graph.hpp"
#include "io.hpp"

#include <cmath>
#include <filesystem>
#include <random>

namespace nlb {

enum class Structure { assortative, disassortative };

inline const char* to_string(Structure s) {
    return s == Structure::assortative ? "assortative" : "disassortative";
}

inline Structure structure_from_string(const std::string& s) {
    if (s == "assortative") return Structure::assortative;
    if (s == "disassortative") return Structure::disassortative;
    throw Error("unknown structure '" + s + "'");
}

struct SynthConfig {
    std::size_t n_nodes = 100;
    std::size_t n_communities = 5;
    double target_avg_degree = 20.0;
    Structure structure = Structure::assortative;
    double alpha = 0.05;
    double gamma_shape = 1.0;
    double gamma_rate = 1.0;
    bool directed = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_communities < 1 || n_nodes < n_communities) throw Error("synth config needs N >= K >= 1");
        if (!(target_avg_degree > 0.0)) throw Error("target average degree must be positive");
        if (!(alpha > 0.0)) throw Error("Dirichlet alpha must be positive");
        if (!(gamma_shape > 0.0) || !(gamma_rate > 0.0)) throw Error("Gamma parameters must be positive");
    }
};

inline nlohmann::json to_json(const SynthConfig& c) {
    return {{"n_nodes", c.n_nodes},         {"n_communities", c.n_communities},
            {"target_avg_degree", c.target_avg_degree},
            {"structure", to_string(c.structure)},
            {"alpha", c.alpha},             {"gamma_shape", c.gamma_shape},
            {"gamma_rate", c.gamma_rate},   {"directed", c.directed},
            {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.n_nodes = j.value("n_nodes", c.n_nodes);
    c.n_communities = j.value("n_communities", c.n_communities);
    c.target_avg_degree = j.value("target_avg_degree", c.target_avg_degree);
    c.structure = structure_from_string(j.value("structure", std::string("assortative")));
    c.alpha = j.value("alpha", c.alpha);
    c.gamma_shape = j.value("gamma_shape", c.gamma_shape);
    c.gamma_rate = j.value("gamma_rate", c.gamma_rate);
    c.directed = j.value("directed", c.directed);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

/// Planted parameters of a synthetic network. W is the calibrated affinity (density_scale applied).
struct GroundTruth {
    Matrix U, V, W;
    double density_scale = 1.0;
};

struct Memberships {
    Matrix U, V;
};

namespace detail {

inline void sample_dirichlet_row(Matrix& m, Eigen::Index row, double alpha, Rng& rng) {
    std::gamma_distribution<double> gamma(alpha, 1.0);
    for (;;) {
        double sum = 0.0;
        for (Eigen::Index k = 0; k < m.cols(); ++k) sum += (m(row, k) = gamma(rng));
        // Every draw can underflow to zero for tiny alpha; such a row has no direction.
        if (sum > 0.0) {
            m.row(row) /= sum;
            return;
        }
    }
}

}  // namespace detail

/// Rows drawn from a symmetric Dirichlet(alpha) by normalising Gamma(alpha, 1) draws.
inline Memberships sample_memberships(std::size_t n, std::size_t k, double alpha, Rng& rng,
                                      bool directed = true) {
    if (!(alpha > 0.0)) throw Error("Dirichlet alpha must be positive");
    const auto rows = static_cast<Eigen::Index>(n);
    const auto cols = static_cast<Eigen::Index>(k);
    Memberships out{Matrix(rows, cols), Matrix()};
    for (Eigen::Index i = 0; i < rows; ++i) detail::sample_dirichlet_row(out.U, i, alpha, rng);
    if (!directed) {
        out.V = out.U;
        return out;
    }
    out.V.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) detail::sample_dirichlet_row(out.V, i, alpha, rng);
    return out;
}

/// Gamma(shape, rate) affinities: full matrix when disassortative, diagonal only when assortative.
inline Matrix sample_affinity(std::size_t k, Structure structure, double shape, double rate, Rng& rng) {
    if (k < 1) throw Error("affinity needs at least one community");
    std::gamma_distribution<double> gamma(shape, 1.0 / rate);
    const auto kk = static_cast<Eigen::Index>(k);
    Matrix w = Matrix::Zero(kk, kk);
    for (Eigen::Index a = 0; a < kk; ++a)
        for (Eigen::Index b = 0; b < kk; ++b)
            if (structure == Structure::disassortative || a == b) w(a, b) = gamma(rng);
    return w;
}

/// Poisson rate M_ij = sum_{k,l} U_ik V_jl W_kl.
inline double expected_rate(const Matrix& U, const Matrix& V, const Matrix& W, Eigen::Index i,
                            Eigen::Index j) {
    return U.row(i).dot(W * V.row(j).transpose());
}

/// Expected number of (clipped) ordered edges when every rate is scaled by c.
inline double expected_edge_count(const Matrix& rates, double c, bool directed) {
    double total = 0.0;
    const Eigen::Index n = rates.rows();
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = directed ? 0 : i + 1; j < n; ++j)
            if (i != j) total -= std::expm1(-c * rates(i, j));
    return directed ? total : 2.0 * total;
}

struct Calibration {
    Matrix W;
    double density_scale = 1.0;
};

/// Finds c with expected clipped edge count N * target_avg_degree, by bisection on log c over
/// [1e-9, 1e9] to relative tolerance 1e-6. Returns c * W and c.
inline Calibration calibrate_density(const Matrix& U, const Matrix& V, const Matrix& W,
                                     double target_avg_degree, bool directed = true) {
    const auto n = static_cast<double>(U.rows());
    if (target_avg_degree >= n - 1.0)
        throw Error("target average degree " + std::to_string(target_avg_degree) +
                    " unreachable with " + std::to_string(U.rows()) + " nodes");
    const Matrix rates = U * W * V.transpose();
    const double target = n * target_avg_degree;
    double lo = 1e-9, hi = 1e9;
    if (expected_edge_count(rates, hi, directed) < target)
        throw Error("target average degree " + std::to_string(target_avg_degree) +
                    " unreachable: too few dyads with positive rate");
    if (expected_edge_count(rates, lo, directed) > target)
        throw Error("target average degree below the calibration range");
    while (hi / lo - 1.0 > 1e-6) {
        const double mid = std::sqrt(lo * hi);
        if (expected_edge_count(rates, mid, directed) < target)
            lo = mid;
        else
            hi = mid;
    }
    const double c = std::sqrt(lo * hi);
    return {c * W, c};
}

/// Samples memberships, affinity, calibrates, then draws A_ij = min(Pois(M_ij), 1) for i != j.
inline std::pair<Graph, GroundTruth> generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng = derive_rng(cfg.seed, {0x5a17});
    auto [U, V] = sample_memberships(cfg.n_nodes, cfg.n_communities, cfg.alpha, rng, cfg.directed);
    Matrix W = sample_affinity(cfg.n_communities, cfg.structure, cfg.gamma_shape, cfg.gamma_rate, rng);
    auto cal = calibrate_density(U, V, W, cfg.target_avg_degree, cfg.directed);

    const Matrix rates = U * cal.W * V.transpose();
    const auto n = static_cast<Eigen::Index>(cfg.n_nodes);
    std::vector<Dyad> edges;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = cfg.directed ? 0 : i + 1; j < n; ++j) {
            if (i == j) continue;
            // P(min(Pois(m), 1) = 1) = 1 - exp(-m)
            if (uniform01(rng) < -std::expm1(-rates(i, j)))
                edges.push_back({static_cast<NodeId>(i), static_cast<NodeId>(j)});
        }
    GroundTruth gt{std::move(U), std::move(V), std::move(cal.W), cal.density_scale};
    return {Graph(cfg.n_nodes, cfg.directed, std::move(edges)), std::move(gt)};
}

/// Argmax community of each node's outgoing membership (lowest index on ties).
inline NodeLabels gt_scalar_feature(const GroundTruth& gt) { return argmax_rows(gt.U); }

/// U.csv, V.csv, W.csv plus a JSON sidecar.
inline void save_ground_truth(const GroundTruth& gt, const SynthConfig& cfg,
                              const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    io::write_csv(gt.U, io::join(dir, "U.csv"));
    io::write_csv(gt.V, io::join(dir, "V.csv"));
    io::write_csv(gt.W, io::join(dir, "W.csv"));
    io::write_json({{"config", to_json(cfg)}, {"density_scale", gt.density_scale}},
                   io::join(dir, "ground_truth.json"));
}

inline GroundTruth load_ground_truth(const std::filesystem::path& dir) {
    GroundTruth gt;
    gt.U = io::read_csv(io::join(dir, "U.csv"));
    gt.V = io::read_csv(io::join(dir, "V.csv"));
    gt.W = io::read_csv(io::join(dir, "W.csv"));
    gt.density_scale = io::read_json(io::join(dir, "ground_truth.json")).at("density_scale").get<double>();
    return gt;
}

}  // namespace nlb
