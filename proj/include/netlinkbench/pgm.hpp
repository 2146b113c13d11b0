#pragma once

#include "common.hpp"
#include "graph.hpp"
#include "io.hpp"

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace nlb {

/// Mixed-membership Poisson SBM parameters: rate M_ij = u_i^T W v_j.
struct PgmParams {
    Matrix U, V, W;

    Eigen::Index n_communities() const { return W.rows(); }
};

/// PgmParams plus a K x Z row-stochastic attribute emission matrix and the mixing weight gamma.
struct MtcovParams {
    PgmParams base;
    Matrix Beta;
    double gamma = 0.0;
};

struct PgmFitConfig {
    std::size_t K = 5;
    std::size_t max_iter = 500;
    double rel_tol = 1e-7;
    std::size_t n_restarts = 5;
    double epsilon = 1e-12;
    std::uint64_t seed = 0;

    void validate() const {
        if (K < 1) throw Error("PGM fit needs K >= 1");
        if (!(rel_tol > 0.0)) throw Error("rel_tol must be positive");
        if (n_restarts < 1) throw Error("PGM fit needs at least one restart");
        if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
    }
};

inline nlohmann::json to_json(const PgmFitConfig& c) {
    return {{"K", c.K},           {"max_iter", c.max_iter}, {"rel_tol", c.rel_tol},
            {"n_restarts", c.n_restarts}, {"epsilon", c.epsilon}, {"seed", c.seed}};
}

inline PgmFitConfig pgm_config_from_json(const nlohmann::json& j) {
    PgmFitConfig c;
    c.K = j.value("K", c.K);
    c.max_iter = j.value("max_iter", c.max_iter);
    c.rel_tol = j.value("rel_tol", c.rel_tol);
    c.n_restarts = j.value("n_restarts", c.n_restarts);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

/// Result of the best restart, with its per-iteration objective (index 0 is the initial point).
struct PgmFit {
    MtcovParams params;
    std::vector<double> objective_trace;
    std::size_t iterations = 0;
    bool converged = false;
    std::size_t best_restart = 0;
    std::vector<std::string> diagnostics;

    double objective() const { return objective_trace.back(); }
};

/// Dyads visible to a PGM fit: every ordered dyad except self-loops and held-out (val/test) dyads.
class TrainingView {
public:
    TrainingView(const Graph& g, const EdgeSplit& split) : n_(g.n_nodes()) {
        const bool undirected = !g.directed();
        const auto hidden = split.held_out_keys(n_, undirected);
        for (const auto& e : g.edges())
            if (!hidden.count(dyad_key(e, n_))) edges_.push_back(e);

        held_out_.reserve(hidden.size());
        held_out_out_.assign(n_, {});
        held_out_in_.assign(n_, {});
        std::unordered_set<std::uint64_t> seen;
        auto add = [&](Dyad d) {
            if (d.src == d.dst || !seen.insert(dyad_key(d, n_)).second) return;
            held_out_.push_back(d);
            held_out_out_[d.src].push_back(d.dst);
            held_out_in_[d.dst].push_back(d.src);
        };
        for (const auto* list : {&split.val_pos, &split.test_pos, &split.val_neg, &split.test_neg})
            for (const auto& d : *list) {
                add(d);
                if (undirected) add({d.dst, d.src});
            }
    }

    std::size_t n_nodes() const { return n_; }
    const std::vector<Dyad>& edges() const { return edges_; }
    const std::vector<Dyad>& held_out() const { return held_out_; }
    const std::vector<NodeId>& held_out_targets(NodeId i) const { return held_out_out_[i]; }
    const std::vector<NodeId>& held_out_sources(NodeId j) const { return held_out_in_[j]; }

private:
    std::size_t n_;
    std::vector<Dyad> edges_;
    std::vector<Dyad> held_out_;
    std::vector<std::vector<NodeId>> held_out_out_, held_out_in_;
};

namespace detail {

/// sum over visible (i, j) of u_i v_j^T, i.e. the K x K denominator of the affinity update.
inline Matrix visible_outer(const TrainingView& view, const Matrix& U, const Matrix& V) {
    const Eigen::Index n = U.rows(), K = U.cols();
    // Row i of H is v_i plus the sum of v_j over i's held-out targets.
    Matrix H = V;
    for (Eigen::Index i = 0; i < n; ++i) {
        double* h = H.data() + i * K;
        for (auto j : view.held_out_targets(static_cast<NodeId>(i))) {
            const double* v = V.data() + j * K;
            for (Eigen::Index k = 0; k < K; ++k) h[k] += v[k];
        }
    }
    Matrix s = U.colwise().sum().transpose() * V.colwise().sum();
    s.noalias() -= U.transpose() * H;
    return s;
}

inline double row_dot(const double* a, const double* b, Eigen::Index k) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < k; ++c) s += a[c] * b[c];
    return s;
}

inline double graph_loglik(const TrainingView& view, const PgmParams& p, double eps) {
    const Matrix UW = p.U * p.W;
    const Eigen::Index K = p.W.rows();
    double ll = 0.0;
    for (const auto& e : view.edges())
        ll += std::log(row_dot(UW.data() + e.src * K, p.V.data() + e.dst * K, K) + eps);
    ll -= p.W.cwiseProduct(visible_outer(view, p.U, p.V)).sum();
    return ll;
}

/// Sum_i log(sum_k (u_ik + v_ik) beta_{k z_i} / sum_k (u_ik + v_ik)).
inline double attribute_loglik(const Matrix& U, const Matrix& V, const Matrix& Beta,
                               const std::vector<int>& attrs, double eps) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < U.rows(); ++i) {
        const auto z = attrs[static_cast<std::size_t>(i)];
        const double mass = (U.row(i) + V.row(i)).sum();
        const double hit = (U.row(i) + V.row(i)).dot(Beta.col(z));
        ll += std::log(mass > 0.0 ? std::max(hit / mass, eps) : eps);
    }
    return ll;
}

struct AttributeData {
    const std::vector<int>* attrs = nullptr;
    std::size_t n_categories = 0;
    double gamma = 0.0;
};

inline double objective(const TrainingView& view, const MtcovParams& p, const AttributeData& attr,
                        double eps) {
    const double lg = graph_loglik(view, p.base, eps);
    if (!attr.attrs || attr.gamma == 0.0) return lg;
    return (1.0 - attr.gamma) * lg + attr.gamma * attribute_loglik(p.base.U, p.base.V, p.Beta, *attr.attrs, eps);
}

/// Attribute responsibilities R_ik = x_ik beta_{k z_i} / sum_k (u_ik + v_ik) beta_{k z_i} for x = U or V,
/// and the tangent slopes 1 / sum_k (u_ik + v_ik).
inline void attribute_terms(const Matrix& own, const Matrix& U, const Matrix& V, const Matrix& Beta,
                            const std::vector<int>& attrs, Matrix& R, Vector& slope) {
    R.resize(own.rows(), own.cols());
    slope.resize(own.rows());
    for (Eigen::Index i = 0; i < own.rows(); ++i) {
        const auto z = attrs[static_cast<std::size_t>(i)];
        const double hit = (U.row(i) + V.row(i)).dot(Beta.col(z));
        const double mass = (U.row(i) + V.row(i)).sum();
        for (Eigen::Index k = 0; k < own.cols(); ++k)
            R(i, k) = hit > 0.0 ? own(i, k) * Beta(k, z) / hit : 0.0;
        slope(i) = mass > 0.0 ? 1.0 / mass : 0.0;
    }
}

inline void mix_update(Matrix& X, const Matrix& G, const Matrix& D, const Matrix* R, const Vector* slope,
                       double gamma) {
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        for (Eigen::Index k = 0; k < X.cols(); ++k) {
            double num = (1.0 - gamma) * G(i, k);
            double den = (1.0 - gamma) * D(i, k);
            if (R) {
                num += gamma * (*R)(i, k);
                den += gamma * (*slope)(i);
            }
            if (den > 0.0) X(i, k) = num / den;
        }
}

/// One sweep of multiplicative updates: U, then V, then W, then Beta. Each block is a minorise-
/// maximise step, so the objective cannot decrease.
inline void em_sweep(const TrainingView& view, MtcovParams& p, const AttributeData& attr, double eps) {
    auto& U = p.base.U;
    auto& V = p.base.V;
    auto& W = p.base.W;
    const Eigen::Index n = U.rows();
    const Eigen::Index K = W.rows();
    const double gamma = attr.attrs ? attr.gamma : 0.0;
    Matrix R;
    Vector slope;

    // U: G_ik = u_ik sum_j A_ij (W v_j)_k / (M_ij + eps); D_ik = sum_{visible j} (W v_j)_k.
    {
        const Matrix WV = V * W.transpose();  // row j = (W v_j)^T
        Matrix G = Matrix::Zero(n, K);
        for (const auto& e : view.edges()) {
            const double* wv = WV.data() + e.dst * K;
            const double scale = 1.0 / (row_dot(U.data() + e.src * K, wv, K) + eps);
            double* g = G.data() + e.src * K;
            for (Eigen::Index k = 0; k < K; ++k) g[k] += wv[k] * scale;
        }
        G.array() *= U.array();
        const Eigen::RowVectorXd v_total = V.colwise().sum();
        Matrix Vvis(n, K);
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::RowVectorXd s = v_total - V.row(i);
            for (auto j : view.held_out_targets(static_cast<NodeId>(i))) s -= V.row(j);
            Vvis.row(i) = s;
        }
        const Matrix D = Vvis * W.transpose();
        if (attr.attrs) attribute_terms(U, U, V, p.Beta, *attr.attrs, R, slope);
        mix_update(U, G, D, attr.attrs ? &R : nullptr, &slope, gamma);
    }
    // V: symmetric, with u_i^T W in place of W v_j.
    {
        const Matrix UW = U * W;
        Matrix G = Matrix::Zero(n, K);
        for (const auto& e : view.edges()) {
            const double* uw = UW.data() + e.src * K;
            const double scale = 1.0 / (row_dot(uw, V.data() + e.dst * K, K) + eps);
            double* g = G.data() + e.dst * K;
            for (Eigen::Index k = 0; k < K; ++k) g[k] += uw[k] * scale;
        }
        G.array() *= V.array();
        const Eigen::RowVectorXd u_total = U.colwise().sum();
        Matrix Uvis(n, K);
        for (Eigen::Index j = 0; j < n; ++j) {
            Eigen::RowVectorXd s = u_total - U.row(j);
            for (auto i : view.held_out_sources(static_cast<NodeId>(j))) s -= U.row(i);
            Uvis.row(j) = s;
        }
        const Matrix D = Uvis * W;
        if (attr.attrs) attribute_terms(V, U, V, p.Beta, *attr.attrs, R, slope);
        mix_update(V, G, D, attr.attrs ? &R : nullptr, &slope, gamma);
    }
    // W only enters the network term.
    if (gamma < 1.0) {
        const Matrix UW = U * W;
        // num = U^T T with T_i = sum over i's edges of v_j / (M_ij + eps).
        Matrix T = Matrix::Zero(n, K);
        for (const auto& e : view.edges()) {
            const double* v = V.data() + e.dst * K;
            const double scale = 1.0 / (row_dot(UW.data() + e.src * K, v, K) + eps);
            double* t = T.data() + e.src * K;
            for (Eigen::Index l = 0; l < K; ++l) t[l] += v[l] * scale;
        }
        const Matrix num = U.transpose() * T;
        const Matrix den = visible_outer(view, U, V);
        for (Eigen::Index k = 0; k < K; ++k)
            for (Eigen::Index l = 0; l < K; ++l)
                if (den(k, l) > 0.0) W(k, l) *= num(k, l) / den(k, l);
    }
    // Beta rows: normalised expected attribute counts.
    if (attr.attrs) {
        const auto& z = *attr.attrs;
        Matrix counts = Matrix::Zero(K, p.Beta.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto zi = z[static_cast<std::size_t>(i)];
            const double hit = (U.row(i) + V.row(i)).dot(p.Beta.col(zi));
            if (!(hit > 0.0)) continue;
            for (Eigen::Index k = 0; k < K; ++k) counts(k, zi) += (U(i, k) + V(i, k)) * p.Beta(k, zi) / hit;
        }
        for (Eigen::Index k = 0; k < K; ++k) {
            const double total = counts.row(k).sum();
            if (total > 0.0) p.Beta.row(k) = counts.row(k) / total;
        }
    }
}

inline bool all_finite(const MtcovParams& p) {
    return p.base.U.allFinite() && p.base.V.allFinite() && p.base.W.allFinite() &&
           (p.Beta.size() == 0 || p.Beta.allFinite());
}

struct RunResult {
    MtcovParams params;
    std::vector<double> trace;
    std::size_t iterations = 0;
    bool converged = false;
};

inline RunResult run_em(const TrainingView& view, MtcovParams init, const AttributeData& attr,
                        const PgmFitConfig& cfg) {
    RunResult r{std::move(init), {}, 0, false};
    r.trace.push_back(objective(view, r.params, attr, cfg.epsilon));
    for (std::size_t it = 0; it < cfg.max_iter; ++it) {
        em_sweep(view, r.params, attr, cfg.epsilon);
        const double obj = objective(view, r.params, attr, cfg.epsilon);
        r.trace.push_back(obj);
        r.iterations = it + 1;
        if (!std::isfinite(obj) || !all_finite(r.params))
            throw Error("non-finite objective at iteration " + std::to_string(it + 1));
        const double prev = r.trace[r.trace.size() - 2];
        if (std::abs(obj - prev) <= cfg.rel_tol * std::abs(prev)) {
            r.converged = true;
            break;
        }
    }
    return r;
}

inline MtcovParams random_init(std::size_t n, const PgmFitConfig& cfg, std::size_t restart,
                               std::size_t n_categories) {
    Rng rng = derive_rng(cfg.seed, {0x9e3, restart});
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(cfg.K);
    auto fill = [&](Matrix& m, Eigen::Index r, Eigen::Index c) {
        m.resize(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index k = 0; k < c; ++k) m(i, k) = uniform01(rng);
    };
    MtcovParams p;
    fill(p.base.U, N, K);
    fill(p.base.V, N, K);
    fill(p.base.W, K, K);
    if (n_categories > 0) {
        fill(p.Beta, K, static_cast<Eigen::Index>(n_categories));
        for (Eigen::Index k = 0; k < K; ++k) p.Beta.row(k) /= p.Beta.row(k).sum();
    }
    return p;
}

inline PgmFit fit_restarts(const TrainingView& view, const AttributeData& attr, const PgmFitConfig& cfg) {
    cfg.validate();
    if (view.edges().empty()) throw Error("PGM fit needs at least one training edge");
    PgmFit best;
    bool have = false;
    for (std::size_t r = 0; r < cfg.n_restarts; ++r) {
        auto init = random_init(view.n_nodes(), cfg, r, attr.attrs ? attr.n_categories : 0);
        init.gamma = attr.gamma;
        try {
            auto run = run_em(view, std::move(init), attr, cfg);
            if (!have || run.trace.back() > best.objective()) {
                best.params = std::move(run.params);
                best.objective_trace = std::move(run.trace);
                best.iterations = run.iterations;
                best.converged = run.converged;
                best.best_restart = r;
                have = true;
            }
        } catch (const Error& e) {
            best.diagnostics.push_back("restart " + std::to_string(r) + " discarded: " + e.what());
        }
    }
    if (!have) throw Error("every PGM restart diverged");
    return best;
}

}  // namespace detail

/// Training log-likelihood: sum over visible dyads of A_ij log(M_ij + eps) - M_ij.
inline double mt_loglik(const Graph& g, const EdgeSplit& split, const PgmParams& params,
                        double epsilon = 1e-12) {
    return detail::graph_loglik(TrainingView(g, split), params, epsilon);
}

/// Maximum-likelihood fit by multiplicative EM; returns the best of cfg.n_restarts random starts.
inline PgmFit mt_fit(const Graph& g, const EdgeSplit& split, const PgmFitConfig& cfg) {
    return detail::fit_restarts(TrainingView(g, split), {}, cfg);
}

/// Single EM run from a given starting point (no restarts).
inline PgmFit mt_fit_from(const Graph& g, const EdgeSplit& split, PgmParams init, const PgmFitConfig& cfg) {
    cfg.validate();
    auto run = detail::run_em(TrainingView(g, split), MtcovParams{std::move(init), {}, 0.0}, {}, cfg);
    PgmFit out;
    out.params = std::move(run.params);
    out.objective_trace = std::move(run.trace);
    out.iterations = run.iterations;
    out.converged = run.converged;
    return out;
}

/// Maximises (1 - gamma) L_G + gamma L_X, with L_X the categorical log-likelihood of each node's
/// attribute under its normalised mean membership (u_i + v_i) / sum_k (u_ik + v_ik).
inline PgmFit mtcov_fit(const Graph& g, const EdgeSplit& split, const NodeLabels& attrs, std::size_t Z,
                        double gamma, const PgmFitConfig& cfg) {
    if (attrs.size() != g.n_nodes()) throw Error("attribute count does not match node count");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error("gamma must lie in [0, 1]");
    if (Z < 1) throw Error("MTCOV needs at least one attribute category");
    for (std::size_t i = 0; i < attrs.size(); ++i)
        if (attrs[i] < 0 || static_cast<std::size_t>(attrs[i]) >= Z)
            throw Error("attribute " + std::to_string(attrs[i]) + " of node " + std::to_string(i) +
                        " outside [0, " + std::to_string(Z) + ")");
    return detail::fit_restarts(TrainingView(g, split), {&attrs.labels, Z, gamma}, cfg);
}

/// MTCOV objective at given parameters.
inline double mtcov_objective(const Graph& g, const EdgeSplit& split, const NodeLabels& attrs,
                              const MtcovParams& p, double epsilon = 1e-12) {
    return detail::objective(TrainingView(g, split), p,
                             {&attrs.labels, static_cast<std::size_t>(p.Beta.cols()), p.gamma}, epsilon);
}

/// Ranking score of dyad (i, j): the Poisson rate M_ij.
inline double mt_score(const PgmParams& p, NodeId i, NodeId j) {
    return p.U.row(i).dot(p.W * p.V.row(j).transpose());
}

/// Argmax community per node (rows of U), lowest index on ties.
inline NodeLabels hard_memberships(const PgmParams& p) { return argmax_rows(p.U); }

inline void save_pgm(const MtcovParams& p, const nlohmann::json& meta, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    io::write_csv(p.base.U, io::join(dir, "U.csv"));
    io::write_csv(p.base.V, io::join(dir, "V.csv"));
    io::write_csv(p.base.W, io::join(dir, "W.csv"));
    if (p.Beta.size() > 0) io::write_csv(p.Beta, io::join(dir, "Beta.csv"));
    io::write_json(meta, io::join(dir, "model.json"));
}

inline MtcovParams load_pgm(const std::filesystem::path& dir) {
    MtcovParams p;
    p.base.U = io::read_csv(io::join(dir, "U.csv"));
    p.base.V = io::read_csv(io::join(dir, "V.csv"));
    p.base.W = io::read_csv(io::join(dir, "W.csv"));
    if (std::filesystem::exists(dir / "Beta.csv")) p.Beta = io::read_csv(io::join(dir, "Beta.csv"));
    const auto meta = io::read_json(io::join(dir, "model.json"));
    p.gamma = meta.value("gamma", 0.0);
    return p;
}

}  // namespace nlb
