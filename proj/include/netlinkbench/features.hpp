#pragma once

#include "common.hpp"
#include "graph.hpp"
#include "io.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <set>

namespace nlb {

struct KmeansResult {
    NodeLabels assignments;
    Matrix centroids;
    double inertia = 0.0;
    std::size_t iterations = 0;
};

namespace detail {

inline std::size_t count_distinct_rows(const Matrix& X, std::size_t stop_at) {
    std::set<std::vector<double>> rows;
    for (Eigen::Index i = 0; i < X.rows() && rows.size() < stop_at; ++i)
        rows.emplace(X.row(i).data(), X.row(i).data() + X.cols());
    return rows.size();
}

inline double sq_dist(const Matrix& X, Eigen::Index i, const Matrix& C, Eigen::Index c) {
    return (X.row(i) - C.row(c)).squaredNorm();
}

inline Matrix kmeanspp_seeds(const Matrix& X, Eigen::Index k, Rng& rng) {
    const Eigen::Index n = X.rows();
    Matrix C(k, X.cols());
    C.row(0) = X.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n))));
    Vector d2(n);
    for (Eigen::Index i = 0; i < n; ++i) d2(i) = sq_dist(X, i, C, 0);
    for (Eigen::Index c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index pick = n - 1;
        if (total > 0.0) {
            double r = uniform01(rng) * total;
            for (Eigen::Index i = 0; i < n; ++i) {
                r -= d2(i);
                if (r < 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n)));
        }
        C.row(c) = X.row(pick);
        for (Eigen::Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), sq_dist(X, i, C, c));
    }
    return C;
}

/// Nearest centroid per row (lowest index on ties).
inline std::vector<int> assign(const Matrix& X, const Matrix& C, Vector* best_d2 = nullptr) {
    const Matrix cross = X * C.transpose();
    const Vector c_norm = C.rowwise().squaredNorm();
    std::vector<int> labels(static_cast<std::size_t>(X.rows()));
    if (best_d2) best_d2->resize(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        Eigen::Index best = 0;
        double best_val = std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < C.rows(); ++c) {
            const double v = c_norm(c) - 2.0 * cross(i, c);  // ||x||^2 is common to all c
            if (v < best_val) {
                best_val = v;
                best = c;
            }
        }
        labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
        if (best_d2) (*best_d2)(i) = sq_dist(X, i, C, best);
    }
    return labels;
}

inline Matrix centroids_of(const Matrix& X, const std::vector<int>& labels, Eigen::Index k,
                           std::vector<std::size_t>& sizes) {
    Matrix C = Matrix::Zero(k, X.cols());
    sizes.assign(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const auto c = labels[static_cast<std::size_t>(i)];
        C.row(c) += X.row(i);
        ++sizes[static_cast<std::size_t>(c)];
    }
    for (Eigen::Index c = 0; c < k; ++c)
        if (sizes[static_cast<std::size_t>(c)] > 0) C.row(c) /= static_cast<double>(sizes[static_cast<std::size_t>(c)]);
    return C;
}

inline double inertia_of(const Matrix& X, const std::vector<int>& labels, const Matrix& C) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) s += sq_dist(X, i, C, labels[static_cast<std::size_t>(i)]);
    return s;
}

/// Single-point moves that strictly lower the inertia, until none is left.
inline void hartigan_refine(const Matrix& X, std::vector<int>& labels, Matrix& C, std::vector<std::size_t>& sizes) {
    C = centroids_of(X, labels, C.rows(), sizes);
    for (std::size_t pass = 0; pass < 100; ++pass) {
        bool moved = false;
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            const int a = labels[static_cast<std::size_t>(i)];
            const auto na = static_cast<double>(sizes[static_cast<std::size_t>(a)]);
            if (na <= 1.0) continue;
            const double remove_gain = na / (na - 1.0) * sq_dist(X, i, C, a);
            int best = a;
            double best_cost = remove_gain;
            for (Eigen::Index b = 0; b < C.rows(); ++b) {
                if (b == a) continue;
                const auto nb = static_cast<double>(sizes[static_cast<std::size_t>(b)]);
                const double cost = nb / (nb + 1.0) * sq_dist(X, i, C, b);
                if (cost < best_cost * (1.0 - 1e-12)) {
                    best_cost = cost;
                    best = static_cast<int>(b);
                }
            }
            if (best == a) continue;
            const auto nb = static_cast<double>(sizes[static_cast<std::size_t>(best)]);
            C.row(a) = (na * C.row(a) - X.row(i)) / (na - 1.0);
            C.row(best) = (nb * C.row(best) + X.row(i)) / (nb + 1.0);
            --sizes[static_cast<std::size_t>(a)];
            ++sizes[static_cast<std::size_t>(best)];
            labels[static_cast<std::size_t>(i)] = best;
            moved = true;
        }
        if (!moved) break;
    }
    C = centroids_of(X, labels, C.rows(), sizes);
}

}  // namespace detail

/// One Lloyd run from the given centroids: alternate assignment and mean steps until the
/// assignment stops changing. Empty clusters are re-seeded from the point farthest from its centroid.
/// The fixpoint is then polished with single-point moves.
inline KmeansResult lloyd(const Matrix& X, Matrix C, std::size_t max_iter) {
    const Eigen::Index k = C.rows();
    KmeansResult r;
    std::vector<int> labels = detail::assign(X, C);
    std::vector<std::size_t> sizes;
    for (std::size_t it = 0; it < max_iter; ++it) {
        r.iterations = it + 1;
        C = detail::centroids_of(X, labels, k, sizes);
        for (Eigen::Index c = 0; c < k; ++c) {
            if (sizes[static_cast<std::size_t>(c)] > 0) continue;
            Eigen::Index far = 0;
            double far_d = -1.0;
            for (Eigen::Index i = 0; i < X.rows(); ++i) {
                const double d = detail::sq_dist(X, i, C, labels[static_cast<std::size_t>(i)]);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            C.row(c) = X.row(far);
            labels[static_cast<std::size_t>(far)] = static_cast<int>(c);
        }
        auto next = detail::assign(X, C);
        if (next == labels) break;
        labels = std::move(next);
    }
    detail::hartigan_refine(X, labels, C, sizes);
    r.inertia = detail::inertia_of(X, labels, C);
    r.centroids = std::move(C);
    r.assignments.labels = std::move(labels);
    return r;
}

/// Best of n_init k-means++ seeded Lloyd runs by inertia. If k exceeds the number of distinct
/// rows it is reduced (with a warning).
inline KmeansResult kmeans(const FeatureMatrix& X, std::size_t k, std::uint64_t seed, std::size_t max_iter = 300,
                           std::size_t n_init = 10, std::ostream* warn = &std::cerr) {
    if (k < 1) throw Error("kmeans needs k >= 1");
    if (X.n_rows() == 0) throw Error("kmeans on an empty feature matrix");
    const std::size_t distinct = detail::count_distinct_rows(X.values, k);
    if (distinct < k) {
        if (warn) *warn << "warning: kmeans k reduced from " << k << " to " << distinct << " distinct rows\n";
        k = distinct;
    }
    KmeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (std::size_t run = 0; run < std::max<std::size_t>(n_init, 1); ++run) {
        Rng rng = derive_rng(seed, {0xc1u, run});
        auto r = lloyd(X.values, detail::kmeanspp_seeds(X.values, static_cast<Eigen::Index>(k), rng), max_iter);
        if (r.inertia < best.inertia) best = std::move(r);
    }
    return best;
}

/// N x 1 matrix holding each node's k-means cluster label.
inline FeatureMatrix clustered_feature(const FeatureMatrix& X, std::size_t k, std::uint64_t seed) {
    const auto km = kmeans(X, k, seed);
    FeatureMatrix out{Matrix(X.n_rows(), 1), FeatureKind::clustered};
    for (Eigen::Index i = 0; i < X.n_rows(); ++i) out.values(i, 0) = km.assignments[static_cast<std::size_t>(i)];
    return out;
}

/// ceil(rho * n) distinct nodes, uniformly at random, in ascending order.
inline std::vector<NodeId> select_nodes(std::size_t n, double rho, Rng& rng) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw Error("rho must lie in [0, 1]");
    const auto m = std::min(n, static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n) - 1e-9)));
    std::vector<NodeId> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<NodeId>(i);
    // Partial Fisher-Yates: the first m slots are a uniform sample without replacement.
    for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Independently permutes the entries of the rows of ceil(rho * N) random nodes.
inline FeatureMatrix shuffle_features(const FeatureMatrix& X, double rho, std::uint64_t seed,
                                      std::vector<NodeId>* selected = nullptr) {
    Rng rng = derive_rng(seed, {0x5f1});
    const auto nodes = select_nodes(static_cast<std::size_t>(X.n_rows()), rho, rng);
    FeatureMatrix out = X;
    std::vector<double> row(static_cast<std::size_t>(X.n_features()));
    for (auto i : nodes) {
        for (Eigen::Index f = 0; f < X.n_features(); ++f) row[static_cast<std::size_t>(f)] = X.values(i, f);
        shuffle_range(row.begin(), row.end(), rng);
        for (Eigen::Index f = 0; f < X.n_features(); ++f) out.values(i, f) = row[static_cast<std::size_t>(f)];
    }
    if (selected) *selected = nodes;
    return out;
}

/// Replaces the labels of ceil(rho * N) random nodes by uniform draws from [0, Z).
inline NodeLabels randomize_scalar(const NodeLabels& labels, double rho, std::size_t Z, std::uint64_t seed,
                                   std::vector<NodeId>* selected = nullptr) {
    if (Z < 1) throw Error("randomize_scalar needs Z >= 1");
    for (auto l : labels.labels)
        if (l < 0 || static_cast<std::size_t>(l) >= Z) throw Error("label outside [0, Z)");
    Rng rng = derive_rng(seed, {0x5ca});
    const auto nodes = select_nodes(labels.size(), rho, rng);
    NodeLabels out = labels;
    for (auto i : nodes) out.labels[static_cast<std::size_t>(i)] = static_cast<int>(uniform_index(rng, Z));
    if (selected) *selected = nodes;
    return out;
}

inline nlohmann::json perturbation_manifest(const std::string& kind, double rho, std::uint64_t seed,
                                            const std::vector<NodeId>& selected) {
    return {{"kind", kind}, {"rho", rho}, {"seed", seed}, {"selected_nodes", selected}};
}

/// Numeric CSV, one row per node. With `id_column`, the first cell of each row is a node id
/// matched against the graph's id table and rows may come in any order.
inline FeatureMatrix load_features(const std::string& path, const Graph& g, bool id_column = false) {
    const auto rows = io::read_csv_cells(path);
    const auto n = g.n_nodes();
    if (!id_column && rows.size() != n)
        throw Error(path + ": " + std::to_string(rows.size()) + " rows but the graph has " + std::to_string(n) +
                    " nodes");
    if (rows.empty()) throw Error(path + ": no feature rows");
    const std::size_t offset = id_column ? 1 : 0;
    const std::size_t width = rows[0].size() - offset;
    FeatureMatrix x{Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(width)),
                    FeatureKind::attribute};
    std::vector<bool> seen(n, false);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::string where = path + ":" + std::to_string(r + 1);
        if (rows[r].size() != width + offset) throw Error(where + ": ragged row");
        std::size_t node = r;
        if (id_column) {
            const auto idx = g.index_of(rows[r][0]);
            if (!idx) continue;  // node absent from the edge list
            node = static_cast<std::size_t>(*idx);
        }
        seen[node] = true;
        for (std::size_t f = 0; f < width; ++f)
            x.values(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(f)) =
                io::parse_double(rows[r][f + offset], where);
    }
    const auto covered = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), true));
    if (covered != n)
        throw Error(path + ": features cover " + std::to_string(covered) + " of " + std::to_string(n) + " nodes");
    return x;
}

inline void save_features(const FeatureMatrix& x, const std::string& path) { io::write_csv(x.values, path); }

}  // namespace nlb
