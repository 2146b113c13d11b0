#pragma once

#include "common.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <optional>
#include <iostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace nlb {

/// Binary sparse adjacency. Edges are stored as ordered dyads, sorted, without self-loops;
/// an undirected graph stores both orientations of every edge.
class Graph {
public:
    Graph() = default;

    /// Validates indices, drops self-loops and duplicates, and closes undirected edge sets.
    Graph(std::size_t n_nodes, bool directed, std::vector<Dyad> edges)
        : n_nodes_(n_nodes), directed_(directed) {
        std::vector<Dyad> clean;
        clean.reserve(directed ? edges.size() : 2 * edges.size());
        for (const auto& e : edges) {
            if (e.src < 0 || e.dst < 0 || static_cast<std::size_t>(e.src) >= n_nodes ||
                static_cast<std::size_t>(e.dst) >= n_nodes)
                throw Error("edge (" + std::to_string(e.src) + ", " + std::to_string(e.dst) +
                            ") out of range for " + std::to_string(n_nodes) + " nodes");
            if (e.src == e.dst) continue;
            clean.push_back(e);
            if (!directed) clean.push_back({e.dst, e.src});
        }
        std::sort(clean.begin(), clean.end());
        clean.erase(std::unique(clean.begin(), clean.end()), clean.end());
        edges_ = std::move(clean);
        out_offsets_.assign(n_nodes + 1, 0);
        for (const auto& e : edges_) ++out_offsets_[e.src + 1];
        for (std::size_t i = 0; i < n_nodes; ++i) out_offsets_[i + 1] += out_offsets_[i];
    }

    std::size_t n_nodes() const { return n_nodes_; }
    bool directed() const { return directed_; }

    /// All stored ordered dyads (both orientations for undirected graphs).
    const std::vector<Dyad>& edges() const { return edges_; }
    std::size_t n_directed_edges() const { return edges_.size(); }

    /// Edge count in the graph's own convention: ordered dyads if directed, unordered pairs otherwise.
    std::size_t n_edges() const { return directed_ ? edges_.size() : edges_.size() / 2; }

    /// Edges as split units: every dyad if directed, canonical (i < j) pairs otherwise.
    std::vector<Dyad> edge_units() const {
        if (directed_) return edges_;
        std::vector<Dyad> units;
        units.reserve(edges_.size() / 2);
        for (const auto& e : edges_)
            if (e.src < e.dst) units.push_back(e);
        return units;
    }

    bool has_edge(NodeId i, NodeId j) const {
        const auto first = edges_.begin() + static_cast<std::ptrdiff_t>(out_offsets_[i]);
        const auto last = edges_.begin() + static_cast<std::ptrdiff_t>(out_offsets_[i + 1]);
        return std::binary_search(first, last, Dyad{i, j});
    }

    std::size_t out_degree(NodeId i) const { return out_offsets_[i + 1] - out_offsets_[i]; }

    /// Original node identifiers in index order (empty when the graph was built in memory).
    const std::vector<std::string>& node_ids() const { return node_ids_; }
    void set_node_ids(std::vector<std::string> ids) {
        if (ids.size() != n_nodes_) throw Error("node id table size mismatch");
        id_index_.clear();
        for (std::size_t i = 0; i < ids.size(); ++i) id_index_.emplace(ids[i], static_cast<NodeId>(i));
        node_ids_ = std::move(ids);
    }

    /// Index of an original node identifier; when no id table exists, integer ids map to themselves.
    std::optional<NodeId> index_of(const std::string& id) const {
        if (node_ids_.empty()) {
            try {
                std::size_t pos = 0;
                const long v = std::stol(id, &pos);
                if (pos == id.size() && v >= 0 && static_cast<std::size_t>(v) < n_nodes_)
                    return static_cast<NodeId>(v);
            } catch (const std::exception&) {
            }
            return std::nullopt;
        }
        auto it = id_index_.find(id);
        if (it == id_index_.end()) return std::nullopt;
        return it->second;
    }

private:
    std::size_t n_nodes_ = 0;
    bool directed_ = true;
    std::vector<Dyad> edges_;
    std::vector<std::size_t> out_offsets_{0};
    std::vector<std::string> node_ids_;
    std::unordered_map<std::string, NodeId> id_index_;
};

namespace detail {

inline std::string strip_comment(const std::string& line) {
    const auto hash = line.find('#');
    return hash == std::string::npos ? line : line.substr(0, hash);
}

}  // namespace detail

/// Reads whitespace-separated "src dst" lines. Ids are re-indexed densely in order of first appearance.
inline Graph load_edge_list(const std::string& path, bool directed, std::ostream* warn = &std::cerr) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open edge list '" + path + "'");
    std::unordered_map<std::string, NodeId> index;
    std::vector<std::string> ids;
    std::vector<Dyad> edges;
    auto intern = [&](const std::string& id) {
        auto [it, inserted] = index.emplace(id, static_cast<NodeId>(ids.size()));
        if (inserted) ids.push_back(id);
        return it->second;
    };
    std::size_t self_loops = 0;
    std::string line;
    for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
        std::istringstream fields(detail::strip_comment(line));
        std::string a, b, extra;
        if (!(fields >> a)) continue;
        if (!(fields >> b) || (fields >> extra))
            throw Error(path + ":" + std::to_string(line_no) + ": expected 'src dst'");
        const NodeId i = intern(a);
        const NodeId j = intern(b);
        if (i == j) {
            ++self_loops;
            continue;
        }
        edges.push_back({i, j});
    }
    if (self_loops > 0 && warn)
        *warn << "warning: dropped " << self_loops << " self-loop(s) from " << path << "\n";
    Graph g(ids.size(), directed, std::move(edges));
    g.set_node_ids(std::move(ids));
    return g;
}

/// Reads "node_id label" lines; label strings are re-indexed densely in order of first appearance.
inline NodeLabels load_labels(const std::string& path, const Graph& g) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open label file '" + path + "'");
    std::vector<int> labels(g.n_nodes(), -1);
    std::unordered_map<std::string, int> classes;
    std::string line;
    for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
        std::istringstream fields(detail::strip_comment(line));
        std::string id, label;
        if (!(fields >> id)) continue;
        if (!(fields >> label))
            throw Error(path + ":" + std::to_string(line_no) + ": expected 'node_id label'");
        const auto node = g.index_of(id);
        if (!node) continue;  // labelled node absent from the edge list
        auto [it, inserted] = classes.emplace(label, static_cast<int>(classes.size()));
        labels[*node] = it->second;
    }
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0)
            throw Error(path + ": no label for node '" +
                        (g.node_ids().empty() ? std::to_string(i) : g.node_ids()[i]) + "'");
    return NodeLabels{std::move(labels)};
}

inline void save_edge_list(const Graph& g, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    for (const auto& e : g.edge_units()) out << e.src << ' ' << e.dst << '\n';
}

/// Directed: |edges| / N. Undirected: 2 |edges| / N. Both equal stored ordered dyads / N.
inline double average_degree(const Graph& g) {
    if (g.n_nodes() == 0) throw Error("average_degree of an empty node set");
    return static_cast<double>(g.n_directed_edges()) / static_cast<double>(g.n_nodes());
}

/// Fraction of edges whose endpoints share a label.
inline double edge_homophily(const Graph& g, const NodeLabels& labels) {
    if (labels.size() != g.n_nodes())
        throw Error("label count " + std::to_string(labels.size()) + " does not match " +
                    std::to_string(g.n_nodes()) + " nodes");
    const auto units = g.edge_units();
    if (units.empty()) return 0.0;
    std::size_t same = 0;
    for (const auto& e : units) same += labels[e.src] == labels[e.dst];
    return static_cast<double>(same) / static_cast<double>(units.size());
}

enum class Phase { train, val, test };

inline const char* to_string(Phase p) {
    switch (p) {
    case Phase::train: return "train";
    case Phase::val: return "val";
    case Phase::test: return "test";
    }
    return "?";
}

/// One cross-validation fold. For undirected graphs dyads are canonical (src < dst).
struct EdgeSplit {
    std::size_t fold_index = 0;
    std::uint64_t seed = 0;
    std::vector<Dyad> train_pos, val_pos, test_pos;
    std::vector<Dyad> train_neg, val_neg, test_neg;

    /// Keys of every dyad hidden from training (val/test positives and negatives), both orientations
    /// when `undirected`.
    std::unordered_set<std::uint64_t> held_out_keys(std::size_t n_nodes, bool undirected) const {
        std::unordered_set<std::uint64_t> keys;
        for (const auto* list : {&val_pos, &test_pos, &val_neg, &test_neg})
            for (const auto& d : *list) {
                keys.insert(dyad_key(d, n_nodes));
                if (undirected) keys.insert(dyad_key({d.dst, d.src}, n_nodes));
            }
        return keys;
    }
};

namespace detail {

inline std::vector<Dyad> sample_negatives(const Graph& g, std::size_t needed,
                                          std::unordered_set<std::uint64_t>& taken, Rng& rng) {
    const std::size_t n = g.n_nodes();
    std::vector<Dyad> out;
    out.reserve(needed);
    const std::size_t cap = 100 * std::max<std::size_t>(needed, 1);
    std::size_t attempts = 0;
    while (out.size() < needed) {
        if (++attempts > cap)
            throw Error("negative sampling gave up after " + std::to_string(cap) + " attempts (" +
                        std::to_string(out.size()) + " of " + std::to_string(needed) + " drawn)");
        Dyad d{static_cast<NodeId>(uniform_index(rng, n)), static_cast<NodeId>(uniform_index(rng, n))};
        if (d.src == d.dst) continue;
        if (!g.directed()) d = canonical(d);
        if (g.has_edge(d.src, d.dst)) continue;
        if (!taken.insert(dyad_key(d, n)).second) continue;
        out.push_back(d);
    }
    return out;
}

}  // namespace detail

/// K-fold edge split: block f of the shuffled edges is the test set, `val_fraction` of all edges
/// (taken from the remainder) is validation, the rest is training. Each phase gets as many
/// uniformly drawn non-edges as it has positives; negatives are disjoint across phases.
inline std::vector<EdgeSplit> split_edges(const Graph& g, std::size_t n_folds, double val_fraction,
                                          std::uint64_t seed) {
    if (n_folds < 2) throw Error("split_edges needs at least 2 folds");
    if (!(val_fraction >= 0.0 && val_fraction < 0.8)) throw Error("val_fraction must lie in [0, 0.8)");
    auto units = g.edge_units();
    const std::size_t m = units.size();
    if (m < n_folds)
        throw Error("graph has " + std::to_string(m) + " edges, fewer than " + std::to_string(n_folds) +
                    " folds");
    const std::size_t n = g.n_nodes();
    const std::size_t dyads = g.directed() ? n * (n - 1) : n * (n - 1) / 2;
    const std::size_t non_edges = dyads - m;
    if (non_edges < m)
        throw Error("too few non-edges for negative sampling: need " + std::to_string(m) + ", have " +
                    std::to_string(non_edges));

    Rng shuffle_rng = derive_rng(seed, {0x5e11});
    shuffle_range(units.begin(), units.end(), shuffle_rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(m)));

    std::vector<EdgeSplit> splits;
    for (std::size_t f = 0; f < n_folds; ++f) {
        EdgeSplit s;
        s.fold_index = f;
        s.seed = seed;
        const std::size_t lo = f * m / n_folds;
        const std::size_t hi = (f + 1) * m / n_folds;
        s.test_pos.assign(units.begin() + lo, units.begin() + hi);
        std::vector<Dyad> rest(units.begin(), units.begin() + lo);
        rest.insert(rest.end(), units.begin() + hi, units.end());
        if (n_val > rest.size()) throw Error("validation fraction leaves no training edges");
        Rng fold_rng = derive_rng(seed, {0xf01d, f});
        shuffle_range(rest.begin(), rest.end(), fold_rng);
        s.val_pos.assign(rest.begin(), rest.begin() + n_val);
        s.train_pos.assign(rest.begin() + n_val, rest.end());

        std::unordered_set<std::uint64_t> taken;
        Rng neg_rng = derive_rng(seed, {0x4e6, f});
        s.test_neg = detail::sample_negatives(g, s.test_pos.size(), taken, neg_rng);
        s.val_neg = detail::sample_negatives(g, s.val_pos.size(), taken, neg_rng);
        s.train_neg = detail::sample_negatives(g, s.train_pos.size(), taken, neg_rng);
        splits.push_back(std::move(s));
    }
    return splits;
}

/// N x N structure features: phase train sees train_pos, val adds val_pos, test adds test_pos.
inline FeatureMatrix masked_adjacency(const Graph& g, const EdgeSplit& split, Phase phase) {
    const auto n = static_cast<Eigen::Index>(g.n_nodes());
    FeatureMatrix x{Matrix::Zero(n, n), FeatureKind::structure};
    auto add = [&](const std::vector<Dyad>& list) {
        for (const auto& d : list) {
            x.values(d.src, d.dst) = 1.0;
            if (!g.directed()) x.values(d.dst, d.src) = 1.0;
        }
    };
    add(split.train_pos);
    if (phase != Phase::train) add(split.val_pos);
    if (phase == Phase::test) add(split.test_pos);
    return x;
}

// JSON manifests ---------------------------------------------------------------------------------

inline nlohmann::json dyads_to_json(const std::vector<Dyad>& dyads) {
    auto arr = nlohmann::json::array();
    for (const auto& d : dyads) arr.push_back({d.src, d.dst});
    return arr;
}

inline std::vector<Dyad> dyads_from_json(const nlohmann::json& arr) {
    std::vector<Dyad> out;
    out.reserve(arr.size());
    for (const auto& p : arr) out.push_back({p.at(0).get<NodeId>(), p.at(1).get<NodeId>()});
    return out;
}

inline nlohmann::json to_json(const EdgeSplit& s) {
    return {{"fold_index", s.fold_index},
            {"seed", s.seed},
            {"train_pos", dyads_to_json(s.train_pos)},
            {"val_pos", dyads_to_json(s.val_pos)},
            {"test_pos", dyads_to_json(s.test_pos)},
            {"train_neg", dyads_to_json(s.train_neg)},
            {"val_neg", dyads_to_json(s.val_neg)},
            {"test_neg", dyads_to_json(s.test_neg)}};
}

inline EdgeSplit split_from_json(const nlohmann::json& j) {
    EdgeSplit s;
    s.fold_index = j.at("fold_index").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.train_pos = dyads_from_json(j.at("train_pos"));
    s.val_pos = dyads_from_json(j.at("val_pos"));
    s.test_pos = dyads_from_json(j.at("test_pos"));
    s.train_neg = dyads_from_json(j.at("train_neg"));
    s.val_neg = dyads_from_json(j.at("val_neg"));
    s.test_neg = dyads_from_json(j.at("test_neg"));
    return s;
}

}  // namespace nlb
