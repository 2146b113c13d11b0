#include <gtest/gtest.h>

#include "netlinkbench/graph.hpp"
#include "netlinkbench/synthgen.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace nlb;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    const auto path = std::filesystem::temp_directory_path() / ("nlb_graph_" + name);
    std::ofstream(path) << content;
    return path.string();
}

Graph random_graph(std::size_t n, std::size_t m, std::uint64_t seed, bool directed = true) {
    Rng rng(seed);
    std::set<Dyad> edges;
    while (edges.size() < m) {
        Dyad d{static_cast<NodeId>(uniform_index(rng, n)), static_cast<NodeId>(uniform_index(rng, n))};
        if (d.src == d.dst) continue;
        edges.insert(directed ? d : canonical(d));
    }
    return Graph(n, directed, {edges.begin(), edges.end()});
}

}  // namespace

TEST(LoadEdgeList, DirectTranscription) {
    const auto g = load_edge_list(write_temp("basic.txt", "0 1\n1 2\n"), true);
    EXPECT_EQ(g.n_nodes(), 3u);
    EXPECT_EQ(g.edges(), (std::vector<Dyad>{{0, 1}, {1, 2}}));
}

TEST(LoadEdgeList, SelfLoopDroppedButNodeKept) {
    std::ostringstream warn;
    const auto g = load_edge_list(write_temp("loop.txt", "0 1\n1 2\n3 3\n"), true, &warn);
    EXPECT_EQ(g.n_nodes(), 4u);
    EXPECT_EQ(g.n_edges(), 2u);
    EXPECT_NE(warn.str().find("1 self-loop"), std::string::npos);
}

TEST(LoadEdgeList, CommentsDuplicatesAndStringIds) {
    const auto g = load_edge_list(write_temp("str.txt", "# header\nalice bob\nbob carol # trailing\nalice bob\n"), true);
    EXPECT_EQ(g.n_nodes(), 3u);
    EXPECT_EQ(g.n_edges(), 2u);
    EXPECT_EQ(g.node_ids(), (std::vector<std::string>{"alice", "bob", "carol"}));
    EXPECT_EQ(g.index_of("carol"), 2);
}

TEST(LoadEdgeList, UndirectedClosesEdgeSet) {
    const auto g = load_edge_list(write_temp("und.txt", "0 1\n1 0\n1 2\n"), false);
    EXPECT_EQ(g.n_edges(), 2u);
    EXPECT_EQ(g.n_directed_edges(), 4u);
    EXPECT_TRUE(g.has_edge(2, 1));
}

TEST(LoadEdgeList, Errors) {
    EXPECT_THROW(load_edge_list("/nonexistent/edges.txt", true), Error);
    try {
        load_edge_list(write_temp("bad.txt", "0 1\n2\n"), true);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
    }
}

TEST(AverageDegree, Conventions) {
    EXPECT_DOUBLE_EQ(average_degree(Graph(3, true, {{0, 1}, {1, 2}, {2, 0}})), 1.0);
    EXPECT_DOUBLE_EQ(average_degree(Graph(5, true, {})), 0.0);
    // undirected triangle: 2 * 3 / 3
    EXPECT_DOUBLE_EQ(average_degree(Graph(3, false, {{0, 1}, {1, 2}, {2, 0}})), 2.0);
    EXPECT_THROW(average_degree(Graph(0, true, {})), Error);
}

TEST(AverageDegree, TimesNIsDirectedEdgeCount) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto g = random_graph(30, 40 + s, s, s % 2 == 0);
        EXPECT_EQ(average_degree(g) * 30.0, static_cast<double>(g.n_directed_edges()));
    }
}

TEST(EdgeHomophily, Examples) {
    const Graph g(4, true, {{0, 1}, {1, 2}, {2, 3}, {3, 0}});
    EXPECT_DOUBLE_EQ(edge_homophily(g, NodeLabels{{0, 0, 0, 0}}), 1.0);
    EXPECT_DOUBLE_EQ(edge_homophily(g, NodeLabels{{0, 1, 0, 1}}), 0.0);  // bipartite sides
    // 5 edges, two of them (0->1 and 3->4) intra-class
    const Graph h(5, true, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 0}});
    const NodeLabels lab{{0, 0, 1, 2, 2}};
    std::size_t same = 0;
    for (const auto& e : h.edges()) same += lab[e.src] == lab[e.dst];
    ASSERT_EQ(same, 2u);
    EXPECT_DOUBLE_EQ(edge_homophily(h, lab), 0.4);
    EXPECT_THROW(edge_homophily(h, NodeLabels{{0, 1}}), Error);
}

TEST(EdgeHomophily, InvariantUnderClassPermutation) {
    const auto g = random_graph(40, 120, 7);
    Rng rng(3);
    NodeLabels lab;
    for (int i = 0; i < 40; ++i) lab.labels.push_back(static_cast<int>(uniform_index(rng, 4)));
    std::vector<int> perm{0, 1, 2, 3};
    do {
        NodeLabels relabeled = lab;
        for (auto& l : relabeled.labels) l = perm[static_cast<std::size_t>(l)];
        EXPECT_DOUBLE_EQ(edge_homophily(g, relabeled), edge_homophily(g, lab));
    } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST(SplitEdges, FoldSizes) {
    const auto g = random_graph(100, 400, 11);
    const auto splits = split_edges(g, 5, 0.1, 42);
    ASSERT_EQ(splits.size(), 5u);
    for (const auto& s : splits) {
        EXPECT_EQ(s.test_pos.size(), 80u);
        EXPECT_EQ(s.val_pos.size(), 40u);
        EXPECT_EQ(s.train_pos.size(), 280u);
        EXPECT_EQ(s.test_neg.size(), 80u);
        EXPECT_EQ(s.val_neg.size(), 40u);
        EXPECT_EQ(s.train_neg.size(), 280u);
    }
}

TEST(SplitEdges, Deterministic) {
    const auto g = random_graph(60, 200, 5);
    const auto a = split_edges(g, 5, 0.1, 9);
    const auto b = split_edges(g, 5, 0.1, 9);
    for (std::size_t f = 0; f < a.size(); ++f) EXPECT_EQ(to_json(a[f]), to_json(b[f]));
    EXPECT_NE(to_json(split_edges(g, 5, 0.1, 10)[0]), to_json(a[0]));
}

TEST(SplitEdges, InvariantsOnRandomGraphs) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const bool directed = seed % 2 == 0;
        const auto g = random_graph(50, 150, seed, directed);
        const auto splits = split_edges(g, 5, 0.1, seed);
        const auto units = g.edge_units();
        const std::set<Dyad> all(units.begin(), units.end());
        std::set<Dyad> test_union;
        for (const auto& s : splits) {
            std::set<Dyad> pos;
            for (const auto* list : {&s.train_pos, &s.val_pos, &s.test_pos})
                for (const auto& d : *list) EXPECT_TRUE(pos.insert(d).second) << "positive in two phases";
            EXPECT_EQ(pos, all);
            std::set<Dyad> neg;
            for (const auto* list : {&s.train_neg, &s.val_neg, &s.test_neg})
                for (const auto& d : *list) {
                    EXPECT_NE(d.src, d.dst);
                    EXPECT_FALSE(g.has_edge(d.src, d.dst));
                    if (!directed) EXPECT_LT(d.src, d.dst);
                    EXPECT_TRUE(neg.insert(d).second) << "negative in two phases";
                }
            test_union.insert(s.test_pos.begin(), s.test_pos.end());
        }
        EXPECT_EQ(test_union, all);
    }
}

TEST(SplitEdges, Errors) {
    EXPECT_THROW(split_edges(Graph(5, true, {{0, 1}}), 5, 0.1, 0), Error);
    EXPECT_THROW(split_edges(random_graph(20, 40, 1), 1, 0.1, 0), Error);
    EXPECT_THROW(split_edges(random_graph(20, 40, 1), 5, 0.8, 0), Error);
    // complete directed graph on 4 nodes minus one dyad: 11 edges, 1 non-edge
    std::vector<Dyad> dense;
    for (NodeId i = 0; i < 4; ++i)
        for (NodeId j = 0; j < 4; ++j)
            if (i != j && !(i == 3 && j == 2)) dense.push_back({i, j});
    try {
        split_edges(Graph(4, true, dense), 5, 0.1, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("non-edges"), std::string::npos);
    }
}

TEST(SplitEdges, JsonRoundTrip) {
    const auto g = random_graph(30, 60, 2);
    for (const auto& s : split_edges(g, 3, 0.1, 4)) EXPECT_EQ(to_json(split_from_json(to_json(s))), to_json(s));
}

TEST(MaskedAdjacency, PhasesAndLeakage) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const bool directed = seed % 2 == 0;
        const auto g = random_graph(40, 120, seed, directed);
        const auto split = split_edges(g, 5, 0.1, seed)[seed % 5];
        const auto tr = masked_adjacency(g, split, Phase::train).values;
        const auto va = masked_adjacency(g, split, Phase::val).values;
        const auto te = masked_adjacency(g, split, Phase::test).values;
        for (const auto* list : {&split.val_pos, &split.test_pos})
            for (const auto& d : *list) {
                EXPECT_EQ(tr(d.src, d.dst), 0.0);
                if (!directed) EXPECT_EQ(tr(d.dst, d.src), 0.0);
            }
        for (const auto& d : split.test_pos) EXPECT_EQ(va(d.src, d.dst), 0.0);
        // nested supports
        EXPECT_TRUE(((tr.array() != 0) <= (va.array() != 0)).all());
        EXPECT_TRUE(((va.array() != 0) <= (te.array() != 0)).all());
        // test phase is the full adjacency
        for (NodeId i = 0; i < 40; ++i)
            for (NodeId j = 0; j < 40; ++j) EXPECT_EQ(te(i, j), g.has_edge(i, j) ? 1.0 : 0.0);
    }
}

TEST(LoadLabels, MapsIdsAndClasses) {
    const auto g = load_edge_list(write_temp("lab_edges.txt", "a b\nb c\n"), true);
    const auto lab = load_labels(write_temp("lab.txt", "c Theory\na Neural\nb Theory\nz Other\n"), g);
    EXPECT_EQ(lab.labels, (std::vector<int>{1, 0, 0}));
    EXPECT_THROW(load_labels(write_temp("lab_missing.txt", "a x\n"), g), Error);
}
