#include <gtest/gtest.h>

#include "netlinkbench/eval.hpp"
#include "netlinkbench/pgm.hpp"
#include "netlinkbench/synthgen.hpp"

#include <numeric>

using namespace nlb;

namespace {

PgmParams random_params(std::size_t n, std::size_t k, Rng& rng) {
    PgmParams p{Matrix(n, k), Matrix(n, k), Matrix(k, k)};
    for (auto* m : {&p.U, &p.V, &p.W})
        for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = uniform01(rng);
    return p;
}

Graph small_random_graph(std::size_t n, double density, Rng& rng, bool directed = true) {
    std::vector<Dyad> edges;
    for (NodeId i = 0; i < static_cast<NodeId>(n); ++i)
        for (NodeId j = directed ? 0 : i + 1; j < static_cast<NodeId>(n); ++j)
            if (i != j && uniform01(rng) < density) edges.push_back({i, j});
    return Graph(n, directed, edges);
}

/// Dyad-by-dyad training log-likelihood.
double brute_loglik(const Graph& g, const EdgeSplit& s, const PgmParams& p, double eps) {
    std::set<Dyad> hidden;
    for (const auto* l : {&s.val_pos, &s.test_pos, &s.val_neg, &s.test_neg})
        for (const auto& d : *l) {
            hidden.insert(d);
            if (!g.directed()) hidden.insert({d.dst, d.src});
        }
    const auto n = static_cast<NodeId>(g.n_nodes());
    double ll = 0.0;
    for (NodeId i = 0; i < n; ++i)
        for (NodeId j = 0; j < n; ++j) {
            if (i == j || hidden.count({i, j})) continue;
            double m = 0.0;
            for (Eigen::Index k = 0; k < p.W.rows(); ++k)
                for (Eigen::Index l = 0; l < p.W.cols(); ++l) m += p.U(i, k) * p.V(j, l) * p.W(k, l);
            ll += (g.has_edge(i, j) ? std::log(m + eps) : 0.0) - m;
        }
    return ll;
}

/// Best accuracy over all relabelings of the predicted communities.
double aligned_accuracy(const NodeLabels& truth, const NodeLabels& pred, int k) {
    std::vector<int> perm(static_cast<std::size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    double best = 0.0;
    do {
        std::size_t hit = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) hit += perm[static_cast<std::size_t>(pred[i])] == truth[i];
        best = std::max(best, static_cast<double>(hit) / static_cast<double>(truth.size()));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

void expect_monotone(const std::vector<double>& trace) {
    for (std::size_t t = 1; t < trace.size(); ++t)
        EXPECT_GE(trace[t], trace[t - 1] - 1e-8) << "iteration " << t;
}

}  // namespace

TEST(MtLoglik, GuardAndEmpty) {
    const Graph g(6, true, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 0}, {0, 3}, {2, 5}, {1, 4}, {4, 1}});
    const auto split = split_edges(g, 5, 0.1, 1)[0];
    PgmParams p{Matrix::Ones(6, 2), Matrix::Ones(6, 2), Matrix::Zero(2, 2)};
    EXPECT_DOUBLE_EQ(mt_loglik(g, split, p), static_cast<double>(split.train_pos.size()) * std::log(1e-12));
    const Graph empty(4, true, {});
    PgmParams q{Matrix::Ones(4, 1), Matrix::Ones(4, 1), Matrix::Zero(1, 1)};
    EXPECT_EQ(mt_loglik(empty, EdgeSplit{}, q), 0.0);
}

TEST(MtLoglik, MatchesBruteForce) {
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        const bool directed = trial % 2 == 0;
        const auto g = small_random_graph(6, 0.3, rng, directed);
        if (g.n_edges() < 2 || 2 * g.n_edges() > (directed ? 30u : 15u)) continue;
        const auto split = split_edges(g, 2, 0.0, static_cast<std::uint64_t>(trial))[0];
        const auto p = random_params(6, 3, rng);
        EXPECT_NEAR(mt_loglik(g, split, p), brute_loglik(g, split, p, 1e-12), 1e-10);
    }
}

TEST(MtFit, PlantedAssortativeRecovery) {
    SynthConfig cfg;
    cfg.seed = 5;
    const auto [g, gt] = generate(cfg);
    const auto split = split_edges(g, 5, 0.1, 5)[0];
    PgmFitConfig fc;
    fc.K = 5;
    fc.seed = 1;
    const auto fit = mt_fit(g, split, fc);
    expect_monotone(fit.objective_trace);
    EXPECT_TRUE((fit.params.base.U.array() >= 0).all());
    EXPECT_TRUE((fit.params.base.W.array() >= 0).all());
    EXPECT_GT(aligned_accuracy(gt_scalar_feature(gt), hard_memberships(fit.params.base), 5), 0.8);

    const auto again = mt_fit(g, split, fc);
    EXPECT_EQ(again.params.base.U, fit.params.base.U);
    EXPECT_EQ(again.params.base.W, fit.params.base.W);
}

TEST(MtFit, MonotoneOnRandomInstances) {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const auto g = small_random_graph(25, 0.15, rng, trial % 3 != 0);
        const auto split = split_edges(g, 5, 0.1, static_cast<std::uint64_t>(trial))[trial % 5];
        PgmFitConfig fc;
        fc.K = 2 + static_cast<std::size_t>(trial % 4);
        fc.n_restarts = 1;
        fc.max_iter = 200;
        fc.seed = static_cast<std::uint64_t>(trial);
        const auto fit = mt_fit(g, split, fc);
        expect_monotone(fit.objective_trace);
        EXPECT_TRUE((fit.params.base.U.array() >= 0).all() && (fit.params.base.V.array() >= 0).all());
    }
}

TEST(MtFit, HeldOutDyadsDoNotLeak) {
    SynthConfig cfg;
    cfg.n_nodes = 60;
    cfg.target_avg_degree = 8;
    cfg.seed = 2;
    const auto g = generate(cfg).first;
    const auto split = split_edges(g, 5, 0.1, 3)[1];
    PgmFitConfig fc;
    fc.K = 3;
    fc.n_restarts = 2;
    fc.max_iter = 100;
    const auto base = mt_fit(g, split, fc);

    // Drop two test positives and add two test negatives as edges.
    std::vector<Dyad> edges;
    const std::set<Dyad> drop{split.test_pos[0], split.test_pos[1]};
    for (const auto& e : g.edges())
        if (!drop.count(e)) edges.push_back(e);
    edges.push_back(split.test_neg[0]);
    edges.push_back(split.test_neg[1]);
    const Graph perturbed(g.n_nodes(), true, edges);
    const auto other = mt_fit(perturbed, split, fc);
    EXPECT_EQ(other.params.base.U, base.params.base.U);
    EXPECT_EQ(other.params.base.V, base.params.base.V);
    EXPECT_EQ(other.params.base.W, base.params.base.W);
    EXPECT_EQ(other.objective_trace, base.objective_trace);
}

TEST(MtFit, PermutationEquivariance) {
    Rng rng(14);
    const auto g = small_random_graph(20, 0.2, rng);
    const auto split = split_edges(g, 5, 0.1, 8)[0];
    std::vector<NodeId> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    shuffle_range(perm.begin(), perm.end(), rng);
    auto map = [&](std::vector<Dyad> v) {
        for (auto& d : v) d = {perm[d.src], perm[d.dst]};
        return v;
    };
    const Graph pg(20, true, map(g.edges()));
    EdgeSplit ps = split;
    for (auto* l : {&ps.train_pos, &ps.val_pos, &ps.test_pos, &ps.train_neg, &ps.val_neg, &ps.test_neg}) *l = map(*l);

    const auto init = random_params(20, 3, rng);
    PgmParams pinit = init;
    for (Eigen::Index i = 0; i < 20; ++i) {
        pinit.U.row(perm[i]) = init.U.row(i);
        pinit.V.row(perm[i]) = init.V.row(i);
    }
    EXPECT_NEAR(mt_loglik(g, split, init), mt_loglik(pg, ps, pinit), 1e-8);

    PgmFitConfig fc;
    fc.K = 3;
    fc.max_iter = 150;
    const auto a = mt_fit_from(g, split, init, fc);
    const auto b = mt_fit_from(pg, ps, pinit, fc);
    EXPECT_NEAR(a.objective(), b.objective(), 1e-8);
    for (Eigen::Index i = 0; i < 20; ++i)
        EXPECT_LT((a.params.base.U.row(i) - b.params.base.U.row(perm[i])).norm(), 1e-8);
}

TEST(MtFit, NonFiniteStartIsReported) {
    Rng rng(15);
    const auto g = small_random_graph(10, 0.3, rng);
    const auto split = split_edges(g, 5, 0.1, 1)[0];
    auto init = random_params(10, 2, rng);
    init.W(0, 0) = std::numeric_limits<double>::quiet_NaN();
    PgmFitConfig fc;
    fc.K = 2;
    EXPECT_THROW(mt_fit_from(g, split, init, fc), Error);
}

TEST(MtScore, Basics) {
    PgmParams p{Matrix::Constant(3, 1, 2.0), Matrix::Constant(3, 1, 3.0), Matrix::Constant(1, 1, 0.5)};
    EXPECT_DOUBLE_EQ(mt_score(p, 0, 1), 3.0);
    p.W.setZero();
    EXPECT_EQ(mt_score(p, 0, 1), 0.0);
}

TEST(MtScore, AucInvariantUnderMonotoneTransform) {
    Rng rng(16);
    const auto p = random_params(30, 3, rng);
    std::vector<double> pos, neg, tpos, tneg;
    for (NodeId i = 0; i < 30; ++i) {
        const double m = mt_score(p, i, (i + 1) % 30);
        const double n = mt_score(p, i, (i + 7) % 30);
        pos.push_back(m);
        neg.push_back(n);
        tpos.push_back(-std::expm1(-m));
        tneg.push_back(-std::expm1(-n));
    }
    EXPECT_EQ(auc(pos, neg), auc(tpos, tneg));
}

TEST(MtcovFit, GammaZeroReproducesMtFit) {
    SynthConfig cfg;
    cfg.n_nodes = 60;
    cfg.target_avg_degree = 8;
    cfg.seed = 4;
    const auto [g, gt] = generate(cfg);
    const auto split = split_edges(g, 5, 0.1, 4)[2];
    PgmFitConfig fc;
    fc.K = 4;
    fc.n_restarts = 3;
    fc.max_iter = 120;
    const auto mt = mt_fit(g, split, fc);
    const auto cov = mtcov_fit(g, split, gt_scalar_feature(gt), 5, 0.0, fc);
    EXPECT_EQ(cov.params.base.U, mt.params.base.U);
    EXPECT_EQ(cov.params.base.V, mt.params.base.V);
    EXPECT_EQ(cov.params.base.W, mt.params.base.W);
    EXPECT_EQ(cov.objective_trace, mt.objective_trace);
}

// Node 5 is isolated, so its membership row collapses to zero.
TEST(MtcovFit, GammaZeroWithIsolatedNode) {
    const Graph g(6, false, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 0}, {0, 2}, {1, 3}});
    EdgeSplit split;
    split.train_pos = g.edges();
    PgmFitConfig fc;
    fc.K = 2;
    fc.n_restarts = 1;
    fc.max_iter = 300;
    const NodeLabels attrs{{0, 1, 0, 1, 0, 1}};
    const auto mt = mt_fit(g, split, fc);
    const auto cov = mtcov_fit(g, split, attrs, 2, 0.0, fc);
    EXPECT_EQ(cov.objective_trace, mt.objective_trace);
    EXPECT_TRUE(std::isfinite(mtcov_objective(g, split, attrs, cov.params)));
}

TEST(MtcovFit, SingleCommunityRecoversEmpiricalFrequencies) {
    Rng rng(17);
    const auto g = small_random_graph(40, 0.1, rng);
    const auto split = split_edges(g, 5, 0.1, 2)[0];
    NodeLabels attrs;
    std::vector<double> freq(4, 0.0);
    for (int i = 0; i < 40; ++i) {
        attrs.labels.push_back(static_cast<int>(uniform_index(rng, 4)));
        freq[static_cast<std::size_t>(attrs.labels.back())] += 1.0 / 40.0;
    }
    PgmFitConfig fc;
    fc.K = 1;
    fc.n_restarts = 2;
    const auto fit = mtcov_fit(g, split, attrs, 4, 1.0, fc);
    for (int z = 0; z < 4; ++z) EXPECT_NEAR(fit.params.Beta(0, z), freq[static_cast<std::size_t>(z)], 1e-6);
}

TEST(MtcovFit, MonotoneAndStochastic) {
    Rng rng(18);
    for (int trial = 0; trial < 20; ++trial) {
        const auto g = small_random_graph(30, 0.12, rng, trial % 2 == 0);
        const auto split = split_edges(g, 5, 0.1, static_cast<std::uint64_t>(trial))[0];
        NodeLabels attrs;
        for (int i = 0; i < 30; ++i) attrs.labels.push_back(static_cast<int>(uniform_index(rng, 3)));
        PgmFitConfig fc;
        fc.K = 2 + static_cast<std::size_t>(trial % 3);
        fc.n_restarts = 1;
        fc.max_iter = 150;
        fc.seed = static_cast<std::uint64_t>(trial);
        const double gamma = 0.05 * trial;
        const auto fit = mtcov_fit(g, split, attrs, 3, gamma, fc);
        expect_monotone(fit.objective_trace);
        for (Eigen::Index k = 0; k < fit.params.Beta.rows(); ++k)
            EXPECT_NEAR(fit.params.Beta.row(k).sum(), 1.0, 1e-12);
        EXPECT_NEAR(mtcov_objective(g, split, attrs, fit.params), fit.objective(), 1e-9 * std::abs(fit.objective()));
    }
}

TEST(MtcovFit, Errors) {
    Rng rng(19);
    const auto g = small_random_graph(10, 0.3, rng);
    const auto split = split_edges(g, 5, 0.1, 1)[0];
    PgmFitConfig fc;
    fc.K = 2;
    NodeLabels attrs{std::vector<int>(10, 0)};
    attrs.labels[3] = 5;
    EXPECT_THROW(mtcov_fit(g, split, attrs, 3, 0.5, fc), Error);
    attrs.labels[3] = 0;
    EXPECT_THROW(mtcov_fit(g, split, attrs, 3, 1.5, fc), Error);
}

TEST(HardMemberships, ArgmaxContract) {
    PgmParams p;
    p.U = Matrix(3, 3);
    p.U << 0, 1, 0, 0, 0, 1, 1, 0, 0;
    EXPECT_EQ(hard_memberships(p).labels, (std::vector<int>{1, 2, 0}));
    p.U.setConstant(0.25);
    EXPECT_EQ(hard_memberships(p).labels, (std::vector<int>{0, 0, 0}));

    Rng rng(20);
    auto q = random_params(50, 4, rng);
    const auto before = hard_memberships(q);
    for (Eigen::Index i = 0; i < 50; ++i) q.U.row(i) *= 0.01 + 10.0 * uniform01(rng);
    EXPECT_EQ(hard_memberships(q).labels, before.labels);
}
