#include <gtest/gtest.h>

#include "netlinkbench/eval.hpp"
#include "netlinkbench/gnn.hpp"
#include "netlinkbench/synthgen.hpp"

#include <set>

using namespace nlb;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2.0 * uniform01(rng) - 1.0);
    return m;
}

Graph planted_graph(std::size_t n, std::size_t k, double degree, std::uint64_t seed) {
    SynthConfig cfg;
    cfg.n_nodes = n;
    cfg.n_communities = k;
    cfg.target_avg_degree = degree;
    cfg.seed = seed;
    return generate(cfg).first;
}

struct Instance {
    Graph g;
    EdgeSplit split;
    Matrix X;
    SparseMatrix P;
};

Instance small_instance(std::size_t n, Eigen::Index f, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Dyad> edges;
    for (NodeId i = 0; i < static_cast<NodeId>(n); ++i)
        for (NodeId j = 0; j < static_cast<NodeId>(n); ++j)
            if (i != j && uniform01(rng) < 0.25) edges.push_back({i, j});
    Graph g(n, true, edges);
    auto split = split_edges(g, 3, 0.0, seed)[0];
    Matrix X = random_matrix(static_cast<Eigen::Index>(n), f, rng);
    auto P = normalize_adjacency(g, split);
    return {std::move(g), std::move(split), std::move(X), std::move(P)};
}

/// Training objective with the reparameterisation noise pinned by a fresh rng.
double objective(const GnnModel& m, const Instance& in, double wd) {
    Rng rng(77);
    const auto e = forward(m, in.X, in.P, true, 0.0, rng);
    return loss(e, in.split.train_pos, in.split.train_neg, m.variational) + weight_penalty(m, wd);
}

double max_relative_gradient_error(GnnModel m, const Instance& in, double wd) {
    Rng rng(77);
    const auto cache = forward_cached(m, in.X, in.P, true, 0.0, rng);
    const auto grads = backward(m, cache, in.P, in.split.train_pos, in.split.train_neg, wd);
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t k = 0; k < m.weights.size(); ++k)
        for (Eigen::Index idx = 0; idx < m.weights[k].size(); ++idx) {
            double& w = m.weights[k].data()[idx];
            const double saved = w;
            w = saved + h;
            const double up = objective(m, in, wd);
            w = saved - h;
            const double down = objective(m, in, wd);
            w = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = grads[k].data()[idx];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            worst = std::max(worst, std::abs(numeric - analytic) / denom);
        }
    return worst;
}

}  // namespace

TEST(NormalizeAdjacency, SmallCases) {
    const Graph single(1, true, {});
    const auto p1 = Matrix(normalize_adjacency(single, EdgeSplit{}));
    ASSERT_EQ(p1.rows(), 1);
    EXPECT_DOUBLE_EQ(p1(0, 0), 1.0);

    const Graph pair(2, true, {{0, 1}});
    EdgeSplit s;
    s.train_pos = {{0, 1}};
    const auto p2 = Matrix(normalize_adjacency(pair, s));
    EXPECT_TRUE((p2.array() == 0.5).all());
}

TEST(NormalizeAdjacency, MatchesDegreeOracle) {
    const auto in = small_instance(12, 2, 3);
    const auto P = Matrix(in.P);
    // Oracle: A + I from an explicit symmetric boolean table, degrees counted directly.
    Matrix A = Matrix::Identity(12, 12);
    for (const auto& d : in.split.train_pos) A(d.src, d.dst) = A(d.dst, d.src) = 1.0;
    std::vector<double> deg(12, 0.0);
    for (int i = 0; i < 12; ++i)
        for (int j = 0; j < 12; ++j) deg[static_cast<std::size_t>(i)] += A(i, j);
    for (int i = 0; i < 12; ++i)
        for (int j = 0; j < 12; ++j)
            EXPECT_NEAR(P(i, j), A(i, j) / std::sqrt(deg[static_cast<std::size_t>(i)] * deg[static_cast<std::size_t>(j)]),
                        1e-15);
    // held-out positives are invisible
    for (const auto& d : in.split.test_pos)
        if (!std::count(in.split.train_pos.begin(), in.split.train_pos.end(), Dyad{d.dst, d.src}))
            EXPECT_EQ(P(d.src, d.dst), 0.0);
}

TEST(Forward, ZeroWeightsGiveZeroEmbeddings) {
    const auto in = small_instance(6, 3, 1);
    GnnConfig cfg;
    cfg.hidden_dim = 4;
    auto m = init_model(3, cfg);
    for (auto& w : m.weights) w.setZero();
    Rng rng(0);
    EXPECT_TRUE((forward(m, in.X, in.P, false, 0.0, rng).Z.array() == 0.0).all());
}

TEST(Forward, SingleLayerIdentity) {
    GnnModel m;
    m.weights = {Matrix::Identity(3, 3)};
    Matrix x(1, 3);
    x << 0.3, -1.2, 4.0;
    SparseMatrix P(1, 1);
    P.insert(0, 0) = 1.0;
    Rng rng(0);
    EXPECT_EQ(forward(m, x, P, false, 0.0, rng).Z, x);
}

TEST(Forward, MatchesNaiveLoops) {
    Rng rng(5);
    const Graph g(4, true, {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {0, 2}});
    const auto split = split_edges(g, 5, 0.0, 1)[0];
    const Instance in{g, split, random_matrix(4, 3, rng), normalize_adjacency(g, split)};
    GnnModel m;
    m.weights = {random_matrix(3, 5, rng), random_matrix(5, 2, rng)};
    const Matrix P = Matrix(in.P);
    auto product = [](const Matrix& A, const Matrix& B) {
        Matrix C = Matrix::Zero(A.rows(), B.cols());
        for (Eigen::Index i = 0; i < A.rows(); ++i)
            for (Eigen::Index j = 0; j < B.cols(); ++j)
                for (Eigen::Index k = 0; k < A.cols(); ++k) C(i, j) += A(i, k) * B(k, j);
        return C;
    };
    Matrix H = product(product(P, in.X), m.weights[0]);
    for (Eigen::Index i = 0; i < H.size(); ++i) H.data()[i] = std::max(0.0, H.data()[i]);
    const Matrix expected = product(product(P, H), m.weights[1]);
    const auto got = forward(m, in.X, in.P, false, 0.0, rng).Z;
    EXPECT_LT((got - expected).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Loss, ZeroEmbeddingsAndKl) {
    Embeddings e;
    e.Z = Matrix::Zero(3, 2);
    e.mu = Matrix::Zero(3, 2);
    e.logvar = Matrix::Zero(3, 2);
    EXPECT_NEAR(loss(e, {{0, 1}, {1, 2}}, {{0, 2}}, false), std::log(2.0), 1e-15);
    EXPECT_EQ(kl_divergence(e), 0.0);
    EXPECT_NEAR(loss(e, {{0, 1}}, {{0, 2}}, true), std::log(2.0), 1e-15);
}

TEST(Loss, ThreeDyadOracle) {
    Embeddings e;
    e.Z = Matrix(3, 2);
    e.Z << 0.5, -1.0, 2.0, 0.25, -0.75, 1.5;
    auto dot = [&](int i, int j) { return e.Z(i, 0) * e.Z(j, 0) + e.Z(i, 1) * e.Z(j, 1); };
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    const double expected =
        -(std::log(sig(dot(0, 1))) + std::log(sig(dot(1, 2))) + std::log(1.0 - sig(dot(0, 2)))) / 3.0;
    EXPECT_NEAR(loss(e, {{0, 1}, {1, 2}}, {{0, 2}}, false), expected, 1e-12);
}

TEST(Loss, ClippedAtSaturation) {
    Embeddings e;
    e.Z = Matrix::Constant(2, 1, 100.0);
    EXPECT_NEAR(loss(e, {}, {{0, 1}}, false), -std::log(1e-7), 1e-6);
}

TEST(Backward, ZeroWeightsMatchFiniteDifferences) {
    const auto in = small_instance(6, 3, 2);
    GnnConfig cfg;
    cfg.hidden_dim = 2;
    auto m = init_model(3, cfg);
    for (auto& w : m.weights) w.setZero();
    Rng rng(77);
    const auto cache = forward_cached(m, in.X, in.P, true, 0.0, rng);
    for (const auto& g : backward(m, cache, in.P, in.split.train_pos, in.split.train_neg, 0.0))
        EXPECT_LT(g.cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(max_relative_gradient_error(m, in, 0.0), 1e-4);
}

TEST(Backward, RandomInstancesMatchFiniteDifferences) {
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        const std::size_t n = 5 + seed % 4;
        const auto in = small_instance(n, 3, seed + 10);
        GnnConfig cfg;
        cfg.hidden_dim = 2;
        cfg.n_layers = 1 + seed % 2;
        cfg.variational = seed % 4 >= 2;
        cfg.seed = seed;
        const auto m = init_model(3, cfg);
        const double wd = seed % 3 == 0 ? 0.01 : 0.0;
        EXPECT_LT(max_relative_gradient_error(m, in, wd), 1e-4)
            << "seed " << seed << " layers " << cfg.n_layers << " variational " << cfg.variational;
        ++checked;
    }
    EXPECT_EQ(checked, 12);
}

TEST(Backward, WeightDecayOnly) {
    Rng rng(9);
    GnnModel m;
    m.weights = {random_matrix(3, 4, rng), random_matrix(4, 2, rng)};
    const auto in = small_instance(6, 3, 4);
    Rng fwd(0);
    const auto cache = forward_cached(m, in.X, in.P, true, 0.0, fwd);
    const double lambda = 0.3;
    const auto grads = backward(m, cache, in.P, {}, {}, lambda);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_LT((grads[k] - 2.0 * lambda * m.weights[k]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
    GnnModel m;
    m.weights = {Matrix::Constant(2, 2, 1.0)};
    adam_step(m, {Matrix::Constant(2, 2, 3.7)}, 0.01);
    EXPECT_LT((m.weights[0].array() - (1.0 - 0.01)).abs().maxCoeff(), 1e-6);
}

TEST(Adam, ZeroGradientLeavesWeights) {
    GnnModel m;
    m.weights = {Matrix::Constant(2, 3, 0.5)};
    const Matrix before = m.weights[0];
    adam_step(m, {Matrix::Zero(2, 3)}, 0.1);
    EXPECT_EQ(m.weights[0], before);
}

TEST(Adam, ScalarQuadraticTrace) {
    // f(w) = (w - 3)^2, scripted scalar Adam.
    double w = 0.0, mom = 0.0, vel = 0.0;
    GnnModel m;
    m.weights = {Matrix::Zero(1, 1)};
    for (int t = 1; t <= 10; ++t) {
        const double g = 2.0 * (w - 3.0);
        mom = 0.9 * mom + 0.1 * g;
        vel = 0.999 * vel + 0.001 * g * g;
        w -= 0.05 * (mom / (1.0 - std::pow(0.9, t))) / (std::sqrt(vel / (1.0 - std::pow(0.999, t))) + 1e-8);
        adam_step(m, {Matrix::Constant(1, 1, 2.0 * (m.weights[0](0, 0) - 3.0))}, 0.05);
        EXPECT_NEAR(m.weights[0](0, 0), w, 1e-10) << "step " << t;
    }
}

TEST(Train, PatienceZeroStopsAtFirstNonImprovement) {
    const auto g = planted_graph(40, 2, 6, 1);
    const auto split = split_edges(g, 5, 0.1, 1)[0];
    GnnConfig cfg;
    cfg.patience = 0;
    cfg.learning_rate = 0.5;
    cfg.hidden_dim = 8;
    const auto r = train(g, split, PhaseFeatures::structure(g, split), cfg);
    ASSERT_LT(r.history.size(), cfg.epochs);
    for (std::size_t t = 1; t + 1 < r.history.size(); ++t) EXPECT_LT(r.history[t].val_loss, r.history[t - 1].val_loss);
    EXPECT_GE(r.history.back().val_loss, r.history[r.history.size() - 2].val_loss);
}

TEST(Train, DeterministicAndBestEpoch) {
    const auto g = planted_graph(40, 2, 6, 2);
    const auto split = split_edges(g, 5, 0.1, 2)[1];
    for (bool variational : {false, true}) {
        GnnConfig cfg;
        cfg.variational = variational;
        cfg.dropout = 0.2;
        cfg.hidden_dim = 8;
        cfg.epochs = 60;
        cfg.patience = 10;
        cfg.seed = 3;
        const auto X = PhaseFeatures::structure(g, split);
        const auto a = train(g, split, X, cfg);
        const auto b = train(g, split, X, cfg);
        ASSERT_EQ(a.history.size(), b.history.size());
        for (std::size_t t = 0; t < a.history.size(); ++t) {
            EXPECT_EQ(a.history[t].train_loss, b.history[t].train_loss);
            EXPECT_EQ(a.history[t].val_loss, b.history[t].val_loss);
        }
        for (const auto& h : a.history) EXPECT_LE(a.best_val_loss, h.val_loss);
        EXPECT_EQ(a.history[a.best_epoch - 1].val_loss, a.best_val_loss);

        // Restored weights reproduce the best validation loss.
        const auto e = embed(a.model, g, split, X, Phase::val);
        EXPECT_NEAR(loss(e, split.val_pos, split.val_neg, variational), a.best_val_loss, 1e-12);
        const auto e2 = embed(a.model, g, split, X, Phase::val);
        EXPECT_EQ(e.Z, e2.Z);
        if (variational) EXPECT_EQ(e.Z, e.mu);
    }
}

TEST(Train, LossDecreasesOnPlantedTwoBlockGraph) {
    std::vector<Dyad> edges;
    for (NodeId i = 0; i < 20; ++i)
        for (NodeId j = 0; j < 20; ++j)
            if (i != j && (i < 10) == (j < 10) && (i + j) % 3 != 0) edges.push_back({i, j});
    const Graph g(20, true, edges);
    const auto split = split_edges(g, 5, 0.1, 4)[0];
    GnnConfig cfg;
    cfg.hidden_dim = 8;
    cfg.epochs = 100;
    const auto r = train(g, split, PhaseFeatures::structure(g, split), cfg);
    ASSERT_GT(r.best_epoch, 1u);
    EXPECT_LT(r.history[r.best_epoch - 1].train_loss, r.history[0].train_loss);
}

TEST(Train, TestEdgesDoNotLeak) {
    const auto g = planted_graph(40, 2, 6, 5);
    const auto split = split_edges(g, 5, 0.1, 5)[2];
    std::vector<Dyad> edges;
    for (const auto& e : g.edges())
        if (e != split.test_pos[0]) edges.push_back(e);
    edges.push_back(split.test_neg[0]);
    const Graph perturbed(40, true, edges);
    GnnConfig cfg;
    cfg.hidden_dim = 8;
    cfg.epochs = 30;
    cfg.dropout = 0.1;
    const auto a = train(g, split, PhaseFeatures::structure(g, split), cfg);
    const auto b = train(perturbed, split, PhaseFeatures::structure(perturbed, split), cfg);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t t = 0; t < a.history.size(); ++t) EXPECT_EQ(a.history[t].val_loss, b.history[t].val_loss);
    for (std::size_t k = 0; k < a.model.weights.size(); ++k) EXPECT_EQ(a.model.weights[k], b.model.weights[k]);
}

TEST(GnnScore, SigmoidOfDot) {
    Matrix z = Matrix::Zero(2, 3);
    EXPECT_EQ(gnn_score(z, 0, 1), 0.5);
    z << 5, 5, 0, 1, 1, 0;
    EXPECT_GT(gnn_score(z, 0, 1), 0.999);

    Rng rng(6);
    const Matrix Z = random_matrix(30, 4, rng);
    std::vector<double> sp, sn, dp, dn;
    for (NodeId i = 0; i < 30; ++i) {
        sp.push_back(gnn_score(Z, i, (i + 1) % 30));
        dp.push_back(Z.row(i).dot(Z.row((i + 1) % 30)));
        sn.push_back(gnn_score(Z, i, (i + 5) % 30));
        dn.push_back(Z.row(i).dot(Z.row((i + 5) % 30)));
    }
    EXPECT_EQ(auc(sp, sn), auc(dp, dn));
}

TEST(GnnIo, CheckpointRoundTrip) {
    GnnConfig cfg;
    cfg.variational = true;
    cfg.hidden_dim = 3;
    const auto m = init_model(5, cfg);
    const auto dir = std::filesystem::temp_directory_path() / "nlb_gnn_io";
    save_gnn(m, to_json(cfg), dir);
    const auto back = load_gnn(dir);
    EXPECT_TRUE(back.variational);
    ASSERT_EQ(back.weights.size(), m.weights.size());
    for (std::size_t k = 0; k < m.weights.size(); ++k) EXPECT_EQ(back.weights[k], m.weights[k]);
}
