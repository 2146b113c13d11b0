#pragma once

#include "common.hpp"
#include "graph.hpp"
#include "io.hpp"

#include <Eigen/Sparse>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <unordered_set>

namespace nlb {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct GnnConfig {
    double learning_rate = 0.01;
    double weight_decay = 0.0;
    double dropout = 0.0;
    std::size_t hidden_dim = 32;
    std::size_t n_layers = 2;
    std::size_t epochs = 200;
    std::size_t patience = 50;
    bool variational = false;
    std::uint64_t seed = 0;
    /// Draw fresh training negatives every epoch instead of reusing the fold's train_neg.
    bool resample_negatives = false;

    void validate() const {
        if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must lie in [0, 1)");
        if (n_layers != 1 && n_layers != 2) throw Error("n_layers must be 1 or 2");
        if (hidden_dim < 1) throw Error("hidden_dim must be positive");
        if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
        if (weight_decay < 0.0) throw Error("weight decay must be nonnegative");
    }
};

inline nlohmann::json to_json(const GnnConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
            {"dropout", c.dropout},             {"hidden_dim", c.hidden_dim},
            {"n_layers", c.n_layers},           {"epochs", c.epochs},
            {"patience", c.patience},           {"variational", c.variational},
            {"seed", c.seed},                   {"resample_negatives", c.resample_negatives},
            {"weight_decay_mode", "coupled_l2"}};
}

inline GnnConfig gnn_config_from_json(const nlohmann::json& j) {
    GnnConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.dropout = j.value("dropout", c.dropout);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.variational = j.value("variational", c.variational);
    c.seed = j.value("seed", c.seed);
    c.resample_negatives = j.value("resample_negatives", c.resample_negatives);
    c.validate();
    return c;
}

struct AdamState {
    std::vector<Matrix> m, v;
    std::size_t step = 0;
};

/// Weights are stored layer by layer. For a VGAE the last two entries are the mean and
/// log-variance heads of the final layer.
struct GnnModel {
    std::vector<Matrix> weights;
    bool variational = false;
    AdamState adam;

    std::size_t n_layers() const { return variational ? weights.size() - 1 : weights.size(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
        return n;
    }
};

struct Embeddings {
    Matrix Z;
    Matrix mu, logvar;  // VGAE only
};

/// Everything backward() needs from a forward pass.
struct ForwardCache {
    std::vector<Matrix> inputs;      // dropped-out input of each layer
    std::vector<Matrix> masks;       // scaled dropout masks (empty when inactive)
    std::vector<Matrix> pre;         // P (H W) of each hidden layer, before ReLU
    Matrix noise;                    // VGAE reparameterisation draws
    Embeddings out;
};

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)).
inline GnnModel init_model(std::size_t n_features, const GnnConfig& cfg) {
    cfg.validate();
    Rng rng = derive_rng(cfg.seed, {0x91a7});
    GnnModel m;
    m.variational = cfg.variational;
    const auto h = static_cast<Eigen::Index>(cfg.hidden_dim);
    auto glorot = [&](Eigen::Index in, Eigen::Index out) {
        const double r = std::sqrt(6.0 / static_cast<double>(in + out));
        Matrix w(in, out);
        for (Eigen::Index a = 0; a < in; ++a)
            for (Eigen::Index b = 0; b < out; ++b) w(a, b) = (2.0 * uniform01(rng) - 1.0) * r;
        return w;
    };
    Eigen::Index in = static_cast<Eigen::Index>(n_features);
    for (std::size_t l = 0; l + 1 < cfg.n_layers; ++l) {
        m.weights.push_back(glorot(in, h));
        in = h;
    }
    m.weights.push_back(glorot(in, h));
    if (cfg.variational) m.weights.push_back(glorot(in, h));
    return m;
}

/// D^{-1/2} (A + I) D^{-1/2} over the symmetrised training adjacency.
inline SparseMatrix normalize_adjacency(const Graph& g, const EdgeSplit& split) {
    const auto n = static_cast<Eigen::Index>(g.n_nodes());
    std::vector<Dyad> sym;
    sym.reserve(2 * split.train_pos.size() + g.n_nodes());
    for (const auto& d : split.train_pos) {
        sym.push_back(d);
        sym.push_back({d.dst, d.src});
    }
    for (Eigen::Index i = 0; i < n; ++i) sym.push_back({static_cast<NodeId>(i), static_cast<NodeId>(i)});
    std::sort(sym.begin(), sym.end());
    sym.erase(std::unique(sym.begin(), sym.end()), sym.end());
    Vector degree = Vector::Zero(n);
    for (const auto& d : sym) degree(d.src) += 1.0;
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(sym.size());
    for (const auto& d : sym)
        triplets.emplace_back(d.src, d.dst, 1.0 / std::sqrt(degree(d.src) * degree(d.dst)));
    SparseMatrix p(n, n);
    p.setFromTriplets(triplets.begin(), triplets.end());
    return p;
}

namespace detail {

inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    Matrix mask(rows, cols);
    const double keep = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) mask(i, j) = uniform01(rng) < rate ? 0.0 : keep;
    return mask;
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
    return m;
}

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

constexpr double kProbClip = 1e-7;

}  // namespace detail

/// Message passing H' = ReLU(P dropout(H) W) on hidden layers, linear final layer. In training
/// mode a VGAE samples Z = mu + exp(logvar / 2) * xi; otherwise Z = mu.
inline ForwardCache forward_cached(const GnnModel& model, const Matrix& X, const SparseMatrix& P,
                                   bool training, double dropout, Rng& rng) {
    ForwardCache c;
    Matrix H = X;
    const std::size_t L = model.n_layers();
    for (std::size_t l = 0; l < L; ++l) {
        Matrix in = H;
        if (training && dropout > 0.0) {
            c.masks.push_back(detail::dropout_mask(in.rows(), in.cols(), dropout, rng));
            in.array() *= c.masks.back().array();
        } else {
            c.masks.emplace_back();
        }
        c.inputs.push_back(in);
        if (l + 1 < L) {
            Matrix pre = P * (in * model.weights[l]);
            H = pre.cwiseMax(0.0);
            c.pre.push_back(std::move(pre));
        } else if (!model.variational) {
            c.out.Z = P * (in * model.weights[l]);
        } else {
            c.out.mu = P * (in * model.weights[l]);
            c.out.logvar = P * (in * model.weights[l + 1]);
            if (training) {
                c.noise = detail::standard_normal(c.out.mu.rows(), c.out.mu.cols(), rng);
                c.out.Z = c.out.mu + ((0.5 * c.out.logvar.array()).exp() * c.noise.array()).matrix();
            } else {
                c.out.Z = c.out.mu;
            }
        }
    }
    return c;
}

inline Embeddings forward(const GnnModel& model, const Matrix& X, const SparseMatrix& P, bool training,
                          double dropout, Rng& rng) {
    return forward_cached(model, X, P, training, dropout, rng).out;
}

/// Dot-product decoder: sigmoid(z_i . z_j).
inline double gnn_score(const Matrix& Z, NodeId i, NodeId j) {
    return detail::sigmoid(Z.row(i).dot(Z.row(j)));
}

inline double kl_divergence(const Embeddings& e) {
    return -0.5 * (1.0 + e.logvar.array() - e.mu.array().square() - e.logvar.array().exp()).sum();
}

/// Mean binary cross-entropy of sigmoid(z_i . z_j) over pos (label 1) and neg (label 0), with
/// probabilities clipped to [1e-7, 1 - 1e-7]. A VGAE adds KL(q || N(0, I)) / N.
inline double loss(const Embeddings& e, const std::vector<Dyad>& pos, const std::vector<Dyad>& neg,
                   bool variational) {
    double total = 0.0;
    auto bce = [&](const std::vector<Dyad>& list, bool positive) {
        for (const auto& d : list) {
            const double p = std::clamp(gnn_score(e.Z, d.src, d.dst), detail::kProbClip, 1.0 - detail::kProbClip);
            total -= positive ? std::log(p) : std::log1p(-p);
        }
    };
    bce(pos, true);
    bce(neg, false);
    const std::size_t count = pos.size() + neg.size();
    double value = count ? total / static_cast<double>(count) : 0.0;
    if (variational) value += kl_divergence(e) / static_cast<double>(e.mu.rows());
    return value;
}

/// L2 penalty weight_decay * sum ||W||^2 (its gradient is 2 * weight_decay * W).
inline double weight_penalty(const GnnModel& m, double weight_decay) {
    double s = 0.0;
    for (const auto& w : m.weights) s += w.squaredNorm();
    return weight_decay * s;
}

/// Exact gradients of loss() + weight_penalty() through the pass recorded in `cache`.
inline std::vector<Matrix> backward(const GnnModel& model, const ForwardCache& cache, const SparseMatrix& P,
                                    const std::vector<Dyad>& pos, const std::vector<Dyad>& neg,
                                    double weight_decay) {
    const Matrix& Z = cache.out.Z;
    Matrix dZ = Matrix::Zero(Z.rows(), Z.cols());
    const std::size_t count = pos.size() + neg.size();
    auto accumulate = [&](const std::vector<Dyad>& list, double label) {
        for (const auto& d : list) {
            const double p = gnn_score(Z, d.src, d.dst);
            if (p < detail::kProbClip || p > 1.0 - detail::kProbClip) continue;  // clipped: flat
            const double g = (p - label) / static_cast<double>(count);
            dZ.row(d.src) += g * Z.row(d.dst);
            dZ.row(d.dst) += g * Z.row(d.src);
        }
    };
    if (count) {
        accumulate(pos, 1.0);
        accumulate(neg, 0.0);
    }

    std::vector<Matrix> grads(model.weights.size());
    const std::size_t L = model.n_layers();
    const SparseMatrix Pt = P.transpose();
    Matrix dIn;  // gradient w.r.t. the (dropped-out) input of the current layer
    if (!model.variational) {
        const Matrix back = Pt * dZ;
        grads[L - 1] = cache.inputs[L - 1].transpose() * back;
        dIn = back * model.weights[L - 1].transpose();
    } else {
        const auto& e = cache.out;
        const double inv_n = 1.0 / static_cast<double>(Z.rows());
        const Matrix sigma = (0.5 * e.logvar.array()).exp().matrix();
        Matrix dmu = dZ + inv_n * e.mu;
        Matrix dlv = 0.5 * inv_n * (e.logvar.array().exp() - 1.0).matrix();
        if (cache.noise.size() > 0) dlv.array() += dZ.array() * cache.noise.array() * sigma.array() * 0.5;
        const Matrix back_mu = Pt * dmu;
        const Matrix back_lv = Pt * dlv;
        grads[L - 1] = cache.inputs[L - 1].transpose() * back_mu;
        grads[L] = cache.inputs[L - 1].transpose() * back_lv;
        dIn = back_mu * model.weights[L - 1].transpose() + back_lv * model.weights[L].transpose();
    }
    for (std::size_t l = L - 1; l-- > 0;) {
        Matrix dH = dIn;
        if (cache.masks[l + 1].size() > 0) dH.array() *= cache.masks[l + 1].array();
        const Matrix dPre = (dH.array() * (cache.pre[l].array() > 0.0).cast<double>()).matrix();
        const Matrix back = Pt * dPre;
        grads[l] = cache.inputs[l].transpose() * back;
        dIn = back * model.weights[l].transpose();
    }
    if (weight_decay > 0.0)
        for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += 2.0 * weight_decay * model.weights[k];
    return grads;
}

/// Bias-corrected Adam, applied in place.
inline void adam_step(GnnModel& model, const std::vector<Matrix>& grads, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
    auto& s = model.adam;
    if (s.m.empty()) {
        for (const auto& w : model.weights) {
            s.m.push_back(Matrix::Zero(w.rows(), w.cols()));
            s.v.push_back(Matrix::Zero(w.rows(), w.cols()));
        }
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.step));
    for (std::size_t k = 0; k < model.weights.size(); ++k) {
        s.m[k] = beta1 * s.m[k] + (1.0 - beta1) * grads[k];
        s.v[k] = beta2 * s.v[k] + (1.0 - beta2) * grads[k].cwiseProduct(grads[k]);
        model.weights[k].array() -=
            lr * (s.m[k].array() / c1) / ((s.v[k].array() / c2).sqrt() + eps);
    }
}

/// Node features per evaluation phase. Structure features grow with the phase; fixed features
/// are shared.
struct PhaseFeatures {
    FeatureMatrix train, val, test;

    static PhaseFeatures fixed(const FeatureMatrix& x) { return {x, x, x}; }
    static PhaseFeatures structure(const Graph& g, const EdgeSplit& split) {
        return {masked_adjacency(g, split, Phase::train), masked_adjacency(g, split, Phase::val),
                masked_adjacency(g, split, Phase::test)};
    }
    const FeatureMatrix& at(Phase p) const {
        return p == Phase::train ? train : p == Phase::val ? val : test;
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    GnnModel model;  // weights of the best validation epoch
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
};

namespace detail {

inline std::vector<Dyad> resample_train_negatives(const Graph& g, const EdgeSplit& split,
                                                  const std::unordered_set<std::uint64_t>& held_out,
                                                  Rng& rng) {
    const std::size_t n = g.n_nodes();
    std::vector<Dyad> out;
    std::unordered_set<std::uint64_t> taken;
    const std::size_t cap = 100 * std::max<std::size_t>(split.train_neg.size(), 1);
    for (std::size_t attempts = 0; out.size() < split.train_neg.size() && attempts < cap; ++attempts) {
        Dyad d{static_cast<NodeId>(uniform_index(rng, n)), static_cast<NodeId>(uniform_index(rng, n))};
        if (d.src == d.dst) continue;
        if (!g.directed()) d = canonical(d);
        const auto key = dyad_key(d, n);
        if (g.has_edge(d.src, d.dst) || held_out.count(key) || !taken.insert(key).second) continue;
        out.push_back(d);
    }
    return out;
}

}  // namespace detail

/// Adam training with early stopping on the validation loss (validation dyads scored with the
/// val-phase features). Returns the weights of the best validation epoch.
inline TrainResult train(const Graph& g, const EdgeSplit& split, const PhaseFeatures& X, const GnnConfig& cfg) {
    cfg.validate();
    if (X.train.n_rows() != static_cast<Eigen::Index>(g.n_nodes()))
        throw Error("feature rows do not match node count");
    const SparseMatrix P = normalize_adjacency(g, split);
    TrainResult r;
    GnnModel model = init_model(static_cast<std::size_t>(X.train.n_features()), cfg);
    Rng rng = derive_rng(cfg.seed, {0x7a1});
    std::unordered_set<std::uint64_t> held_out;
    if (cfg.resample_negatives) held_out = split.held_out_keys(g.n_nodes(), !g.directed());
    std::vector<Dyad> negatives = split.train_neg;
    const std::size_t patience = std::max<std::size_t>(cfg.patience, 1);
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (cfg.resample_negatives) negatives = detail::resample_train_negatives(g, split, held_out, rng);
        const auto cache = forward_cached(model, X.train.values, P, true, cfg.dropout, rng);
        const double train_loss = loss(cache.out, split.train_pos, negatives, cfg.variational);
        const auto grads = backward(model, cache, P, split.train_pos, negatives, cfg.weight_decay);
        adam_step(model, grads, cfg.learning_rate);

        const auto eval = forward(model, X.val.values, P, false, 0.0, rng);
        const double val_loss = loss(eval, split.val_pos, split.val_neg, cfg.variational);
        r.history.push_back({epoch, train_loss, val_loss});
        if (val_loss < r.best_val_loss) {
            r.best_val_loss = val_loss;
            r.best_epoch = epoch;
            r.model = model;
            since_best = 0;
        } else if (++since_best >= patience) {
            break;
        }
    }
    if (r.best_epoch == 0) r.model = std::move(model);  // epochs == 0 or non-finite losses
    return r;
}

/// Evaluation-mode embeddings for the given phase.
inline Embeddings embed(const GnnModel& model, const Graph& g, const EdgeSplit& split, const PhaseFeatures& X,
                        Phase phase) {
    Rng unused(0);
    return forward(model, X.at(phase).values, normalize_adjacency(g, split), false, 0.0, unused);
}

inline void save_history(const std::vector<EpochRecord>& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out << std::setprecision(17) << "epoch,train_loss,val_loss\n";
    for (const auto& h : history) out << h.epoch << ',' << h.train_loss << ',' << h.val_loss << '\n';
}

/// Checkpoint: weight_<k>.csv per matrix plus model.json.
inline void save_gnn(const GnnModel& m, const nlohmann::json& meta, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t k = 0; k < m.weights.size(); ++k)
        io::write_csv(m.weights[k], io::join(dir, "weight_" + std::to_string(k) + ".csv"));
    auto j = meta;
    j["n_weights"] = m.weights.size();
    j["variational"] = m.variational;
    io::write_json(j, io::join(dir, "model.json"));
}

inline GnnModel load_gnn(const std::filesystem::path& dir) {
    const auto meta = io::read_json(io::join(dir, "model.json"));
    GnnModel m;
    m.variational = meta.at("variational").get<bool>();
    const auto n = meta.at("n_weights").get<std::size_t>();
    for (std::size_t k = 0; k < n; ++k)
        m.weights.push_back(io::read_csv(io::join(dir, "weight_" + std::to_string(k) + ".csv")));
    return m;
}

}  // namespace nlb
