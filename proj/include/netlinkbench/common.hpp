#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <compare>
#include <cstdint>
#include <exception>
#include <functional>
#include <initializer_list>
#include <limits>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace nlb {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;
using NodeId = std::int32_t;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Ordered node pair (i, j). For undirected graphs the canonical form has src < dst.
struct Dyad {
    NodeId src = 0;
    NodeId dst = 0;

    auto operator<=>(const Dyad&) const = default;
};

inline std::uint64_t dyad_key(Dyad d, std::size_t n_nodes) {
    return static_cast<std::uint64_t>(d.src) * n_nodes + static_cast<std::uint64_t>(d.dst);
}

inline Dyad canonical(Dyad d) {
    return d.src <= d.dst ? d : Dyad{d.dst, d.src};
}

enum class FeatureKind { structure, attribute, clustered };

inline const char* to_string(FeatureKind k) {
    switch (k) {
    case FeatureKind::structure: return "structure";
    case FeatureKind::attribute: return "attribute";
    case FeatureKind::clustered: return "clustered";
    }
    return "?";
}

/// N x F node features.
struct FeatureMatrix {
    Matrix values;
    FeatureKind kind = FeatureKind::attribute;

    Eigen::Index n_rows() const { return values.rows(); }
    Eigen::Index n_features() const { return values.cols(); }
};

/// Class per node, values in [0, n_classes()).
struct NodeLabels {
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    int operator[](std::size_t i) const { return labels[i]; }
    int n_classes() const {
        return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    }
};

/// Independent stream derived from a base seed and any number of salts.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> salts = {}) {
    std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed),
                                     static_cast<std::uint32_t>(seed >> 32)};
    for (auto s : salts) {
        words.push_back(static_cast<std::uint32_t>(s));
        words.push_back(static_cast<std::uint32_t>(s >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

/// Uniform double in [0, 1) built from the top 53 bits; identical on every platform.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n) by rejection (no modulo bias, platform independent).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
        r = rng();
    } while (r >= limit);
    return r % n;
}

/// Fisher-Yates with uniform_index, so shuffles do not depend on the standard library.
template <class It>
void shuffle_range(It first, It last, Rng& rng) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
        const auto j = uniform_index(rng, i);
        std::iter_swap(first + (i - 1), first + j);
    }
}

/// Runs fn(0..n-1) on up to `jobs` threads. The first exception is rethrown after all workers join.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::mutex mu;
    std::size_t next = 0;
    std::exception_ptr failure;
    auto worker = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard lock(mu);
                if (next >= n || failure) return;
                i = next++;
            }
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(jobs, n); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace nlb

namespace nlb {

/// Row-wise argmax; ties go to the lowest column index.
inline NodeLabels argmax_rows(const Matrix& m) {
    NodeLabels out;
    out.labels.resize(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < m.cols(); ++k)
            if (m(i, k) > m(i, best)) best = k;
        out.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

}  // namespace nlb
