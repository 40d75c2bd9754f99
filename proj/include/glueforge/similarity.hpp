#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

namespace glueforge {

/// per_tensor_mean averages per-tensor cosines (the default); global flattens every tensor into one vector.
enum class CosineMode { per_tensor_mean, global };

namespace detail {

struct DotNorms {
    double dot = 0, aa = 0, bb = 0;
};

inline DotNorms dot_norms(std::span<const float> a, std::span<const float> b) {
    DotNorms r;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double x = a[i], y = b[i];
        r.dot += x * y;
        r.aa += x * x;
        r.bb += y * y;
    }
    return r;
}

inline double cosine_from(const DotNorms& d, const std::string& what) {
    if (d.aa == 0.0 || d.bb == 0.0) throw Error("zero-norm tensor in cosine similarity: " + what);
    double c = d.dot / (std::sqrt(d.aa) * std::sqrt(d.bb));
    return std::clamp(c, -1.0, 1.0);
}

} // namespace detail

inline double tensor_cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw Error("tensor_cosine: length mismatch");
    return detail::cosine_from(detail::dot_norms(a, b), "anonymous tensor");
}

/// Weight-space cosine similarity of two stores with identical layouts.
inline double model_cosine(const TensorStore& a, const TensorStore& b, CosineMode mode = CosineMode::per_tensor_mean) {
    require_same_layout(a, b, "model_cosine");
    if (a.empty()) throw Error("model_cosine: stores hold no tensors");
    if (mode == CosineMode::global) {
        detail::DotNorms total;
        auto ib = b.begin();
        for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
            auto d = detail::dot_norms(ia->second.data, ib->second.data);
            total.dot += d.dot;
            total.aa += d.aa;
            total.bb += d.bb;
        }
        return detail::cosine_from(total, "whole model");
    }
    double sum = 0;
    auto ib = b.begin();
    for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib)
        sum += detail::cosine_from(detail::dot_norms(ia->second.data, ib->second.data), "'" + ia->first + "'");
    return std::clamp(sum / static_cast<double>(a.size()), -1.0, 1.0);
}

struct SimilarityMatrix {
    std::size_t n = 0;
    std::vector<double> values; ///< row-major n x n

    double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
    double& at(std::size_t i, std::size_t j) { return values[i * n + j]; }

    void validate() const {
        if (values.size() != n * n) throw Error("similarity matrix size mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            if (std::abs(at(i, i) - 1.0) > 1e-6) throw Error("similarity matrix diagonal must be 1");
            for (std::size_t j = 0; j < n; ++j) {
                double v = at(i, j);
                if (!std::isfinite(v) || v < -1.0 - 1e-12 || v > 1.0 + 1e-12)
                    throw Error("similarity matrix entry out of [-1, 1]");
                if (v != at(j, i)) throw Error("similarity matrix is not symmetric");
            }
        }
    }
};

/// Pairwise model_cosine over a zoo. Pairs may be evaluated concurrently; the result does not depend on `threads`.
inline SimilarityMatrix similarity_matrix(std::span<const TensorStore* const> zoo,
                                          CosineMode mode = CosineMode::per_tensor_mean, unsigned threads = 1,
                                          std::span<const std::string> ids = {}) {
    SimilarityMatrix m;
    m.n = zoo.size();
    m.values.assign(m.n * m.n, 0.0);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < m.n; ++i) {
        m.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < m.n; ++j) pairs.emplace_back(i, j);
    }
    auto label = [&](std::size_t i) { return i < ids.size() ? ids[i] : "#" + std::to_string(i); };
    detail::parallel_for(pairs.size(), threads, [&](std::size_t p) {
        auto [i, j] = pairs[p];
        try {
            double c = model_cosine(*zoo[i], *zoo[j], mode);
            m.at(i, j) = c;
            m.at(j, i) = c;
        } catch (const Error& e) {
            throw Error("similarity of pair (" + label(i) + ", " + label(j) + "): " + e.what());
        }
    });
    return m;
}

inline SimilarityMatrix similarity_matrix(const std::vector<TensorStore>& zoo,
                                          CosineMode mode = CosineMode::per_tensor_mean, unsigned threads = 1) {
    auto r = refs_of(zoo);
    return similarity_matrix(r, mode, threads);
}

struct ClusterReport {
    std::vector<std::vector<std::size_t>> clusters; ///< each sorted; ordered by smallest member
    double threshold = 0.95;
    std::vector<double> min_intra_sim;               ///< 1.0 for singletons
};

namespace detail {

inline double complete_linkage(const SimilarityMatrix& m, const std::vector<std::size_t>& a,
                               const std::vector<std::size_t>& b) {
    double lo = std::numeric_limits<double>::infinity();
    for (auto i : a)
        for (auto j : b) lo = std::min(lo, m.at(i, j));
    return lo;
}

inline double min_internal(const SimilarityMatrix& m, const std::vector<std::size_t>& c) {
    double lo = 1.0;
    for (std::size_t x = 0; x < c.size(); ++x)
        for (std::size_t y = x + 1; y < c.size(); ++y) lo = std::min(lo, m.at(c[x], c[y]));
    return lo;
}

} // namespace detail

/// Complete-linkage agglomerative clustering. Merging stops once no pair of clusters has every
/// cross pair at or above `threshold`, so each cluster is pairwise-similar by construction.
/// Ties go to the pair with the lexicographically smallest (min-index, max-index) of their smallest members.
inline ClusterReport cluster_zoo(const SimilarityMatrix& m, double threshold = 0.95) {
    m.validate();
    if (!(threshold > 0.0 && threshold <= 1.0)) throw Error("cluster threshold must lie in (0, 1]");
    std::vector<std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < m.n; ++i) clusters.push_back({i});

    for (;;) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t ba = 0, bb = 0;
        bool found = false;
        // clusters stay sorted by smallest member, so (a, b) with a < b is already lexicographic
        for (std::size_t a = 0; a < clusters.size(); ++a)
            for (std::size_t b = a + 1; b < clusters.size(); ++b) {
                double link = detail::complete_linkage(m, clusters[a], clusters[b]);
                if (link < threshold) continue;
                if (!found || link > best) {
                    best = link;
                    ba = a;
                    bb = b;
                    found = true;
                }
            }
        if (!found) break;
        auto& dst = clusters[ba];
        dst.insert(dst.end(), clusters[bb].begin(), clusters[bb].end());
        std::sort(dst.begin(), dst.end());
        clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bb));
    }

    ClusterReport r;
    r.threshold = threshold;
    r.clusters = std::move(clusters);
    for (const auto& c : r.clusters) r.min_intra_sim.push_back(detail::min_internal(m, c));
    return r;
}

inline nlohmann::json to_json(const SimilarityMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < m.n; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < m.n; ++j) row.push_back(m.at(i, j));
        rows.push_back(row);
    }
    return {{"n", m.n}, {"values", rows}};
}

inline SimilarityMatrix similarity_from_json(const nlohmann::json& j) {
    SimilarityMatrix m;
    try {
        const auto& rows = j.at("values");
        m.n = rows.size();
        m.values.reserve(m.n * m.n);
        for (const auto& row : rows) {
            if (row.size() != m.n) throw Error("similarity matrix is not square");
            for (const auto& v : row) m.values.push_back(v.get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed similarity JSON: ") + e.what());
    }
    m.validate();
    return m;
}

inline nlohmann::json to_json(const ClusterReport& r) {
    return {{"clusters", r.clusters}, {"threshold", r.threshold}, {"min_intra_sim", r.min_intra_sim}};
}

} // namespace glueforge
