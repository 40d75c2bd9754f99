#pragma once

// Routers map a routing input (a sample vector or a per-token hidden state) to expert weights.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "autograd.hpp"
#include "error.hpp"
#include "tensor.hpp"

namespace glueforge {

enum class RouterKind { linear, mlp };

inline const char* to_string(RouterKind k) { return k == RouterKind::linear ? "linear" : "mlp"; }

inline RouterKind parse_router_kind(const std::string& s) {
    if (s == "linear") return RouterKind::linear;
    if (s == "mlp") return RouterKind::mlp;
    throw Error("unknown router kind '" + s + "'");
}

/// linear: logits = W x with W (experts x in_dim).
/// mlp: logits = W2 relu(W1 x) with W1 (hidden x in_dim), W2 (experts x hidden). No biases.
struct RouterSpec {
    RouterKind kind = RouterKind::linear;
    int in_dim = 0;
    int num_experts = 0;
    int hidden = 0;
    Tensor w1;
    Tensor w2;

    void validate() const {
        if (in_dim <= 0 || num_experts <= 0) throw Error("router dims must be positive");
        auto expect = [](const Tensor& t, std::int64_t r, std::int64_t c, const char* what) {
            if (t.shape != Shape{r, c})
                throw Error(std::string("router ") + what + " has shape " + shape_string(t.shape) + ", expected [" +
                            std::to_string(r) + ", " + std::to_string(c) + "]");
        };
        if (kind == RouterKind::linear) {
            expect(w1, num_experts, in_dim, "weight");
            if (w2.numel() != 0) throw Error("linear router has a second weight matrix");
        } else {
            if (hidden <= 0) throw Error("mlp router hidden width must be positive");
            expect(w1, hidden, in_dim, "hidden weight");
            expect(w2, num_experts, hidden, "output weight");
        }
    }

    bool operator==(const RouterSpec&) const = default;
};

/// Mean over positions.
inline std::vector<float> sample_embedding(const Matrix& token_embeddings) {
    if (token_embeddings.rows == 0) throw Error("sample_embedding: empty sequence");
    std::vector<float> out(static_cast<std::size_t>(token_embeddings.cols));
    for (int c = 0; c < token_embeddings.cols; ++c) {
        double s = 0.0;
        for (int r = 0; r < token_embeddings.rows; ++r) s += token_embeddings(r, c);
        out[static_cast<std::size_t>(c)] = static_cast<float>(s / token_embeddings.rows);
    }
    return out;
}

inline std::vector<float> sample_embedding(const std::vector<std::vector<float>>& token_embeddings) {
    if (token_embeddings.empty()) throw Error("sample_embedding: empty sequence");
    Matrix m(static_cast<int>(token_embeddings.size()), static_cast<int>(token_embeddings.front().size()));
    for (std::size_t r = 0; r < token_embeddings.size(); ++r) {
        if (token_embeddings[r].size() != static_cast<std::size_t>(m.cols)) throw Error("sample_embedding: ragged input");
        std::copy(token_embeddings[r].begin(), token_embeddings[r].end(), m.row(static_cast<int>(r)).begin());
    }
    return sample_embedding(m);
}

/// Router logits on the tape; `x` is (rows x in_dim), the result (rows x num_experts).
inline ag::Var router_logits(ag::Tape& t, ag::Var x, ag::Var w1, ag::Var w2, RouterKind kind) {
    auto h = ag::matmul_nt(t, x, w1);
    if (kind == RouterKind::linear) return h;
    return ag::matmul_nt(t, ag::relu(t, h), w2);
}

inline std::vector<float> router_logits(const RouterSpec& r, std::span<const float> x) {
    r.validate();
    if (x.size() != static_cast<std::size_t>(r.in_dim))
        throw Error("router input has " + std::to_string(x.size()) + " entries, expected " + std::to_string(r.in_dim));
    ag::Tape t(false);
    auto in = t.leaf(Matrix(1, r.in_dim, std::vector<float>(x.begin(), x.end())));
    auto w2 = r.kind == RouterKind::mlp ? t.constant(r.w2) : ag::Var{};
    return t.value(router_logits(t, in, t.constant(r.w1), w2, r.kind)).v;
}

/// Softmax over all experts, keep the k largest (ties to the lower index), renormalize; the rest are 0.
inline std::vector<float> topk_weights(std::span<const float> logits, int k) {
    const int n = static_cast<int>(logits.size());
    if (k < 1 || k > n) throw Error("top-k must lie in [1, " + std::to_string(n) + "], got " + std::to_string(k));
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return logits[a] > logits[b]; });
    // Renormalizing the softmax over the selected set equals a softmax over the selected logits.
    const double mx = logits[idx[0]];
    std::vector<double> e(static_cast<std::size_t>(k));
    double sum = 0.0;
    for (int i = 0; i < k; ++i) sum += e[i] = std::exp(static_cast<double>(logits[idx[i]]) - mx);
    std::vector<float> out(static_cast<std::size_t>(n), 0.0f);
    for (int i = 0; i < k; ++i) out[idx[i]] = static_cast<float>(e[i] / sum);
    return out;
}

inline std::vector<float> route_topk(const RouterSpec& r, std::span<const float> x, int k) {
    return topk_weights(router_logits(r, x), k);
}

/// Prompt-vector router: row i is the L2-normalized mean (over prompts) of mean-pooled prompt embeddings.
inline RouterSpec build_linear_router(const std::vector<std::vector<std::vector<int>>>& prompt_sets,
                                      const Tensor& embedding) {
    if (embedding.shape.size() != 2) throw Error("embedding matrix must be 2-D");
    const auto vocab = embedding.shape[0];
    const int dim = static_cast<int>(embedding.shape[1]);
    if (prompt_sets.empty()) throw Error("linear router needs at least one expert prompt set");
    RouterSpec r;
    r.kind = RouterKind::linear;
    r.in_dim = dim;
    r.num_experts = static_cast<int>(prompt_sets.size());
    r.w1 = Tensor({r.num_experts, dim}, 0.0f);
    for (std::size_t e = 0; e < prompt_sets.size(); ++e) {
        if (prompt_sets[e].empty()) throw Error("expert " + std::to_string(e) + " has an empty prompt set");
        std::vector<double> acc(static_cast<std::size_t>(dim), 0.0);
        for (const auto& prompt : prompt_sets[e]) {
            if (prompt.empty()) throw Error("expert " + std::to_string(e) + " has an empty prompt");
            std::vector<double> pooled(static_cast<std::size_t>(dim), 0.0);
            for (int id : prompt) {
                if (id < 0 || id >= vocab) throw Error("prompt token id " + std::to_string(id) + " out of range");
                for (int c = 0; c < dim; ++c) pooled[c] += embedding.data[static_cast<std::size_t>(id) * dim + c];
            }
            for (int c = 0; c < dim; ++c) acc[c] += pooled[c] / static_cast<double>(prompt.size());
        }
        double norm = 0.0;
        for (double& v : acc) {
            v /= static_cast<double>(prompt_sets[e].size());
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) throw Error("expert " + std::to_string(e) + " prompt vector has zero norm");
        for (int c = 0; c < dim; ++c) r.w1.data[e * dim + c] = static_cast<float>(acc[c] / norm);
    }
    return r;
}

inline RouterSpec build_mlp_router(int in_dim, int hidden, int num_experts, std::uint64_t seed) {
    if (in_dim <= 0 || hidden <= 0 || num_experts <= 0) throw Error("mlp router dims must be positive");
    RouterSpec r;
    r.kind = RouterKind::mlp;
    r.in_dim = in_dim;
    r.hidden = hidden;
    r.num_experts = num_experts;
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 0.02f);
    r.w1 = Tensor({hidden, in_dim}, 0.0f);
    r.w2 = Tensor({num_experts, hidden}, 0.0f);
    for (auto& x : r.w1.data) x = normal(rng);
    for (auto& x : r.w2.data) x = normal(rng);
    return r;
}

inline nlohmann::json to_json(const RouterSpec& r) {
    nlohmann::json j = {{"kind", to_string(r.kind)}, {"in_dim", r.in_dim}, {"num_experts", r.num_experts}};
    if (r.kind == RouterKind::mlp) {
        j["hidden"] = r.hidden;
        j["w1"] = r.w1.data;
        j["w2"] = r.w2.data;
    } else {
        j["weight"] = r.w1.data;
    }
    return j;
}

inline RouterSpec router_from_json(const nlohmann::json& j) {
    RouterSpec r;
    try {
        r.kind = parse_router_kind(j.at("kind").get<std::string>());
        r.in_dim = j.at("in_dim").get<int>();
        r.num_experts = j.at("num_experts").get<int>();
        if (r.kind == RouterKind::mlp) {
            r.hidden = j.at("hidden").get<int>();
            r.w1 = Tensor({r.hidden, r.in_dim}, j.at("w1").get<std::vector<float>>());
            r.w2 = Tensor({r.num_experts, r.hidden}, j.at("w2").get<std::vector<float>>());
        } else {
            r.w1 = Tensor({r.num_experts, r.in_dim}, j.at("weight").get<std::vector<float>>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed router JSON: ") + e.what());
    }
    r.validate();
    return r;
}

} // namespace glueforge
