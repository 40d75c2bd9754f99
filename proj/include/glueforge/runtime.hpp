#pragma once

// Dense execution of the toy transformer: pre-norm decoder layers with rotary causal attention
// and a gated SiLU FFN, a final RMS norm, and an untied LM head.

#include <cmath>
#include <unordered_map>
#include <vector>

#include "arch.hpp"
#include "autograd.hpp"
#include "fitness.hpp"
#include "tensor.hpp"
#include "toy_model.hpp"

namespace glueforge {

namespace runtime {

/// Tape plus a cache so each weight tensor enters the tape once per forward call.
class Graph {
public:
    explicit Graph(ag::Tape& tape) : tape_(tape) {}

    ag::Tape& tape() { return tape_; }

    ag::Var weight(const Tensor& t) {
        auto it = cache_.find(&t);
        if (it != cache_.end()) return it->second;
        auto v = tape_.constant(t);
        cache_.emplace(&t, v);
        return v;
    }
    ag::Var weight(const TensorStore& s, const std::string& name) { return weight(s.at(name)); }

    /// Routes later lookups of `t` to an existing node (e.g. a trainable leaf).
    void bind(const Tensor& t, ag::Var v) { cache_[&t] = v; }

private:
    ag::Tape& tape_;
    std::unordered_map<const Tensor*, ag::Var> cache_;
};

inline ag::Var embed(Graph& g, const TensorStore& s, std::span<const int> ids) {
    return ag::embedding(g.tape(), g.weight(s, names::embed), ids);
}

/// x + attention(input_norm(x)) using layer `l` of `s`.
inline ag::Var attention_residual(Graph& g, ag::Var x, const TensorStore& s, int l, int heads) {
    auto& t = g.tape();
    auto a = ag::rmsnorm(t, x, g.weight(s, names::input_norm(l)));
    auto q = ag::rope(t, ag::matmul_nt(t, a, g.weight(s, names::q_proj(l))), heads);
    auto k = ag::rope(t, ag::matmul_nt(t, a, g.weight(s, names::k_proj(l))), heads);
    auto v = ag::matmul_nt(t, a, g.weight(s, names::v_proj(l)));
    auto o = ag::matmul_nt(t, ag::causal_attention(t, q, k, v, heads), g.weight(s, names::o_proj(l)));
    return ag::add(t, x, o);
}

inline ag::Var ffn_input(Graph& g, ag::Var x, const TensorStore& s, int l) {
    return ag::rmsnorm(g.tape(), x, g.weight(s, names::post_norm(l)));
}

/// down(silu(gate(b)) * up(b)) for the FFN of layer `l` of `s`.
inline ag::Var ffn(Graph& g, ag::Var b, const TensorStore& s, int l) {
    auto& t = g.tape();
    auto gate = ag::silu(t, ag::matmul_nt(t, b, g.weight(s, names::gate_proj(l))));
    auto up = ag::matmul_nt(t, b, g.weight(s, names::up_proj(l)));
    return ag::matmul_nt(t, ag::mul(t, gate, up), g.weight(s, names::down_proj(l)));
}

inline ag::Var dense_layer(Graph& g, ag::Var x, const TensorStore& s, int l, int heads) {
    x = attention_residual(g, x, s, l, heads);
    return ag::add(g.tape(), x, ffn(g, ffn_input(g, x, s, l), s, l));
}

inline ag::Var lm_logits(Graph& g, ag::Var x, const TensorStore& s) {
    auto& t = g.tape();
    return ag::matmul_nt(t, ag::rmsnorm(t, x, g.weight(s, names::final_norm)), g.weight(s, names::lm_head));
}

inline ag::Var dense_forward(Graph& g, const TensorStore& s, const ArchDescriptor& d, std::span<const int> ids) {
    auto x = embed(g, s, ids);
    for (int l = 0; l < d.num_layers; ++l) x = dense_layer(g, x, s, l, d.num_heads);
    return lm_logits(g, x, s);
}

/// Next-token targets for a sequence: ids shifted left, last position unused (-1).
inline std::vector<int> shifted_targets(const std::vector<int>& seq) {
    std::vector<int> tg(seq.size(), -1);
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) tg[i] = seq[i + 1];
    return tg;
}

} // namespace runtime

/// Logits per sequence, each (sequence length x vocab).
using BatchLogits = std::vector<Matrix>;

/// Causal forward pass of a dense toy model.
inline BatchLogits forward(const TensorStore& store, const ArchDescriptor& desc, const TokenBatch& batch) {
    batch.validate(desc.vocab_size);
    BatchLogits out;
    out.reserve(batch.size());
    ag::Tape tape(false);
    runtime::Graph g(tape);
    for (const auto& seq : batch.sequences) out.push_back(tape.value(runtime::dense_forward(g, store, desc, seq)));
    return out;
}

/// Mean next-token cross-entropy (nats) over every predicted position of the batch.
inline double mean_cross_entropy(const BatchLogits& logits, const TokenBatch& batch) {
    if (logits.size() != batch.size()) throw Error("logits/batch size mismatch");
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto& seq = batch.sequences[s];
        const Matrix& L = logits[s];
        for (std::size_t p = 0; p + 1 < seq.size(); ++p) {
            auto row = L.row(static_cast<int>(p));
            double mx = *std::max_element(row.begin(), row.end());
            double sum = 0.0;
            for (float x : row) sum += std::exp(static_cast<double>(x) - mx);
            total += mx + std::log(sum) - static_cast<double>(row[static_cast<std::size_t>(seq[p + 1])]);
            ++count;
        }
    }
    if (count == 0) throw Error("corpus has no next-token positions");
    return total / static_cast<double>(count);
}

inline void validate_corpus(const TokenBatch& corpus) {
    if (corpus.sequences.empty()) throw Error("degenerate corpus: no sequences");
    for (const auto& seq : corpus.sequences)
        if (seq.size() < 2) throw Error("degenerate corpus: every sequence needs at least two tokens");
}

/// Fitness = -(mean next-token cross-entropy on `corpus`). Pure, so safe to call concurrently.
inline FitnessEvaluator perplexity_fitness(TokenBatch corpus) {
    validate_corpus(corpus);
    FitnessEvaluator ev;
    ev.id = "toy-ppl";
    ev.deterministic = true;
    ev.concurrent_safe = true;
    ev.evaluate = [corpus = std::move(corpus)](const TensorStore& store, const ArchDescriptor& desc) {
        return -mean_cross_entropy(forward(store, desc, corpus), corpus);
    };
    return ev;
}

} // namespace glueforge
