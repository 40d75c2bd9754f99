#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "arch.hpp"
#include "error.hpp"
#include "tensor.hpp"

namespace glueforge {

/// Scalar proxy score of a merged model; higher is better.
struct FitnessEvaluator {
    std::string id;
    bool deterministic = true;
    /// Whether evaluate may be called from several threads at once.
    bool concurrent_safe = false;
    std::function<double(const TensorStore&, const ArchDescriptor&)> evaluate;

    double operator()(const TensorStore& store, const ArchDescriptor& desc) const {
        if (!evaluate) throw Error("fitness evaluator '" + id + "' has no evaluate function");
        return evaluate(store, desc);
    }
};

/// Sequences of token ids.
struct TokenBatch {
    std::vector<std::vector<int>> sequences;

    void validate(int vocab_size) const {
        if (sequences.empty()) throw Error("token batch is empty");
        for (const auto& seq : sequences) {
            if (seq.empty()) throw Error("token batch holds an empty sequence");
            for (int id : seq)
                if (id < 0 || id >= vocab_size)
                    throw Error("token id " + std::to_string(id) + " out of range [0, " + std::to_string(vocab_size) + ")");
        }
    }

    std::size_t size() const { return sequences.size(); }
    bool operator==(const TokenBatch&) const = default;
};

inline nlohmann::json to_json(const TokenBatch& b) { return b.sequences; }

inline TokenBatch batch_from_json(const nlohmann::json& j) {
    TokenBatch b;
    try {
        b.sequences = j.get<std::vector<std::vector<int>>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("corpus must be a JSON list of token-id lists: ") + e.what());
    }
    return b;
}

} // namespace glueforge
