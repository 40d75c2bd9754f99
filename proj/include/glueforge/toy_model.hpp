#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "arch.hpp"
#include "checkpoint.hpp"
#include "error.hpp"
#include "tensor.hpp"

namespace glueforge {

/// Shape of a tiny pre-norm decoder-only transformer.
struct ToyConfig {
    int num_layers = 4;
    int hidden_dim = 32;
    int ffn_dim = 64;
    int num_heads = 2;
    int vocab_size = 256;
    int max_seq = 64;

    void validate() const {
        if (num_layers <= 0 || hidden_dim <= 0 || ffn_dim <= 0 || num_heads <= 0 || vocab_size <= 0 || max_seq <= 0)
            throw Error("toy config fields must be positive");
        if (hidden_dim % num_heads != 0) throw Error("hidden_dim must be divisible by num_heads");
        if ((hidden_dim / num_heads) % 2 != 0) throw Error("head dimension must be even for rotary embeddings");
    }

    bool operator==(const ToyConfig&) const = default;
};

inline nlohmann::json to_json(const ToyConfig& c) {
    return {{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim}, {"ffn_dim", c.ffn_dim},
            {"num_heads", c.num_heads},   {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}};
}

inline ToyConfig toy_config_from_json(const nlohmann::json& j) {
    ToyConfig c;
    try {
        c.num_layers = j.value("num_layers", c.num_layers);
        c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
        c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
        c.num_heads = j.value("num_heads", c.num_heads);
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.max_seq = j.value("max_seq", c.max_seq);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("malformed toy config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Tensor names of the Llama-style layout used by the runtime.
namespace names {

inline const std::string embed = "model.embed_tokens.weight";
inline const std::string final_norm = "model.norm.weight";
inline const std::string lm_head = "lm_head.weight";

inline std::string layer(int l, const char* suffix) { return "model.layers." + std::to_string(l) + "." + suffix; }
inline std::string input_norm(int l) { return layer(l, "input_layernorm.weight"); }
inline std::string q_proj(int l) { return layer(l, "self_attn.q_proj.weight"); }
inline std::string k_proj(int l) { return layer(l, "self_attn.k_proj.weight"); }
inline std::string v_proj(int l) { return layer(l, "self_attn.v_proj.weight"); }
inline std::string o_proj(int l) { return layer(l, "self_attn.o_proj.weight"); }
inline std::string post_norm(int l) { return layer(l, "post_attention_layernorm.weight"); }
inline std::string gate_proj(int l) { return layer(l, "mlp.gate_proj.weight"); }
inline std::string up_proj(int l) { return layer(l, "mlp.up_proj.weight"); }
inline std::string down_proj(int l) { return layer(l, "mlp.down_proj.weight"); }

inline std::vector<std::string> attention_tensors(int l) { return {q_proj(l), k_proj(l), v_proj(l), o_proj(l)}; }
inline std::vector<std::string> norm_tensors(int l) { return {input_norm(l), post_norm(l)}; }
inline std::vector<std::string> ffn_tensors(int l) { return {gate_proj(l), up_proj(l), down_proj(l)}; }

inline std::vector<std::string> layer_tensors(int l) {
    auto out = norm_tensors(l);
    for (auto& n : attention_tensors(l)) out.push_back(n);
    for (auto& n : ffn_tensors(l)) out.push_back(n);
    return out;
}

} // namespace names

/// Expected (name, shape) list of a toy model.
inline std::vector<std::pair<std::string, Shape>> toy_layout(const ToyConfig& cfg) {
    const std::int64_t h = cfg.hidden_dim, f = cfg.ffn_dim, v = cfg.vocab_size;
    std::vector<std::pair<std::string, Shape>> out = {
        {names::embed, {v, h}}, {names::final_norm, {h}}, {names::lm_head, {v, h}}};
    for (int l = 0; l < cfg.num_layers; ++l) {
        out.push_back({names::input_norm(l), {h}});
        out.push_back({names::post_norm(l), {h}});
        for (const auto& n : names::attention_tensors(l)) out.push_back({n, {h, h}});
        out.push_back({names::gate_proj(l), {f, h}});
        out.push_back({names::up_proj(l), {f, h}});
        out.push_back({names::down_proj(l), {h, f}});
    }
    return out;
}

inline ArchDescriptor toy_descriptor(const ToyConfig& cfg, const TensorStore& store) {
    ArchDescriptor d;
    d.num_layers = cfg.num_layers;
    d.hidden_dim = cfg.hidden_dim;
    d.ffn_dim = cfg.ffn_dim;
    d.vocab_size = cfg.vocab_size;
    d.num_heads = cfg.num_heads;
    d.tensor_roles = derive_roles(store);
    return d;
}

inline ToyConfig toy_config_of(const ArchDescriptor& d, int max_seq = 64) {
    return {d.num_layers, d.hidden_dim, d.ffn_dim, d.num_heads, d.vocab_size, max_seq};
}

/// Every tensor drawn from N(0, 0.02^2), filled in lexicographic name order from one seeded stream.
inline Checkpoint build_toy_model(const ToyConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::map<std::string, Shape> layout;
    for (auto& [name, shape] : toy_layout(cfg)) layout.emplace(name, shape);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 0.02f);
    TensorStore store;
    for (const auto& [name, shape] : layout) {
        std::vector<float> values(shape_numel(shape));
        for (auto& x : values) x = normal(rng);
        store.insert(name, Tensor(shape, std::move(values)));
    }
    auto desc = toy_descriptor(cfg, store);
    desc.check_conforms(store);
    return {std::move(store), std::move(desc)};
}

} // namespace glueforge
