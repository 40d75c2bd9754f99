#pragma once

#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "tensor.hpp"

namespace glueforge {

enum class RoleKind { embedding, attention, ffn, norm, lm_head, other };

inline const char* to_string(RoleKind k) {
    switch (k) {
    case RoleKind::embedding: return "embedding";
    case RoleKind::attention: return "attention";
    case RoleKind::ffn: return "ffn";
    case RoleKind::norm: return "norm";
    case RoleKind::lm_head: return "lm_head";
    case RoleKind::other: return "other";
    }
    return "other";
}

inline bool is_layer_kind(RoleKind k) {
    return k == RoleKind::attention || k == RoleKind::ffn || k == RoleKind::norm;
}

/// Role of one tensor. Layer-scoped kinds carry the decoder layer index.
struct TensorRole {
    RoleKind kind = RoleKind::other;
    int layer = -1;

    bool in_layer() const { return layer >= 0; }
    bool operator==(const TensorRole&) const = default;

    /// "embedding", "lm_head", "other", or "<kind>:<layer>" for layer tensors.
    std::string str() const {
        if (in_layer()) return std::string(to_string(kind)) + ":" + std::to_string(layer);
        return to_string(kind);
    }

    static TensorRole parse(const std::string& s) {
        auto colon = s.find(':');
        std::string kind = s.substr(0, colon);
        TensorRole r;
        if (kind == "embedding") r.kind = RoleKind::embedding;
        else if (kind == "attention") r.kind = RoleKind::attention;
        else if (kind == "ffn") r.kind = RoleKind::ffn;
        else if (kind == "norm") r.kind = RoleKind::norm;
        else if (kind == "lm_head") r.kind = RoleKind::lm_head;
        else if (kind == "other") r.kind = RoleKind::other;
        else throw Error("unknown tensor role '" + s + "'");
        if (colon != std::string::npos) {
            try {
                std::size_t used = 0;
                r.layer = std::stoi(s.substr(colon + 1), &used);
                if (used != s.size() - colon - 1 || r.layer < 0) throw std::invalid_argument("layer");
            } catch (const std::exception&) {
                throw Error("bad layer index in tensor role '" + s + "'");
            }
        }
        if (is_layer_kind(r.kind) != r.in_layer())
            throw Error("tensor role '" + s + "' must " + (is_layer_kind(r.kind) ? "" : "not ") +
                        "carry a layer index");
        return r;
    }
};

/// One row of the name-pattern table. Group 1 of a layer-scoped pattern captures the layer index.
struct RolePattern {
    std::string regex;
    RoleKind kind;
};

/// Llama-style naming: model.embed_tokens, model.layers.N.{self_attn,mlp,*norm}, model.norm, lm_head.
inline const std::vector<RolePattern>& default_role_patterns() {
    static const std::vector<RolePattern> table = {
        {R"(^model\.embed_tokens\.weight$)", RoleKind::embedding},
        {R"(^model\.layers\.(\d+)\.self_attn\..+$)", RoleKind::attention},
        {R"(^model\.layers\.(\d+)\.mlp\..+$)", RoleKind::ffn},
        {R"(^model\.layers\.(\d+)\.[A-Za-z_]*norm[A-Za-z_]*\..+$)", RoleKind::norm},
        {R"(^lm_head\.weight$)", RoleKind::lm_head},
    };
    return table;
}

/// First matching pattern wins; unmatched names are `other`.
inline TensorRole derive_role(const std::string& name,
                              const std::vector<RolePattern>& patterns = default_role_patterns()) {
    for (const auto& p : patterns) {
        std::smatch m;
        if (!std::regex_match(name, m, std::regex(p.regex))) continue;
        TensorRole r{p.kind, -1};
        if (is_layer_kind(p.kind)) {
            if (m.size() < 2) throw Error("role pattern '" + p.regex + "' has no layer capture group");
            r.layer = std::stoi(m[1].str());
        }
        return r;
    }
    return {};
}

inline std::map<std::string, TensorRole> derive_roles(const TensorStore& store,
                                                      const std::vector<RolePattern>& patterns =
                                                          default_role_patterns()) {
    std::map<std::string, TensorRole> roles;
    for (const auto& [name, _] : store) roles.emplace(name, derive_role(name, patterns));
    return roles;
}

/// Structural metadata for one checkpoint.
struct ArchDescriptor {
    int num_layers = 0;
    int hidden_dim = 0;
    int ffn_dim = 0;
    int vocab_size = 0;
    int num_heads = 0;
    std::map<std::string, TensorRole> tensor_roles;

    bool operator==(const ArchDescriptor&) const = default;

    /// Equality of the scalar fields only.
    bool same_dims(const ArchDescriptor& o) const {
        return num_layers == o.num_layers && hidden_dim == o.hidden_dim && ffn_dim == o.ffn_dim &&
               vocab_size == o.vocab_size && num_heads == o.num_heads;
    }

    void validate() const {
        if (num_layers <= 0 || hidden_dim <= 0 || ffn_dim <= 0 || vocab_size <= 0 || num_heads <= 0)
            throw Error("arch descriptor fields must be positive");
        for (const auto& [name, role] : tensor_roles) {
            if (name.empty()) throw Error("arch descriptor has an empty tensor name");
            if (role.in_layer() && role.layer >= num_layers)
                throw Error("manifest/tensor mismatch: '" + name + "' has layer " + std::to_string(role.layer) +
                            " outside [0, " + std::to_string(num_layers) + ")");
        }
    }

    /// Throws unless `store` has exactly the described tensors and every layer is populated.
    void check_conforms(const TensorStore& store) const {
        validate();
        for (const auto& [name, _] : store)
            if (!tensor_roles.count(name)) throw Error("tensor '" + name + "' has no role in the arch descriptor");
        std::set<int> layers_seen;
        for (const auto& [name, role] : tensor_roles) {
            if (!store.contains(name))
                throw Error("manifest/tensor mismatch: manifest names '" + name + "' which is absent from the store");
            if (role.in_layer()) layers_seen.insert(role.layer);
        }
        for (int l = 0; l < num_layers; ++l)
            if (!layers_seen.count(l))
                throw Error("manifest/tensor mismatch: manifest declares " + std::to_string(num_layers) +
                            " layers but layer " + std::to_string(l) + " has no tensors");
    }

    const TensorRole& role_of(const std::string& name) const {
        auto it = tensor_roles.find(name);
        if (it == tensor_roles.end()) throw Error("tensor '" + name + "' has no role");
        return it->second;
    }
};

inline nlohmann::json to_json(const ArchDescriptor& d) {
    nlohmann::json roles = nlohmann::json::object();
    for (const auto& [name, role] : d.tensor_roles) roles[name] = role.str();
    return {{"num_layers", d.num_layers}, {"hidden_dim", d.hidden_dim}, {"ffn_dim", d.ffn_dim},
            {"vocab_size", d.vocab_size}, {"num_heads", d.num_heads}, {"tensor_roles", roles}};
}

inline ArchDescriptor arch_from_json(const nlohmann::json& j) {
    ArchDescriptor d;
    try {
        d.num_layers = j.at("num_layers").get<int>();
        d.hidden_dim = j.at("hidden_dim").get<int>();
        d.ffn_dim = j.at("ffn_dim").get<int>();
        d.vocab_size = j.at("vocab_size").get<int>();
        d.num_heads = j.at("num_heads").get<int>();
        for (const auto& [name, role] : j.at("tensor_roles").items())
            d.tensor_roles.emplace(name, TensorRole::parse(role.get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed arch manifest: ") + e.what());
    }
    d.validate();
    return d;
}

} // namespace glueforge
