#pragma once

// Mixture-of-experts assembly from dense checkpoints at model, block, and FFN granularity, plus
// the hybrid variant whose bottom layers come from a merged model.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "arch.hpp"
#include "autograd.hpp"
#include "checkpoint.hpp"
#include "error.hpp"
#include "fitness.hpp"
#include "merge.hpp"
#include "router.hpp"
#include "runtime.hpp"
#include "tensor.hpp"

namespace glueforge {

enum class MixtureLevel { model, block, ffn };
enum class RouterInput { token, sample };

inline const char* to_string(MixtureLevel l) {
    switch (l) {
    case MixtureLevel::model: return "model";
    case MixtureLevel::block: return "block";
    case MixtureLevel::ffn: return "ffn";
    }
    return "model";
}

inline MixtureLevel parse_mixture_level(const std::string& s) {
    if (s == "model") return MixtureLevel::model;
    if (s == "block") return MixtureLevel::block;
    if (s == "ffn") return MixtureLevel::ffn;
    throw Error("unknown mixture level '" + s + "'");
}

inline const char* to_string(RouterInput r) { return r == RouterInput::token ? "token" : "sample"; }

inline RouterInput parse_router_input(const std::string& s) {
    if (s == "token") return RouterInput::token;
    if (s == "sample") return RouterInput::sample;
    throw Error("unknown router input '" + s + "'");
}

using ExpertRefs = std::vector<const Checkpoint*>;

struct MixtureSpec {
    MixtureLevel level = MixtureLevel::model;
    std::vector<std::string> experts;
    int base = 0;                     ///< block/ffn: expert supplying embedding, lm_head (and at ffn level attention + norms)
    std::vector<RouterSpec> routers;  ///< model: one; block: one per layer; ffn: one per layer >= hybrid_k
    int top_k = 1;
    RouterInput router_input = RouterInput::sample;
    int hybrid_k = 0;                 ///< layers [0, hybrid_k) come from the merged model
    std::optional<MergeRecipe> merge_recipe;
    bool merge_frame = false;         ///< hybrid: embedding, final norm, lm_head from the merged model too
    int router_embed_expert = 0;      ///< model level: whose embedding produces the routing sample vector

    std::size_t num_experts() const { return experts.size(); }
    bool is_hybrid() const { return level == MixtureLevel::ffn && hybrid_k > 0; }

    /// Checks the spec against the expert checkpoints it will run over.
    void validate(const ExpertRefs& ex) const {
        const std::size_t E = experts.size();
        if (E == 0) throw Error("mixture has no experts");
        if (ex.size() != E)
            throw Error("missing expert store: spec lists " + std::to_string(E) + " experts, got " +
                        std::to_string(ex.size()));
        for (std::size_t i = 0; i < E; ++i)
            if (!ex[i]) throw Error("missing expert store for '" + experts[i] + "'");
        if (top_k < 1 || top_k > static_cast<int>(E))
            throw Error("top_k must lie in [1, " + std::to_string(E) + "]");
        for (const auto& r : routers) {
            r.validate();
            if (r.num_experts != static_cast<int>(E)) throw Error("router shape mismatch: expert count differs");
        }
        const auto& d0 = ex.front()->desc;
        for (const auto* e : ex)
            if (e->desc.vocab_size != d0.vocab_size) throw Error("vocab mismatch between experts");

        if (level == MixtureLevel::model) {
            if (router_input != RouterInput::sample) throw Error("model-level mixtures route whole samples");
            if (hybrid_k != 0) throw Error("hybrid split is only defined for ffn-level mixtures");
            if (routers.size() != 1) throw Error("model-level mixture needs exactly one router");
            if (router_embed_expert < 0 || router_embed_expert >= static_cast<int>(E))
                throw Error("router_embed_expert out of range");
            if (routers[0].in_dim != ex[static_cast<std::size_t>(router_embed_expert)]->desc.hidden_dim)
                throw Error("router shape mismatch: in_dim differs from the routing expert's hidden_dim");
            return;
        }
        if (base < 0 || base >= static_cast<int>(E)) throw Error("base index out of range");
        const auto& bd = ex[static_cast<std::size_t>(base)]->desc;
        for (const auto* e : ex) {
            const auto& d = e->desc;
            if (d.num_layers != bd.num_layers) throw Error("layer-count mismatch between experts");
            if (d.hidden_dim != bd.hidden_dim || d.num_heads != bd.num_heads) throw Error("dim mismatch between experts");
            if (level == MixtureLevel::ffn && d.ffn_dim != bd.ffn_dim) throw Error("shape mismatch: ffn_dim differs");
        }
        if (level == MixtureLevel::block) {
            if (router_input != RouterInput::sample) throw Error("block-level mixtures use sample routing");
            if (hybrid_k != 0) throw Error("hybrid split is only defined for ffn-level mixtures");
        } else {
            if (hybrid_k < 0 || hybrid_k > bd.num_layers)
                throw Error("invalid k_merge " + std::to_string(hybrid_k) + " for " + std::to_string(bd.num_layers) +
                            " layers");
            if (hybrid_k > 0) {
                if (!merge_recipe) throw Error("hybrid mixture needs a merge recipe");
                merge_recipe->validate(bd.num_layers);
                if (merge_recipe->num_models() != E) throw Error("recipe mismatch: one coefficient row per expert needed");
                for (const auto* e : ex)
                    if (check_compat(*ex.front(), *e).verdict != CompatVerdict::mergeable)
                        throw Error("hybrid experts must be mergeable");
            }
        }
        const std::size_t want = static_cast<std::size_t>(bd.num_layers - hybrid_k);
        if (routers.size() != want)
            throw Error("mixture needs " + std::to_string(want) + " routers, got " + std::to_string(routers.size()));
        for (const auto& r : routers)
            if (r.in_dim != bd.hidden_dim) throw Error("router shape mismatch: in_dim differs from hidden_dim");
    }
};

/// Gate matrices actually applied: gates[sequence][router] is (1 x E) for sample routing, (len x E) for token routing.
struct RoutingTrace {
    std::vector<std::vector<Matrix>> gates;
};

namespace mixture_detail {

class Engine {
public:
    Engine(runtime::Graph& g, const MixtureSpec& spec, const ExpertRefs& ex, const TensorStore* merged, bool soft)
        : g_(g), spec_(spec), ex_(ex), merged_(merged), soft_(soft) {}

    ag::Var run(std::span<const int> ids, std::vector<Matrix>* applied) {
        applied_ = applied;
        switch (spec_.level) {
        case MixtureLevel::model: return model_level(ids);
        case MixtureLevel::block: return block_level(ids);
        case MixtureLevel::ffn: return ffn_level(ids);
        }
        throw Error("unknown mixture level");
    }

private:
    const TensorStore& store(std::size_t i) const { return ex_[i]->store; }
    const TensorStore& base() const { return store(static_cast<std::size_t>(spec_.base)); }
    int heads() const { return ex_[static_cast<std::size_t>(spec_.base)]->desc.num_heads; }

    ag::Var gates(std::size_t router, ag::Var input) {
        auto& t = g_.tape();
        const auto& r = spec_.routers[router];
        auto w2 = r.kind == RouterKind::mlp ? g_.weight(r.w2) : ag::Var{};
        auto logits = router_logits(t, input, g_.weight(r.w1), w2, r.kind);
        ag::Var out;
        if (soft_) {
            out = ag::softmax_rows(t, logits);
        } else {
            const Matrix& L = t.value(logits);
            Matrix G(L.rows, L.cols);
            for (int row = 0; row < L.rows; ++row) {
                auto w = topk_weights(L.row(row), spec_.top_k);
                std::copy(w.begin(), w.end(), G.row(row).begin());
            }
            out = t.leaf(std::move(G));
        }
        if (applied_) applied_->push_back(t.value(out));
        return out;
    }

    static bool selected(const Matrix& G, std::size_t i) {
        for (int r = 0; r < G.rows; ++r)
            if (G(r, static_cast<int>(i)) != 0.0f) return true;
        return false;
    }

    ag::Var model_level(std::span<const int> ids) {
        auto& t = g_.tape();
        const auto e0 = static_cast<std::size_t>(spec_.router_embed_expert);
        auto G = gates(0, ag::mean_rows(t, runtime::embed(g_, store(e0), ids)));
        std::vector<ag::Var> outs(ex_.size());
        for (std::size_t i = 0; i < ex_.size(); ++i)
            if (selected(t.value(G), i)) outs[i] = runtime::dense_forward(g_, store(i), ex_[i]->desc, ids);
        return ag::mix(t, G, outs);
    }

    ag::Var block_level(std::span<const int> ids) {
        auto& t = g_.tape();
        auto x = runtime::embed(g_, base(), ids);
        auto sample = ag::mean_rows(t, x);
        const int L = ex_[static_cast<std::size_t>(spec_.base)]->desc.num_layers;
        for (int l = 0; l < L; ++l) {
            auto G = gates(static_cast<std::size_t>(l), sample);
            std::vector<ag::Var> outs(ex_.size());
            for (std::size_t i = 0; i < ex_.size(); ++i)
                if (selected(t.value(G), i)) outs[i] = runtime::dense_layer(g_, x, store(i), l, heads());
            x = ag::mix(t, G, outs);
        }
        return runtime::lm_logits(g_, x, base());
    }

    ag::Var ffn_level(std::span<const int> ids) {
        auto& t = g_.tape();
        const bool hybrid = spec_.hybrid_k > 0;
        if (hybrid && !merged_) throw Error("hybrid mixture needs its merged store");
        const TensorStore& frame = hybrid && spec_.merge_frame ? *merged_ : base();
        auto x = runtime::embed(g_, frame, ids);
        auto sample = ag::mean_rows(t, x);
        const int L = ex_[static_cast<std::size_t>(spec_.base)]->desc.num_layers;
        for (int l = 0; l < spec_.hybrid_k; ++l) x = runtime::dense_layer(g_, x, *merged_, l, heads());
        for (int l = spec_.hybrid_k; l < L; ++l) {
            x = runtime::attention_residual(g_, x, base(), l, heads());
            auto b = runtime::ffn_input(g_, x, base(), l);
            auto G = gates(static_cast<std::size_t>(l - spec_.hybrid_k),
                           spec_.router_input == RouterInput::sample ? sample : b);
            std::vector<ag::Var> outs(ex_.size());
            for (std::size_t i = 0; i < ex_.size(); ++i)
                if (selected(t.value(G), i)) outs[i] = runtime::ffn(g_, b, store(i), l);
            x = ag::add(t, x, ag::mix(t, G, outs));
        }
        return runtime::lm_logits(g_, x, frame);
    }

    runtime::Graph& g_;
    const MixtureSpec& spec_;
    const ExpertRefs& ex_;
    const TensorStore* merged_;
    bool soft_;
    std::vector<Matrix>* applied_ = nullptr;
};

} // namespace mixture_detail

/// Inference forward with top-k routing. `merged` is required for hybrid specs.
inline BatchLogits mixture_forward(const MixtureSpec& spec, const ExpertRefs& experts, const TokenBatch& batch,
                                   const TensorStore* merged = nullptr, RoutingTrace* trace = nullptr) {
    spec.validate(experts);
    batch.validate(experts.front()->desc.vocab_size);
    BatchLogits out;
    if (trace) trace->gates.assign(batch.size(), {});
    for (std::size_t s = 0; s < batch.size(); ++s) {
        ag::Tape tape(false);
        runtime::Graph g(tape);
        mixture_detail::Engine engine(g, spec, experts, merged, false);
        out.push_back(tape.value(engine.run(batch.sequences[s], trace ? &trace->gates[s] : nullptr)));
    }
    return out;
}

/// Mean next-token cross-entropy of the mixture; `soft` uses full softmax mixing (the training objective).
inline double mixture_loss(const MixtureSpec& spec, const ExpertRefs& experts, const TokenBatch& corpus,
                           const TensorStore* merged = nullptr, bool soft = false) {
    if (!soft) return mean_cross_entropy(mixture_forward(spec, experts, corpus, merged), corpus);
    spec.validate(experts);
    corpus.validate(experts.front()->desc.vocab_size);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& seq : corpus.sequences) {
        ag::Tape tape(false);
        runtime::Graph g(tape);
        mixture_detail::Engine engine(g, spec, experts, merged, true);
        auto tg = runtime::shifted_targets(seq);
        total += tape.value(ag::cross_entropy_sum(tape, engine.run(seq, nullptr), tg)).v[0];
        count += seq.size() - 1;
    }
    if (count == 0) throw Error("corpus has no next-token positions");
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------------------------
// Builders

inline MixtureSpec build_model_level(std::vector<std::string> ids, const ExpertRefs& experts, RouterSpec router,
                                     int top_k = 1, int router_embed_expert = 0) {
    MixtureSpec s;
    s.level = MixtureLevel::model;
    s.experts = std::move(ids);
    s.routers = {std::move(router)};
    s.top_k = top_k;
    s.router_input = RouterInput::sample;
    s.router_embed_expert = router_embed_expert;
    s.validate(experts);
    return s;
}

inline MixtureSpec build_block_level(std::vector<std::string> ids, const ExpertRefs& experts, int base,
                                     std::vector<RouterSpec> routers, int top_k = 1) {
    MixtureSpec s;
    s.level = MixtureLevel::block;
    s.experts = std::move(ids);
    s.base = base;
    s.routers = std::move(routers);
    s.top_k = top_k;
    s.router_input = RouterInput::sample;
    s.validate(experts);
    return s;
}

inline MixtureSpec build_ffn_level(std::vector<std::string> ids, const ExpertRefs& experts, int base,
                                   std::vector<RouterSpec> routers, RouterInput input, int top_k = 2) {
    MixtureSpec s;
    s.level = MixtureLevel::ffn;
    s.experts = std::move(ids);
    s.base = base;
    s.routers = std::move(routers);
    s.top_k = top_k;
    s.router_input = input;
    s.validate(experts);
    return s;
}

/// FFN-level mixture above `k_merge` merged layers. Routers cover layers [k_merge, L).
inline MixtureSpec build_hybrid(std::vector<std::string> ids, const ExpertRefs& experts, int base, int k_merge,
                                MergeRecipe recipe, std::vector<RouterSpec> routers, RouterInput input,
                                int top_k = 2, bool merge_frame = false) {
    MixtureSpec s;
    s.level = MixtureLevel::ffn;
    s.experts = std::move(ids);
    s.base = base;
    s.hybrid_k = k_merge;
    s.merge_recipe = std::move(recipe);
    s.merge_frame = merge_frame;
    s.routers = std::move(routers);
    s.top_k = top_k;
    s.router_input = input;
    s.validate(experts);
    return s;
}

inline int default_hybrid_k(int num_layers) { return num_layers / 4; }

/// The merged model a hybrid spec draws its bottom layers (and optionally its frame) from.
inline TensorStore materialize_merged(const MixtureSpec& spec, const ExpertRefs& experts,
                                      const TensorStore* task_base = nullptr) {
    spec.validate(experts);
    if (!spec.merge_recipe) throw Error("mixture has no merge recipe");
    StoreRefs refs;
    for (const auto* e : experts) refs.push_back(&e->store);
    return apply_recipe(refs, experts[static_cast<std::size_t>(spec.base)]->desc, task_base, *spec.merge_recipe);
}

/// Number of routers a level needs.
inline std::size_t router_count(MixtureLevel level, int num_layers, int hybrid_k = 0) {
    if (level == MixtureLevel::model) return 1;
    return static_cast<std::size_t>(num_layers - (level == MixtureLevel::ffn ? hybrid_k : 0));
}

// ---------------------------------------------------------------------------------------------
// Router-only training

struct RouterTrainOptions {
    int steps = 200;
    float lr = 1e-2f;
    std::uint64_t seed = 0;
    int batch_size = 0; ///< sequences per step; 0 = whole corpus
};

struct RouterTrainResult {
    std::vector<RouterSpec> routers;
    std::vector<double> loss_history; ///< soft-mixing loss before each update
};

/// Adam with cosine learning-rate decay on next-token cross-entropy. Only router weights change;
/// during training the top-k selection is replaced by full softmax mixing.
inline RouterTrainResult train_router_lm(const MixtureSpec& spec, const ExpertRefs& experts, const TokenBatch& corpus,
                                         const RouterTrainOptions& opt, const TensorStore* merged = nullptr) {
    spec.validate(experts);
    validate_corpus(corpus);
    corpus.validate(experts.front()->desc.vocab_size);
    for (const auto& r : spec.routers)
        if (r.kind != RouterKind::mlp) throw Error("linear prompt routers are training-free; use mlp routers");
    if (opt.steps < 0) throw Error("steps must be non-negative");
    if (!std::isfinite(opt.lr) || opt.lr < 0.0f) throw Error("learning rate must be finite and non-negative");

    MixtureSpec work = spec;
    std::vector<Tensor*> params;
    for (auto& r : work.routers) {
        params.push_back(&r.w1);
        params.push_back(&r.w2);
    }
    std::vector<std::vector<float>> m(params.size()), v(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        m[p].assign(params[p]->numel(), 0.0f);
        v[p].assign(params[p]->numel(), 0.0f);
    }
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    std::mt19937_64 rng(opt.seed);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t bs = (opt.batch_size <= 0 || static_cast<std::size_t>(opt.batch_size) >= corpus.size())
                               ? corpus.size()
                               : static_cast<std::size_t>(opt.batch_size);

    RouterTrainResult res;
    for (int step = 0; step < opt.steps; ++step) {
        if (bs < corpus.size()) std::shuffle(order.begin(), order.end(), rng);
        ag::Tape tape(true);
        runtime::Graph g(tape);
        std::vector<ag::Var> leaves;
        for (auto* p : params) {
            auto leaf = tape.leaf(Matrix::from_tensor(*p), true);
            g.bind(*p, leaf);
            leaves.push_back(leaf);
        }
        mixture_detail::Engine engine(g, work, experts, merged, true);
        std::vector<ag::Var> parts;
        std::size_t count = 0;
        for (std::size_t b = 0; b < bs; ++b) {
            const auto& seq = corpus.sequences[order[b]];
            auto tg = runtime::shifted_targets(seq);
            parts.push_back(ag::cross_entropy_sum(tape, engine.run(seq, nullptr), tg));
            count += seq.size() - 1;
        }
        auto loss = ag::sum_scaled(tape, parts, 1.0f / static_cast<float>(count));
        const double lv = tape.value(loss).v[0];
        if (!std::isfinite(lv)) throw Error("router training: non-finite loss at step " + std::to_string(step));
        res.loss_history.push_back(lv);
        tape.backward(loss);
        const float lr = opt.lr * 0.5f * (1.0f + std::cos(std::numbers::pi_v<float> * step / opt.steps));
        const float c1 = 1.0f - std::pow(b1, static_cast<float>(step + 1));
        const float c2 = 1.0f - std::pow(b2, static_cast<float>(step + 1));
        for (std::size_t p = 0; p < params.size(); ++p) {
            const auto& grad = tape.grad(leaves[p]).v;
            auto& data = params[p]->data;
            for (std::size_t j = 0; j < data.size(); ++j) {
                m[p][j] = b1 * m[p][j] + (1 - b1) * grad[j];
                v[p][j] = b2 * v[p][j] + (1 - b2) * grad[j] * grad[j];
                data[j] -= lr * (m[p][j] / c1) / (std::sqrt(v[p][j] / c2) + eps);
            }
        }
    }
    res.routers = std::move(work.routers);
    return res;
}

/// -(mean next-token cross-entropy) of the mixture under top-k routing.
inline double mixture_fitness(const MixtureSpec& spec, const ExpertRefs& experts, const TokenBatch& corpus,
                              const TensorStore* merged = nullptr) {
    validate_corpus(corpus);
    return -mixture_loss(spec, experts, corpus, merged, false);
}

// ---------------------------------------------------------------------------------------------
// Serialization and bundles

inline nlohmann::json to_json(const MixtureSpec& s) {
    nlohmann::json routers = nlohmann::json::array();
    for (const auto& r : s.routers) routers.push_back(to_json(r));
    nlohmann::json j = {{"level", to_string(s.level)},
                        {"experts", s.experts},
                        {"base", s.base},
                        {"top_k", s.top_k},
                        {"router_input", to_string(s.router_input)},
                        {"hybrid_k", s.hybrid_k},
                        {"merge_frame", s.merge_frame},
                        {"router_embed_expert", s.router_embed_expert},
                        {"routers", routers}};
    if (s.merge_recipe) j["merge_recipe"] = to_json(*s.merge_recipe);
    return j;
}

inline MixtureSpec mixture_from_json(const nlohmann::json& j) {
    MixtureSpec s;
    try {
        s.level = parse_mixture_level(j.at("level").get<std::string>());
        s.experts = j.at("experts").get<std::vector<std::string>>();
        s.base = j.value("base", 0);
        s.top_k = j.at("top_k").get<int>();
        s.router_input = parse_router_input(j.value("router_input", std::string("sample")));
        s.hybrid_k = j.value("hybrid_k", 0);
        s.merge_frame = j.value("merge_frame", false);
        s.router_embed_expert = j.value("router_embed_expert", 0);
        for (const auto& r : j.at("routers")) s.routers.push_back(router_from_json(r));
        if (j.contains("merge_recipe")) s.merge_recipe = recipe_from_json(j.at("merge_recipe"));
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed mixture JSON: ") + e.what());
    }
    return s;
}

inline constexpr const char* kMixtureFile = "mixture.json";

/// A mixture with its expert checkpoints (and merged prefix for hybrids) held in memory.
struct MixtureBundle {
    MixtureSpec spec;
    std::vector<Checkpoint> experts;
    std::optional<Checkpoint> merged;

    ExpertRefs refs() const {
        ExpertRefs out;
        for (const auto& e : experts) out.push_back(&e);
        return out;
    }
    const TensorStore* merged_store() const { return merged ? &merged->store : nullptr; }
};

/// Directory-safe form of an identifier.
inline std::string sanitize_id(const std::string& id) {
    std::string out;
    for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
    if (out.empty() || out == "." || out == "..") out = "_" + out;
    return out;
}

inline std::string expert_dir_name(std::size_t i, const std::string& id) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02zu_", i);
    return buf + sanitize_id(id);
}

/// Layout: mixture.json, experts/NN_<id>/ checkpoints, merged/ for hybrids. Paths inside are relative.
inline void save_mixture_bundle(const fs::path& dir, const MixtureSpec& spec, const ExpertRefs& experts,
                                const Checkpoint* merged = nullptr) {
    spec.validate(experts);
    if (spec.is_hybrid() && !merged) throw Error("hybrid bundle needs its merged checkpoint");
    auto j = to_json(spec);
    nlohmann::json paths = nlohmann::json::array();
    for (std::size_t i = 0; i < experts.size(); ++i) {
        auto rel = fs::path("experts") / expert_dir_name(i, spec.experts[i]);
        save_checkpoint(*experts[i], dir / rel);
        paths.push_back(rel.generic_string());
    }
    j["expert_paths"] = paths;
    if (merged) {
        save_checkpoint(*merged, dir / "merged");
        j["merged_path"] = "merged";
    }
    detail::write_json_file(dir / kMixtureFile, j);
}

inline MixtureBundle load_mixture_bundle(const fs::path& dir) {
    auto j = detail::read_json_file(dir / kMixtureFile);
    MixtureBundle b;
    b.spec = mixture_from_json(j);
    std::vector<std::string> paths;
    try {
        paths = j.at("expert_paths").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("mixture bundle lacks expert paths: ") + e.what());
    }
    if (paths.size() != b.spec.experts.size()) throw Error("mixture bundle expert paths do not match the spec");
    for (const auto& p : paths) b.experts.push_back(load_checkpoint(dir / p));
    if (j.contains("merged_path")) b.merged = load_checkpoint(dir / j.at("merged_path").get<std::string>());
    b.spec.validate(b.refs());
    if (b.spec.is_hybrid() && !b.merged) throw Error("hybrid bundle has no merged checkpoint");
    return b;
}

} // namespace glueforge
