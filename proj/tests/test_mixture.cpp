#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include <glueforge/mixture.hpp>
#include <glueforge/toy_model.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace glueforge;
using namespace oracles;
using fixtures::max_abs_diff;

namespace {

BatchLogits dense(const Checkpoint& m, const TokenBatch& b) { return forward(m.store, m.desc, b); }
BatchLogits dense(const TensorStore& s, const ArchDescriptor& d, const TokenBatch& b) { return forward(s, d, b); }

/// Base frame with the layer tensors of layer l taken from `experts[pick[l]]`.
TensorStore chimera(const Checkpoint& base, const std::vector<const Checkpoint*>& experts, const std::vector<int>& pick) {
    TensorStore s = base.store;
    for (int l = 0; l < base.desc.num_layers; ++l)
        for (const auto& name : names::layer_tensors(l)) s.replace(name, experts[pick[l]]->store.at(name));
    return s;
}

int selected_one(const Matrix& g, int row = 0) {
    int pick = -1;
    for (int e = 0; e < g.cols; ++e)
        if (g(row, e) != 0.0f) {
            EXPECT_EQ(pick, -1) << "more than one expert active";
            pick = e;
        }
    return pick;
}

struct Trio {
    ToyConfig cfg = fixtures::tiny_config();
    Checkpoint a = build_toy_model(cfg, 1), b = build_toy_model(cfg, 2), c = build_toy_model(cfg, 3);
    ExpertRefs refs() const { return {&a, &b, &c}; }
    std::vector<std::string> ids() const { return {"a", "b", "c"}; }
};

} // namespace

// ---------------------------------------------------------------------------------------------
// Model level

TEST(ModelLevel, TopOneIsBitEqualToSelectedExpert) {
    Trio t;
    auto router = random_linear(t.cfg.hidden_dim, 3, 7);
    auto spec = build_model_level(t.ids(), t.refs(), router, 1);
    auto batch = sample_batch(t.cfg.vocab_size, 12);
    RoutingTrace trace;
    auto mixed = mixture_forward(spec, t.refs(), batch, nullptr, &trace);
    std::set<int> seen;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        ASSERT_EQ(trace.gates[s].size(), 1u);
        int e = selected_one(trace.gates[s][0]);
        seen.insert(e);
        TokenBatch one{{batch.sequences[s]}};
        EXPECT_EQ(mixed[s], dense(*t.refs()[e], one)[0]) << "sequence " << s;
    }
    EXPECT_GE(seen.size(), 2u) << "router should not send everything to one expert";
}

TEST(ModelLevel, IdenticalExpertsEqualSingleExpert) {
    Trio t;
    ExpertRefs same = {&t.a, &t.a};
    auto batch = sample_batch(t.cfg.vocab_size);
    auto spec = build_model_level({"x", "y"}, same, mlp_routers(1, t.cfg.hidden_dim, 2, 3)[0], 2);
    EXPECT_LE(max_abs_diff(mixture_forward(spec, same, batch), dense(t.a, batch)), 1e-6);
}

TEST(ModelLevel, TopTwoUniformMixesLogits) {
    Trio t;
    ExpertRefs two = {&t.a, &t.b};
    auto spec = build_model_level({"a", "b"}, two, zero_linear(t.cfg.hidden_dim, 2), 2);
    auto batch = sample_batch(t.cfg.vocab_size);
    auto mixed = mixture_forward(spec, two, batch);
    auto la = dense(t.a, batch), lb = dense(t.b, batch);
    for (std::size_t s = 0; s < batch.size(); ++s)
        for (std::size_t i = 0; i < la[s].v.size(); ++i)
            EXPECT_NEAR(mixed[s].v[i], 0.5 * la[s].v[i] + 0.5 * lb[s].v[i], 1e-6);
}

TEST(ModelLevel, RouterEmbedsWithConfiguredExpert) {
    Trio t;
    ExpertRefs two = {&t.a, &t.b};
    // Linear router whose row 1 equals the mean of expert b's embedding of the sequence.
    TokenBatch batch{{{3, 5, 7}}};
    auto emb_b = t.b.store.at(names::embed);
    RouterSpec r = zero_linear(t.cfg.hidden_dim, 2);
    for (int c = 0; c < t.cfg.hidden_dim; ++c)
        for (int id : batch.sequences[0]) r.w1.data[t.cfg.hidden_dim + c] += emb_b.data[id * t.cfg.hidden_dim + c] / 3.0f;
    for (int c = 0; c < t.cfg.hidden_dim; ++c) r.w1.data[c] = -r.w1.data[t.cfg.hidden_dim + c];
    auto spec = build_model_level({"a", "b"}, two, r, 1, 1);
    RoutingTrace trace;
    mixture_forward(spec, two, batch, nullptr, &trace);
    EXPECT_EQ(selected_one(trace.gates[0][0]), 1);
}

TEST(ModelLevel, HeterogeneousExpertsAllowed) {
    auto a = build_toy_model({2, 8, 16, 2, 16, 16}, 1);
    auto b = build_toy_model({3, 12, 20, 2, 16, 16}, 2);
    ExpertRefs ex = {&a, &b};
    auto spec = build_model_level({"a", "b"}, ex, mlp_routers(1, 8, 2, 0)[0], 2);
    auto out = mixture_forward(spec, ex, sample_batch(16));
    EXPECT_EQ(out[0].cols, 16);
    EXPECT_THROW(build_model_level({"a", "b"}, ex, mlp_routers(1, 12, 2, 0)[0]), Error);
    EXPECT_NO_THROW(build_model_level({"a", "b"}, ex, mlp_routers(1, 12, 2, 0)[0], 1, 1));
}

TEST(ModelLevel, ValidationErrors) {
    Trio t;
    auto other_vocab = build_toy_model({2, 8, 16, 2, 32, 16}, 1);
    ExpertRefs mixed_vocab = {&t.a, &other_vocab};
    EXPECT_THROW(build_model_level({"a", "v"}, mixed_vocab, zero_linear(8, 2)), Error);
    EXPECT_THROW(build_model_level({"a", "b"}, {&t.a, &t.b}, zero_linear(8, 3)), Error);
    EXPECT_THROW(build_model_level({"a", "b"}, {&t.a, &t.b}, zero_linear(8, 2), 3), Error);
    EXPECT_THROW(build_model_level({"a", "b"}, {&t.a, &t.b}, zero_linear(8, 2), 0), Error);
    auto spec = build_model_level({"a", "b"}, {&t.a, &t.b}, zero_linear(8, 2));
    EXPECT_THROW(mixture_forward(spec, {&t.a}, sample_batch(16)), Error);
    EXPECT_THROW(mixture_forward(spec, {&t.a, nullptr}, sample_batch(16)), Error);
    spec.router_input = RouterInput::token;
    EXPECT_THROW(spec.validate({&t.a, &t.b}), Error);
}

// ---------------------------------------------------------------------------------------------
// Block level

TEST(BlockLevel, HardRoutingEqualsChimera) {
    Trio t;
    auto batch = sample_batch(t.cfg.vocab_size, 10, 3);
    auto spec = build_block_level(t.ids(), t.refs(), 0, mlp_routers(2, t.cfg.hidden_dim, 3, 50, 40.0f), 1);
    RoutingTrace trace;
    auto mixed = mixture_forward(spec, t.refs(), batch, nullptr, &trace);
    std::set<std::vector<int>> patterns;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        std::vector<int> pick;
        for (const auto& g : trace.gates[s]) {
            ASSERT_EQ(g.rows, 1);
            pick.push_back(selected_one(g));
        }
        patterns.insert(pick);
        TokenBatch one{{batch.sequences[s]}};
        EXPECT_LE(max_abs_diff(mixed[s], dense(chimera(t.a, t.refs(), pick), t.a.desc, one)[0]), 1e-6);
    }
    EXPECT_GE(patterns.size(), 2u);
}

TEST(BlockLevel, SameExpertEveryLayerUsesBaseFrame) {
    Trio t;
    // Zero routers tie, so top-1 picks expert 0 (= b here) at every layer; base is c.
    ExpertRefs ex = {&t.b, &t.a, &t.c};
    std::vector<RouterSpec> routers(2, zero_linear(t.cfg.hidden_dim, 3));
    auto spec = build_block_level({"b", "a", "c"}, ex, 2, routers, 1);
    auto batch = sample_batch(t.cfg.vocab_size);
    EXPECT_LE(max_abs_diff(mixture_forward(spec, ex, batch), dense(chimera(t.c, ex, {0, 0}), t.c.desc, batch)), 1e-6);
}

TEST(BlockLevel, IdenticalExpertsAnyRouter) {
    Trio t;
    ExpertRefs same = {&t.a, &t.a, &t.a};
    auto spec = build_block_level({"x", "y", "z"}, same, 1, mlp_routers(2, 8, 3, 9), 2);
    auto batch = sample_batch(t.cfg.vocab_size);
    EXPECT_LE(max_abs_diff(mixture_forward(spec, same, batch), dense(t.a, batch)), 1e-6);
}

TEST(BlockLevel, ValidationErrors) {
    Trio t;
    auto deeper = build_toy_model({3, 8, 16, 2, 16, 16}, 1);
    auto wider = build_toy_model({2, 12, 16, 2, 16, 16}, 1);
    EXPECT_THROW(build_block_level({"a", "d"}, {&t.a, &deeper}, 0, mlp_routers(2, 8, 2, 0)), Error);
    EXPECT_THROW(build_block_level({"a", "w"}, {&t.a, &wider}, 0, mlp_routers(2, 8, 2, 0)), Error);
    EXPECT_THROW(build_block_level({"a", "b"}, {&t.a, &t.b}, 0, mlp_routers(1, 8, 2, 0)), Error);
    EXPECT_THROW(build_block_level({"a", "b"}, {&t.a, &t.b}, 2, mlp_routers(2, 8, 2, 0)), Error);
    EXPECT_THROW(build_block_level({"a", "b"}, {&t.a, &t.b}, 0, mlp_routers(2, 12, 2, 0)), Error);
}

// ---------------------------------------------------------------------------------------------
// FFN level

TEST(FfnLevel, SharedFfnEqualsDenseBase) {
    Trio t;
    // Experts differ only outside the FFN: attention and norms must come from the base.
    auto e1 = t.a, e2 = t.a;
    for (int l = 0; l < t.cfg.num_layers; ++l) {
        e1.store.replace(names::q_proj(l), t.b.store.at(names::q_proj(l)));
        e2.store.replace(names::v_proj(l), t.c.store.at(names::v_proj(l)));
        e2.store.replace(names::post_norm(l), t.c.store.at(names::post_norm(l)));
    }
    ExpertRefs ex = {&t.a, &e1, &e2};
    std::vector<RouterSpec> zero(2, zero_linear(8, 3));
    auto batch = sample_batch(t.cfg.vocab_size);
    for (auto input : {RouterInput::token, RouterInput::sample}) {
        auto spec = build_ffn_level(t.ids(), ex, 0, zero, input, 3);
        EXPECT_LE(max_abs_diff(mixture_forward(spec, ex, batch), dense(t.a, batch)), 1e-6);
    }
}

TEST(FfnLevel, BaseWithExpertFfn) {
    Trio t;
    ExpertRefs same_ffn = {&t.b, &t.b};
    // Base b, both experts b: any router gives b's dense forward.
    auto spec = build_ffn_level({"x", "y"}, same_ffn, 0, mlp_routers(2, 8, 2, 1), RouterInput::token, 2);
    auto batch = sample_batch(t.cfg.vocab_size);
    EXPECT_LE(max_abs_diff(mixture_forward(spec, same_ffn, batch), dense(t.b, batch)), 1e-6);
}

TEST(FfnLevel, TokenRoutingMatchesExternalRecomputation) {
    Trio t;
    auto spec = build_ffn_level(t.ids(), t.refs(), 0, mlp_routers(2, 8, 3, 21, 40.0f), RouterInput::token, 1);
    auto batch = sample_batch(t.cfg.vocab_size, 5, 8);
    RoutingTrace trace;
    auto mixed = mixture_forward(spec, t.refs(), batch, nullptr, &trace);
    std::set<int> used;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto& seq = batch.sequences[s];
        ag::Tape tape(false);
        runtime::Graph g(tape);
        auto x = runtime::embed(g, t.a.store, seq);
        for (int l = 0; l < t.cfg.num_layers; ++l) {
            const Matrix& gates = trace.gates[s][l];
            ASSERT_EQ(gates.rows, static_cast<int>(seq.size()));
            x = runtime::attention_residual(g, x, t.a.store, l, t.cfg.num_heads);
            auto b = runtime::ffn_input(g, x, t.a.store, l);
            Matrix xv = tape.value(x);
            const Matrix bv = tape.value(b);
            for (int p = 0; p < bv.rows; ++p) {
                int e = selected_one(gates, p);
                used.insert(e);
                auto row = tape.leaf(Matrix(1, bv.cols, std::vector<float>(bv.row(p).begin(), bv.row(p).end())));
                const Matrix out = tape.value(runtime::ffn(g, row, t.refs()[e]->store, l));
                for (int c = 0; c < xv.cols; ++c) xv(p, c) += out(0, c);
            }
            x = tape.leaf(xv);
        }
        EXPECT_LE(max_abs_diff(mixed[s], tape.value(runtime::lm_logits(g, x, t.a.store))), 1e-6) << s;
    }
    EXPECT_GE(used.size(), 2u);
}

TEST(FfnLevel, SampleRoutingUsesOneExpertSetPerSequence) {
    Trio t;
    auto spec = build_ffn_level(t.ids(), t.refs(), 1, mlp_routers(2, 8, 3, 5, 40.0f), RouterInput::sample, 2);
    auto batch = sample_batch(t.cfg.vocab_size, 6);
    RoutingTrace trace;
    mixture_forward(spec, t.refs(), batch, nullptr, &trace);
    for (const auto& seq : trace.gates)
        for (const auto& g : seq) {
            EXPECT_EQ(g.rows, 1);
            int positive = 0;
            for (float w : g.v) positive += w > 0.0f;
            EXPECT_EQ(positive, 2);
        }
}

TEST(FfnLevel, TopKWeightsInTrace) {
    Trio t;
    auto spec = build_ffn_level(t.ids(), t.refs(), 0, mlp_routers(2, 8, 3, 5, 10.0f), RouterInput::token, 2);
    RoutingTrace trace;
    mixture_forward(spec, t.refs(), sample_batch(t.cfg.vocab_size, 4), nullptr, &trace);
    for (const auto& seq : trace.gates)
        for (const auto& g : seq)
            for (int r = 0; r < g.rows; ++r) {
                int positive = 0;
                double sum = 0.0;
                for (float w : g.row(r)) {
                    positive += w > 0.0f;
                    sum += w;
                }
                EXPECT_EQ(positive, 2);
                EXPECT_NEAR(sum, 1.0, 1e-6);
            }
}

TEST(FfnLevel, ShapeMismatchRejected) {
    Trio t;
    auto fat = build_toy_model({2, 8, 24, 2, 16, 16}, 1);
    EXPECT_THROW(build_ffn_level({"a", "f"}, {&t.a, &fat}, 0, mlp_routers(2, 8, 2, 0), RouterInput::token), Error);
    // Block level accepts differing FFN widths; FFN level does not.
    EXPECT_NO_THROW(build_block_level({"a", "f"}, {&t.a, &fat}, 0, mlp_routers(2, 8, 2, 0)));
}

TEST(Mixture, DeterministicForward) {
    Trio t;
    auto spec = build_ffn_level(t.ids(), t.refs(), 0, mlp_routers(2, 8, 3, 5, 10.0f), RouterInput::token, 2);
    auto batch = sample_batch(t.cfg.vocab_size);
    EXPECT_EQ(mixture_forward(spec, t.refs(), batch), mixture_forward(spec, t.refs(), batch));
}

TEST(Mixture, UniformRouterTopAllIsAverageOfExperts) {
    Trio t;
    ExpertRefs ex = t.refs();
    auto batch = sample_batch(t.cfg.vocab_size);
    auto spec = build_model_level(t.ids(), ex, zero_linear(8, 3), 3);
    auto mixed = mixture_forward(spec, ex, batch);
    auto la = dense(t.a, batch), lb = dense(t.b, batch), lc = dense(t.c, batch);
    for (std::size_t s = 0; s < batch.size(); ++s)
        for (std::size_t i = 0; i < la[s].v.size(); ++i)
            EXPECT_NEAR(mixed[s].v[i], (double(la[s].v[i]) + lb[s].v[i] + lc[s].v[i]) / 3.0, 1e-6);
}

// ---------------------------------------------------------------------------------------------
// Hybrid

namespace {

struct Family {
    ToyConfig cfg{4, 8, 16, 2, 16, 16};
    Checkpoint root = build_toy_model(cfg, 11);
    Checkpoint a = fixtures::add_noise(root, 0.01, 1), b = fixtures::add_noise(root, 0.01, 2);
    ExpertRefs refs() const { return {&a, &b}; }
    MergeRecipe recipe() const {
        MergeRecipe r;
        r.group_size = 2;
        r.coefficients = {{0.7, 0.4, 0.5}, {0.3, 0.6, 0.5}};
        return r;
    }
};

} // namespace

TEST(Hybrid, KZeroEqualsFfnLevel) {
    Family f;
    auto routers = mlp_routers(4, 8, 2, 3, 10.0f);
    auto ffn = build_ffn_level({"a", "b"}, f.refs(), 0, routers, RouterInput::token, 1);
    auto hyb = build_hybrid({"a", "b"}, f.refs(), 0, 0, f.recipe(), routers, RouterInput::token, 1);
    auto merged = materialize_merged(hyb, f.refs());
    auto batch = sample_batch(16);
    EXPECT_EQ(hyb.routers, ffn.routers);
    EXPECT_LE(max_abs_diff(mixture_forward(hyb, f.refs(), batch, &merged), mixture_forward(ffn, f.refs(), batch)), 1e-6);
}

TEST(Hybrid, AllMergedWithMergedFrameEqualsApplyRecipe) {
    Family f;
    auto hyb = build_hybrid({"a", "b"}, f.refs(), 0, 4, f.recipe(), {}, RouterInput::sample, 1, true);
    auto merged = materialize_merged(hyb, f.refs());
    StoreRefs sr = {&f.a.store, &f.b.store};
    auto expect = apply_recipe(sr, f.a.desc, nullptr, f.recipe());
    EXPECT_EQ(merged, expect);
    auto batch = sample_batch(16);
    EXPECT_LE(max_abs_diff(mixture_forward(hyb, f.refs(), batch, &merged), dense(expect, f.a.desc, batch)), 1e-6);
}

TEST(Hybrid, AllMergedWithBaseFrameKeepsBaseEmbeddingAndHead) {
    Family f;
    auto hyb = build_hybrid({"a", "b"}, f.refs(), 1, 4, f.recipe(), {}, RouterInput::sample, 1, false);
    auto merged = materialize_merged(hyb, f.refs());
    TensorStore frame = merged;
    for (const auto* n : {&names::embed, &names::final_norm, &names::lm_head}) frame.replace(*n, f.b.store.at(*n));
    auto batch = sample_batch(16);
    EXPECT_LE(max_abs_diff(mixture_forward(hyb, f.refs(), batch, &merged), dense(frame, f.a.desc, batch)), 1e-6);
}

TEST(Hybrid, StructureForKOne) {
    Family f;
    auto hyb = build_hybrid({"a", "b"}, f.refs(), 0, 1, f.recipe(), mlp_routers(3, 8, 2, 0), RouterInput::token);
    EXPECT_EQ(hyb.routers.size(), 3u);
    EXPECT_EQ(router_count(MixtureLevel::ffn, 4, 1), 3u);
    EXPECT_EQ(default_hybrid_k(4), 1);
    EXPECT_EQ(default_hybrid_k(32), 8);
    auto merged = materialize_merged(hyb, f.refs());
    RoutingTrace trace;
    mixture_forward(hyb, f.refs(), sample_batch(16, 2), &merged, &trace);
    EXPECT_EQ(trace.gates[0].size(), 3u);
    // Layer 0 comes from the merged model: replacing the experts' layer-0 tensors changes nothing.
    auto a2 = f.a, b2 = f.b;
    for (const auto& n : names::layer_tensors(0)) {
        a2.store.replace(n, f.root.store.at(n));
        b2.store.replace(n, f.root.store.at(n));
    }
    auto batch = sample_batch(16);
    EXPECT_EQ(mixture_forward(hyb, {&a2, &b2}, batch, &merged), mixture_forward(hyb, f.refs(), batch, &merged));
}

TEST(Hybrid, Errors) {
    Family f;
    auto r = f.recipe();
    EXPECT_THROW(build_hybrid({"a", "b"}, f.refs(), 0, 5, r, {}, RouterInput::token), Error);
    EXPECT_THROW(build_hybrid({"a", "b"}, f.refs(), 0, -1, r, mlp_routers(5, 8, 2, 0), RouterInput::token), Error);
    EXPECT_THROW(build_hybrid({"a", "b"}, f.refs(), 0, 1, r, mlp_routers(4, 8, 2, 0), RouterInput::token), Error);
    auto bad = r;
    bad.coefficients.pop_back();
    EXPECT_THROW(build_hybrid({"a", "b"}, f.refs(), 0, 1, bad, mlp_routers(3, 8, 2, 0), RouterInput::token), Error);
    bad = r;
    bad.group_size = 3;
    EXPECT_THROW(build_hybrid({"a", "b"}, f.refs(), 0, 1, bad, mlp_routers(3, 8, 2, 0), RouterInput::token), Error);
    auto hyb = build_hybrid({"a", "b"}, f.refs(), 0, 1, r, mlp_routers(3, 8, 2, 0), RouterInput::token);
    EXPECT_THROW(mixture_forward(hyb, f.refs(), sample_batch(16)), Error);
    auto blk = build_block_level({"a", "b"}, f.refs(), 0, mlp_routers(4, 8, 2, 0));
    blk.hybrid_k = 1;
    EXPECT_THROW(blk.validate(f.refs()), Error);
}

// ---------------------------------------------------------------------------------------------
// Router training

TEST(RouterTraining, ZeroStepsAndZeroLrLeaveRoutersUnchanged) {
    Trio t;
    auto spec = build_ffn_level(t.ids(), t.refs(), 0, mlp_routers(2, 8, 3, 4), RouterInput::token, 2);
    auto corpus = sample_batch(t.cfg.vocab_size, 3);
    RouterTrainOptions o;
    o.steps = 0;
    EXPECT_EQ(train_router_lm(spec, t.refs(), corpus, o).routers, spec.routers);
    o.steps = 5;
    o.lr = 0.0f;
    auto r = train_router_lm(spec, t.refs(), corpus, o);
    EXPECT_EQ(r.routers, spec.routers);
    EXPECT_EQ(r.loss_history.size(), 5u);
}

TEST(RouterTraining, RejectsLinearRoutersAndBadInput) {
    Trio t;
    auto spec = build_model_level(t.ids(), t.refs(), zero_linear(8, 3));
    EXPECT_THROW(train_router_lm(spec, t.refs(), sample_batch(16), {}), Error);
    auto mlp = build_model_level(t.ids(), t.refs(), mlp_routers(1, 8, 3, 0)[0]);
    EXPECT_THROW(train_router_lm(mlp, t.refs(), TokenBatch{{{1}}}, {}), Error);
    RouterTrainOptions o;
    o.lr = std::nanf("");
    EXPECT_THROW(train_router_lm(mlp, t.refs(), sample_batch(16), o), Error);
}

TEST(RouterTraining, NonFiniteLossAborts) {
    Trio t;
    auto broken = t.b;
    broken.store.mutable_at(names::lm_head).data[0] = std::numeric_limits<float>::infinity();
    ExpertRefs ex = {&t.a, &broken};
    auto spec = build_model_level({"a", "b"}, ex, mlp_routers(1, 8, 2, 0)[0]);
    RouterTrainOptions o;
    o.steps = 3;
    EXPECT_THROW(train_router_lm(spec, ex, sample_batch(16), o), Error);
}

TEST(RouterTraining, LearnsToRouteMemorizedExperts) {
    auto f = fixtures::make_router_fixture(fixtures::tiny_config(), 1, 300, 300);
    const auto a0 = f.expert_a.store, b0 = f.expert_b.store;
    ExpertRefs ex = {&f.expert_a, &f.expert_b};
    auto spec = build_ffn_level({"a", "b"}, ex, 0, mlp_routers(2, 8, 2, 100), RouterInput::sample, 1);
    RouterTrainOptions o;
    o.steps = 200;
    o.seed = 0;
    auto res = train_router_lm(spec, ex, f.train(), o);
    EXPECT_EQ(f.expert_a.store, a0);
    EXPECT_EQ(f.expert_b.store, b0);
    auto trained = spec;
    trained.routers = res.routers;
    const double before = res.loss_history.front();
    const double after = mixture_loss(trained, ex, f.train(), nullptr, true);
    EXPECT_LT(after, 0.8 * before);
    int ok = 0, total = 0;
    for (int want : {0, 1}) {
        RoutingTrace trace;
        mixture_forward(trained, ex, want == 0 ? f.heldout_a : f.heldout_b, nullptr, &trace);
        for (const auto& seq : trace.gates)
            for (const auto& g : seq) {
                ++total;
                ok += selected_one(g) == want;
            }
    }
    EXPECT_GT(static_cast<double>(ok) / total, 0.8);
    // Same seed, same routers.
    EXPECT_EQ(train_router_lm(spec, ex, f.train(), o).routers, res.routers);
}

TEST(RouterTraining, MiniBatchesAreSeeded) {
    Trio t;
    auto spec = build_ffn_level(t.ids(), t.refs(), 0, mlp_routers(2, 8, 3, 4), RouterInput::sample, 1);
    auto corpus = sample_batch(t.cfg.vocab_size, 6);
    RouterTrainOptions o;
    o.steps = 4;
    o.batch_size = 2;
    o.seed = 1;
    auto a = train_router_lm(spec, t.refs(), corpus, o);
    auto b = train_router_lm(spec, t.refs(), corpus, o);
    o.seed = 2;
    auto c = train_router_lm(spec, t.refs(), corpus, o);
    EXPECT_EQ(a.routers, b.routers);
    EXPECT_NE(a.loss_history, c.loss_history);
}

// ---------------------------------------------------------------------------------------------
// Serialization

TEST(MixtureBundle, RoundTripIsBitExact) {
    Family f;
    fixtures::TempDir dir("mix");
    auto hyb = build_hybrid({"a", "b/2"}, f.refs(), 1, 2, f.recipe(), mlp_routers(2, 8, 2, 6), RouterInput::token, 2);
    Checkpoint merged{materialize_merged(hyb, f.refs()), f.a.desc};
    save_mixture_bundle(dir.path(), hyb, f.refs(), &merged);
    EXPECT_TRUE(fs::exists(dir / "experts" / "01_b_2" / "model.safetensors"));
    auto back = load_mixture_bundle(dir.path());
    EXPECT_EQ(to_json(back.spec).dump(), to_json(hyb).dump());
    EXPECT_EQ(back.spec.routers, hyb.routers);
    ASSERT_EQ(back.experts.size(), 2u);
    EXPECT_EQ(back.experts[0].store, f.a.store);
    EXPECT_EQ(back.experts[1].store, f.b.store);
    ASSERT_TRUE(back.merged);
    EXPECT_EQ(back.merged->store, merged.store);
    auto batch = sample_batch(16);
    EXPECT_EQ(mixture_forward(back.spec, back.refs(), batch, back.merged_store()),
              mixture_forward(hyb, f.refs(), batch, &merged.store));
}

TEST(MixtureBundle, ModelLevelAndErrors) {
    Trio t;
    fixtures::TempDir dir("mix");
    auto spec = build_model_level(t.ids(), t.refs(), build_linear_router({{{1}}, {{2}}, {{3, 4}}}, t.a.store.at(names::embed)));
    save_mixture_bundle(dir.path(), spec, t.refs());
    auto back = load_mixture_bundle(dir.path());
    EXPECT_EQ(back.spec.routers, spec.routers);
    EXPECT_FALSE(back.merged);
    fs::remove_all(dir / "experts" / "02_c");
    EXPECT_THROW(load_mixture_bundle(dir.path()), Error);
    EXPECT_THROW(load_mixture_bundle(dir / "nowhere"), Error);
    EXPECT_THROW(mixture_from_json(nlohmann::json{{"level", "tower"}}), Error);
}
