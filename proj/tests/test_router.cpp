#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include <glueforge/router.hpp>

using namespace glueforge;

namespace {

void expect_topk_contract(const std::vector<float>& w, int k) {
    int positive = 0;
    double sum = 0.0;
    for (float x : w) {
        EXPECT_GE(x, 0.0f);
        if (x > 0.0f) ++positive;
        sum += x;
    }
    EXPECT_EQ(positive, k);
    EXPECT_NEAR(sum, 1.0, 1e-6);
}

Tensor embedding_of(std::vector<std::vector<float>> rows) {
    const auto dim = static_cast<std::int64_t>(rows.front().size());
    Tensor t({static_cast<std::int64_t>(rows.size()), dim}, 0.0f);
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy(rows[r].begin(), rows[r].end(), t.data.begin() + static_cast<long>(r * dim));
    return t;
}

} // namespace

TEST(SampleEmbedding, MeanOverPositions) {
    EXPECT_EQ(sample_embedding(std::vector<std::vector<float>>{{1, 2}, {3, 4}}), (std::vector<float>{2, 3}));
    EXPECT_EQ(sample_embedding(std::vector<std::vector<float>>{{0.5f, -7}}), (std::vector<float>{0.5f, -7}));
    EXPECT_THROW(sample_embedding(std::vector<std::vector<float>>{}), Error);
    EXPECT_THROW(sample_embedding(std::vector<std::vector<float>>{{1, 2}, {3}}), Error);
}

TEST(TopK, Examples) {
    std::vector<float> l = {2.0f, 1.0f, 0.5f};
    EXPECT_EQ(topk_weights(l, 1), (std::vector<float>{1.0f, 0.0f, 0.0f}));
    // k = n equals the plain softmax.
    auto full = topk_weights(l, 3);
    double z = std::exp(2.0) + std::exp(1.0) + std::exp(0.5);
    EXPECT_NEAR(full[0], std::exp(2.0) / z, 1e-7);
    EXPECT_NEAR(full[1], std::exp(1.0) / z, 1e-7);
    EXPECT_NEAR(full[2], std::exp(0.5) / z, 1e-7);
    EXPECT_EQ(topk_weights(std::vector<float>{1.0f, 1.0f}, 1), (std::vector<float>{1.0f, 0.0f}));
}

TEST(TopK, RenormalizesSelectedSoftmax) {
    std::vector<float> l = {0.3f, 1.2f, -0.4f, 0.9f};
    auto w = topk_weights(l, 2);
    // Softmax over all, keep the two largest, renormalize.
    std::vector<double> e;
    for (float x : l) e.push_back(std::exp(double(x)));
    double keep = e[1] + e[3];
    EXPECT_EQ(w[0], 0.0f);
    EXPECT_EQ(w[2], 0.0f);
    EXPECT_NEAR(w[1], e[1] / keep, 1e-7);
    EXPECT_NEAR(w[3], e[3] / keep, 1e-7);
}

TEST(TopK, TieAtTheKthSlotPrefersLowerIndex) {
    auto w = topk_weights(std::vector<float>{0.0f, 3.0f, 1.0f, 1.0f, 1.0f}, 2);
    EXPECT_GT(w[1], 0.0f);
    EXPECT_GT(w[2], 0.0f);
    EXPECT_EQ(w[3], 0.0f);
    EXPECT_EQ(w[4], 0.0f);
}

TEST(TopK, RandomContract) {
    std::mt19937_64 rng(4);
    std::normal_distribution<float> n(0.0f, 3.0f);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> l(7);
        for (auto& x : l) x = n(rng);
        int k = 1 + trial % 7;
        expect_topk_contract(topk_weights(l, k), k);
    }
}

TEST(TopK, RejectsBadK) {
    std::vector<float> l = {1, 2, 3};
    EXPECT_THROW(topk_weights(l, 0), Error);
    EXPECT_THROW(topk_weights(l, 4), Error);
}

TEST(LinearRouter, SingleTokenPromptGivesNormalizedEmbedding) {
    auto emb = embedding_of({{3, 4, 0}, {0, 0, 2}, {1, 1, 1}});
    auto r = build_linear_router({{{0}}, {{1}}}, emb);
    EXPECT_EQ(r.kind, RouterKind::linear);
    EXPECT_EQ(r.w1.shape, (Shape{2, 3}));
    EXPECT_NEAR(r.w1.data[0], 0.6f, 1e-7);
    EXPECT_NEAR(r.w1.data[1], 0.8f, 1e-7);
    EXPECT_EQ(r.w1.data[2], 0.0f);
    EXPECT_EQ(r.w1.data[5], 1.0f);
}

TEST(LinearRouter, MeanPoolPerPromptThenMeanOverPrompts) {
    auto emb = embedding_of({{1, 0}, {0, 1}, {1, 1}});
    // Prompt [0, 0, 1] pools to (2/3, 1/3); prompt [2] pools to (1, 1); mean (5/6, 2/3).
    auto r = build_linear_router({{{0, 0, 1}, {2}}}, emb);
    double a = 5.0 / 6.0, b = 2.0 / 3.0, n = std::sqrt(a * a + b * b);
    EXPECT_NEAR(r.w1.data[0], a / n, 1e-7);
    EXPECT_NEAR(r.w1.data[1], b / n, 1e-7);
}

TEST(LinearRouter, IdenticalPromptSetsTieToLowerIndex) {
    auto emb = embedding_of({{1, 2}, {2, 1}, {0, 1}});
    std::vector<std::vector<int>> prompts = {{0, 1}, {2}};
    auto r = build_linear_router({prompts, prompts}, emb);
    for (int row = 0; row < 2; ++row) EXPECT_EQ(r.w1.data[row], r.w1.data[2 + row]);
    EXPECT_EQ(route_topk(r, std::vector<float>{0.3f, -0.1f}, 1), (std::vector<float>{1.0f, 0.0f}));
}

TEST(LinearRouter, OrthogonalPromptsRouteToOwnExpert) {
    // Tokens 0..2 for expert 0 live on axis 0, tokens 3..5 for expert 1 on axis 1, 6..8 on axis 2.
    std::vector<std::vector<float>> rows;
    for (int axis = 0; axis < 3; ++axis)
        for (int t = 0; t < 3; ++t) {
            std::vector<float> v(4, 0.0f);
            v[axis] = 1.0f + 0.5f * t;
            rows.push_back(v);
        }
    auto emb = embedding_of(rows);
    auto r = build_linear_router({{{0, 1}, {2}}, {{3}, {4, 5}}, {{6, 7, 8}}}, emb);
    for (int e = 0; e < 3; ++e)
        for (int t = 0; t < 3; ++t) {
            auto x = std::vector<float>(rows[static_cast<std::size_t>(3 * e + t)]);
            std::vector<float> want(3, 0.0f);
            want[static_cast<std::size_t>(e)] = 1.0f;
            EXPECT_EQ(route_topk(r, x, 1), want);
        }
}

TEST(LinearRouter, PositiveScalingKeepsSelection) {
    std::mt19937_64 rng(2);
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::vector<std::vector<float>> rows(12, std::vector<float>(6));
    for (auto& r : rows)
        for (auto& x : r) x = n(rng);
    auto r = build_linear_router({{{0, 1}}, {{2, 3, 4}}, {{5}}, {{6, 7}}}, embedding_of(rows));
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> x(6);
        for (auto& v : x) v = n(rng);
        auto scaled = x;
        for (auto& v : scaled) v *= 3.5f;
        for (int k = 1; k <= 4; ++k) {
            auto a = route_topk(r, x, k), b = route_topk(r, scaled, k);
            for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a[i] > 0.0f, b[i] > 0.0f);
        }
    }
}

TEST(LinearRouter, Errors) {
    auto emb = embedding_of({{1, 0}, {0, 1}});
    EXPECT_THROW(build_linear_router({}, emb), Error);
    EXPECT_THROW(build_linear_router({{{0}}, {}}, emb), Error);
    EXPECT_THROW(build_linear_router({{{0}}, {{}}}, emb), Error);
    EXPECT_THROW(build_linear_router({{{0}}, {{2}}}, emb), Error);
    EXPECT_THROW(build_linear_router({{{0}}, {{-1}}}, emb), Error);
    auto emb0 = embedding_of({{0, 0}, {1, 0}});
    EXPECT_THROW(build_linear_router({{{0}}}, emb0), Error);
}

TEST(MlpRouter, SeededAndShaped) {
    auto a = build_mlp_router(8, 4, 3, 5), b = build_mlp_router(8, 4, 3, 5), c = build_mlp_router(8, 4, 3, 6);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    EXPECT_EQ(a.w1.shape, (Shape{4, 8}));
    EXPECT_EQ(a.w2.shape, (Shape{3, 4}));
    double sq = 0.0;
    auto big = build_mlp_router(64, 64, 8, 1);
    for (float x : big.w1.data) sq += double(x) * x;
    EXPECT_NEAR(std::sqrt(sq / big.w1.data.size()), 0.02, 0.002);
}

TEST(MlpRouter, ZeroInputGivesUniformSoftmax) {
    auto r = build_mlp_router(5, 3, 4, 0);
    auto logits = router_logits(r, std::vector<float>(5, 0.0f));
    for (float l : logits) EXPECT_EQ(l, 0.0f);
    auto w = topk_weights(logits, 4);
    for (float x : w) EXPECT_NEAR(x, 0.25f, 1e-7);
}

TEST(MlpRouter, WidthOneAccepted) {
    auto r = build_mlp_router(5, 1, 2, 0);
    EXPECT_NO_THROW(r.validate());
    EXPECT_EQ(route_topk(r, std::vector<float>{1, 2, 3, 4, 5}, 1).size(), 2u);
}

TEST(MlpRouter, LogitsMatchScalarReference) {
    auto r = build_mlp_router(6, 5, 3, 9);
    std::vector<float> x = {0.4f, -1.0f, 2.0f, 0.0f, 0.3f, -0.7f};
    auto got = router_logits(r, x);
    for (int e = 0; e < 3; ++e) {
        double acc = 0.0;
        for (int h = 0; h < 5; ++h) {
            double pre = 0.0;
            for (int i = 0; i < 6; ++i) pre += double(r.w1.data[h * 6 + i]) * x[i];
            acc += double(r.w2.data[e * 5 + h]) * std::max(0.0, pre);
        }
        EXPECT_NEAR(got[e], acc, 1e-7);
    }
}

TEST(Router, DimensionMismatchAndShapeErrors) {
    auto r = build_mlp_router(4, 2, 2, 0);
    EXPECT_THROW(route_topk(r, std::vector<float>{1, 2, 3}, 1), Error);
    auto bad = r;
    bad.w2 = Tensor({3, 2}, 0.0f);
    EXPECT_THROW(bad.validate(), Error);
    bad = r;
    bad.hidden = 0;
    EXPECT_THROW(bad.validate(), Error);
    RouterSpec lin;
    lin.kind = RouterKind::linear;
    lin.in_dim = 2;
    lin.num_experts = 2;
    lin.w1 = Tensor({2, 3}, 0.0f);
    EXPECT_THROW(lin.validate(), Error);
    EXPECT_THROW(parse_router_kind("conv"), Error);
}

TEST(Router, JsonRoundTripIsBitExact) {
    auto r = build_mlp_router(7, 3, 4, 12);
    r.w1.data[0] = 1e-38f;
    r.w1.data[1] = -0.0f;
    r.w2.data[2] = 3.4028235e38f;
    auto back = router_from_json(nlohmann::json::parse(to_json(r).dump()));
    EXPECT_EQ(back.kind, r.kind);
    ASSERT_EQ(back.w1.data.size(), r.w1.data.size());
    for (std::size_t i = 0; i < r.w1.data.size(); ++i)
        EXPECT_EQ(std::bit_cast<std::uint32_t>(back.w1.data[i]), std::bit_cast<std::uint32_t>(r.w1.data[i]));
    EXPECT_EQ(back, r);
    auto lin = build_linear_router({{{0}}, {{1}}}, embedding_of({{1, 2}, {2, 1}}));
    EXPECT_EQ(router_from_json(nlohmann::json::parse(to_json(lin).dump())), lin);
    EXPECT_THROW(router_from_json(nlohmann::json{{"kind", "mlp"}}), Error);
}
