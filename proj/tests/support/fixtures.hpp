#pragma once

// Test-only helpers: temporary directories, exactly-representable stores, and an offline
// trainer used to build memorizing fixture models.

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <glueforge/autograd.hpp>
#include <glueforge/checkpoint.hpp>
#include <glueforge/fitness.hpp>
#include <glueforge/runtime.hpp>
#include <glueforge/toy_model.hpp>

namespace fixtures {

namespace fs = std::filesystem;
using namespace glueforge;

class TempDir {
public:
    explicit TempDir(const std::string& tag = "gf") {
        static std::atomic<int> counter{0};
        auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
        path_ = fs::temp_directory_path() /
                (tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    fs::path path_;
};

inline ToyConfig tiny_config() { return ToyConfig{2, 8, 16, 2, 16, 16}; }
inline ToyConfig default_config() { return ToyConfig{4, 32, 64, 2, 256, 64}; }

/// Values on a 2^-10 grid in [-1, 1]: every sum, difference, and small-integer multiple is exact in float.
inline Checkpoint dyadic_model(const ToyConfig& cfg, std::uint64_t seed) {
    auto ckpt = build_toy_model(cfg, seed);
    std::mt19937_64 rng(seed ^ 0xd1ad1cull);
    std::uniform_int_distribution<int> dist(-1024, 1024);
    for (const auto& name : ckpt.store.names()) {
        auto& t = ckpt.store.mutable_at(name);
        for (auto& x : t.data) {
            int v = 0;
            while (v == 0) v = dist(rng);
            x = static_cast<float>(v) / 1024.0f;
        }
    }
    return ckpt;
}

/// Copy of `base` with each entry nudged by a dyadic amount; differences stay exact.
inline Checkpoint dyadic_finetune(const Checkpoint& base, std::uint64_t seed, int max_step = 64) {
    Checkpoint out = base;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> dist(-max_step, max_step);
    for (const auto& name : out.store.names())
        for (auto& x : out.store.mutable_at(name).data) x += static_cast<float>(dist(rng)) / 1024.0f;
    return out;
}

inline Checkpoint add_noise(const Checkpoint& base, double sigma, std::uint64_t seed) {
    Checkpoint out = base;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sigma);
    for (const auto& name : out.store.names())
        for (auto& x : out.store.mutable_at(name).data) x = static_cast<float>(x + n(rng));
    return out;
}

inline double max_abs_diff(const TensorStore& a, const TensorStore& b) {
    double m = 0.0;
    for (const auto& [name, t] : a) {
        const auto& u = b.at(name);
        for (std::size_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(double(t.data[i]) - double(u.data[i])));
    }
    return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(double(a.v[i]) - double(b.v[i])));
    return m;
}

inline double max_abs_diff(const BatchLogits& a, const BatchLogits& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i], b[i]));
    return m;
}

/// -mean squared distance to a target store.
inline FitnessEvaluator distance_fitness(TensorStore target) {
    FitnessEvaluator ev;
    ev.id = "distance";
    ev.concurrent_safe = true;
    ev.evaluate = [target = std::move(target)](const TensorStore& s, const ArchDescriptor&) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& [name, t] : target) {
            const auto& u = s.at(name);
            for (std::size_t i = 0; i < t.numel(); ++i) {
                double d = double(u.data[i]) - double(t.data[i]);
                sum += d * d;
            }
            n += t.numel();
        }
        return -sum / static_cast<double>(n);
    };
    return ev;
}

// ---------------------------------------------------------------------------------------------
// Offline trainer (Adam on next-token cross-entropy) for fixture construction only.

struct TrainOptions {
    int steps = 200;
    float lr = 1e-2f;
    std::function<bool(const std::string&)> trainable = [](const std::string&) { return true; };
};

/// Trains the selected tensors of `ckpt` in place on the whole corpus each step. Returns the final loss.
inline double train_lm(Checkpoint& ckpt, const TokenBatch& corpus, const TrainOptions& opt) {
    corpus.validate(ckpt.desc.vocab_size);
    std::vector<std::string> params;
    for (const auto& name : ckpt.store.names())
        if (opt.trainable(name)) params.push_back(name);
    std::vector<std::vector<float>> m(params.size()), v(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m[i].assign(ckpt.store.at(params[i]).numel(), 0.0f);
        v[i].assign(ckpt.store.at(params[i]).numel(), 0.0f);
    }
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    double last = 0.0;
    for (int step = 1; step <= opt.steps; ++step) {
        ag::Tape tape(true);
        runtime::Graph g(tape);
        std::vector<ag::Var> leaves;
        for (const auto& name : params) {
            const auto& t = ckpt.store.at(name);
            auto leaf = tape.leaf(Matrix::from_tensor(t), true);
            g.bind(t, leaf);
            leaves.push_back(leaf);
        }
        std::vector<ag::Var> parts;
        std::size_t count = 0;
        for (const auto& seq : corpus.sequences) {
            auto logits = runtime::dense_forward(g, ckpt.store, ckpt.desc, seq);
            auto tg = runtime::shifted_targets(seq);
            parts.push_back(ag::cross_entropy_sum(tape, logits, tg));
            count += seq.size() - 1;
        }
        auto loss = ag::sum_scaled(tape, parts, 1.0f / static_cast<float>(count));
        last = tape.value(loss).v[0];
        tape.backward(loss);
        const float c1 = 1.0f - std::pow(b1, static_cast<float>(step));
        const float c2 = 1.0f - std::pow(b2, static_cast<float>(step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& grad = tape.grad(leaves[i]).v;
            auto& data = ckpt.store.mutable_at(params[i]).data;
            for (std::size_t j = 0; j < data.size(); ++j) {
                m[i][j] = b1 * m[i][j] + (1 - b1) * grad[j];
                v[i][j] = b2 * v[i][j] + (1 - b2) * grad[j] * grad[j];
                data[j] -= opt.lr * (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps);
            }
        }
    }
    return last;
}

/// Sequences that walk the cycle a -> b -> a -> ...
inline TokenBatch two_token_loop(int a, int b, int count, int length) {
    TokenBatch batch;
    for (int s = 0; s < count; ++s) {
        std::vector<int> seq;
        for (int p = 0; p < length; ++p) seq.push_back(((p + s) % 2) ? b : a);
        batch.sequences.push_back(seq);
    }
    return batch;
}

// ---------------------------------------------------------------------------------------------
// Two experts that memorize conflicting cycles. Both cycles pass through tokens 0 and 3 with
// different successors, so only the sequence context tells which continuation is right.

inline const std::vector<int>& cycle_a() {
    static const std::vector<int> c = {0, 1, 2, 3, 4, 5};
    return c;
}
inline const std::vector<int>& cycle_b() {
    static const std::vector<int> c = {0, 6, 7, 3, 8, 9};
    return c;
}

inline TokenBatch cycle_batch(const std::vector<int>& cycle, const std::vector<int>& lengths) {
    TokenBatch b;
    for (int len : lengths)
        for (std::size_t phase = 0; phase < cycle.size(); ++phase) {
            std::vector<int> seq;
            for (int p = 0; p < len; ++p) seq.push_back(cycle[(phase + static_cast<std::size_t>(p)) % cycle.size()]);
            b.sequences.push_back(seq);
        }
    return b;
}

inline TokenBatch concat(const TokenBatch& a, const TokenBatch& b) {
    TokenBatch out = a;
    out.sequences.insert(out.sequences.end(), b.sequences.begin(), b.sequences.end());
    return out;
}

struct RouterFixture {
    Checkpoint base, expert_a, expert_b;
    TokenBatch train_a, train_b, heldout_a, heldout_b;
    TokenBatch train() const { return concat(train_a, train_b); }
};

inline bool is_ffn_tensor(const std::string& name) { return name.find(".mlp.") != std::string::npos; }

/// Base: only embedding, norms and lm_head are trained on both corpora, which yields a bigram model
/// that cannot resolve the shared tokens. Experts: FFN-only fine-tunes of the base, one per corpus.
inline RouterFixture make_router_fixture(const ToyConfig& cfg, std::uint64_t seed, int base_steps, int expert_steps,
                                         float lr = 2e-2f) {
    RouterFixture f;
    f.train_a = cycle_batch(cycle_a(), {16});
    f.train_b = cycle_batch(cycle_b(), {16});
    f.heldout_a = cycle_batch(cycle_a(), {9, 11, 13});
    f.heldout_b = cycle_batch(cycle_b(), {9, 11, 13});
    f.base = build_toy_model(cfg, seed);
    TrainOptions bo;
    bo.steps = base_steps;
    bo.lr = lr;
    bo.trainable = [](const std::string& n) {
        return n.find("embed_tokens") != std::string::npos || n.find("lm_head") != std::string::npos ||
               n.find("norm") != std::string::npos;
    };
    train_lm(f.base, f.train(), bo);
    TrainOptions eo;
    eo.steps = expert_steps;
    eo.lr = lr;
    eo.trainable = is_ffn_tensor;
    f.expert_a = f.base;
    train_lm(f.expert_a, f.train_a, eo);
    f.expert_b = f.base;
    train_lm(f.expert_b, f.train_b, eo);
    return f;
}

} // namespace fixtures
