#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "arch.hpp"
#include "error.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

namespace glueforge {

// ---------------------------------------------------------------------------------------------
// Counter-based randomness for DARE: each (seed, tensor name, flat index) maps to one uniform draw.

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t stream_key(std::uint64_t seed, const std::string& name) {
    return splitmix64(seed ^ splitmix64(fnv1a(name)));
}

/// Uniform in [0, 1) for one counter value.
inline double counter_uniform(std::uint64_t key, std::uint64_t index) {
    return static_cast<double>(splitmix64(key ^ splitmix64(index)) >> 11) * 0x1.0p-53;
}

inline void require_finite(std::span<const double> values, const char* what) {
    for (double v : values)
        if (!std::isfinite(v)) throw Error(std::string(what) + ": non-finite coefficient");
}

} // namespace detail

// ---------------------------------------------------------------------------------------------
// Tensor-level kernels. All accumulate in double and round once to float.

namespace kernels {

/// out[j] = sum_i coeffs[i] * inputs[i][j], summed in ascending i.
inline std::vector<float> linear(std::span<const std::span<const float>> inputs, std::span<const double> coeffs) {
    std::vector<float> out(inputs.front().size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < inputs.size(); ++i) acc += coeffs[i] * static_cast<double>(inputs[i][j]);
        out[j] = static_cast<float>(acc);
    }
    return out;
}

inline std::vector<float> lerp(std::span<const float> u, std::span<const float> v, double t) {
    std::vector<float> out(u.size());
    for (std::size_t j = 0; j < u.size(); ++j)
        out[j] = static_cast<float>((1.0 - t) * static_cast<double>(u[j]) + t * static_cast<double>(v[j]));
    return out;
}

inline std::vector<float> slerp(std::span<const float> u, std::span<const float> v, double t) {
    if (t == 0.0) return {u.begin(), u.end()};
    if (t == 1.0) return {v.begin(), v.end()};
    double dot = 0, uu = 0, vv = 0;
    for (std::size_t j = 0; j < u.size(); ++j) {
        dot += static_cast<double>(u[j]) * v[j];
        uu += static_cast<double>(u[j]) * u[j];
        vv += static_cast<double>(v[j]) * v[j];
    }
    double nu = std::sqrt(uu), nv = std::sqrt(vv);
    if (nu < 1e-12 || nv < 1e-12) return lerp(u, v, t);
    double omega = std::acos(std::clamp(dot / (nu * nv), -1.0, 1.0));
    // sin(omega) vanishes at both ends of [0, pi]; the antipodal end has no unique great circle either
    if (omega < 1e-6 || std::numbers::pi - omega < 1e-6) return lerp(u, v, t);
    double so = std::sin(omega);
    double a = std::sin((1.0 - t) * omega) / so;
    double b = std::sin(t * omega) / so;
    std::vector<float> out(u.size());
    for (std::size_t j = 0; j < u.size(); ++j)
        out[j] = static_cast<float>(a * static_cast<double>(u[j]) + b * static_cast<double>(v[j]));
    return out;
}

inline std::vector<float> subtract(std::span<const float> w, std::span<const float> base) {
    std::vector<float> out(w.size());
    for (std::size_t j = 0; j < w.size(); ++j) out[j] = w[j] - base[j];
    return out;
}

/// base + sum_i scales[i] * deltas[i]
inline std::vector<float> task_arithmetic(std::span<const float> base, std::span<const std::span<const float>> deltas,
                                          std::span<const double> scales) {
    std::vector<float> out(base.size());
    for (std::size_t j = 0; j < base.size(); ++j) {
        double acc = base[j];
        for (std::size_t i = 0; i < deltas.size(); ++i) acc += scales[i] * static_cast<double>(deltas[i][j]);
        out[j] = static_cast<float>(acc);
    }
    return out;
}

/// Drop each entry with probability p, rescale survivors by 1/(1-p).
inline std::vector<float> dare(std::span<const float> delta, double drop_p, std::uint64_t seed, const std::string& name) {
    if (!(drop_p >= 0.0 && drop_p < 1.0)) throw Error("DARE drop probability must lie in [0, 1)");
    std::vector<float> out(delta.begin(), delta.end());
    if (drop_p == 0.0) return out;
    const double rescale = 1.0 / (1.0 - drop_p);
    const auto key = detail::stream_key(seed, name);
    for (std::size_t j = 0; j < out.size(); ++j)
        out[j] = detail::counter_uniform(key, j) < drop_p ? 0.0f
                                                         : static_cast<float>(static_cast<double>(delta[j]) * rescale);
    return out;
}

/// Number of entries kept by TIES trimming: ceil(frac * n), guarded against representation error in frac * n.
inline std::size_t ties_keep_count(double trim_frac, std::size_t n) {
    double raw = trim_frac * static_cast<double>(n);
    auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
    return std::clamp<std::size_t>(k, 1, n);
}

/// Keeps the top ceil(frac*n) magnitudes; ties at the cutoff keep the lower index.
inline std::vector<float> ties_trim(std::span<const float> delta, double trim_frac) {
    if (!(trim_frac > 0.0 && trim_frac <= 1.0)) throw Error("TIES trim fraction must lie in (0, 1]");
    const std::size_t n = delta.size();
    const std::size_t keep = ties_keep_count(trim_frac, n);
    if (keep >= n) return {delta.begin(), delta.end()};
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                     [&](std::size_t a, std::size_t b) {
                         float ma = std::abs(delta[a]), mb = std::abs(delta[b]);
                         return ma != mb ? ma > mb : a < b;
                     });
    std::vector<float> out(n, 0.0f);
    for (std::size_t r = 0; r < keep; ++r) out[order[r]] = delta[order[r]];
    return out;
}

/// Trim, elect sign (ties at zero elect +), disjoint mean of agreeing scaled entries, add to base.
inline std::vector<float> ties(std::span<const float> base, std::span<const std::span<const float>> deltas,
                               std::span<const double> scales, std::span<const double> trim_fracs) {
    std::vector<std::vector<float>> trimmed;
    trimmed.reserve(deltas.size());
    for (std::size_t i = 0; i < deltas.size(); ++i) trimmed.push_back(ties_trim(deltas[i], trim_fracs[i]));
    std::vector<float> out(base.size());
    for (std::size_t j = 0; j < base.size(); ++j) {
        double total = 0.0;
        for (std::size_t i = 0; i < trimmed.size(); ++i) total += scales[i] * static_cast<double>(trimmed[i][j]);
        const bool positive = total >= 0.0;
        double agree = 0.0;
        int count = 0;
        for (std::size_t i = 0; i < trimmed.size(); ++i) {
            double v = scales[i] * static_cast<double>(trimmed[i][j]);
            if ((positive && v > 0.0) || (!positive && v < 0.0)) {
                agree += v;
                ++count;
            }
        }
        double merged = count ? agree / count : 0.0;
        out[j] = static_cast<float>(static_cast<double>(base[j]) + merged);
    }
    return out;
}

} // namespace kernels

// ---------------------------------------------------------------------------------------------
// Store-level operators.

namespace detail {

inline void require_mergeable(const StoreRefs& stores, const TensorStore* base, const char* op) {
    if (stores.empty()) throw Error(std::string(op) + ": needs at least one store");
    for (const auto* s : stores) require_same_layout(*stores.front(), *s, op);
    if (base) require_same_layout(*base, *stores.front(), op);
}

inline std::vector<std::span<const float>> spans_of(const StoreRefs& stores, const std::string& name) {
    std::vector<std::span<const float>> out;
    out.reserve(stores.size());
    for (const auto* s : stores) out.push_back(s->at(name).values());
    return out;
}

/// Builds a store with `layout`'s names and shapes from a per-tensor function, optionally in parallel.
template <class Fn>
TensorStore build_per_tensor(const TensorStore& layout, unsigned threads, Fn&& fn) {
    auto names = layout.names();
    std::vector<std::vector<float>> results(names.size());
    parallel_for(names.size(), threads, [&](std::size_t i) { results[i] = fn(names[i]); });
    TensorStore out;
    for (std::size_t i = 0; i < names.size(); ++i)
        out.insert(names[i], Tensor(layout.at(names[i]).shape, std::move(results[i])));
    return out;
}

} // namespace detail

inline TensorStore linear_merge(const StoreRefs& stores, std::span<const double> coeffs, unsigned threads = 1) {
    detail::require_mergeable(stores, nullptr, "linear_merge");
    if (coeffs.size() != stores.size()) throw Error("linear_merge: coefficient count does not match store count");
    detail::require_finite(coeffs, "linear_merge");
    return detail::build_per_tensor(*stores.front(), threads, [&](const std::string& name) {
        auto inputs = detail::spans_of(stores, name);
        return kernels::linear(inputs, coeffs);
    });
}

inline TensorStore linear_merge(const std::vector<TensorStore>& stores, std::span<const double> coeffs) {
    return linear_merge(refs_of(stores), coeffs);
}

inline TensorStore slerp_merge(const TensorStore& a, const TensorStore& b, double t) {
    require_same_layout(a, b, "slerp_merge");
    if (!(t >= 0.0 && t <= 1.0)) throw Error("slerp_merge: t must lie in [0, 1]");
    return detail::build_per_tensor(a, 1, [&](const std::string& name) {
        return kernels::slerp(a.at(name).values(), b.at(name).values(), t);
    });
}

/// Fine-tuned weights minus base weights, per tensor.
struct TaskVectorSet {
    std::string base_id;
    TensorStore deltas;
};

inline std::vector<TaskVectorSet> make_task_vectors(const StoreRefs& fine_tuned, const TensorStore& base,
                                                    const std::string& base_id = "base") {
    detail::require_mergeable(fine_tuned, &base, "make_task_vectors");
    std::vector<TaskVectorSet> out;
    for (const auto* ft : fine_tuned)
        out.push_back({base_id, detail::build_per_tensor(base, 1, [&](const std::string& name) {
                           return kernels::subtract(ft->at(name).values(), base.at(name).values());
                       })});
    return out;
}

namespace detail {

inline void require_task_vectors(const TensorStore& base, std::span<const TaskVectorSet> tvs,
                                 std::span<const double> scales, const char* op) {
    if (tvs.size() != scales.size()) throw Error(std::string(op) + ": scale count does not match task-vector count");
    require_finite(scales, op);
    for (const auto& tv : tvs) require_same_layout(base, tv.deltas, op);
}

inline std::vector<std::span<const float>> delta_spans(std::span<const TaskVectorSet> tvs, const std::string& name) {
    std::vector<std::span<const float>> out;
    for (const auto& tv : tvs) out.push_back(tv.deltas.at(name).values());
    return out;
}

} // namespace detail

inline TensorStore task_arithmetic_merge(const TensorStore& base, std::span<const TaskVectorSet> tvs,
                                         std::span<const double> scales) {
    detail::require_task_vectors(base, tvs, scales, "task_arithmetic_merge");
    return detail::build_per_tensor(base, 1, [&](const std::string& name) {
        auto deltas = detail::delta_spans(tvs, name);
        return kernels::task_arithmetic(base.at(name).values(), deltas, scales);
    });
}

/// DARE drop-and-rescale. Output is independent of `threads` because every draw is keyed by position.
inline TaskVectorSet dare_sparsify(const TaskVectorSet& tv, double drop_p, std::uint64_t seed, unsigned threads = 1) {
    if (!(drop_p >= 0.0 && drop_p < 1.0)) throw Error("dare_sparsify: drop_p must lie in [0, 1)");
    return {tv.base_id, detail::build_per_tensor(tv.deltas, threads, [&](const std::string& name) {
                return kernels::dare(tv.deltas.at(name).values(), drop_p, seed, name);
            })};
}

inline TensorStore ties_merge(const TensorStore& base, std::span<const TaskVectorSet> tvs,
                              std::span<const double> scales, double trim_frac) {
    if (!(trim_frac > 0.0 && trim_frac <= 1.0)) throw Error("ties_merge: trim_frac must lie in (0, 1]");
    detail::require_task_vectors(base, tvs, scales, "ties_merge");
    std::vector<double> fracs(tvs.size(), trim_frac);
    return detail::build_per_tensor(base, 1, [&](const std::string& name) {
        auto deltas = detail::delta_spans(tvs, name);
        return kernels::ties(base.at(name).values(), deltas, scales, fracs);
    });
}

// ---------------------------------------------------------------------------------------------
// Recipes: grouped coefficients applied per tensor.

enum class MergeMethod { linear, slerp, task_arithmetic, ties, dare_ta };

inline const char* to_string(MergeMethod m) {
    switch (m) {
    case MergeMethod::linear: return "linear";
    case MergeMethod::slerp: return "slerp";
    case MergeMethod::task_arithmetic: return "task_arithmetic";
    case MergeMethod::ties: return "ties";
    case MergeMethod::dare_ta: return "dare_ta";
    }
    return "linear";
}

inline MergeMethod parse_merge_method(const std::string& s) {
    if (s == "linear") return MergeMethod::linear;
    if (s == "slerp") return MergeMethod::slerp;
    if (s == "task_arithmetic") return MergeMethod::task_arithmetic;
    if (s == "ties") return MergeMethod::ties;
    if (s == "dare_ta") return MergeMethod::dare_ta;
    throw UsageError("unknown merge method '" + s + "'");
}

inline bool needs_base(MergeMethod m) {
    return m == MergeMethod::task_arithmetic || m == MergeMethod::ties || m == MergeMethod::dare_ta;
}

/// Methods whose second coefficient block (per-model density) can be searched.
inline bool has_density(MergeMethod m) { return m == MergeMethod::ties || m == MergeMethod::dare_ta; }

/// Searched densities are clamped into [kMinDensity, 1] so a zero never disables a model entirely.
inline constexpr double kMinDensity = 0.01;

/// Number of coefficient columns: one per group of `group_size` adjacent layers plus one shared column.
inline std::size_t recipe_columns(int num_layers, int group_size) {
    if (group_size <= 0 || num_layers <= 0 || num_layers % group_size != 0)
        throw Error("group size " + std::to_string(group_size) + " must divide num_layers " +
                    std::to_string(num_layers));
    return static_cast<std::size_t>(num_layers / group_size) + 1;
}

/// k * (num_layers / n + 1)
inline std::size_t coefficient_count(std::size_t k, int num_layers, int group_size) {
    return k * recipe_columns(num_layers, group_size);
}

struct MergeRecipe {
    MergeMethod method = MergeMethod::linear;
    int group_size = 1;
    std::vector<std::vector<double>> coefficients; ///< k rows x (num_layers/group_size + 1) columns
    std::vector<std::vector<double>> densities;    ///< empty, or same shape: TIES keep fraction / DARE 1 - drop_p
    double dare_drop_p = 0.5;
    double ties_trim_frac = 0.2;
    std::uint64_t seed = 0;

    std::size_t num_models() const { return coefficients.size(); }

    /// Same coefficients in every column.
    static MergeRecipe uniform(MergeMethod method, int num_layers, int group_size, std::span<const double> per_model) {
        MergeRecipe r;
        r.method = method;
        r.group_size = group_size;
        auto cols = recipe_columns(num_layers, group_size);
        for (double c : per_model) r.coefficients.emplace_back(cols, c);
        return r;
    }

    void validate(int num_layers) const {
        auto cols = recipe_columns(num_layers, group_size);
        if (coefficients.empty()) throw Error("merge recipe has no coefficient rows");
        for (const auto& row : coefficients) {
            if (row.size() != cols)
                throw Error("coefficient shape mismatch: expected " + std::to_string(coefficients.size()) + " x " +
                            std::to_string(cols) + " (k * (num_layers/n + 1))");
            detail::require_finite(row, "merge recipe");
        }
        if (!densities.empty()) {
            if (densities.size() != coefficients.size()) throw Error("density rows do not match coefficient rows");
            for (const auto& row : densities) {
                if (row.size() != cols) throw Error("density shape mismatch");
                detail::require_finite(row, "merge recipe densities");
            }
        }
        if (!(dare_drop_p >= 0.0 && dare_drop_p < 1.0)) throw Error("dare_drop_p must lie in [0, 1)");
        if (!(ties_trim_frac > 0.0 && ties_trim_frac <= 1.0)) throw Error("ties_trim_frac must lie in (0, 1]");
    }

    bool operator==(const MergeRecipe&) const = default;
};

/// Column of the coefficient matrix that drives a tensor.
inline std::size_t recipe_column(const TensorRole& role, int num_layers, int group_size) {
    auto cols = recipe_columns(num_layers, group_size);
    if (role.in_layer()) return static_cast<std::size_t>(role.layer / group_size);
    return cols - 1;
}

/// Applies a recipe over a zoo. Layer tensors use column floor(layer / n); everything else uses the last column.
/// SLERP takes t = c1 / (c0 + c1) from the two models' column entries (t = 0.5 when both are zero).
inline TensorStore apply_recipe(const StoreRefs& zoo, const ArchDescriptor& desc, const TensorStore* base,
                                const MergeRecipe& recipe, unsigned threads = 1) {
    recipe.validate(desc.num_layers);
    const std::size_t k = zoo.size();
    if (recipe.num_models() != k)
        throw Error("coefficient shape mismatch: recipe has " + std::to_string(recipe.num_models()) + " rows for " +
                    std::to_string(k) + " models");
    if (needs_base(recipe.method) && !base)
        throw Error(std::string("merge method ") + to_string(recipe.method) + " needs a base model");
    if (recipe.method == MergeMethod::slerp && k != 2) throw Error("slerp recipes need exactly two models (k = 2)");
    detail::require_mergeable(zoo, needs_base(recipe.method) ? base : nullptr, "apply_recipe");
    for (const auto& [name, _] : *zoo.front()) desc.role_of(name);

    auto density = [&](std::size_t i, std::size_t col) {
        return std::clamp(recipe.densities[i][col], kMinDensity, 1.0);
    };

    return detail::build_per_tensor(*zoo.front(), threads, [&](const std::string& name) -> std::vector<float> {
        const auto col = recipe_column(desc.role_of(name), desc.num_layers, recipe.group_size);
        std::vector<double> c(k);
        for (std::size_t i = 0; i < k; ++i) c[i] = recipe.coefficients[i][col];
        auto inputs = detail::spans_of(zoo, name);

        switch (recipe.method) {
        case MergeMethod::linear: return kernels::linear(inputs, c);
        case MergeMethod::slerp: {
            if (c[0] < 0.0 || c[1] < 0.0) throw Error("slerp coefficients must be non-negative");
            double sum = c[0] + c[1];
            double t = sum > 0.0 ? c[1] / sum : 0.5;
            return kernels::slerp(inputs[0], inputs[1], t);
        }
        default: break;
        }

        auto base_values = base->at(name).values();
        std::vector<std::vector<float>> deltas;
        deltas.reserve(k);
        for (std::size_t i = 0; i < k; ++i) deltas.push_back(kernels::subtract(inputs[i], base_values));

        if (recipe.method == MergeMethod::dare_ta) {
            for (std::size_t i = 0; i < k; ++i) {
                double p = recipe.densities.empty() ? recipe.dare_drop_p : 1.0 - density(i, col);
                deltas[i] = kernels::dare(deltas[i], p, detail::splitmix64(recipe.seed + i), name);
            }
        }
        std::vector<std::span<const float>> delta_spans(deltas.begin(), deltas.end());
        if (recipe.method == MergeMethod::ties) {
            std::vector<double> fracs(k);
            for (std::size_t i = 0; i < k; ++i)
                fracs[i] = recipe.densities.empty() ? recipe.ties_trim_frac : density(i, col);
            return kernels::ties(base_values, delta_spans, c, fracs);
        }
        return kernels::task_arithmetic(base_values, delta_spans, c);
    });
}

inline TensorStore apply_recipe(const std::vector<TensorStore>& zoo, const ArchDescriptor& desc,
                                const TensorStore* base, const MergeRecipe& recipe) {
    return apply_recipe(refs_of(zoo), desc, base, recipe);
}

inline nlohmann::json to_json(const MergeRecipe& r) {
    nlohmann::json j = {{"method", to_string(r.method)},    {"group_size", r.group_size},
                        {"coefficients", r.coefficients},   {"dare_drop_p", r.dare_drop_p},
                        {"ties_trim_frac", r.ties_trim_frac}, {"seed", r.seed}};
    if (!r.densities.empty()) j["densities"] = r.densities;
    return j;
}

inline MergeRecipe recipe_from_json(const nlohmann::json& j) {
    MergeRecipe r;
    try {
        r.method = parse_merge_method(j.at("method").get<std::string>());
        r.group_size = j.at("group_size").get<int>();
        r.coefficients = j.at("coefficients").get<std::vector<std::vector<double>>>();
        if (j.contains("densities")) r.densities = j.at("densities").get<std::vector<std::vector<double>>>();
        r.dare_drop_p = j.value("dare_drop_p", 0.5);
        r.ties_trim_frac = j.value("ties_trim_frac", 0.2);
        r.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed recipe JSON: ") + e.what());
    }
    return r;
}

} // namespace glueforge
