#pragma once

// Choosing which models to merge and with which coefficients: greedy heuristics driven by a
// proxy fitness, CMA-ES over grouped recipe coefficients, and a warm-started refinement.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "arch.hpp"
#include "cmaes.hpp"
#include "error.hpp"
#include "fitness.hpp"
#include "merge.hpp"
#include "similarity.hpp"
#include "tensor.hpp"

namespace glueforge {

/// Models under consideration. `stores[i]` belongs to `ids[i]`; all share `desc`.
struct ModelZoo {
    std::vector<std::string> ids;
    StoreRefs stores;
    ArchDescriptor desc;

    std::size_t size() const { return stores.size(); }

    void validate() const {
        if (stores.empty()) throw Error("empty zoo");
        if (ids.size() != stores.size()) throw Error("zoo ids and stores differ in length");
        for (const auto* s : stores) require_same_layout(*stores.front(), *s, "zoo");
    }
};

/// One fitness evaluation (or, for heuristics, one replayed known value).
struct TrialRecord {
    int index = 0;
    std::string description;
    double fitness = 0.0;
    bool accepted = false;
    std::vector<double> params; ///< searched coordinates (CMA-ES) or per-model coefficients (heuristics)
};

/// One greedy round: candidate considered, chosen coefficient (0 = rejected), resulting fitness.
struct RoundRecord {
    std::string candidate;
    double coefficient = 0.0;
    double fitness = 0.0;
    bool accepted = false;
};

struct SearchResult {
    std::string strategy;
    std::vector<std::string> selected_ids; ///< recipe rows correspond to these, in order
    MergeRecipe recipe;
    TensorStore merged;
    double fitness = 0.0;
    std::vector<TrialRecord> trace;
    std::vector<RoundRecord> rounds;
    int trials_used = 0;
};

inline std::vector<double> default_grid() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}; }

namespace detail {

inline std::string fmt_coeff(double c) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", c);
    return buf;
}

inline void require_grid(const std::vector<double>& grid) {
    if (grid.empty()) throw Error("coefficient grid is empty");
    for (double c : grid)
        if (!(c > 0.0 && c < 1.0)) throw Error("coefficient grid values must lie in (0, 1)");
}

struct GridOutcome {
    double best_c = 0.0;
    double best_fitness = 0.0;
};

/// Scans the grid against a known baseline (c = 0). Strictly better values win, so ties go to the smaller c.
template <class Eval>
GridOutcome scan_grid(double baseline, const std::vector<double>& grid, Eval&& eval_at) {
    require_grid(grid);
    std::vector<double> sorted = grid;
    std::sort(sorted.begin(), sorted.end());
    GridOutcome out{0.0, baseline};
    for (double c : sorted) {
        double f = eval_at(c);
        if (f > out.best_fitness) {
            out.best_fitness = f;
            out.best_c = c;
        }
    }
    return out;
}

/// Shared state of the greedy strategies: the selection and its flat per-model coefficients.
class GreedyRun {
public:
    GreedyRun(const ModelZoo& zoo, const FitnessEvaluator& ev, std::string strategy) : zoo_(zoo), ev_(ev) {
        zoo.validate();
        result_.strategy = std::move(strategy);
        // Initial ranking: fitness of every single model, best first; ties keep zoo order.
        std::vector<double> single(zoo.size());
        for (std::size_t i = 0; i < zoo.size(); ++i) single[i] = evaluate(*zoo.stores[i], "single " + zoo.ids[i], {});
        order_.resize(zoo.size());
        std::iota(order_.begin(), order_.end(), 0);
        std::stable_sort(order_.begin(), order_.end(), [&](auto a, auto b) { return single[a] > single[b]; });
        selected_ = {order_.front()};
        coeffs_ = {1.0};
        fitness_ = single[order_.front()];
        result_.trace[order_.front()].accepted = true;
    }

    const std::vector<std::size_t>& order() const { return order_; }
    const std::vector<std::size_t>& selected() const { return selected_; }
    const std::vector<double>& coeffs() const { return coeffs_; }
    double fitness() const { return fitness_; }
    const ModelZoo& zoo() const { return zoo_; }

    TensorStore materialize(const std::vector<std::size_t>& members, const std::vector<double>& coeffs) const {
        StoreRefs refs;
        for (auto i : members) refs.push_back(zoo_.stores[i]);
        return apply_recipe(refs, zoo_.desc, nullptr, flat_recipe(coeffs));
    }

    TensorStore current_model() const { return materialize(selected_, coeffs_); }

    double evaluate(const TensorStore& s, std::string what, std::vector<double> params) {
        double f = ev_(s, zoo_.desc);
        if (!std::isfinite(f)) throw Error("fitness evaluator returned a non-finite value for " + what);
        result_.trace.push_back({static_cast<int>(result_.trace.size()), std::move(what), f, false, std::move(params)});
        return f;
    }

    /// Pairwise blend with the running model: existing weights scaled by (1 - c), candidate gets c.
    GridOutcome grid_round(std::size_t cand, const std::vector<double>& grid) {
        auto members = selected_;
        members.push_back(cand);
        auto first = result_.trace.size();
        auto out = scan_grid(fitness_, grid, [&](double c) {
            auto co = blended(c);
            return evaluate(materialize(members, co), "blend " + zoo_.ids[cand] + " c=" + fmt_coeff(c), co);
        });
        if (out.best_c > 0.0) {
            for (auto i = first; i < result_.trace.size(); ++i)
                if (result_.trace[i].params.back() == out.best_c) result_.trace[i].accepted = true;
            coeffs_ = blended(out.best_c);
            selected_ = members;
            fitness_ = out.best_fitness;
        }
        result_.rounds.push_back({zoo_.ids[cand], out.best_c, out.best_fitness, out.best_c > 0.0});
        return out;
    }

    /// Equal-weight average of selection + candidate, kept when fitness does not drop.
    bool average_round(std::size_t cand) {
        auto members = selected_;
        members.push_back(cand);
        std::vector<double> co(members.size(), 1.0 / static_cast<double>(members.size()));
        double f = evaluate(materialize(members, co), "average +" + zoo_.ids[cand], co);
        bool accept = f >= fitness_;
        if (accept) {
            result_.trace.back().accepted = true;
            selected_ = members;
            coeffs_ = co;
            fitness_ = f;
        }
        result_.rounds.push_back({zoo_.ids[cand], accept ? co.back() : 0.0, f, accept});
        return accept;
    }

    SearchResult finish() {
        result_.selected_ids.clear();
        for (auto i : selected_) result_.selected_ids.push_back(zoo_.ids[i]);
        result_.recipe = flat_recipe(coeffs_);
        result_.merged = current_model();
        result_.fitness = fitness_;
        result_.trials_used = static_cast<int>(result_.trace.size());
        return std::move(result_);
    }

    MergeRecipe flat_recipe(const std::vector<double>& coeffs) const {
        return MergeRecipe::uniform(MergeMethod::linear, zoo_.desc.num_layers, zoo_.desc.num_layers, coeffs);
    }

private:
    std::vector<double> blended(double c) const {
        std::vector<double> co;
        for (double a : coeffs_) co.push_back((1.0 - c) * a);
        co.push_back(c);
        return co;
    }

    const ModelZoo& zoo_;
    const FitnessEvaluator& ev_;
    SearchResult result_;
    std::vector<std::size_t> order_, selected_;
    std::vector<double> coeffs_;
    double fitness_ = 0.0;
};

} // namespace detail

/// Best weight c for the candidate in (1 - c) * current + c * candidate, with c = 0 (keep current) as baseline.
inline std::pair<double, double> grid_coefficient_search(const TensorStore& current, const TensorStore& candidate,
                                                         const ArchDescriptor& desc, const std::vector<double>& grid,
                                                         const FitnessEvaluator& ev) {
    require_same_layout(current, candidate, "grid_coefficient_search");
    detail::require_grid(grid);
    double baseline = ev(current, desc);
    StoreRefs refs = {&current, &candidate};
    auto out = detail::scan_grid(baseline, grid, [&](double c) {
        std::vector<double> co = {1.0 - c, c};
        return ev(linear_merge(refs, co), desc);
    });
    return {out.best_c, out.best_fitness};
}

inline SearchResult heuristic_average(const ModelZoo& zoo, const FitnessEvaluator& ev) {
    detail::GreedyRun run(zoo, ev, "avg");
    for (std::size_t r = 1; r < run.order().size(); ++r) run.average_round(run.order()[r]);
    return run.finish();
}

inline SearchResult heuristic_coefficient(const ModelZoo& zoo, const FitnessEvaluator& ev,
                                          const std::vector<double>& grid = default_grid()) {
    detail::require_grid(grid);
    detail::GreedyRun run(zoo, ev, "coef");
    for (std::size_t r = 1; r < run.order().size(); ++r) run.grid_round(run.order()[r], grid);
    return run.finish();
}

enum class SimilarityOrder { highest, lowest };

/// Each round visits the remaining model most (or least) similar to the running merge; every visited
/// model leaves the pool whether or not it was accepted.
inline SearchResult heuristic_similarity(const ModelZoo& zoo, const FitnessEvaluator& ev, SimilarityOrder order,
                                         const std::vector<double>& grid = default_grid()) {
    detail::require_grid(grid);
    detail::GreedyRun run(zoo, ev, order == SimilarityOrder::highest ? "sim-high" : "sim-low");
    std::vector<std::size_t> pool(run.order().begin() + 1, run.order().end());
    std::sort(pool.begin(), pool.end());
    while (!pool.empty()) {
        auto current = run.current_model();
        std::size_t pick = 0;
        double best = 0.0;
        for (std::size_t p = 0; p < pool.size(); ++p) {
            double s = model_cosine(current, *zoo.stores[pool[p]]);
            bool better = order == SimilarityOrder::highest ? s > best : s < best;
            if (p == 0 || better) {
                best = s;
                pick = p;
            }
        }
        auto cand = pool[pick];
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        run.grid_round(cand, grid);
    }
    return run.finish();
}

// ---------------------------------------------------------------------------------------------
// Evolutionary search over grouped recipe coefficients.

struct EvolutionOptions {
    MergeMethod method = MergeMethod::linear;
    int group_size = 0;          ///< 0 = num_layers (one group)
    int budget = 200;
    std::uint64_t seed = 0;
    bool search_density = true;  ///< ties / dare_ta: also search one density per coefficient
    double sigma0 = 0.3;
    unsigned threads = 1;
    std::optional<std::vector<double>> init; ///< starting mean, same layout as the searched vector
    std::vector<double> lower, upper;        ///< per-coordinate box, default [0, 1]
    MergeRecipe defaults;                    ///< dare_drop_p / ties_trim_frac when density is not searched
};

/// Length of the searched vector: k * (L/n + 1), doubled when densities are searched.
inline std::size_t search_dimension(std::size_t k, int num_layers, int group_size, MergeMethod method,
                                    bool search_density) {
    auto d = coefficient_count(k, num_layers, group_size);
    return (has_density(method) && search_density) ? 2 * d : d;
}

/// Reshapes a searched vector into a recipe: model-major coefficients, then densities.
inline MergeRecipe recipe_from_vector(const std::vector<double>& x, std::size_t k, int num_layers,
                                      const EvolutionOptions& opt) {
    const int n = opt.group_size > 0 ? opt.group_size : num_layers;
    const auto cols = recipe_columns(num_layers, n);
    const bool dens = has_density(opt.method) && opt.search_density;
    if (x.size() != search_dimension(k, num_layers, n, opt.method, opt.search_density))
        throw Error("dimension mismatch: searched vector has " + std::to_string(x.size()) + " entries, expected " +
                    std::to_string(search_dimension(k, num_layers, n, opt.method, opt.search_density)));
    MergeRecipe r = opt.defaults;
    r.method = opt.method;
    r.group_size = n;
    r.seed = opt.seed;
    r.coefficients.assign(k, std::vector<double>(cols));
    if (dens) r.densities.assign(k, std::vector<double>(cols));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t c = 0; c < cols; ++c) {
            r.coefficients[i][c] = x[i * cols + c];
            if (dens) r.densities[i][c] = x[k * cols + i * cols + c];
        }
    return r;
}

inline std::vector<double> vector_from_recipe(const MergeRecipe& r) {
    std::vector<double> x;
    for (const auto& row : r.coefficients) x.insert(x.end(), row.begin(), row.end());
    for (const auto& row : r.densities) x.insert(x.end(), row.begin(), row.end());
    return x;
}

inline SearchResult evolutionary_merge(const ModelZoo& zoo, const TensorStore* base, const FitnessEvaluator& ev,
                                       const EvolutionOptions& opt) {
    zoo.validate();
    const int L = zoo.desc.num_layers;
    const int n = opt.group_size > 0 ? opt.group_size : L;
    recipe_columns(L, n);
    if (needs_base(opt.method) && !base) throw Error(std::string("method ") + to_string(opt.method) + " needs a base model");
    if (opt.method == MergeMethod::slerp && zoo.size() != 2) throw Error("slerp search needs exactly two models");
    const std::size_t dim = search_dimension(zoo.size(), L, n, opt.method, opt.search_density);

    CmaesOptions co;
    co.dim = dim;
    co.budget = opt.budget;
    co.seed = opt.seed;
    co.sigma0 = opt.sigma0;
    co.threads = ev.concurrent_safe ? opt.threads : 1;
    co.init = opt.init;
    co.lower = opt.lower;
    co.upper = opt.upper;
    if (co.init && co.init->size() != dim) throw Error("dimension mismatch: init has " + std::to_string(co.init->size()) +
                                                       " entries, expected " + std::to_string(dim));

    EvolutionOptions shaped = opt;
    shaped.group_size = n;
    auto objective = [&](const std::vector<double>& x) {
        auto recipe = recipe_from_vector(x, zoo.size(), L, shaped);
        return -ev(apply_recipe(zoo.stores, zoo.desc, base, recipe), zoo.desc);
    };
    auto cma = cmaes_minimize(objective, co);

    SearchResult res;
    res.strategy = "evo";
    res.selected_ids = zoo.ids;
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& e : cma.trace) {
        TrialRecord t{e.index, "generation " + std::to_string(e.generation), -e.value, false, e.x};
        if (t.fitness > best) {
            best = t.fitness;
            t.accepted = true;
        }
        res.trace.push_back(std::move(t));
    }
    res.recipe = recipe_from_vector(cma.x_best, zoo.size(), L, shaped);
    res.merged = apply_recipe(zoo.stores, zoo.desc, base, res.recipe);
    res.fitness = -cma.f_best;
    res.trials_used = cma.evaluations;
    return res;
}

/// CMA-ES around a heuristic solution: each coefficient stays within [max(0, c - delta), min(1, c + delta)].
/// Returns the refinement only when it strictly improves on the input.
inline SearchResult warm_start_refine(const SearchResult& start, const ModelZoo& selected, const FitnessEvaluator& ev,
                                      double delta = 0.1, int budget = 100, std::uint64_t seed = 0,
                                      unsigned threads = 1) {
    if (start.recipe.method != MergeMethod::linear) throw Error("warm start needs a linear-method recipe");
    if (!(delta >= 0.0)) throw Error("warm start delta must be non-negative");
    if (selected.ids != start.selected_ids) throw Error("warm start zoo must hold exactly the selected models, in order");
    selected.validate();
    if (delta == 0.0) return start;

    EvolutionOptions opt;
    opt.method = MergeMethod::linear;
    opt.group_size = start.recipe.group_size;
    opt.budget = budget;
    opt.seed = seed;
    opt.threads = threads;
    opt.sigma0 = delta;
    auto x0 = vector_from_recipe(start.recipe);
    opt.init = x0;
    for (double c : x0) {
        opt.lower.push_back(std::max(0.0, c - delta));
        opt.upper.push_back(std::min(1.0, c + delta));
    }
    auto refined = evolutionary_merge(selected, nullptr, ev, opt);
    refined.strategy = "warm";
    refined.selected_ids = start.selected_ids;
    if (refined.fitness > start.fitness) return refined;
    SearchResult kept = start;
    kept.trace.insert(kept.trace.end(), refined.trace.begin(), refined.trace.end());
    kept.trials_used += refined.trials_used;
    return kept;
}

// ---------------------------------------------------------------------------------------------

inline nlohmann::json to_json(const SearchResult& r) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& t : r.trace)
        trace.push_back({{"index", t.index}, {"description", t.description}, {"fitness", t.fitness},
                         {"accepted", t.accepted}, {"params", t.params}});
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& x : r.rounds)
        rounds.push_back({{"candidate", x.candidate}, {"coefficient", x.coefficient}, {"fitness", x.fitness},
                          {"accepted", x.accepted}});
    return {{"strategy", r.strategy}, {"selected_ids", r.selected_ids}, {"recipe", to_json(r.recipe)},
            {"fitness", r.fitness},   {"trials_used", r.trials_used},   {"trace", trace},
            {"rounds", rounds}};
}

/// Everything except the merged weights, which live in their own checkpoint.
inline SearchResult search_result_from_json(const nlohmann::json& j) {
    SearchResult r;
    try {
        r.strategy = j.value("strategy", "");
        r.selected_ids = j.at("selected_ids").get<std::vector<std::string>>();
        r.recipe = recipe_from_json(j.at("recipe"));
        r.fitness = j.at("fitness").get<double>();
        r.trials_used = j.value("trials_used", 0);
        for (const auto& t : j.value("trace", nlohmann::json::array()))
            r.trace.push_back({t.at("index").get<int>(), t.at("description").get<std::string>(),
                               t.at("fitness").get<double>(), t.at("accepted").get<bool>(),
                               t.value("params", std::vector<double>{})});
        for (const auto& x : j.value("rounds", nlohmann::json::array()))
            r.rounds.push_back({x.at("candidate").get<std::string>(), x.at("coefficient").get<double>(),
                                x.at("fitness").get<double>(), x.at("accepted").get<bool>()});
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed search result JSON: ") + e.what());
    }
    return r;
}

} // namespace glueforge
