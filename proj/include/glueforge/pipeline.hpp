#pragma once

// End-to-end recipe: cluster the zoo, merge inside each cluster, pick representatives, and join
// the representatives in a routed mixture.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "error.hpp"
#include "fitness.hpp"
#include "merge.hpp"
#include "mixture.hpp"
#include "router.hpp"
#include "runtime.hpp"
#include "search.hpp"
#include "similarity.hpp"

namespace glueforge {

inline constexpr const char* kToolVersion = "0.1.0";

/// Deterministic run manifest: no timestamps or host details, so reruns compare byte-for-byte.
inline void write_run_manifest(const fs::path& dir, const std::string& command, const nlohmann::json& config,
                               std::uint64_t seed) {
    detail::write_json_file(dir / "manifest.json",
                            {{"tool", "glueforge"}, {"version", kToolVersion}, {"command", command},
                             {"seed", seed}, {"config", config}});
}

// ---------------------------------------------------------------------------------------------
// Zoo and evaluator plumbing shared with the CLI

struct NamedCheckpoint {
    std::string id;
    fs::path path;
    Checkpoint ckpt;
};

inline std::string id_from_path(const fs::path& p) {
    auto norm = p.lexically_normal();
    auto name = norm.filename().string();
    if (name.empty()) name = norm.parent_path().filename().string();
    return name;
}

inline void require_unique_ids(const std::vector<std::string>& ids) {
    std::vector<std::string> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    auto dup = std::adjacent_find(sorted.begin(), sorted.end());
    if (dup != sorted.end()) throw Error("duplicate model id '" + *dup + "'");
}

inline TokenBatch load_corpus(const fs::path& path) { return batch_from_json(detail::read_json_file(path)); }

using PromptMap = std::map<std::string, std::vector<std::vector<int>>>;

inline PromptMap prompts_from_json(const nlohmann::json& j) {
    try {
        return j.get<PromptMap>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("prompts must map model id to a list of token-id lists: ") + e.what());
    }
}

/// "toy-ppl" needs a corpus; "analytic:<dir>" scores -(mean squared distance) to the checkpoint in <dir>.
inline FitnessEvaluator resolve_evaluator(const std::string& spec, const std::optional<TokenBatch>& corpus) {
    if (spec == "toy-ppl") {
        if (!corpus) throw Error("evaluator toy-ppl needs a corpus");
        return perplexity_fitness(*corpus);
    }
    const std::string prefix = "analytic:";
    if (spec.rfind(prefix, 0) == 0) {
        auto target = std::make_shared<Checkpoint>(load_checkpoint(spec.substr(prefix.size())));
        FitnessEvaluator ev;
        ev.id = spec;
        ev.concurrent_safe = true;
        ev.evaluate = [target](const TensorStore& s, const ArchDescriptor&) {
            require_same_layout(target->store, s, "analytic evaluator");
            double sum = 0.0;
            std::size_t n = 0;
            for (const auto& [name, t] : target->store) {
                const auto& u = s.at(name);
                for (std::size_t i = 0; i < t.numel(); ++i) {
                    double d = double(u.data[i]) - double(t.data[i]);
                    sum += d * d;
                }
                n += t.numel();
            }
            return n ? -sum / static_cast<double>(n) : 0.0;
        };
        return ev;
    }
    throw Error("unknown evaluator '" + spec + "' (expected toy-ppl or analytic:<dir>)");
}

enum class SearchStrategy { avg, coef, sim_high, sim_low, evo, warm };

inline const char* to_string(SearchStrategy s) {
    switch (s) {
    case SearchStrategy::avg: return "avg";
    case SearchStrategy::coef: return "coef";
    case SearchStrategy::sim_high: return "sim-high";
    case SearchStrategy::sim_low: return "sim-low";
    case SearchStrategy::evo: return "evo";
    case SearchStrategy::warm: return "warm";
    }
    return "coef";
}

inline SearchStrategy parse_strategy(const std::string& s) {
    for (auto k : {SearchStrategy::avg, SearchStrategy::coef, SearchStrategy::sim_high, SearchStrategy::sim_low,
                   SearchStrategy::evo, SearchStrategy::warm})
        if (s == to_string(k)) return k;
    throw Error("unknown strategy '" + s + "' (expected avg, coef, sim-high, sim-low, evo or warm)");
}

struct StrategyOptions {
    SearchStrategy strategy = SearchStrategy::coef;
    int budget = 200;
    int group_size = 0;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    double warm_delta = 0.1;
    int warm_budget = 100;
    std::vector<double> grid = default_grid();
    MergeMethod evo_method = MergeMethod::linear;
};

/// One dispatch point for every selection strategy. `base` is only read by evo with a task-vector method.
inline SearchResult run_strategy(const ModelZoo& zoo, const FitnessEvaluator& ev, const StrategyOptions& o,
                                 const TensorStore* base = nullptr) {
    switch (o.strategy) {
    case SearchStrategy::avg: return heuristic_average(zoo, ev);
    case SearchStrategy::coef: return heuristic_coefficient(zoo, ev, o.grid);
    case SearchStrategy::sim_high: return heuristic_similarity(zoo, ev, SimilarityOrder::highest, o.grid);
    case SearchStrategy::sim_low: return heuristic_similarity(zoo, ev, SimilarityOrder::lowest, o.grid);
    case SearchStrategy::evo: {
        EvolutionOptions eo;
        eo.budget = o.budget;
        eo.group_size = o.group_size;
        eo.seed = o.seed;
        eo.threads = o.threads;
        eo.method = o.evo_method;
        return evolutionary_merge(zoo, needs_base(o.evo_method) ? base : nullptr, ev, eo);
    }
    case SearchStrategy::warm: {
        auto start = heuristic_coefficient(zoo, ev, o.grid);
        ModelZoo sel;
        sel.desc = zoo.desc;
        for (const auto& id : start.selected_ids) {
            auto i = static_cast<std::size_t>(std::find(zoo.ids.begin(), zoo.ids.end(), id) - zoo.ids.begin());
            sel.ids.push_back(id);
            sel.stores.push_back(zoo.stores[i]);
        }
        return warm_start_refine(start, sel, ev, o.warm_delta, o.warm_budget, o.seed, o.threads);
    }
    }
    throw Error("unknown strategy");
}

// ---------------------------------------------------------------------------------------------
// Pipeline

struct GlueConfig {
    std::vector<fs::path> zoo;
    std::vector<std::string> ids; ///< empty = directory names
    double threshold = 0.95;
    StrategyOptions search;
    std::string evaluator = "toy-ppl";
    std::optional<TokenBatch> corpus;
    MixtureLevel final_level = MixtureLevel::model;
    int top_k = 1;
    PromptMap prompts;
    fs::path out;

    void validate() const {
        if (zoo.empty()) throw Error("glue config: zoo is empty");
        if (!ids.empty() && ids.size() != zoo.size()) throw Error("glue config: ids and zoo differ in length");
        if (!(threshold > 0.0 && threshold <= 1.0)) throw Error("glue config: threshold must lie in (0, 1]");
        if (final_level == MixtureLevel::block) throw Error("glue config: final mixture is model or ffn level");
        if (top_k < 1) throw Error("glue config: top_k must be positive");
        if (out.empty()) throw Error("glue config: output directory missing");
    }
};

/// Parses glue.json. Relative paths resolve against `base_dir`.
inline GlueConfig glue_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
    GlueConfig c;
    try {
        for (const auto& z : j.at("zoo")) {
            if (z.is_string()) {
                c.zoo.push_back(resolve(z.get<std::string>()));
            } else {
                c.zoo.push_back(resolve(z.at("path").get<std::string>()));
                c.ids.push_back(z.at("id").get<std::string>());
            }
        }
        if (!c.ids.empty() && c.ids.size() != c.zoo.size()) throw Error("glue config: give an id for every zoo entry or none");
        c.threshold = j.value("threshold", 0.95);
        c.search.strategy = parse_strategy(j.value("strategy", std::string("coef")));
        c.search.budget = j.value("budget", 200);
        c.search.group_size = j.value("group_size", 0);
        c.search.seed = j.value("seed", std::uint64_t{0});
        c.search.threads = j.value("threads", 1u);
        c.search.warm_delta = j.value("warm_delta", 0.1);
        c.search.warm_budget = j.value("warm_budget", 100);
        if (j.contains("grid")) c.search.grid = j.at("grid").get<std::vector<double>>();
        c.evaluator = j.value("evaluator", std::string("toy-ppl"));
        if (c.evaluator.rfind("analytic:", 0) == 0)
            c.evaluator = "analytic:" + resolve(c.evaluator.substr(9)).string();
        if (j.contains("corpus")) {
            const auto& cj = j.at("corpus");
            c.corpus = cj.is_string() ? load_corpus(resolve(cj.get<std::string>())) : batch_from_json(cj);
        }
        if (j.contains("mixture")) {
            const auto& m = j.at("mixture");
            c.final_level = parse_mixture_level(m.value("level", std::string("model")));
            c.top_k = m.value("top_k", 1);
            if (m.contains("prompts")) {
                const auto& pj = m.at("prompts");
                c.prompts = pj.is_string() ? prompts_from_json(detail::read_json_file(resolve(pj.get<std::string>())))
                                           : prompts_from_json(pj);
            }
        }
        if (j.contains("out")) c.out = resolve(j.at("out").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed glue config: ") + e.what());
    }
    return c;
}

struct ClusterOutcome {
    std::vector<std::string> members;
    std::optional<SearchResult> search;  ///< multi-member clusters only
    std::string best_single_id;
    double best_single_fitness = 0.0;
    bool merged_representative = false;
    std::string representative_id;
    double representative_fitness = 0.0;
    std::string representative_path;     ///< relative to the output directory
};

struct GlueReport {
    std::vector<std::string> ids;
    std::vector<std::vector<std::size_t>> compat_groups;
    ClusterReport clusters; ///< indices into ids
    std::vector<ClusterOutcome> outcomes;
    std::optional<MixtureSpec> mixture;
    std::optional<double> mixture_fitness;
    std::string final_artifact; ///< relative path of the final checkpoint or mixture bundle
    std::string final_kind;     ///< "checkpoint" or "mixture"
};

inline nlohmann::json to_json(const GlueReport& r) {
    nlohmann::json clusters = nlohmann::json::array();
    for (std::size_t c = 0; c < r.outcomes.size(); ++c) {
        const auto& o = r.outcomes[c];
        nlohmann::json cj = {{"index", c},
                             {"members", o.members},
                             {"min_intra_sim", r.clusters.min_intra_sim[c]},
                             {"best_single", {{"id", o.best_single_id}, {"fitness", o.best_single_fitness}}},
                             {"representative",
                              {{"id", o.representative_id},
                               {"merged", o.merged_representative},
                               {"fitness", o.representative_fitness},
                               {"path", o.representative_path}}}};
        if (o.search) {
            cj["search"] = {{"strategy", o.search->strategy},
                            {"selected_ids", o.search->selected_ids},
                            {"fitness", o.search->fitness},
                            {"trials_used", o.search->trials_used},
                            {"recipe", to_json(o.search->recipe)},
                            {"result", "clusters/" + std::to_string(c) + "/result.json"}};
        } else {
            cj["search"] = nullptr;
        }
        clusters.push_back(cj);
    }
    nlohmann::json j = {{"ids", r.ids},
                        {"compat_groups", r.compat_groups},
                        {"threshold", r.clusters.threshold},
                        {"clusters", clusters},
                        {"final", {{"kind", r.final_kind}, {"path", r.final_artifact}}}};
    j["mixture"] = r.mixture ? to_json(*r.mixture) : nlohmann::json(nullptr);
    j["mixture_fitness"] = r.mixture_fitness ? nlohmann::json(*r.mixture_fitness) : nlohmann::json(nullptr);
    return j;
}

namespace detail {

/// Runs `fn`, prefixing any failure with the stage (and cluster) it came from.
template <class Fn>
auto staged(const std::string& stage, Fn&& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        throw Error("glue stage '" + stage + "' failed: " + e.what());
    }
}

/// Models are grouped with the first earlier group whose leader they are mergeable with.
inline std::vector<std::vector<std::size_t>> compat_partition(const std::vector<NamedCheckpoint>& zoo) {
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < zoo.size(); ++i) {
        bool placed = false;
        for (auto& g : groups)
            if (check_compat(zoo[g.front()].ckpt, zoo[i].ckpt).verdict == CompatVerdict::mergeable) {
                g.push_back(i);
                placed = true;
                break;
            }
        if (!placed) groups.push_back({i});
    }
    return groups;
}

} // namespace detail

/// Runs the full recipe and writes every artifact under `cfg.out`.
inline GlueReport run_model_glue(const GlueConfig& cfg) {
    cfg.validate();
    const fs::path& out = cfg.out;
    fs::create_directories(out);

    auto zoo = detail::staged("load", [&] {
        std::vector<NamedCheckpoint> z;
        for (std::size_t i = 0; i < cfg.zoo.size(); ++i) {
            NamedCheckpoint n;
            n.path = cfg.zoo[i];
            n.id = cfg.ids.empty() ? id_from_path(cfg.zoo[i]) : cfg.ids[i];
            n.ckpt = load_checkpoint(cfg.zoo[i]);
            z.push_back(std::move(n));
        }
        std::vector<std::string> ids;
        for (const auto& n : z) ids.push_back(n.id);
        require_unique_ids(ids);
        return z;
    });
    auto ev = detail::staged("evaluator", [&] { return resolve_evaluator(cfg.evaluator, cfg.corpus); });

    GlueReport report;
    for (const auto& n : zoo) report.ids.push_back(n.id);

    // (1) Clustering: architecture pre-partition, then similarity clustering inside each group.
    detail::staged("cluster", [&] {
        report.compat_groups = detail::compat_partition(zoo);
        report.clusters.threshold = cfg.threshold;
        std::vector<std::pair<std::vector<std::size_t>, double>> all;
        nlohmann::json groups_json = nlohmann::json::array();
        for (const auto& g : report.compat_groups) {
            StoreRefs stores;
            std::vector<std::string> gids;
            for (auto i : g) {
                stores.push_back(&zoo[i].ckpt.store);
                gids.push_back(zoo[i].id);
            }
            auto sims = similarity_matrix(stores, CosineMode::per_tensor_mean, cfg.search.threads, gids);
            auto local = cluster_zoo(sims, cfg.threshold);
            for (std::size_t c = 0; c < local.clusters.size(); ++c) {
                std::vector<std::size_t> global;
                for (auto li : local.clusters[c]) global.push_back(g[li]);
                all.emplace_back(global, local.min_intra_sim[c]);
            }
            groups_json.push_back({{"members", gids}, {"similarity", to_json(sims)}, {"clusters", to_json(local)}});
        }
        std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first.front() < b.first.front(); });
        for (auto& [members, sim] : all) {
            report.clusters.clusters.push_back(members);
            report.clusters.min_intra_sim.push_back(sim);
        }
        nlohmann::json named = nlohmann::json::array();
        for (const auto& c : report.clusters.clusters) {
            std::vector<std::string> m;
            for (auto i : c) m.push_back(zoo[i].id);
            named.push_back(m);
        }
        detail::write_json_file(out / "clusters.json", {{"ids", report.ids},
                                                        {"threshold", cfg.threshold},
                                                        {"compat_groups", groups_json},
                                                        {"clusters", to_json(report.clusters)},
                                                        {"cluster_members", named}});
        return 0;
    });

    // (2) Merge inside each cluster and pick its representative.
    std::vector<Checkpoint> reps;
    std::vector<std::vector<std::string>> rep_members;
    for (std::size_t c = 0; c < report.clusters.clusters.size(); ++c) {
        const auto& members = report.clusters.clusters[c];
        ClusterOutcome o;
        for (auto i : members) o.members.push_back(zoo[i].id);
        detail::staged("merge (cluster " + std::to_string(c) + ")", [&] {
            const fs::path cdir = out / "clusters" / std::to_string(c);
            fs::create_directories(cdir);
            std::size_t best = members.front();
            o.best_single_fitness = ev(zoo[best].ckpt.store, zoo[best].ckpt.desc);
            for (auto i : members) {
                double f = ev(zoo[i].ckpt.store, zoo[i].ckpt.desc);
                if (!std::isfinite(f)) throw Error("non-finite fitness for '" + zoo[i].id + "'");
                if (f > o.best_single_fitness) {
                    o.best_single_fitness = f;
                    best = i;
                }
            }
            o.best_single_id = zoo[best].id;
            o.representative_id = zoo[best].id;
            o.representative_fitness = o.best_single_fitness;
            o.representative_path = fs::relative(fs::absolute(zoo[best].path), fs::absolute(out)).generic_string();
            Checkpoint rep = zoo[best].ckpt;
            std::vector<std::string> covered = {zoo[best].id};
            if (members.size() > 1) {
                ModelZoo mz;
                mz.desc = zoo[members.front()].ckpt.desc;
                for (auto i : members) {
                    mz.ids.push_back(zoo[i].id);
                    mz.stores.push_back(&zoo[i].ckpt.store);
                }
                StrategyOptions so = cfg.search;
                so.seed = cfg.search.seed ^ static_cast<std::uint64_t>(c);
                auto res = run_strategy(mz, ev, so);
                auto rj = to_json(res);
                rj["members"] = o.members;
                detail::write_json_file(cdir / "result.json", rj);
                save_checkpoint(res.merged, mz.desc, cdir / "merged");
                if (res.fitness > o.best_single_fitness) {
                    o.merged_representative = true;
                    o.representative_id = "cluster" + std::to_string(c) + "-merged";
                    o.representative_fitness = res.fitness;
                    o.representative_path = "clusters/" + std::to_string(c) + "/merged";
                    rep = Checkpoint{res.merged, mz.desc};
                    covered = res.selected_ids;
                }
                o.search = std::move(res);
            }
            reps.push_back(std::move(rep));
            rep_members.push_back(covered);
            return 0;
        });
        report.outcomes.push_back(std::move(o));
    }

    // (3) Final artifact: the lone representative, or a routed mixture over all of them.
    detail::staged("mixture", [&] {
        if (reps.size() == 1) {
            report.final_kind = "checkpoint";
            report.final_artifact = report.outcomes[0].representative_path;
            return 0;
        }
        std::vector<std::string> rep_ids;
        ExpertRefs refs;
        std::vector<std::vector<std::vector<int>>> prompt_sets;
        for (std::size_t r = 0; r < reps.size(); ++r) {
            rep_ids.push_back(report.outcomes[r].representative_id);
            refs.push_back(&reps[r]);
            std::vector<std::vector<int>> ps;
            for (const auto& m : rep_members[r]) {
                auto it = cfg.prompts.find(m);
                if (it != cfg.prompts.end()) ps.insert(ps.end(), it->second.begin(), it->second.end());
            }
            if (ps.empty())
                throw Error("no router prompts for representative '" + rep_ids.back() + "' (members: " +
                            [&] {
                                std::string s;
                                for (const auto& m : rep_members[r]) s += (s.empty() ? "" : ", ") + m;
                                return s;
                            }() +
                            ")");
            prompt_sets.push_back(std::move(ps));
        }
        auto router = build_linear_router(prompt_sets, reps[0].store.at(names::embed));
        MixtureSpec spec;
        if (cfg.final_level == MixtureLevel::model) {
            spec = build_model_level(rep_ids, refs, router, cfg.top_k);
        } else {
            std::vector<RouterSpec> routers(static_cast<std::size_t>(reps[0].desc.num_layers), router);
            spec = build_ffn_level(rep_ids, refs, 0, routers, RouterInput::sample, std::min<int>(cfg.top_k, static_cast<int>(reps.size())));
        }
        save_mixture_bundle(out / "mixture", spec, refs);
        if (cfg.corpus) report.mixture_fitness = mixture_fitness(spec, refs, *cfg.corpus);
        report.mixture = std::move(spec);
        report.final_kind = "mixture";
        report.final_artifact = "mixture";
        return 0;
    });

    detail::write_json_file(out / "report.json", to_json(report));
    return report;
}

/// Echo of a config with paths relative to the output directory (for manifests).
inline nlohmann::json to_json(const GlueConfig& c) {
    auto rel = [&](const fs::path& p) { return fs::relative(fs::absolute(p), fs::absolute(c.out)).generic_string(); };
    nlohmann::json zoo = nlohmann::json::array();
    for (std::size_t i = 0; i < c.zoo.size(); ++i) {
        if (c.ids.empty()) zoo.push_back(rel(c.zoo[i]));
        else zoo.push_back({{"id", c.ids[i]}, {"path", rel(c.zoo[i])}});
    }
    std::string ev = c.evaluator;
    if (ev.rfind("analytic:", 0) == 0) ev = "analytic:" + rel(ev.substr(9));
    return {{"zoo", zoo},
            {"threshold", c.threshold},
            {"strategy", to_string(c.search.strategy)},
            {"budget", c.search.budget},
            {"group_size", c.search.group_size},
            {"seed", c.search.seed},
            {"warm_delta", c.search.warm_delta},
            {"warm_budget", c.search.warm_budget},
            {"grid", c.search.grid},
            {"evaluator", ev},
            {"corpus_sequences", c.corpus ? nlohmann::json(c.corpus->size()) : nlohmann::json(nullptr)},
            {"mixture", {{"level", to_string(c.final_level)}, {"top_k", c.top_k}, {"prompts", c.prompts}}}};
}

} // namespace glueforge
