#pragma once

// Command-line front end. cli_dispatch returns 0 on success, 1 on usage errors, 2 on runtime errors.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pipeline.hpp"
#include "toy_model.hpp"

namespace glueforge {

namespace cli_detail {

/// Expands --zoo values: checkpoint directories, or JSON files listing paths (or {id, path} objects)
/// relative to the file.
inline std::vector<NamedCheckpoint> load_zoo(const std::vector<std::string>& args) {
    std::vector<NamedCheckpoint> zoo;
    auto add = [&](const fs::path& p, std::string id) {
        NamedCheckpoint n;
        n.path = p;
        n.id = id.empty() ? id_from_path(p) : std::move(id);
        n.ckpt = load_checkpoint(p);
        zoo.push_back(std::move(n));
    };
    for (const auto& a : args) {
        fs::path p(a);
        if (fs::is_regular_file(p)) {
            auto j = detail::read_json_file(p);
            if (!j.is_array()) throw UsageError("zoo list " + a + " must be a JSON array");
            for (const auto& e : j) {
                auto rel = [&](const std::string& s) { return fs::path(s).is_absolute() ? fs::path(s) : p.parent_path() / s; };
                if (e.is_string()) add(rel(e.get<std::string>()), "");
                else if (e.is_object() && e.contains("path")) add(rel(e.at("path").get<std::string>()), e.value("id", std::string()));
                else throw UsageError("zoo list " + a + " entries must be paths or {id, path} objects");
            }
        } else {
            add(p, "");
        }
    }
    if (zoo.empty()) throw UsageError("--zoo is empty");
    std::vector<std::string> ids;
    for (const auto& n : zoo) ids.push_back(n.id);
    require_unique_ids(ids);
    return zoo;
}

inline ModelZoo model_zoo(const std::vector<NamedCheckpoint>& zoo) {
    ModelZoo mz;
    mz.desc = zoo.front().ckpt.desc;
    for (const auto& n : zoo) {
        if (n.ckpt.desc != mz.desc) throw Error("zoo model '" + n.id + "' has a different architecture");
        mz.ids.push_back(n.id);
        mz.stores.push_back(&n.ckpt.store);
    }
    return mz;
}

/// Manifest path for a file output: "<dir>/<stem>.manifest.json".
inline fs::path manifest_beside(const fs::path& file) {
    return file.parent_path() / (file.stem().string() + ".manifest.json");
}

inline void write_manifest_file(const fs::path& path, const std::string& command, const nlohmann::json& config,
                                std::uint64_t seed) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    detail::write_json_file(path, {{"tool", "glueforge"}, {"version", kToolVersion}, {"command", command},
                                   {"seed", seed}, {"config", config}});
}

inline void ensure_parent(const fs::path& file) {
    if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Prompt sets in expert order from a prompts.json mapping id -> token-id lists.
inline std::vector<std::vector<std::vector<int>>> prompt_sets_for(const PromptMap& prompts,
                                                                  const std::vector<std::string>& ids) {
    std::vector<std::vector<std::vector<int>>> sets;
    for (const auto& id : ids) {
        auto it = prompts.find(id);
        if (it == prompts.end() || it->second.empty()) throw Error("prompts.json has no prompts for expert '" + id + "'");
        sets.push_back(it->second);
    }
    return sets;
}

} // namespace cli_detail

/// Runs one toolkit command. Output text goes to `out`, diagnostics to `err`.
inline int cli_dispatch(const std::vector<std::string>& argv, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
    using namespace cli_detail;
    CLI::App app{"merge, search and mix checkpoint zoos", "glueforge"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    // toy-model
    auto* toy = app.add_subcommand("toy-model", "write a seeded random toy transformer checkpoint");
    std::string toy_cfg, toy_out;
    std::uint64_t toy_seed = 0;
    toy->add_option("--config", toy_cfg, "ToyConfig JSON (defaults when omitted)");
    toy->add_option("--seed", toy_seed, "initialization seed");
    toy->add_option("--out", toy_out, "output checkpoint directory")->required();

    // similarity
    auto* sim = app.add_subcommand("similarity", "pairwise weight cosine similarity of a zoo");
    std::vector<std::string> sim_zoo;
    std::string sim_out, sim_mode = "per-tensor";
    unsigned sim_threads = 1;
    sim->add_option("--zoo", sim_zoo, "checkpoint directories or zoo list JSON files")->required();
    sim->add_option("--mode", sim_mode, "per-tensor or global")->check(CLI::IsMember({"per-tensor", "global"}));
    sim->add_option("--threads", sim_threads);
    sim->add_option("--out", sim_out, "output JSON")->required();

    // cluster
    auto* clu = app.add_subcommand("cluster", "complete-linkage clustering of a similarity matrix");
    std::string clu_sims, clu_out;
    double clu_threshold = 0.95;
    clu->add_option("--sims", clu_sims, "similarity JSON")->required();
    clu->add_option("--threshold", clu_threshold);
    clu->add_option("--out", clu_out, "output JSON")->required();

    // merge
    auto* mer = app.add_subcommand("merge", "apply a merge recipe to a zoo");
    std::string mer_method, mer_base, mer_recipe, mer_out;
    std::vector<std::string> mer_zoo;
    std::vector<double> mer_coeffs;
    unsigned mer_threads = 1;
    mer->add_option("--method", mer_method, "linear, slerp, task_arithmetic, ties or dare_ta");
    mer->add_option("--zoo", mer_zoo, "checkpoint directories or zoo list JSON files")->required();
    mer->add_option("--base", mer_base, "base checkpoint for task-vector methods");
    auto* rec_opt = mer->add_option("--recipe", mer_recipe, "MergeRecipe JSON, or a search result holding one");
    auto* co_opt = mer->add_option("--coeffs", mer_coeffs, "one coefficient per model (single group)");
    rec_opt->excludes(co_opt);
    co_opt->excludes(rec_opt);
    mer->add_option("--threads", mer_threads);
    mer->add_option("--out", mer_out, "output checkpoint directory")->required();

    // search
    auto* sea = app.add_subcommand("search", "search merge recipes against a fitness evaluator");
    std::string sea_strategy = "coef", sea_eval = "toy-ppl", sea_corpus, sea_out, sea_method, sea_base;
    std::vector<std::string> sea_zoo;
    StrategyOptions sea_opt;
    sea->add_option("--strategy", sea_strategy, "avg, coef, sim-high, sim-low, evo or warm");
    sea->add_option("--zoo", sea_zoo, "checkpoint directories or zoo list JSON files")->required();
    sea->add_option("--evaluator", sea_eval, "toy-ppl or analytic:<checkpoint dir>");
    sea->add_option("--corpus", sea_corpus, "corpus JSON for toy-ppl");
    sea->add_option("--budget", sea_opt.budget, "evaluation budget (evo)");
    sea->add_option("--group-size", sea_opt.group_size, "layers per coefficient group (evo), 0 = all");
    sea->add_option("--seed", sea_opt.seed);
    sea->add_option("--threads", sea_opt.threads);
    sea->add_option("--warm-delta", sea_opt.warm_delta);
    sea->add_option("--warm-budget", sea_opt.warm_budget);
    sea->add_option("--method", sea_method, "merge method searched by evo");
    sea->add_option("--base", sea_base, "base checkpoint for evo task-vector methods");
    sea->add_option("--out", sea_out, "result JSON; the merged checkpoint goes beside it")->required();

    // mix
    auto* mix = app.add_subcommand("mix", "build a routed mixture bundle from expert checkpoints");
    std::string mix_level = "model", mix_base, mix_router = "linear", mix_input = "sample", mix_out, mix_recipe,
                mix_train;
    std::vector<std::string> mix_experts;
    std::optional<int> mix_topk;
    int mix_hybrid = 0, mix_steps = 200;
    float mix_lr = 1e-2f;
    std::uint64_t mix_seed = 0;
    bool mix_merge_frame = false;
    mix->add_option("--level", mix_level, "model, block or ffn")->check(CLI::IsMember({"model", "block", "ffn"}));
    mix->add_option("--experts", mix_experts, "expert checkpoint directories or zoo list JSON files")->required();
    mix->add_option("--base", mix_base, "id of the expert providing the shared frame (block/ffn)");
    mix->add_option("--router", mix_router, "linear:prompts.json or mlp:r=<hidden>");
    mix->add_option("--top-k", mix_topk);
    mix->add_option("--router-input", mix_input, "sample or token")->check(CLI::IsMember({"sample", "token"}));
    mix->add_option("--hybrid-k", mix_hybrid, "bottom layers merged instead of routed (ffn level)");
    mix->add_option("--merge-recipe", mix_recipe, "recipe for the merged bottom layers (default: average)");
    mix->add_flag("--merge-frame", mix_merge_frame, "take embedding, norms and head from the merged model");
    mix->add_option("--train-corpus", mix_train, "corpus for router-only training (mlp routers)");
    mix->add_option("--train-steps", mix_steps);
    mix->add_option("--lr", mix_lr);
    mix->add_option("--seed", mix_seed);
    mix->add_option("--out", mix_out, "output bundle directory")->required();

    // glue
    auto* glu = app.add_subcommand("glue", "cluster, merge per cluster, then mix the representatives");
    std::string glu_cfg, glu_out, glu_final;
    std::optional<std::uint64_t> glu_seed;
    glu->add_option("--config", glu_cfg, "glue.json")->required();
    glu->add_option("--out", glu_out, "output directory (overrides the config)");
    glu->add_option("--final", glu_final, "model or ffn")->check(CLI::IsMember({"model", "ffn"}));
    glu->add_option("--seed", glu_seed, "overrides the config seed");

    // eval
    auto* evl = app.add_subcommand("eval", "score a checkpoint or mixture bundle");
    std::string evl_model, evl_corpus, evl_eval = "toy-ppl", evl_out;
    evl->add_option("--model", evl_model, "checkpoint or mixture bundle directory")->required();
    evl->add_option("--corpus", evl_corpus, "corpus JSON");
    evl->add_option("--evaluator", evl_eval, "toy-ppl or analytic:<checkpoint dir>");
    evl->add_option("--out", evl_out, "also write the score as JSON");

    // inspect
    auto* ins = app.add_subcommand("inspect", "summarize a checkpoint or mixture bundle");
    std::string ins_path, ins_out;
    ins->add_option("path", ins_path, "checkpoint or mixture bundle directory")->required();
    ins->add_option("--out", ins_out, "also write the summary as JSON");

    std::vector<std::string> args(argv.rbegin(), argv.rend());
    if (!args.empty()) args.pop_back(); // program name
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion& e) {
        out << kToolVersion << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return 1;
    }

    try {
        if (*toy) {
            ToyConfig cfg;
            if (!toy_cfg.empty()) {
                auto j = detail::read_json_file(toy_cfg);
                try {
                    cfg = toy_config_from_json(j);
                } catch (const Error& e) {
                    throw UsageError(e.what());
                }
            }
            auto ck = build_toy_model(cfg, toy_seed);
            save_checkpoint(ck, toy_out);
            write_run_manifest(toy_out, "toy-model", {{"toy_config", to_json(cfg)}}, toy_seed);
            out << "wrote toy model (" << ck.store.size() << " tensors) to " << toy_out << "\n";
        } else if (*sim) {
            auto zoo = load_zoo(sim_zoo);
            StoreRefs stores;
            std::vector<std::string> ids;
            for (const auto& n : zoo) {
                stores.push_back(&n.ckpt.store);
                ids.push_back(n.id);
            }
            auto mode = sim_mode == "global" ? CosineMode::global : CosineMode::per_tensor_mean;
            auto m = similarity_matrix(stores, mode, sim_threads, ids);
            auto j = to_json(m);
            j["ids"] = ids;
            j["mode"] = sim_mode;
            ensure_parent(sim_out);
            detail::write_json_file(sim_out, j);
            write_manifest_file(manifest_beside(sim_out), "similarity", {{"zoo", sim_zoo}, {"mode", sim_mode}}, 0);
            out << "wrote " << m.n << "x" << m.n << " similarity matrix to " << sim_out << "\n";
        } else if (*clu) {
            auto j = detail::read_json_file(clu_sims);
            auto m = similarity_from_json(j);
            auto r = cluster_zoo(m, clu_threshold);
            nlohmann::json o = {{"similarity", j}, {"clusters", to_json(r)}};
            if (j.contains("ids")) {
                auto ids = j.at("ids").get<std::vector<std::string>>();
                nlohmann::json named = nlohmann::json::array();
                for (const auto& c : r.clusters) {
                    std::vector<std::string> names;
                    for (auto i : c) names.push_back(ids.at(i));
                    named.push_back(names);
                }
                o["cluster_members"] = named;
            }
            ensure_parent(clu_out);
            detail::write_json_file(clu_out, o);
            write_manifest_file(manifest_beside(clu_out), "cluster", {{"sims", clu_sims}, {"threshold", clu_threshold}}, 0);
            out << r.clusters.size() << " cluster(s) at threshold " << clu_threshold << "\n";
        } else if (*mer) {
            auto zoo = load_zoo(mer_zoo);
            MergeRecipe recipe;
            std::vector<std::string> select;
            if (!mer_recipe.empty()) {
                auto j = detail::read_json_file(mer_recipe);
                if (j.contains("recipe")) {
                    if (j.contains("selected_ids")) select = j.at("selected_ids").get<std::vector<std::string>>();
                    recipe = recipe_from_json(j.at("recipe"));
                } else {
                    recipe = recipe_from_json(j);
                }
                if (!mer_method.empty() && parse_merge_method(mer_method) != recipe.method)
                    throw UsageError("--method " + mer_method + " conflicts with the recipe's method " +
                                     to_string(recipe.method));
            } else if (!mer_coeffs.empty()) {
                int L = zoo.front().ckpt.desc.num_layers;
                recipe = MergeRecipe::uniform(mer_method.empty() ? MergeMethod::linear : parse_merge_method(mer_method),
                                              L, L, mer_coeffs);
            } else {
                throw UsageError("merge needs --recipe or --coeffs");
            }
            // A search result names the models its recipe rows refer to; pick them out of the zoo.
            if (!select.empty() && select.size() != zoo.size()) {
                std::vector<NamedCheckpoint> picked;
                for (const auto& id : select) {
                    auto it = std::find_if(zoo.begin(), zoo.end(), [&](const auto& n) { return n.id == id; });
                    if (it == zoo.end()) throw Error("recipe refers to model '" + id + "' missing from --zoo");
                    picked.push_back(*it);
                }
                zoo = std::move(picked);
            }
            auto mz = model_zoo(zoo);
            std::optional<Checkpoint> base;
            if (!mer_base.empty()) base = load_checkpoint(mer_base);
            auto merged = apply_recipe(mz.stores, mz.desc, base ? &base->store : nullptr, recipe, mer_threads);
            save_checkpoint(merged, mz.desc, mer_out);
            write_run_manifest(mer_out, "merge",
                               {{"zoo", mz.ids}, {"base", mer_base}, {"recipe", to_json(recipe)}}, recipe.seed);
            out << "merged " << mz.ids.size() << " model(s) with " << to_string(recipe.method) << " into " << mer_out
                << "\n";
        } else if (*sea) {
            sea_opt.strategy = parse_strategy(sea_strategy);
            if (!sea_method.empty()) {
                if (sea_opt.strategy != SearchStrategy::evo) throw UsageError("--method only applies to --strategy evo");
                sea_opt.evo_method = parse_merge_method(sea_method);
            }
            auto zoo = load_zoo(sea_zoo);
            auto mz = model_zoo(zoo);
            std::optional<TokenBatch> corpus;
            if (!sea_corpus.empty()) corpus = load_corpus(sea_corpus);
            auto ev = resolve_evaluator(sea_eval, corpus);
            std::optional<Checkpoint> base;
            if (!sea_base.empty()) base = load_checkpoint(sea_base);
            auto res = run_strategy(mz, ev, sea_opt, base ? &base->store : nullptr);
            fs::path res_path(sea_out);
            ensure_parent(res_path);
            auto merged_dir = res_path.parent_path() / (res_path.stem().string() + "_merged");
            auto j = to_json(res);
            j["merged_path"] = merged_dir.filename().string();
            detail::write_json_file(res_path, j);
            save_checkpoint(res.merged, mz.desc, merged_dir);
            write_manifest_file(manifest_beside(res_path), "search",
                                {{"strategy", sea_strategy}, {"zoo", mz.ids}, {"evaluator", sea_eval},
                                 {"corpus", sea_corpus}, {"budget", sea_opt.budget},
                                 {"group_size", sea_opt.group_size}, {"warm_delta", sea_opt.warm_delta},
                                 {"warm_budget", sea_opt.warm_budget}, {"method", to_string(sea_opt.evo_method)}},
                                sea_opt.seed);
            out << res.strategy << ": fitness " << fmt_double(res.fitness) << " after " << res.trials_used
                << " trial(s)\n";
        } else if (*mix) {
            auto zoo = load_zoo(mix_experts);
            const auto level = parse_mixture_level(mix_level);
            std::vector<std::string> ids;
            ExpertRefs refs;
            for (const auto& n : zoo) {
                ids.push_back(n.id);
                refs.push_back(&n.ckpt);
            }
            int base = 0;
            if (!mix_base.empty()) {
                auto it = std::find(ids.begin(), ids.end(), mix_base);
                if (it == ids.end()) throw UsageError("--base " + mix_base + " is not one of the experts");
                base = static_cast<int>(it - ids.begin());
            }
            if (level == MixtureLevel::model && !mix_base.empty())
                throw UsageError("--base does not apply to model-level mixtures");
            if (mix_hybrid != 0 && level != MixtureLevel::ffn) throw UsageError("--hybrid-k needs --level ffn");
            if (level != MixtureLevel::ffn && mix_input == "token")
                throw UsageError("token routing is only available at ffn level");
            const int top_k = mix_topk.value_or(level == MixtureLevel::ffn ? 2 : 1);
            const auto& frame = *refs[static_cast<std::size_t>(base)];
            const int L = frame.desc.num_layers;
            if (mix_hybrid < 0 || mix_hybrid > L) throw UsageError("--hybrid-k must lie in [0, num_layers]");
            const auto nrouters = router_count(level, L, mix_hybrid);

            RouterSpec router;
            bool trainable = false;
            if (mix_router.rfind("linear:", 0) == 0) {
                auto prompts = prompts_from_json(detail::read_json_file(mix_router.substr(7)));
                router = build_linear_router(prompt_sets_for(prompts, ids), frame.store.at(names::embed));
            } else if (mix_router.rfind("mlp:r=", 0) == 0) {
                int hidden = 0;
                try {
                    hidden = std::stoi(mix_router.substr(6));
                } catch (const std::exception&) {
                    throw UsageError("bad --router " + mix_router);
                }
                router = build_mlp_router(frame.desc.hidden_dim, hidden, static_cast<int>(ids.size()), mix_seed);
                trainable = true;
            } else {
                throw UsageError("--router must be linear:<prompts.json> or mlp:r=<hidden>");
            }
            if (!mix_train.empty() && !trainable) throw UsageError("--train-corpus needs an mlp router");

            std::vector<RouterSpec> routers(nrouters, router);
            if (trainable)
                for (std::size_t r = 0; r < nrouters; ++r)
                    routers[r] = build_mlp_router(frame.desc.hidden_dim, router.hidden, static_cast<int>(ids.size()),
                                                  mix_seed + r);
            MixtureSpec spec;
            std::optional<Checkpoint> merged;
            if (level == MixtureLevel::model) {
                spec = build_model_level(ids, refs, routers.front(), top_k);
            } else if (level == MixtureLevel::block) {
                spec = build_block_level(ids, refs, base, routers, top_k);
            } else if (mix_hybrid == 0 && mix_recipe.empty() && !mix_merge_frame) {
                spec = build_ffn_level(ids, refs, base, routers, parse_router_input(mix_input), top_k);
            } else {
                MergeRecipe recipe;
                if (!mix_recipe.empty()) {
                    auto j = detail::read_json_file(mix_recipe);
                    recipe = recipe_from_json(j.contains("recipe") ? j.at("recipe") : j);
                } else {
                    std::vector<double> avg(ids.size(), 1.0 / static_cast<double>(ids.size()));
                    recipe = MergeRecipe::uniform(MergeMethod::linear, L, L, avg);
                }
                spec = build_hybrid(ids, refs, base, mix_hybrid, recipe, routers, parse_router_input(mix_input), top_k,
                                    mix_merge_frame);
                merged = Checkpoint{materialize_merged(spec, refs), frame.desc};
            }
            nlohmann::json training = nullptr;
            if (!mix_train.empty()) {
                RouterTrainOptions o;
                o.steps = mix_steps;
                o.lr = mix_lr;
                o.seed = mix_seed;
                auto tr = train_router_lm(spec, refs, load_corpus(mix_train), o, merged ? &merged->store : nullptr);
                spec.routers = tr.routers;
                training = {{"steps", mix_steps}, {"lr", mix_lr}, {"loss_history", tr.loss_history}};
            }
            save_mixture_bundle(mix_out, spec, refs, merged ? &*merged : nullptr);
            write_run_manifest(mix_out, "mix",
                               {{"level", mix_level}, {"experts", ids}, {"base", mix_base}, {"router", mix_router},
                                {"top_k", top_k}, {"router_input", mix_input}, {"hybrid_k", mix_hybrid},
                                {"merge_recipe", mix_recipe}, {"merge_frame", mix_merge_frame},
                                {"train_corpus", mix_train}, {"training", training}},
                               mix_seed);
            out << "wrote " << to_string(level) << "-level mixture of " << ids.size() << " expert(s) to " << mix_out
                << "\n";
        } else if (*glu) {
            fs::path cfg_path(glu_cfg);
            auto cfg = glue_config_from_json(detail::read_json_file(cfg_path), cfg_path.parent_path());
            if (!glu_out.empty()) cfg.out = glu_out;
            if (!glu_final.empty()) cfg.final_level = parse_mixture_level(glu_final);
            if (glu_seed) cfg.search.seed = *glu_seed;
            if (cfg.out.empty()) throw UsageError("glue needs --out or an \"out\" entry in the config");
            auto report = run_model_glue(cfg);
            write_run_manifest(cfg.out, "glue", to_json(cfg), cfg.search.seed);
            out << report.outcomes.size() << " cluster(s); final " << report.final_kind << " at "
                << (cfg.out / report.final_artifact).generic_string() << "\n";
        } else if (*evl) {
            std::optional<TokenBatch> corpus;
            if (!evl_corpus.empty()) corpus = load_corpus(evl_corpus);
            double f = 0.0;
            std::string kind;
            if (fs::exists(fs::path(evl_model) / kMixtureFile)) {
                if (evl_eval != "toy-ppl") throw UsageError("mixture bundles are scored with toy-ppl only");
                if (!corpus) throw UsageError("eval of a mixture needs --corpus");
                auto b = load_mixture_bundle(evl_model);
                f = mixture_fitness(b.spec, b.refs(), *corpus, b.merged_store());
                kind = "mixture";
            } else {
                auto ck = load_checkpoint(evl_model);
                f = resolve_evaluator(evl_eval, corpus)(ck.store, ck.desc);
                kind = "checkpoint";
            }
            out << fmt_double(f) << "\n";
            nlohmann::json cfg = {{"model", evl_model}, {"corpus", evl_corpus}, {"evaluator", evl_eval}};
            if (!evl_out.empty()) {
                ensure_parent(evl_out);
                detail::write_json_file(evl_out, {{"fitness", f}, {"kind", kind}, {"evaluator", evl_eval}});
                write_manifest_file(manifest_beside(evl_out), "eval", cfg, 0);
            } else {
                err << nlohmann::json({{"tool", "glueforge"}, {"version", kToolVersion}, {"command", "eval"},
                                       {"seed", 0}, {"config", cfg}})
                           .dump()
                    << "\n";
            }
        } else if (*ins) {
            nlohmann::json j;
            if (fs::exists(fs::path(ins_path) / kMixtureFile)) {
                auto b = load_mixture_bundle(ins_path);
                j = {{"kind", "mixture"}, {"spec", to_json(b.spec)}, {"hybrid", b.spec.is_hybrid()}};
            } else {
                auto ck = load_checkpoint(ins_path);
                std::size_t params = 0;
                nlohmann::json tensors = nlohmann::json::array();
                for (const auto& [name, t] : ck.store) {
                    params += t.numel();
                    tensors.push_back({{"name", name}, {"shape", t.shape}, {"role", to_string(ck.desc.role_of(name).kind)}});
                }
                j = {{"kind", "checkpoint"}, {"arch", to_json(ck.desc)}, {"num_tensors", ck.store.size()},
                     {"num_parameters", params}, {"tensors", tensors}};
            }
            out << j.dump(2) << "\n";
            nlohmann::json cfg = {{"path", ins_path}};
            if (!ins_out.empty()) {
                ensure_parent(ins_out);
                detail::write_json_file(ins_out, j);
                write_manifest_file(manifest_beside(ins_out), "inspect", cfg, 0);
            } else {
                err << nlohmann::json({{"tool", "glueforge"}, {"version", kToolVersion}, {"command", "inspect"},
                                       {"seed", 0}, {"config", cfg}})
                           .dump()
                    << "\n";
            }
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n\n";
        auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
    return cli_dispatch(std::vector<std::string>(argv, argv + argc), out, err);
}

} // namespace glueforge
