#pragma once

// Experiment harness behind the CLI: runs policies over seeds, writes traces,
// per-policy reports, and comparison tables; regenerates reports from stored
// traces; and produces the density/similarity and memory-timeline analyses.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "amskv/attn.hpp"
#include "amskv/config.hpp"
#include "amskv/toymodel.hpp"
#include "amskv/trace.hpp"

namespace amskv {

namespace fs = std::filesystem;

// Full-cache attention FLOP proxy: sum over scales of
// 2 * context * T_i * head_dim * heads * layers, with context = all tokens
// up to and including the current scale.
inline unsigned long long full_cache_attention_flops(const ScaleSchedule& schedule, int n_heads,
                                                     int head_dim, int n_layers) {
    unsigned long long flops = 0;
    for (int i = 1; i <= schedule.num_scales(); ++i) {
        flops += 2ull * schedule.prefix_tokens(i) * schedule.tokens(i) * head_dim * n_heads *
                 n_layers;
    }
    return flops;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

// -------------------------------------------------------------------------
// Per-seed results, derived exclusively from the trace so a stored trace
// regenerates the identical report.

struct SeedResult {
    uint64_t seed = 0;
    long long nominal_budget_tokens = 0;
    long long realized_peak_tokens = 0;  // max per-layer peak
    long long final_cached_total = 0;
    long long peak_cached_fleet = 0;  // max over steps of tokens summed across layers
    unsigned long long kv_bytes_final = 0;
    unsigned long long kv_bytes_peak = 0;
    unsigned long long attn_flops = 0;
    double flop_ratio_vs_full = 0.0;
    double reduction_vs_full = 0.0;
    std::vector<long long> peak_per_layer;
    std::vector<long long> final_per_layer;
    std::vector<FidelityEntry> fidelity;
    std::optional<double> fidelity_rel_l2_mean;
    std::optional<double> fidelity_cosine_mean;
};

inline long long nominal_budget_tokens(const TraceHeader& h) {
    struct Visitor {
        const TraceHeader& h;
        long long operator()(const AmsKvPolicy&) const { return h.spec.c_max; }
        long long operator()(const FullCachePolicy&) const { return h.schedule.total_tokens(); }
        long long operator()(const AblationPolicy&) const { return h.schedule.total_tokens(); }
        long long operator()(const SlidingWindowPolicy& p) const { return p.window_tokens; }
        long long operator()(const SinkWindowPolicy& p) const {
            return p.sink_tokens + p.window_tokens;
        }
        long long operator()(const StaticAllocPolicy&) const { return h.spec.c_max; }
    };
    return std::visit(Visitor{h}, h.policy);
}

inline SeedResult seed_result_from_trace(const TraceData& t) {
    if (!t.summary.has_value()) throw ConfigError("trace has no summary record");
    const TraceHeader& h = t.header;
    const MemoryModel mm{h.n_layers, h.n_heads, h.head_dim, h.bytes_per_element};

    SeedResult r;
    r.seed = h.seed;
    r.nominal_budget_tokens = nominal_budget_tokens(h);
    r.peak_per_layer = t.summary->peak_cached;
    r.final_per_layer = t.summary->final_cached;
    for (long long p : r.peak_per_layer) r.realized_peak_tokens = std::max(r.realized_peak_tokens, p);
    r.final_cached_total = std::accumulate(r.final_per_layer.begin(), r.final_per_layer.end(), 0ll);

    std::vector<long long> per_scale_total(h.schedule.num_scales(), 0);
    for (const StepRecord& s : t.steps) per_scale_total[s.scale - 1] += s.cached_after;
    for (long long v : per_scale_total) r.peak_cached_fleet = std::max(r.peak_cached_fleet, v);

    r.kv_bytes_final = kv_bytes_fleet(r.final_cached_total, mm);
    r.kv_bytes_peak = kv_bytes_fleet(r.peak_cached_fleet, mm);
    r.attn_flops = t.summary->attn_flops;
    const unsigned long long full =
        full_cache_attention_flops(h.schedule, h.n_heads, h.head_dim, h.n_layers);
    r.flop_ratio_vs_full = static_cast<double>(r.attn_flops) / static_cast<double>(full);
    r.reduction_vs_full = 1.0 - static_cast<double>(r.final_cached_total) /
                                    static_cast<double>(h.n_layers * h.schedule.total_tokens());

    for (const ScaleRecord& s : t.scales) {
        if (s.fidelity.has_value()) r.fidelity.push_back(*s.fidelity);
    }
    if (!r.fidelity.empty()) {
        double rel = 0.0, cos = 0.0;
        for (const FidelityEntry& f : r.fidelity) {
            rel += f.rel_l2;
            cos += f.cosine;
        }
        r.fidelity_rel_l2_mean = rel / static_cast<double>(r.fidelity.size());
        r.fidelity_cosine_mean = cos / static_cast<double>(r.fidelity.size());
    }
    return r;
}

// -------------------------------------------------------------------------
// Report JSON. Wall time is the only field excluded from determinism and
// replay comparisons; it always sits on its own line in the indented dump.

inline Json seed_result_json(const SeedResult& r, double wall_time_ms) {
    Json j{{"seed", r.seed},
           {"nominal_budget_tokens", r.nominal_budget_tokens},
           {"realized_peak_tokens", r.realized_peak_tokens},
           {"final_cached_total", r.final_cached_total},
           {"peak_cached_fleet", r.peak_cached_fleet},
           {"kv_bytes_final", r.kv_bytes_final},
           {"kv_bytes_peak", r.kv_bytes_peak},
           {"attn_flops", r.attn_flops},
           {"flop_ratio_vs_full", r.flop_ratio_vs_full},
           {"reduction_vs_full", r.reduction_vs_full},
           {"peak_tokens_per_layer", r.peak_per_layer},
           {"final_tokens_per_layer", r.final_per_layer},
           {"wall_time_ms", wall_time_ms}};
    if (!r.fidelity.empty()) {
        Json fid = Json::array();
        for (const FidelityEntry& f : r.fidelity) {
            fid.push_back(Json{{"cosine", f.cosine}, {"rel_l2", f.rel_l2}, {"scale", f.scale}});
        }
        j["fidelity_per_scale"] = fid;
        j["fidelity_rel_l2_mean"] = *r.fidelity_rel_l2_mean;
        j["fidelity_cosine_mean"] = *r.fidelity_cosine_mean;
    }
    return j;
}

inline Json policy_report_json(const TraceHeader& header, const std::vector<SeedResult>& seeds,
                               const std::vector<double>& wall_times_ms) {
    Json seed_rows = Json::array();
    double rel = 0.0, cos = 0.0, flops = 0.0, ratio = 0.0, reduction = 0.0;
    int fid_count = 0;
    for (size_t i = 0; i < seeds.size(); ++i) {
        seed_rows.push_back(seed_result_json(seeds[i], wall_times_ms[i]));
        flops += static_cast<double>(seeds[i].attn_flops);
        ratio += seeds[i].flop_ratio_vs_full;
        reduction += seeds[i].reduction_vs_full;
        if (seeds[i].fidelity_rel_l2_mean.has_value()) {
            rel += *seeds[i].fidelity_rel_l2_mean;
            cos += *seeds[i].fidelity_cosine_mean;
            ++fid_count;
        }
    }
    const double n = static_cast<double>(seeds.size());
    Json aggregate{{"attn_flops_mean", flops / n},
                   {"flop_ratio_vs_full_mean", ratio / n},
                   {"reduction_vs_full_mean", reduction / n}};
    if (fid_count > 0) {
        aggregate["fidelity_rel_l2_mean"] = rel / fid_count;
        aggregate["fidelity_cosine_mean"] = cos / fid_count;
    }
    return Json{{"schema_version", kSchemaVersion},
                {"tool_version", std::string(kToolVersion)},
                {"config_hash", header.config_hash},
                {"policy_name", header.policy_name},
                {"policy", policy_to_json(header.policy)},
                {"budget", budget_to_json(header.spec)},
                {"schedule", header.schedule.sides()},
                {"model", Json{{"head_dim", header.head_dim},
                               {"n_heads", header.n_heads},
                               {"n_layers", header.n_layers},
                               {"vocab_size", header.vocab_size}}},
                {"seeds", seed_rows},
                {"aggregate", aggregate}};
}

// Regenerates the report for one policy from its stored traces (one per
// seed). Matches the original byte for byte except wall-time fields.
inline Json replay_policy_report(const std::vector<TraceData>& traces) {
    if (traces.empty()) throw ConfigError("replay: no traces given");
    std::vector<SeedResult> seeds;
    std::vector<double> walls;
    for (const TraceData& t : traces) {
        seeds.push_back(seed_result_from_trace(t));
        walls.push_back(0.0);
    }
    return policy_report_json(traces.front().header, seeds, walls);
}

// -------------------------------------------------------------------------
// run: execute every (policy, seed), write traces + reports + comparison.

struct PolicyRun {
    PolicyEntry entry;
    BudgetSpec spec_used;
    std::vector<TraceData> traces;
    std::vector<SeedResult> seeds;
    std::vector<double> wall_times_ms;
    fs::path report_path;
};

struct RunOutput {
    std::vector<PolicyRun> policies;
    fs::path comparison_path;
    std::string hash;
};

namespace detail {

inline TraceData run_one(const ExperimentConfig& cfg, const PolicyEntry& entry,
                         const BudgetSpec& spec, uint64_t seed, const std::string& hash) {
    ToyModelConfig mc = cfg.model;
    mc.seed = seed;
    const ToyModel model = init_model(mc);
    const GenerationTrace gen = generate(model, entry.kind, spec, cfg.compare_oracle);

    TraceHeader header;
    header.config_hash = hash;
    header.policy_name = entry.name;
    header.policy = entry.kind;
    header.schedule = mc.schedule;
    header.spec = spec;
    header.n_layers = mc.n_layers;
    header.n_heads = mc.n_heads;
    header.head_dim = mc.head_dim;
    header.vocab_size = mc.vocab_size;
    header.bytes_per_element = cfg.bytes_per_element;
    header.seed = seed;
    header.compare_oracle = cfg.compare_oracle;
    return make_trace(header, gen);
}

inline void write_text_file(const fs::path& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write file: " + path.string());
    out << body;
}

}  // namespace detail

inline std::string comparison_table(const RunOutput& run, const std::string& format) {
    std::ostringstream out;
    const bool csv = format == "csv";
    if (csv) {
        out << "schema_version,policy,seed,nominal_budget_tokens,realized_peak_tokens,"
               "final_cached_total,peak_cached_fleet,kv_bytes_final,kv_bytes_peak,attn_flops,"
               "flop_ratio_vs_full,reduction_vs_full_pct,fidelity_rel_l2_mean,"
               "fidelity_cosine_mean\n";
    }
    for (const PolicyRun& p : run.policies) {
        for (const SeedResult& s : p.seeds) {
            if (csv) {
                out << kSchemaVersion << ',' << p.entry.name << ',' << s.seed << ','
                    << s.nominal_budget_tokens << ',' << s.realized_peak_tokens << ','
                    << s.final_cached_total << ',' << s.peak_cached_fleet << ','
                    << s.kv_bytes_final << ',' << s.kv_bytes_peak << ',' << s.attn_flops << ','
                    << format_double(s.flop_ratio_vs_full) << ','
                    << format_double(100.0 * s.reduction_vs_full) << ',';
                if (s.fidelity_rel_l2_mean.has_value()) {
                    out << format_double(*s.fidelity_rel_l2_mean) << ','
                        << format_double(*s.fidelity_cosine_mean);
                } else {
                    out << ',';
                }
                out << '\n';
            } else {
                Json j{{"schema_version", kSchemaVersion},
                       {"policy", p.entry.name},
                       {"seed", s.seed},
                       {"nominal_budget_tokens", s.nominal_budget_tokens},
                       {"realized_peak_tokens", s.realized_peak_tokens},
                       {"final_cached_total", s.final_cached_total},
                       {"peak_cached_fleet", s.peak_cached_fleet},
                       {"kv_bytes_final", s.kv_bytes_final},
                       {"kv_bytes_peak", s.kv_bytes_peak},
                       {"attn_flops", s.attn_flops},
                       {"flop_ratio_vs_full", s.flop_ratio_vs_full},
                       {"reduction_vs_full_pct", 100.0 * s.reduction_vs_full}};
                if (s.fidelity_rel_l2_mean.has_value()) {
                    j["fidelity_rel_l2_mean"] = *s.fidelity_rel_l2_mean;
                    j["fidelity_cosine_mean"] = *s.fidelity_cosine_mean;
                }
                out << j.dump() << '\n';
            }
        }
    }
    return out.str();
}

inline RunOutput run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    RunOutput run;
    run.hash = config_hash(cfg);

    for (const PolicyEntry& entry : cfg.policies) {
        PolicyRun pr;
        pr.entry = entry;
        pr.spec_used = cfg.spec_for(entry);
        for (uint64_t seed : cfg.seeds) {
            const auto t0 = std::chrono::steady_clock::now();
            TraceData trace = detail::run_one(cfg, entry, pr.spec_used, seed, run.hash);
            const auto t1 = std::chrono::steady_clock::now();
            validate_trace(trace);

            const fs::path trace_path =
                out_dir / (entry.name + ".seed" + std::to_string(seed) + ".trace.jsonl");
            detail::write_text_file(trace_path, trace_to_jsonl(trace));
            // Results come from the re-parsed trace so replay reproduces them
            // from the file alone.
            std::istringstream round_trip(trace_to_jsonl(trace));
            pr.seeds.push_back(seed_result_from_trace(trace_from_jsonl(round_trip)));
            pr.wall_times_ms.push_back(
                std::chrono::duration<double, std::milli>(t1 - t0).count());
            pr.traces.push_back(std::move(trace));
        }
        const Json report = policy_report_json(pr.traces.front().header, pr.seeds,
                                               pr.wall_times_ms);
        pr.report_path = out_dir / (entry.name + ".report.json");
        detail::write_text_file(pr.report_path, report.dump(2) + "\n");
        run.policies.push_back(std::move(pr));
    }

    run.comparison_path =
        out_dir / (cfg.format == "csv" ? "comparison.csv" : "comparison.jsonl");
    detail::write_text_file(run.comparison_path, comparison_table(run, cfg.format));
    return run;
}

// -------------------------------------------------------------------------
// compare: the fixed-budget protocol. The adaptive policy, sliding window,
// and sink+window all get the same token budget; windows realize it after
// whole-scale rounding and the table flags any gap.

inline ExperimentConfig matched_budget_config(const ExperimentConfig& base,
                                              long long equal_budget) {
    const long long cds_tokens = base.budget.condensed_tokens(base.model.schedule);
    if (equal_budget <= cds_tokens) {
        throw ConfigError("compare: equal_budget " + std::to_string(equal_budget) +
                          " not realizable; must exceed condensed tokens (" +
                          std::to_string(cds_tokens) + ")");
    }
    ExperimentConfig cfg = base;
    cfg.compare_oracle = true;
    cfg.policies.clear();

    // Adaptive policy pinned to the shared budget: C_min = C_max = B.
    BudgetSpec fixed = base.budget;
    fixed.c_min = fixed.c_max = equal_budget;
    PolicyEntry ams{"ams_kv", AmsKvPolicy{}, fixed};
    PolicyEntry swa{"sliding_window", SlidingWindowPolicy{equal_budget}, std::nullopt};
    PolicyEntry sta{"sink_window",
                    SinkWindowPolicy{std::max(cds_tokens, 1ll), equal_budget - cds_tokens},
                    std::nullopt};
    cfg.policies = {ams, swa, sta};
    return cfg;
}

inline RunOutput compare_policies(const ExperimentConfig& base, long long equal_budget,
                                  const fs::path& out_dir) {
    const ExperimentConfig cfg = matched_budget_config(base, equal_budget);
    RunOutput run = run_experiment(cfg, out_dir);

    std::ostringstream out;
    out << "schema_version,policy,seed,equal_budget_tokens,realized_peak_tokens,"
           "budget_mismatch,attn_flops,flop_ratio_vs_full,fidelity_rel_l2_mean,"
           "fidelity_cosine_mean\n";
    for (const PolicyRun& p : run.policies) {
        for (const SeedResult& s : p.seeds) {
            out << kSchemaVersion << ',' << p.entry.name << ',' << s.seed << ',' << equal_budget
                << ',' << s.realized_peak_tokens << ','
                << (s.realized_peak_tokens != equal_budget ? 1 : 0) << ',' << s.attn_flops << ','
                << format_double(s.flop_ratio_vs_full) << ','
                << format_double(s.fidelity_rel_l2_mean.value_or(0.0)) << ','
                << format_double(s.fidelity_cosine_mean.value_or(1.0)) << '\n';
        }
    }
    detail::write_text_file(out_dir / "compare.csv", out.str());
    return run;
}

// -------------------------------------------------------------------------
// analyze: density heatmap data at a target scale plus the per-layer
// inter-scale similarity table, from one full-cache generation.

struct AnalyzeOutput {
    DensityTable density;  // averaged across layers
    std::vector<std::vector<double>> sim_joint;  // [layer][scale-2]
    std::vector<std::vector<double>> sim_rms;
    fs::path density_path;
    fs::path similarity_path;
};

namespace detail {

// Teacher-forced full-cache pass that materializes attention slices at one
// scale. Inputs replay the tokens chosen by the deterministic full-cache
// generation, so hidden states match that run exactly.
inline std::vector<DensityTable> density_at_scale(const ToyModel& model,
                                                  const std::vector<std::vector<int>>& tokens,
                                                  int target_scale) {
    const ScaleSchedule& schedule = model.config.schedule;
    const int n_layers = model.config.n_layers;
    std::vector<std::vector<KVBlock>> blocks(n_layers);
    std::vector<DensityTable> per_layer;

    std::vector<std::vector<int>> tokens_so_far;
    for (int scale = 1; scale <= target_scale; ++scale) {
        const int side = schedule.side(scale);
        Matrix hidden = scale_input(model, scale, tokens_so_far);
        for (int l = 0; l < n_layers; ++l) {
            const LayerWeights& w = model.layers[l];
            KVBlock block = project_block(model, w, hidden, scale, side);
            const std::vector<Matrix> q_heads =
                split_heads(matmul(hidden, w.wq), model.config.n_heads);
            std::vector<const KVBlock*> ctx;
            for (const KVBlock& b : blocks[l]) ctx.push_back(&b);
            ctx.push_back(&block);
            const bool want_slices = scale == target_scale;
            const AttentionOutput att = block_attention(q_heads, ctx, want_slices);
            if (want_slices) {
                std::vector<int> context_scales(scale);
                std::iota(context_scales.begin(), context_scales.end(), 1);
                per_layer.push_back(attention_density(att.slices, context_scales, scale));
            }
            const Matrix merged = merge_heads(att.outputs);
            const Matrix projected = matmul(merged, w.wo);
            for (size_t idx = 0; idx < hidden.data.size(); ++idx) {
                hidden.data[idx] += projected.data[idx];
            }
            blocks[l].push_back(std::move(block));
        }
        tokens_so_far.push_back(tokens[scale - 1]);
    }
    return per_layer;
}

inline DensityTable average_density(const std::vector<DensityTable>& per_layer) {
    DensityTable avg = per_layer.front();
    for (size_t l = 1; l < per_layer.size(); ++l) {
        for (int h = 0; h < avg.n_heads(); ++h) {
            for (size_t i = 0; i < avg.density[h].size(); ++i) {
                avg.density[h][i] += per_layer[l].density[h][i];
            }
        }
    }
    for (auto& row : avg.density) {
        for (double& v : row) v /= static_cast<double>(per_layer.size());
    }
    return avg;
}

}  // namespace detail

inline AnalyzeOutput analyze(const ExperimentConfig& cfg, int target_scale,
                             const fs::path& out_dir) {
    cfg.validate();
    const int k = cfg.model.schedule.num_scales();
    if (target_scale < 1 || target_scale > k) {
        throw ConfigError("analyze: target scale must be in 1.." + std::to_string(k));
    }
    fs::create_directories(out_dir);

    ToyModelConfig mc = cfg.model;
    mc.seed = cfg.seeds.front();
    const ToyModel model = init_model(mc);
    const GenerationTrace gen = generate(model, FullCachePolicy{}, cfg.budget, false);
    const std::vector<DensityTable> per_layer =
        detail::density_at_scale(model, gen.tokens, target_scale);

    AnalyzeOutput out;
    out.density = detail::average_density(per_layer);
    out.sim_joint = gen.sim_joint;
    out.sim_rms = gen.sim_rms;

    // Preceding scales only; the conservation column (per head) also counts
    // the current scale's own slice and therefore sums to T_target.
    std::ostringstream density_csv;
    density_csv << "schema_version,head,scale,density,conservation\n";
    for (int h = 0; h < out.density.n_heads(); ++h) {
        const double conservation = out.density.conservation(h);
        for (int i = 0; i < target_scale - 1; ++i) {
            density_csv << kSchemaVersion << ',' << h << ',' << out.density.context_scales[i]
                        << ',' << format_double(out.density.density[h][i]) << ','
                        << format_double(conservation) << '\n';
        }
    }
    out.density_path = out_dir / "density.csv";
    detail::write_text_file(out.density_path, density_csv.str());

    std::ostringstream sim_csv;
    sim_csv << "schema_version,layer,scale,similarity,similarity_rms\n";
    for (int l = 0; l < cfg.model.n_layers; ++l) {
        for (int scale = 2; scale <= k; ++scale) {
            sim_csv << kSchemaVersion << ',' << l << ',' << scale << ','
                    << format_double(out.sim_joint[l][scale - 2]) << ','
                    << format_double(out.sim_rms[l][scale - 2]) << '\n';
        }
    }
    out.similarity_path = out_dir / "similarity.csv";
    detail::write_text_file(out.similarity_path, sim_csv.str());
    return out;
}

// -------------------------------------------------------------------------
// timeline: per-step cached tokens, working set, and analytic bytes.

inline fs::path write_timeline(const ExperimentConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    const MemoryModel mm =
        cfg.model.memory_model(cfg.bytes_per_element);

    std::ostringstream out;
    out << "schema_version,policy,seed,scale,cached_tokens_total,cached_tokens_mean,"
           "working_tokens,kv_bytes_cached,kv_bytes_working\n";
    for (const PolicyEntry& entry : cfg.policies) {
        const BudgetSpec spec = cfg.spec_for(entry);
        for (uint64_t seed : cfg.seeds) {
            ToyModelConfig mc = cfg.model;
            mc.seed = seed;
            const ToyModel model = init_model(mc);
            const GenerationTrace gen = generate(model, entry.kind, spec, false);

            std::vector<long long> per_scale_total(cfg.model.schedule.num_scales(), 0);
            for (const StepRecord& s : gen.steps) per_scale_total[s.scale - 1] += s.cached_after;
            for (int scale = 1; scale <= cfg.model.schedule.num_scales(); ++scale) {
                const long long total = per_scale_total[scale - 1];
                const long long working = cfg.model.schedule.tokens(scale);
                out << kSchemaVersion << ',' << entry.name << ',' << seed << ',' << scale << ','
                    << total << ','
                    << format_double(static_cast<double>(total) / cfg.model.n_layers) << ','
                    << working << ',' << kv_bytes_fleet(total, mm) << ','
                    << kv_bytes_fleet(working * cfg.model.n_layers, mm) << '\n';
            }
        }
    }
    const fs::path path = out_dir / "timeline.csv";
    detail::write_text_file(path, out.str());
    return path;
}

}  // namespace amskv
