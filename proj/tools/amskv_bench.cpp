// amskv-bench: experiment harness for the adaptive multi-scale KV caching
// library. Subcommands: run, compare, analyze, timeline, validate-trace.
// Exit codes: 0 success, 1 configuration error, 2 runtime invariant violation.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "amskv/bench.hpp"
#include "amskv/config.hpp"
#include "amskv/trace.hpp"
#include "amskv/version.hpp"

namespace {

amskv::ExperimentConfig load_config(const std::string& path,
                                    const std::optional<uint64_t>& seed_override,
                                    const std::string& format_override) {
    amskv::ExperimentConfig cfg = amskv::load_experiment_config(path);
    if (seed_override.has_value()) cfg.seeds = {*seed_override};
    if (!format_override.empty()) cfg.format = format_override;
    cfg.validate();
    return cfg;
}

void print_run_summary(const amskv::RunOutput& run) {
    for (const amskv::PolicyRun& p : run.policies) {
        for (const amskv::SeedResult& s : p.seeds) {
            std::cout << p.entry.name << " seed=" << s.seed
                      << " final_cached_total=" << s.final_cached_total
                      << " kv_bytes_final=" << s.kv_bytes_final
                      << " flop_ratio=" << amskv::format_double(s.flop_ratio_vs_full);
            if (s.fidelity_rel_l2_mean.has_value()) {
                std::cout << " fidelity_rel_l2="
                          << amskv::format_double(*s.fidelity_rel_l2_mean);
            }
            std::cout << "\n";
        }
        std::cout << "report: " << p.report_path.string() << "\n";
    }
    std::cout << "comparison: " << run.comparison_path.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adaptive multi-scale KV cache benchmark harness"};
    app.set_version_flag("--version", std::string(amskv::kToolVersion));
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::string format;
    std::optional<uint64_t> seed_override;

    const auto add_common = [&](CLI::App* cmd, bool needs_config) {
        auto* opt = cmd->add_option("--config", config_path, "experiment config file (JSON)");
        if (needs_config) opt->required();
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--seed", seed_override, "override the config's seed list");
        cmd->add_option("--format", format, "comparison table format")
            ->check(CLI::IsMember({"csv", "json-lines"}));
    };

    auto* run_cmd = app.add_subcommand("run", "run every configured (policy, seed)");
    add_common(run_cmd, true);

    auto* compare_cmd =
        app.add_subcommand("compare", "adaptive vs window baselines at one shared budget");
    add_common(compare_cmd, true);
    long long equal_budget = 0;
    compare_cmd->add_option("--budget", equal_budget, "shared token budget")->required();

    auto* analyze_cmd =
        app.add_subcommand("analyze", "attention density and inter-scale similarity tables");
    add_common(analyze_cmd, true);
    int target_scale = 0;  // 0 = last scale
    analyze_cmd->add_option("--scale", target_scale, "generating scale to analyze (default: last)");

    auto* timeline_cmd = app.add_subcommand("timeline", "per-step cached/working memory table");
    add_common(timeline_cmd, true);

    auto* validate_cmd = app.add_subcommand("validate-trace", "check a stored trace's invariants");
    std::string trace_path;
    validate_cmd->add_option("--trace", trace_path, "trace file (.jsonl)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (run_cmd->parsed()) {
            const auto cfg = load_config(config_path, seed_override, format);
            print_run_summary(amskv::run_experiment(cfg, out_dir));
        } else if (compare_cmd->parsed()) {
            const auto cfg = load_config(config_path, seed_override, format);
            const amskv::RunOutput run = amskv::compare_policies(cfg, equal_budget, out_dir);
            print_run_summary(run);
            std::cout << "compare table: " << (out_dir + "/compare.csv") << "\n";
        } else if (analyze_cmd->parsed()) {
            const auto cfg = load_config(config_path, seed_override, format);
            const int scale =
                target_scale == 0 ? cfg.model.schedule.num_scales() : target_scale;
            const amskv::AnalyzeOutput out = amskv::analyze(cfg, scale, out_dir);
            std::cout << "density: " << out.density_path.string() << "\n"
                      << "similarity: " << out.similarity_path.string() << "\n";
        } else if (timeline_cmd->parsed()) {
            const auto cfg = load_config(config_path, seed_override, format);
            std::cout << "timeline: " << amskv::write_timeline(cfg, out_dir).string() << "\n";
        } else if (validate_cmd->parsed()) {
            amskv::validate_trace(amskv::load_trace(trace_path));
            std::cout << "trace ok: " << trace_path << "\n";
        }
    } catch (const amskv::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const amskv::InvariantError& e) {
        std::cerr << "invariant violation: " << e.what() << "\n";
        return 2;
    } catch (const amskv::ProtocolError& e) {
        std::cerr << "protocol error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
