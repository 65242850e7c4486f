#pragma once

// Line-delimited trace format for generation runs, plus an independent
// structural validator. The validator re-derives cache contents from the
// decision stream alone and checks every policy invariant; it shares no
// state with the cache engine it audits.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "amskv/jsonio.hpp"
#include "amskv/toymodel.hpp"
#include "amskv/version.hpp"

namespace amskv {

struct TraceHeader {
    int schema_version = kSchemaVersion;
    std::string tool_version = std::string(kToolVersion);
    std::string config_hash;
    std::string policy_name;  // display name; `policy` holds the parameters
    PolicyKind policy = FullCachePolicy{};
    ScaleSchedule schedule = ScaleSchedule::default_schedule();
    BudgetSpec spec;
    int n_layers = 0;
    int n_heads = 0;
    int head_dim = 0;
    int vocab_size = 0;
    int bytes_per_element = 2;
    uint64_t seed = 0;
    bool compare_oracle = false;
    std::vector<bool> large_alloc;
};

struct ScaleRecord {
    int scale = 0;
    int side = 0;
    std::vector<int> tokens;
    std::optional<FidelityEntry> fidelity;
    unsigned long long flops = 0;
};

struct TraceSummary {
    std::vector<long long> peak_cached;
    std::vector<long long> final_cached;
    std::vector<long long> budget_final;
    std::vector<bool> demanding;
    unsigned long long attn_flops = 0;
};

struct TraceData {
    TraceHeader header;
    std::vector<StepRecord> steps;
    std::vector<ScaleRecord> scales;    // absent for synthetic decision streams
    std::optional<TraceSummary> summary;
};

// -------------------------------------------------------------------------
// Assembly and serialization.

inline TraceData make_trace(const TraceHeader& header, const GenerationTrace& gen) {
    TraceData t;
    t.header = header;
    t.header.large_alloc = gen.large_alloc;
    t.steps = gen.steps;
    for (size_t i = 0; i < gen.tokens.size(); ++i) {
        ScaleRecord rec;
        rec.scale = static_cast<int>(i) + 1;
        rec.side = header.schedule.side(rec.scale);
        rec.tokens = gen.tokens[i];
        rec.flops = gen.flops_per_scale[i];
        if (i < gen.fidelity.size()) rec.fidelity = gen.fidelity[i];
        t.scales.push_back(std::move(rec));
    }
    TraceSummary s;
    s.peak_cached = gen.peak_cached;
    s.final_cached = gen.final_cached;
    s.budget_final = gen.budget_final;
    s.demanding = gen.demanding;
    s.attn_flops = gen.attn_flops;
    t.summary = s;
    return t;
}

inline std::string trace_to_jsonl(const TraceData& t) {
    std::ostringstream out;
    Json header{{"record", "header"},
                {"schema_version", t.header.schema_version},
                {"tool_version", t.header.tool_version},
                {"config_hash", t.header.config_hash},
                {"policy_name", t.header.policy_name},
                {"policy", policy_to_json(t.header.policy)},
                {"schedule", t.header.schedule.sides()},
                {"budget", budget_to_json(t.header.spec)},
                {"n_layers", t.header.n_layers},
                {"n_heads", t.header.n_heads},
                {"head_dim", t.header.head_dim},
                {"vocab_size", t.header.vocab_size},
                {"bytes_per_element", t.header.bytes_per_element},
                {"seed", t.header.seed},
                {"compare_oracle", t.header.compare_oracle}};
    if (!t.header.large_alloc.empty()) header["large_alloc"] = t.header.large_alloc;
    out << header.dump() << "\n";

    for (const StepRecord& s : t.steps) {
        Json j{{"record", "step"},     {"scale", s.scale},
               {"layer", s.layer},     {"decision", to_string(s.decision)},
               {"evicted", s.evicted}, {"cached", s.cached_after},
               {"budget", s.budget_after}, {"context", s.context_tokens}};
        if (s.similarity.has_value()) j["similarity"] = *s.similarity;
        if (s.guard_demanding.has_value()) j["guard_demanding"] = *s.guard_demanding;
        out << j.dump() << "\n";
    }
    for (const ScaleRecord& s : t.scales) {
        Json j{{"record", "scale"},
               {"scale", s.scale},
               {"side", s.side},
               {"tokens", s.tokens},
               {"flops", s.flops}};
        if (s.fidelity.has_value()) {
            j["fidelity"] = Json{{"cosine", s.fidelity->cosine}, {"rel_l2", s.fidelity->rel_l2}};
        }
        out << j.dump() << "\n";
    }
    if (t.summary.has_value()) {
        out << Json{{"record", "summary"},
                    {"peak_cached", t.summary->peak_cached},
                    {"final_cached", t.summary->final_cached},
                    {"budget_final", t.summary->budget_final},
                    {"demanding", t.summary->demanding},
                    {"attn_flops", t.summary->attn_flops}}
                   .dump()
            << "\n";
    }
    return out.str();
}

inline TraceData trace_from_jsonl(std::istream& in) {
    TraceData t;
    bool saw_header = false;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const Json::parse_error& e) {
            throw ConfigError(std::string("trace parse error: ") + e.what());
        }
        const std::string record = j.at("record").get<std::string>();
        if (record == "header") {
            t.header.schema_version = j.at("schema_version").get<int>();
            if (t.header.schema_version != kSchemaVersion) {
                throw ConfigError("unsupported trace schema_version " +
                                  std::to_string(t.header.schema_version));
            }
            t.header.tool_version = j.at("tool_version").get<std::string>();
            t.header.config_hash = j.at("config_hash").get<std::string>();
            t.header.policy_name = j.at("policy_name").get<std::string>();
            t.header.policy = policy_from_json(j.at("policy"));
            t.header.schedule = ScaleSchedule(j.at("schedule").get<std::vector<int>>());
            t.header.spec = budget_from_json(j.at("budget"));
            t.header.n_layers = j.at("n_layers").get<int>();
            t.header.n_heads = j.at("n_heads").get<int>();
            t.header.head_dim = j.at("head_dim").get<int>();
            t.header.vocab_size = j.at("vocab_size").get<int>();
            t.header.bytes_per_element = j.at("bytes_per_element").get<int>();
            t.header.seed = j.at("seed").get<uint64_t>();
            t.header.compare_oracle = j.at("compare_oracle").get<bool>();
            if (j.contains("large_alloc")) {
                t.header.large_alloc = j.at("large_alloc").get<std::vector<bool>>();
            }
            saw_header = true;
        } else if (record == "step") {
            StepRecord s;
            s.scale = j.at("scale").get<int>();
            s.layer = j.at("layer").get<int>();
            s.decision = decision_from_string(j.at("decision").get<std::string>());
            s.evicted = j.at("evicted").get<std::vector<int>>();
            s.cached_after = j.at("cached").get<long long>();
            s.budget_after = j.at("budget").get<long long>();
            s.context_tokens = j.at("context").get<long long>();
            if (j.contains("similarity")) s.similarity = j.at("similarity").get<double>();
            if (j.contains("guard_demanding")) {
                s.guard_demanding = j.at("guard_demanding").get<bool>();
            }
            t.steps.push_back(std::move(s));
        } else if (record == "scale") {
            ScaleRecord s;
            s.scale = j.at("scale").get<int>();
            s.side = j.at("side").get<int>();
            s.tokens = j.at("tokens").get<std::vector<int>>();
            s.flops = j.at("flops").get<unsigned long long>();
            if (j.contains("fidelity")) {
                FidelityEntry f;
                f.scale = s.scale;
                f.rel_l2 = j.at("fidelity").at("rel_l2").get<double>();
                f.cosine = j.at("fidelity").at("cosine").get<double>();
                s.fidelity = f;
            }
            t.scales.push_back(std::move(s));
        } else if (record == "summary") {
            TraceSummary s;
            s.peak_cached = j.at("peak_cached").get<std::vector<long long>>();
            s.final_cached = j.at("final_cached").get<std::vector<long long>>();
            s.budget_final = j.at("budget_final").get<std::vector<long long>>();
            s.demanding = j.at("demanding").get<std::vector<bool>>();
            s.attn_flops = j.at("attn_flops").get<unsigned long long>();
            t.summary = s;
        } else {
            throw ConfigError("unknown trace record type: '" + record + "'");
        }
    }
    if (!saw_header) throw ConfigError("trace has no header record");
    return t;
}

inline TraceData load_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open trace file: " + path);
    return trace_from_jsonl(in);
}

// -------------------------------------------------------------------------
// Validator.

namespace detail {

struct ReplayCache {
    std::vector<std::pair<int, long long>> content;  // (scale, tokens), insertion order
    long long total = 0;
    long long budget = 0;
    bool expanded = false;
    int last_scale = 0;
};

inline void fail(const std::string& what, const StepRecord& s) {
    throw InvariantError("trace violation at scale " + std::to_string(s.scale) + " layer " +
                         std::to_string(s.layer) + ": " + what);
}

}  // namespace detail

// Replays the decision stream and throws InvariantError on the first breach:
// out-of-order scales, a cache exceeding its budget, an evicted condensed or
// pinned scale, non-FIFO eviction, a second budget expansion, an expansion
// without a demanding guard verdict, or a skip rule applied out of place.
inline void validate_trace(const TraceData& t) {
    const TraceHeader& h = t.header;
    const ScaleSchedule& schedule = h.schedule;
    const BudgetSpec& spec = h.spec;
    const long long total = schedule.total_tokens();
    const bool is_amskv = std::holds_alternative<AmsKvPolicy>(h.policy);

    // Per-layer budget bounds implied by the policy.
    const auto layer_budgets = [&](int layer) -> std::pair<long long, long long> {
        if (is_amskv) return {spec.c_min, spec.c_max};
        if (const auto* alloc = std::get_if<StaticAllocPolicy>(&h.policy)) {
            const bool large = layer < static_cast<int>(h.large_alloc.size()) &&
                               h.large_alloc[layer];
            (void)alloc;
            const long long b = large ? spec.c_max : spec.c_min;
            return {b, b};
        }
        return {total, total};  // full cache, ablation; windows handled separately
    };

    const auto* sliding = std::get_if<SlidingWindowPolicy>(&h.policy);
    const auto* sink = std::get_if<SinkWindowPolicy>(&h.policy);
    int pinned_prefix = 0;
    if (sink != nullptr) {
        long long acc = 0;
        for (int i = 1; i <= schedule.num_scales(); ++i) {
            acc += schedule.tokens(i);
            if (acc > sink->sink_tokens) break;
            pinned_prefix = i;
        }
    }

    std::map<int, detail::ReplayCache> layers;
    for (const StepRecord& s : t.steps) {
        detail::ReplayCache& rc = layers[s.layer];
        if (rc.last_scale == 0 && s.scale == 1) {
            rc.budget = sliding || sink ? 0 : layer_budgets(s.layer).first;
        }
        if (s.scale != rc.last_scale + 1) detail::fail("scales not sequential", s);
        rc.last_scale = s.scale;
        const long long ti = schedule.tokens(s.scale);

        if (s.context_tokens != rc.total + ti) detail::fail("context != cached + current", s);

        const bool caches = decision_caches_block(s.decision);
        const long long before = rc.total;

        // Apply evictions FIFO: each evicted entry must be the oldest
        // eligible block at its turn.
        if (caches || sliding || sink) {
            if (caches) {
                rc.content.emplace_back(s.scale, ti);
                rc.total += ti;
            }
            for (int evicted_scale : s.evicted) {
                size_t oldest = rc.content.size();
                for (size_t i = 0; i < rc.content.size(); ++i) {
                    const int sc = rc.content[i].first;
                    const bool protected_scale =
                        (sliding || sink) ? sc <= pinned_prefix : sc <= spec.c_cds_count;
                    if (!protected_scale) {
                        oldest = i;
                        break;
                    }
                }
                if (oldest == rc.content.size()) detail::fail("eviction with no eligible block", s);
                if (rc.content[oldest].first != evicted_scale) {
                    detail::fail("eviction not FIFO: evicted " + std::to_string(evicted_scale) +
                                     " but oldest eligible is " +
                                     std::to_string(rc.content[oldest].first),
                                 s);
                }
                rc.total -= rc.content[oldest].second;
                rc.content.erase(rc.content.begin() + static_cast<long>(oldest));
            }
        } else if (!s.evicted.empty()) {
            detail::fail("skip decision must not evict", s);
        }

        if (rc.total != s.cached_after) detail::fail("cached token count mismatch", s);

        // Policy-specific budget rules.
        if (sliding || sink) {
            const long long window = sliding ? sliding->window_tokens : sink->window_tokens;
            long long unpinned = 0;
            for (const auto& [sc, tok] : rc.content) {
                if (sc > pinned_prefix) unpinned += tok;
            }
            if (unpinned > window) detail::fail("window overflow", s);
        } else {
            const auto [bmin, bmax] = layer_budgets(s.layer);
            if (s.budget_after != bmin && s.budget_after != bmax) {
                detail::fail("budget outside {C_min, C_max}", s);
            }
            if (s.budget_after < rc.budget) detail::fail("budget shrank", s);
            if (s.budget_after > rc.budget) {
                if (s.decision != DecisionKind::ExpandedThenCached) {
                    detail::fail("budget grew without an expansion decision", s);
                }
            }
            if (s.decision == DecisionKind::ExpandedThenCached) {
                if (rc.expanded) detail::fail("second budget expansion", s);
                if (rc.budget != spec.c_min || bmin == bmax) {
                    detail::fail("expansion from a non-C_min budget", s);
                }
                if (s.scale < 2) detail::fail("expansion at scale 1", s);
                if (before + ti <= spec.c_min) detail::fail("expansion without overflow", s);
                if (!s.guard_demanding.value_or(false)) {
                    detail::fail("expansion without a demanding guard verdict", s);
                }
                if (s.similarity.has_value() && spec.theta.kind == ThetaMode::Kind::Absolute &&
                    !(*s.similarity < spec.theta.value)) {
                    detail::fail("expansion with similarity >= theta", s);
                }
                rc.expanded = true;
            }
            rc.budget = s.budget_after;
            if (rc.total > rc.budget) detail::fail("cached tokens exceed budget", s);

            // Skip rules (adaptive and fixed-budget policies only).
            if (s.decision == DecisionKind::SkippedExceedsCmax && !(ti > bmax)) {
                detail::fail("C_max skip for a block within C_max", s);
            }
            if (ti > bmax && s.decision != DecisionKind::SkippedExceedsCmax) {
                detail::fail("block above C_max was not skipped", s);
            }
            if (s.decision == DecisionKind::SkippedExceedsBudget) {
                if (!(before + ti > rc.budget)) detail::fail("budget skip without overflow", s);
                if (!(ti > rc.budget)) detail::fail("budget skip for a block that fits", s);
            }
            if (s.decision == DecisionKind::Cached && before + ti > rc.budget) {
                detail::fail("plain Cached despite overflow", s);
            }
        }

        // Condensed pinning (never listed as evicted).
        if (!(sliding || sink)) {
            for (int evicted_scale : s.evicted) {
                if (evicted_scale <= spec.c_cds_count) {
                    detail::fail("condensed scale evicted", s);
                }
            }
        }
    }

    // Cross-check the summary if present.
    if (t.summary.has_value()) {
        for (const auto& [layer, rc] : layers) {
            if (layer < static_cast<int>(t.summary->final_cached.size()) &&
                t.summary->final_cached[layer] != rc.total) {
                throw InvariantError("trace summary final_cached mismatch at layer " +
                                     std::to_string(layer));
            }
        }
    }
}

}  // namespace amskv
