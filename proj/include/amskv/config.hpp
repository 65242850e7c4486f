#pragma once

// Declarative experiment configuration: a single JSON document describing the
// toy model, schedule, budgets, policies, and seeds. Parsing is strict and
// validation errors name the offending field.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "amskv/jsonio.hpp"
#include "amskv/schedule.hpp"
#include "amskv/toymodel.hpp"
#include "amskv/version.hpp"

namespace amskv {

struct PolicyEntry {
    std::string name;  // unique within the config; defaults to the kind
    PolicyKind kind = FullCachePolicy{};
    std::optional<BudgetSpec> budget_override;  // explicit budgets for sweeps
};

struct ExperimentConfig {
    ToyModelConfig model;
    bool default_budget_rule = true;
    BudgetSpec budget;  // resolved: rule applied, theta merged in
    std::vector<PolicyEntry> policies;
    std::vector<uint64_t> seeds;
    bool compare_oracle = true;
    int bytes_per_element = 2;
    std::string format = "csv";  // comparison table: "csv" or "json-lines"

    BudgetSpec spec_for(const PolicyEntry& entry) const {
        if (entry.budget_override.has_value()) {
            BudgetSpec s = *entry.budget_override;
            s.theta = budget.theta;  // theta mode is experiment-wide
            return s;
        }
        return budget;
    }

    void validate() const {
        model.validate();
        budget.validate(model.schedule);
        if (policies.empty()) throw ConfigError("config needs at least one policy");
        if (seeds.empty()) throw ConfigError("config needs at least one seed");
        if (bytes_per_element <= 0) throw ConfigError("bytes_per_element must be positive");
        if (format != "csv" && format != "json-lines") {
            throw ConfigError("format must be 'csv' or 'json-lines'");
        }
        std::set<std::string> names;
        for (const PolicyEntry& p : policies) {
            if (!names.insert(p.name).second) {
                throw ConfigError("duplicate policy name '" + p.name + "'");
            }
            spec_for(p).validate(model.schedule);
        }
    }
};

namespace detail {

template <typename T>
T field(const Json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError("config: missing field '" + key + "' in " + where);
    try {
        return j.at(key).get<T>();
    } catch (const Json::exception&) {
        throw ConfigError("config: field '" + key + "' in " + where + " has the wrong type");
    }
}

template <typename T>
T field_or(const Json& j, const std::string& key, const std::string& where, T fallback) {
    if (!j.contains(key)) return fallback;
    return field<T>(j, key, where);
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const Json& j) {
    ExperimentConfig cfg;
    const int schema = detail::field_or<int>(j, "schema_version", "config", kSchemaVersion);
    if (schema != kSchemaVersion) {
        throw ConfigError("config: unsupported schema_version " + std::to_string(schema));
    }

    if (j.contains("schedule")) {
        cfg.model.schedule = ScaleSchedule(detail::field<std::vector<int>>(j, "schedule", "config"));
    }
    if (j.contains("model")) {
        const Json& m = j.at("model");
        cfg.model.n_layers = detail::field_or<int>(m, "n_layers", "model", cfg.model.n_layers);
        cfg.model.n_heads = detail::field_or<int>(m, "n_heads", "model", cfg.model.n_heads);
        cfg.model.head_dim = detail::field_or<int>(m, "head_dim", "model", cfg.model.head_dim);
        cfg.model.vocab_size =
            detail::field_or<int>(m, "vocab_size", "model", cfg.model.vocab_size);
        cfg.model.seed = detail::field_or<uint64_t>(m, "seed", "model", cfg.model.seed);
    }
    cfg.model.validate();

    ThetaMode theta;
    if (j.contains("theta")) theta = theta_from_json(j.at("theta"));

    if (j.contains("budget")) {
        const Json& b = j.at("budget");
        const std::string rule = detail::field_or<std::string>(b, "rule", "budget", "default");
        if (rule == "default") {
            cfg.default_budget_rule = true;
            cfg.budget = derive_budgets(cfg.model.schedule);
        } else if (rule == "explicit") {
            cfg.default_budget_rule = false;
            cfg.budget.c_min = detail::field<long long>(b, "c_min", "budget");
            cfg.budget.c_max = detail::field<long long>(b, "c_max", "budget");
            cfg.budget.c_cds_count = detail::field<int>(b, "c_cds_count", "budget");
        } else {
            throw ConfigError("config: budget.rule must be 'default' or 'explicit'");
        }
    } else {
        cfg.budget = derive_budgets(cfg.model.schedule);
    }
    cfg.budget.theta = theta;
    cfg.budget.validate(cfg.model.schedule);

    if (!j.contains("policies")) throw ConfigError("config: missing field 'policies'");
    std::set<std::string> used_names;
    int index = 0;
    for (const Json& pj : j.at("policies")) {
        const std::string where = "policies[" + std::to_string(index++) + "]";
        PolicyEntry entry;
        try {
            entry.kind = policy_from_json(pj);
        } catch (const Json::exception&) {
            throw ConfigError("config: bad policy object at " + where);
        }
        entry.name = detail::field_or<std::string>(pj, "name", where, policy_kind_name(entry.kind));
        while (!used_names.insert(entry.name).second) {
            entry.name += "_" + std::to_string(index);
        }
        if (pj.contains("budget")) {
            BudgetSpec b = budget_from_json(pj.at("budget"));
            b.theta = theta;
            entry.budget_override = b;
        }
        cfg.policies.push_back(std::move(entry));
    }

    cfg.seeds = detail::field_or<std::vector<uint64_t>>(j, "seeds", "config", {cfg.model.seed});
    cfg.compare_oracle = detail::field_or<bool>(j, "compare_oracle", "config", true);
    cfg.bytes_per_element =
        detail::field_or<int>(j, "bytes_per_element", "config", cfg.bytes_per_element);
    cfg.format = detail::field_or<std::string>(j, "format", "config", cfg.format);

    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return parse_experiment_config(j);
}

// Canonical semantic dump: everything that affects results, nothing that only
// affects presentation (output paths, table format).
inline Json canonical_config_json(const ExperimentConfig& cfg) {
    Json policies = Json::array();
    for (const PolicyEntry& p : cfg.policies) {
        Json pj{{"name", p.name}, {"policy", policy_to_json(p.kind)}};
        if (p.budget_override.has_value()) pj["budget"] = budget_to_json(*p.budget_override);
        policies.push_back(pj);
    }
    return Json{{"budget", budget_to_json(cfg.budget)},
                {"bytes_per_element", cfg.bytes_per_element},
                {"compare_oracle", cfg.compare_oracle},
                {"model", Json{{"head_dim", cfg.model.head_dim},
                               {"n_heads", cfg.model.n_heads},
                               {"n_layers", cfg.model.n_layers},
                               {"seed", cfg.model.seed},
                               {"vocab_size", cfg.model.vocab_size}}},
                {"policies", policies},
                {"schedule", cfg.model.schedule.sides()},
                {"schema_version", kSchemaVersion},
                {"seeds", cfg.seeds}};
}

inline std::string config_hash(const ExperimentConfig& cfg) {
    return fnv1a_hex(canonical_config_json(cfg).dump());
}

}  // namespace amskv
