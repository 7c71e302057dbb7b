#include "gradselect/config.hpp"

#include <fstream>
#include <set>

#include "gradselect/error.hpp"

namespace gradselect {

namespace {

using nlohmann::json;

void check_keys(const json& section, const char* name, const std::set<std::string>& allowed) {
    if (!section.is_object()) throw UsageError(std::string("config section '") + name + "' must be an object");
    for (const auto& [k, v] : section.items())
        if (!allowed.contains(k))
            throw UsageError(std::string("unknown config key '") + name + "." + k + "'");
}

template <typename T>
void read(const json& s, const char* key, T& out) {
    if (auto it = s.find(key); it != s.end()) out = it->get<T>();
}

// A scalar or a list; lists feed the sweep grid and the first value is the default.
void read_sweepable(const json& s, const char* key, double& out, std::vector<double>& grid) {
    auto it = s.find(key);
    if (it == s.end()) return;
    if (it->is_array()) {
        grid = it->get<std::vector<double>>();
        if (grid.empty()) throw UsageError(std::string("empty sweep list for '") + key + "'");
        out = grid.front();
    } else {
        out = it->get<double>();
    }
}

std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
    if (p.empty()) return {};
    std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

std::vector<double> or_single(const std::vector<double>& v, double fallback) {
    return v.empty() ? std::vector<double>{fallback} : v;
}

}  // namespace

nlohmann::json synth_to_json(const SynthConfig& c) {
    return {{"n_items", c.n_items},
            {"terms_per_item", c.terms_per_item},
            {"vocab_size", c.vocab_size},
            {"query_terms", c.query_terms},
            {"queries_per_item", c.queries_per_item},
            {"unseen_rate", c.unseen_rate},
            {"spe_rate", c.spe_rate},
            {"distractor_sentences", c.distractor_sentences},
            {"filler_terms", c.filler_terms},
            {"true_sentences", c.true_sentences},
            {"common_terms", c.common_terms},
            {"n_topics", c.n_topics},
            {"topic_bias", c.topic_bias},
            {"zipf_exponent", c.zipf_exponent},
            {"seed", c.seed}};
}

SynthConfig synth_from_json(const nlohmann::json& s) {
    check_keys(s, "synth",
               {"n_items", "terms_per_item", "vocab_size", "query_terms", "queries_per_item", "unseen_rate", "spe_rate",
                "distractor_sentences", "filler_terms", "true_sentences", "common_terms", "n_topics",
                "topic_bias", "zipf_exponent", "seed"});
    SynthConfig c;
    read(s, "n_items", c.n_items);
    read(s, "terms_per_item", c.terms_per_item);
    read(s, "vocab_size", c.vocab_size);
    read(s, "query_terms", c.query_terms);
    read(s, "queries_per_item", c.queries_per_item);
    read(s, "unseen_rate", c.unseen_rate);
    read(s, "spe_rate", c.spe_rate);
    read(s, "distractor_sentences", c.distractor_sentences);
    read(s, "filler_terms", c.filler_terms);
    read(s, "true_sentences", c.true_sentences);
    read(s, "common_terms", c.common_terms);
    read(s, "n_topics", c.n_topics);
    read(s, "topic_bias", c.topic_bias);
    read(s, "zipf_exponent", c.zipf_exponent);
    read(s, "seed", c.seed);
    c.validate();
    return c;
}

void PipelineConfig::validate() const {
    if (!(data.eval_fraction > 0.0 && data.eval_fraction < 1.0))
        throw UsageError("data.eval_fraction must be in (0, 1)");
    if (data.top_n < 1) throw UsageError("data.top_n must be >= 1");
    if (data.min_count < 1) throw UsageError("data.min_count must be >= 1");
    if (!synth && (data.items.empty() || data.queries.empty()))
        throw UsageError("config needs data.items and data.queries, or a synth section");
    if (model.embed_dim < 1 || model.hidden_dim < 1) throw UsageError("model dims must be >= 1");
    if (model.batch_size < 2) throw UsageError("train.batch_size must be >= 2");
    augment.validate();
    itemaug.validate();
    for (double m : or_single(grid.m, augment.m))
        for (double n : or_single(grid.n, augment.n)) {
            AugmentConfig cell = augment;
            cell.m = m;
            cell.n = n;
            cell.validate();
        }
}

PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    check_keys(j, "<root>", {"data", "model", "train", "augment", "itemaug", "synth"});
    PipelineConfig c;
    try {
        if (auto it = j.find("data"); it != j.end()) {
            const auto& s = *it;
            check_keys(s, "data", {"items", "queries", "labels", "eval_fraction", "split_seed",
                                   "min_count", "top_n"});
            std::string items, queries, labels;
            read(s, "items", items);
            read(s, "queries", queries);
            read(s, "labels", labels);
            c.data.items = resolve_path(base_dir, items);
            c.data.queries = resolve_path(base_dir, queries);
            c.data.labels = resolve_path(base_dir, labels);
            read(s, "eval_fraction", c.data.eval_fraction);
            read(s, "split_seed", c.data.split_seed);
            read(s, "min_count", c.data.min_count);
            read(s, "top_n", c.data.top_n);
        }
        if (auto it = j.find("model"); it != j.end()) {
            const auto& s = *it;
            check_keys(s, "model", {"embed_dim", "hidden_dim", "segment_length",
                                    "share_embedding_table", "share_towers", "tie_tower_init", "embedding_init_std", "pooling"});
            read(s, "embed_dim", c.model.embed_dim);
            read(s, "hidden_dim", c.model.hidden_dim);
            read(s, "segment_length", c.model.segment_length);
            read(s, "share_embedding_table", c.model.share_embedding_table);
            read(s, "share_towers", c.model.share_towers);
            read(s, "tie_tower_init", c.model.tie_tower_init);
            read(s, "embedding_init_std", c.model.embedding_init_std);
            std::string pooling = c.model.pooling == Pooling::Mean ? "mean" : "attention";
            read(s, "pooling", pooling);
            if (pooling != "mean" && pooling != "attention")
                throw UsageError("model.pooling must be 'mean' or 'attention'");
            c.model.pooling = pooling == "mean" ? Pooling::Mean : Pooling::Attention;
        }
        if (auto it = j.find("train"); it != j.end()) {
            const auto& s = *it;
            check_keys(s, "train", {"seed", "learning_rate", "batch_size", "epochs", "adam_beta1",
                                    "adam_beta2", "adam_epsilon"});
            read(s, "seed", c.model.seed);
            read(s, "learning_rate", c.model.learning_rate);
            read(s, "batch_size", c.model.batch_size);
            read(s, "epochs", c.model.epochs);
            read(s, "adam_beta1", c.model.adam_beta1);
            read(s, "adam_beta2", c.model.adam_beta2);
            read(s, "adam_epsilon", c.model.adam_epsilon);
        }
        if (auto it = j.find("augment"); it != j.end()) {
            const auto& s = *it;
            check_keys(s, "augment", {"enabled", "m", "n", "noise_kind", "noise_count", "p_aug", "sigma", "alpha",
                                      "beta", "selector", "importance_target"});
            read(s, "enabled", c.augment_enabled);
            read_sweepable(s, "m", c.augment.m, c.grid.m);
            read_sweepable(s, "n", c.augment.n, c.grid.n);
            read_sweepable(s, "alpha", c.augment.alpha, c.grid.alpha);
            read_sweepable(s, "beta", c.augment.beta, c.grid.beta);
            read(s, "p_aug", c.augment.p_aug);
            read(s, "sigma", c.augment.sigma);
            if (auto k = s.find("noise_kind"); k != s.end()) c.augment.noise_kind = parse_noise_kind(k->get<std::string>());
            if (auto k = s.find("noise_count"); k != s.end()) c.augment.noise_count = parse_noise_count(k->get<std::string>());
            if (auto k = s.find("selector"); k != s.end()) c.augment.selector = parse_selector(k->get<std::string>());
            if (auto k = s.find("importance_target"); k != s.end())
                c.augment.target = parse_importance_target(k->get<std::string>());
        }
        if (auto it = j.find("itemaug"); it != j.end()) {
            const auto& s = *it;
            check_keys(s, "itemaug", {"enabled", "k", "ensemble_rule"});
            read(s, "enabled", c.itemaug_enabled);
            read(s, "k", c.itemaug.k);
            if (auto k = s.find("ensemble_rule"); k != s.end())
                c.itemaug.ensemble_rule = parse_ensemble_rule(k->get<std::string>());
        }
        if (auto it = j.find("synth"); it != j.end()) c.synth = synth_from_json(*it);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j, path.parent_path());
}

nlohmann::ordered_json to_json(const PipelineConfig& c) {
    nlohmann::ordered_json j;
    j["data"] = {{"items", c.data.items.string()},
                 {"queries", c.data.queries.string()},
                 {"labels", c.data.labels.string()},
                 {"eval_fraction", c.data.eval_fraction},
                 {"split_seed", c.data.split_seed},
                 {"min_count", c.data.min_count},
                 {"top_n", c.data.top_n}};
    j["model"] = {{"embed_dim", c.model.embed_dim},
                  {"hidden_dim", c.model.hidden_dim},
                  {"segment_length", c.model.segment_length},
                  {"share_embedding_table", c.model.share_embedding_table},
                  {"share_towers", c.model.share_towers},
                  {"tie_tower_init", c.model.tie_tower_init},
                  {"embedding_init_std", c.model.embedding_init_std},
                  {"pooling", c.model.pooling == Pooling::Mean ? "mean" : "attention"}};
    j["train"] = {{"seed", c.model.seed},
                  {"learning_rate", c.model.learning_rate},
                  {"batch_size", c.model.batch_size},
                  {"epochs", c.model.epochs},
                  {"adam_beta1", c.model.adam_beta1},
                  {"adam_beta2", c.model.adam_beta2},
                  {"adam_epsilon", c.model.adam_epsilon}};
    auto sweep = [](const std::vector<double>& grid, double v) {
        return grid.size() > 1 ? nlohmann::ordered_json(grid) : nlohmann::ordered_json(v);
    };
    j["augment"] = {{"enabled", c.augment_enabled},
                    {"m", sweep(c.grid.m, c.augment.m)},
                    {"n", sweep(c.grid.n, c.augment.n)},
                    {"noise_kind", to_string(c.augment.noise_kind)},
                    {"noise_count", to_string(c.augment.noise_count)},
                    {"p_aug", c.augment.p_aug},
                    {"sigma", c.augment.sigma},
                    {"alpha", sweep(c.grid.alpha, c.augment.alpha)},
                    {"beta", sweep(c.grid.beta, c.augment.beta)},
                    {"selector", to_string(c.augment.selector)},
                    {"importance_target", to_string(c.augment.target)}};
    j["itemaug"] = {{"enabled", c.itemaug_enabled},
                    {"k", c.itemaug.k},
                    {"ensemble_rule", to_string(c.itemaug.ensemble_rule)}};
    if (c.synth) j["synth"] = synth_to_json(*c.synth);
    return j;
}

void apply_override(nlohmann::json& j, std::string_view assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq)
        throw UsageError("override must look like section.key=value: " + std::string(assignment));
    const std::string section(assignment.substr(0, dot));
    const std::string key(assignment.substr(dot + 1, eq - dot - 1));
    const std::string raw(assignment.substr(eq + 1));
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    if (!j.contains(section)) j[section] = json::object();
    j[section][key] = value;
}

}  // namespace gradselect
