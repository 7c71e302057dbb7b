#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradselect/encoder.hpp"
#include "gradselect/gradaug.hpp"
#include "gradselect/itemaug.hpp"
#include "gradselect/synthbench.hpp"

namespace gradselect {

struct DataConfig {
    std::filesystem::path items;
    std::filesystem::path queries;
    std::filesystem::path labels;  // optional synth sidecar
    double eval_fraction = 0.5;
    std::uint64_t split_seed = 0;
    std::size_t min_count = 1;
    std::size_t top_n = 100;
};

// Hyperparameter lists; more than one value in any list expands a grid.
struct SweepGrid {
    std::vector<double> m, n, alpha, beta;
    bool active() const { return m.size() > 1 || n.size() > 1 || alpha.size() > 1 || beta.size() > 1; }
};

// File-first configuration with sections data, model, train, augment,
// itemaug and synth. Unknown keys are rejected.
struct PipelineConfig {
    DataConfig data;
    ModelConfig model;  // vocab_size is filled in from the data
    bool augment_enabled = true;
    AugmentConfig augment;
    bool itemaug_enabled = true;
    ItemAugConfig itemaug;
    std::optional<SynthConfig> synth;
    SweepGrid grid;

    void validate() const;
};

PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const PipelineConfig& config);

// Applies "section.key=value" overrides (value parsed as JSON, else string).
void apply_override(nlohmann::json& j, std::string_view assignment);

nlohmann::json synth_to_json(const SynthConfig& c);
SynthConfig synth_from_json(const nlohmann::json& j);

}  // namespace gradselect
