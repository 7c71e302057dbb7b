#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gradselect/config.hpp"
#include "gradselect/corpus.hpp"
#include "gradselect/encoder.hpp"
#include "gradselect/itemaug.hpp"
#include "gradselect/metrics.hpp"
#include "gradselect/synthbench.hpp"

namespace gradselect {

// Loaded corpus with a seeded train/evaluation split over the gold queries.
struct Dataset {
    Vocab vocab;
    ItemStore items;
    QuerySet queries;  // every query, training and evaluation
    std::vector<std::string> train_ids;
    std::vector<std::string> eval_ids;
    TrainingSet train;
    LabelMap labels;   // empty unless a label sidecar is present
};

// Shuffles the gold-carrying query ids (sorted first) and moves the first
// round(eval_fraction * n) of them into the evaluation split.
std::pair<std::vector<std::string>, std::vector<std::string>> split_query_ids(
    std::span<const QueryRecord> records, double eval_fraction, std::uint64_t seed);

Dataset make_dataset(std::span<const ItemRecord> items, std::span<const QueryRecord> queries,
                     const PipelineConfig& config, LabelMap labels = {});

// Reads data files, or generates the synthetic benchmark (written under
// `data_dir` when given) if the config has no data paths.
Dataset load_dataset(const PipelineConfig& config,
                     const std::optional<std::filesystem::path>& data_dir = std::nullopt);

ModelConfig resolved_model(const PipelineConfig& config, const Dataset& data);

// Training objective for the config (composite loss when augmentation is on).
std::unique_ptr<Objective> make_objective(const PipelineConfig& config);

Rankings retrieve_all(const ModelParams& params, const Dataset& data,
                      std::span<const std::string> query_ids, std::size_t top_n);
Rankings ensemble_all(const ModelParams& teacher, const ModelParams& student, const Dataset& data,
                      std::span<const std::string> query_ids, std::size_t top_n,
                      EnsembleRule rule);

using Logger = std::function<void(const std::string&)>;

struct PipelineOptions {
    std::filesystem::path out_dir;  // empty: keep everything in memory
    bool resume = false;            // reuse finished stage artifacts
    Logger log;
};

struct PipelineResult {
    MetricsReport teacher;
    std::optional<MetricsReport> student;
    std::optional<MetricsReport> ensemble;
    MetricsReport final;  // ensemble when item augmentation ran, else teacher
    std::size_t augmented_pairs = 0;
    std::size_t gated_queries = 0;
    std::optional<ModelParams> teacher_model;
    std::optional<ModelParams> student_model;
};

// Teacher -> item augmentation -> student -> run files -> metrics.
PipelineResult run_pipeline(const PipelineConfig& config, const Dataset& data,
                            const PipelineOptions& options = {});

// Grid cells for the swept hyperparameters, in m, n, alpha, beta order.
struct GridCell {
    std::string name;
    PipelineConfig config;
};
std::vector<GridCell> expand_grid(const PipelineConfig& config);

}  // namespace gradselect
