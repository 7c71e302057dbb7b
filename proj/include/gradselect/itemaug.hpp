#pragma once

#include <filesystem>
#include <vector>

#include "gradselect/encoder.hpp"

namespace gradselect {

enum class EnsembleRule { SoftmaxSum, ReciprocalRankSum };

std::string to_string(EnsembleRule r);
EnsembleRule parse_ensemble_rule(std::string_view s);

struct ItemAugConfig {
    std::size_t k = 2;
    EnsembleRule ensemble_rule = EnsembleRule::SoftmaxSum;
    void validate() const;
};

struct AugmentedPair {
    std::string query_id;
    std::string item_id;
    std::size_t source_rank = 0;  // teacher rank of the pseudo-positive, in [1, k]
    friend bool operator==(const AugmentedPair&, const AugmentedPair&) = default;
};

struct AugmentedPairs {
    std::vector<AugmentedPair> pairs;
    std::size_t gated_queries = 0;    // queries whose gold rank exceeded k
    std::size_t examined_queries = 0;
};

// For each ORIGINAL pair: if the teacher ranks the gold item below k, emit
// the teacher's top-k items as extra positives for that query.
AugmentedPairs build_augmented_pairs(const ModelParams& teacher, const TrainingSet& train,
                                     const QuerySet& queries, const ItemStore& items,
                                     const ItemAugConfig& config);

void write_augmented_pairs(const AugmentedPairs& pairs, const std::filesystem::path& path);
std::vector<AugmentedPair> read_augmented_pairs(const std::filesystem::path& path);

// T union T' with ORIGINAL pairs first. A pseudo-positive equal to an
// existing ORIGINAL pair for the same query is still added (as AUGMENTED).
TrainingSet merge_training_sets(const TrainingSet& original, std::span<const AugmentedPair> extra,
                                const QuerySet& queries, const ItemStore& items);

// Retrains from the teacher's initial snapshot on the merged set with the
// same objective and optimizer settings.
ModelParams train_student(const ModelParams& teacher, const TrainingSet& merged,
                          const QuerySet& queries, const ItemStore& items,
                          const Objective* objective = nullptr, TrainReport* report = nullptr);

// Per-item ensemble scores, aligned with the corpus order.
std::vector<double> ensemble_scores(std::span<const double> teacher_scores,
                                    std::span<const double> student_scores,
                                    std::span<const std::string> ids, EnsembleRule rule);

RankedList ensemble_retrieve(const ModelParams& teacher, const EncodedCorpus& teacher_corpus,
                             const ModelParams& student, const EncodedCorpus& student_corpus,
                             const Circumlocution& query, std::size_t top_n,
                             EnsembleRule rule = EnsembleRule::SoftmaxSum);

}  // namespace gradselect
