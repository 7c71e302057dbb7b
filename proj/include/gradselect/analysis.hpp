#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <vector>

#include "gradselect/encoder.hpp"
#include "gradselect/gradaug.hpp"
#include "gradselect/lexical.hpp"

namespace gradselect {

// Ranks the full corpus for a query with some rows deleted (keep[i] == 0).
class RankingBackend {
public:
    virtual ~RankingBackend() = default;
    virtual RankedList rank(const Circumlocution& query, const std::vector<double>& keep) const = 0;
};

class DenseBackend : public RankingBackend {
public:
    DenseBackend(const ModelParams& params, const ItemStore& items);
    RankedList rank(const Circumlocution& query, const std::vector<double>& keep) const override;

private:
    const ModelParams& params_;
    EncodedCorpus corpus_;
};

class Bm25Backend : public RankingBackend {
public:
    explicit Bm25Backend(const Bm25Index& index) : index_(index) {}
    RankedList rank(const Circumlocution& query, const std::vector<double>& keep) const override;

private:
    const Bm25Index& index_;
};

struct DeletionDelta {
    std::string query_id;
    std::size_t sentence = 0;
    double ndcg_before = 0.0;
    double ndcg_after = 0.0;
    double delta() const { return ndcg_after - ndcg_before; }
};

struct SentenceDeletionResult {
    std::size_t improved = 0;
    std::size_t decreased = 0;
    std::size_t unchanged = 0;
    std::size_t skipped = 0;   // deleting the sentence would empty the query
    std::size_t excluded = 0;  // flagged in the query file
    // Over changed pairs only (improved + decreased).
    double improved_ratio = 0.0;
    double decreased_ratio = 0.0;
    // Over every evaluated pair.
    double improved_share = 0.0;
    double decreased_share = 0.0;
    double unchanged_share = 0.0;
    std::vector<DeletionDelta> deltas;
};

// nDCG change from deleting each sentence of each query in turn.
SentenceDeletionResult sentence_deletion_study(const RankingBackend& backend,
                                               const QuerySet& queries);

struct IntervalResult {
    std::size_t interval = 0;  // 1 = highest importance
    std::size_t removed_tokens = 0;
    double em = 0.0;
    double em_decrease = 0.0;  // baseline EM minus variant EM, absolute
};

struct IntervalAblationResult {
    double baseline_em = 0.0;
    std::vector<IntervalResult> intervals;
};

struct AblationSetup {
    const ModelParams* initial = nullptr;  // retraining starts from its initial snapshot
    const TrainingSet* train = nullptr;
    const QuerySet* queries = nullptr;     // holds training and evaluation queries
    std::vector<std::string> eval_queries;
    const ItemStore* items = nullptr;
    const Objective* objective = nullptr;  // plain cross-entropy when null
};

// Exact-match rate of `params` over the evaluation queries.
double exact_match(const ModelParams& params, const QuerySet& queries,
                   std::span<const std::string> eval_ids, const ItemStore& items);

// Retrains from the initial snapshot after deleting the listed token
// positions from the named training queries; returns the evaluation EM.
double retrain_without_tokens(const AblationSetup& setup,
                              const std::map<std::string, std::vector<std::size_t>>& removals,
                              ModelParams* trained = nullptr);

// Importance-rank intervals under `reference` (a model trained on the
// unmodified set); every other token inside interval j is removed.
std::map<std::string, std::vector<std::size_t>> interval_removals(
    const ModelParams& reference, const AblationSetup& setup, std::size_t interval,
    std::size_t intervals);

IntervalAblationResult gradient_interval_ablation(const AblationSetup& setup,
                                                  std::size_t intervals = 5);

struct AugmentationQuality {
    double error_rate = 0.0;            // share of examples whose acc@5 drops
    double mean_cosine_distance = 0.0;  // 1 - cos(encode(C), encode(C_aug))
    std::size_t examples = 0;
    std::size_t noised_examples = 0;    // at least one realized noise row
};

AugmentationQuality augmentation_quality(const ModelParams& model,
                                         std::span<const Example> examples,
                                         const ItemStore& items, const AugmentConfig& config,
                                         std::uint64_t seed);

// Labeled scalar report: one "name value" line per entry.
void write_scalar_report(const std::vector<std::pair<std::string, double>>& values,
                         const std::filesystem::path& path);

}  // namespace gradselect
