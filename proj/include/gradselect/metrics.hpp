#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "gradselect/corpus.hpp"

namespace gradselect {

// Binary single-gold relevance: every metric is a function of the gold rank.
double ndcg(const RankedList& ranked, std::string_view gold_id,
            std::optional<std::size_t> cutoff = std::nullopt);
double mrr(const RankedList& ranked, std::string_view gold_id);
double recall_at(const RankedList& ranked, std::string_view gold_id, std::size_t k);

struct QueryMetrics {
    std::string query_id;
    std::optional<std::size_t> gold_rank;
    double ndcg = 0.0;
    double ndcg_at_10 = 0.0;
    double recall_at_1 = 0.0;  // exact match
    double acc_at_5 = 0.0;     // recall@5
    double mrr = 0.0;
};

struct MetricsReport {
    std::vector<QueryMetrics> per_query;  // ordered by query id
    double ndcg = 0.0;
    double ndcg_at_10 = 0.0;
    double recall_at_1 = 0.0;
    double acc_at_5 = 0.0;
    double mrr = 0.0;
    std::size_t query_count = 0;

    double em() const { return recall_at_1; }

    std::string to_text() const;
    std::string to_json() const;  // deterministic key order
};

using GoldMap = std::map<std::string, std::string>;

GoldMap gold_map(const QuerySet& queries);
GoldMap read_gold_map(const std::filesystem::path& queries_file);

// Every ranked query needs a gold entry (DataError naming the qid otherwise).
// With `items`, gold ids absent from the corpus are rejected too.
MetricsReport evaluate_run(const Rankings& rankings, const GoldMap& gold,
                           const ItemStore* items = nullptr);

void write_report(const MetricsReport& report, const std::filesystem::path& json_path,
                  const std::filesystem::path& text_path);

}  // namespace gradselect
