#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "gradselect/corpus.hpp"
#include "gradselect/encoder.hpp"

namespace gradselect {

struct SynthConfig {
    std::size_t n_items = 200;
    std::size_t terms_per_item = 12;
    std::size_t vocab_size = 1500;
    std::size_t query_terms = 10;
    std::size_t queries_per_item = 1;
    double unseen_rate = 0.4;  // fraction of an item's terms withheld from its query
    double spe_rate = 0.3;     // fraction of query terms borrowed from another item
    std::size_t distractor_sentences = 1;
    std::size_t filler_terms = 4;     // tokens per distractor sentence
    std::size_t true_sentences = 2;   // sentences the true terms are spread over
    std::size_t common_terms = 40;    // head of the Zipf ranking; the filler pool
    std::size_t n_topics = 20;
    double topic_bias = 0.8;          // probability an item term comes from its topic pool
    double zipf_exponent = 1.0;
    std::uint64_t seed = 1;

    void validate() const;
};

enum class TermLabel { TrueTerm, SpeTerm, Filler };

std::string to_string(TermLabel l);
TermLabel parse_term_label(std::string_view s);

struct SynthQuery {
    QueryRecord record;
    std::vector<TermLabel> labels;  // one per token of record.text
};

struct SynthData {
    std::vector<ItemRecord> items;
    std::vector<SynthQuery> queries;
};

SynthData generate(const SynthConfig& config);

struct SynthFiles {
    std::filesystem::path items;
    std::filesystem::path queries;
    std::filesystem::path labels;
};

SynthFiles write_synth(const SynthData& data, const std::filesystem::path& dir);
std::vector<QueryRecord> query_records(const SynthData& data);

using LabelMap = std::map<std::string, std::vector<TermLabel>>;
LabelMap labels_of(const SynthData& data);
LabelMap read_labels(const std::filesystem::path& path);

struct ProxyGrade {
    double mean_rank_true = 0.0;  // mean 1-based importance rank of TRUE_TERM tokens
    double mean_rank_spe = 0.0;
    double mean_rank_filler = 0.0;
    double auroc = 0.0;           // TRUE_TERM vs every other token, mean over queries
    double auroc_vs_spe = 0.0;    // TRUE_TERM vs SPE_TERM only
    std::size_t graded_queries = 0;
    std::size_t skipped_queries = 0;  // no TRUE_TERM or no other token
};

// Ties in importance count one half.
double auroc(std::span<const double> positives, std::span<const double> negatives);

// Importance over the full corpus as candidates, graded against the labels.
ProxyGrade grade_gradient_proxy(const ModelParams& model, const QuerySet& queries,
                                const LabelMap& labels, const ItemStore& items);

}  // namespace gradselect
