#pragma once

#include <cstddef>
#include <unordered_map>
#include <vector>

#include "gradselect/corpus.hpp"

namespace gradselect {

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

struct Posting {
    std::size_t doc = 0;  // index into the item store
    std::size_t tf = 0;
};

// Okapi BM25 over whole-item token sequences.
class Bm25Index {
public:
    Bm25Index(const ItemStore& items, Bm25Params params = {});

    // ln(1 + (N - df + 0.5) / (df + 0.5)); never negative.
    double idf(TokenId term) const;
    std::size_t document_frequency(TokenId term) const;
    double average_length() const { return avg_length_; }
    std::size_t document_count() const { return lengths_.size(); }
    const Bm25Params& params() const { return params_; }

    // Sum over query token occurrences; documents with no matching term are omitted.
    RankedList rank(const Circumlocution& query, std::size_t top_n) const;
    RankedList rank(const std::string& query_id, std::span<const TokenId> tokens,
                    const std::optional<std::string>& gold_id, std::size_t top_n) const;

private:
    Bm25Params params_;
    std::vector<std::string> doc_ids_;
    std::vector<std::size_t> lengths_;
    double avg_length_ = 0.0;
    std::unordered_map<TokenId, std::vector<Posting>> postings_;
};

}  // namespace gradselect
