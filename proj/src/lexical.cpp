#include "gradselect/lexical.hpp"

#include <cmath>
#include <map>

namespace gradselect {

Bm25Index::Bm25Index(const ItemStore& items, Bm25Params params) : params_(params) {
    if (items.empty()) throw DataError("cannot build a BM25 index over an empty corpus");
    if (params.k1 < 0.0) throw UsageError("bm25 k1 must be >= 0");
    if (params.b < 0.0 || params.b > 1.0) throw UsageError("bm25 b must be in [0, 1]");
    double total = 0.0;
    for (const auto& item : items) {
        const auto doc = doc_ids_.size();
        doc_ids_.push_back(item.id);
        lengths_.push_back(item.tokens.size());
        total += static_cast<double>(item.tokens.size());
        std::map<TokenId, std::size_t> tf;
        for (auto t : item.tokens) ++tf[t];
        for (auto [t, n] : tf) postings_[t].push_back({doc, n});
    }
    avg_length_ = total / static_cast<double>(lengths_.size());
}

std::size_t Bm25Index::document_frequency(TokenId term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? 0 : it->second.size();
}

double Bm25Index::idf(TokenId term) const {
    const auto n = static_cast<double>(document_count());
    const auto df = static_cast<double>(document_frequency(term));
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

RankedList Bm25Index::rank(const Circumlocution& query, std::size_t top_n) const {
    return rank(query.id, query.tokens, query.gold_item_id, top_n);
}

RankedList Bm25Index::rank(const std::string& query_id, std::span<const TokenId> tokens,
                           const std::optional<std::string>& gold_id, std::size_t top_n) const {
    if (top_n < 1) throw UsageError("topN must be >= 1");
    // Accumulate in query-token order per document for a fixed summation order.
    std::map<std::size_t, double> acc;
    const double avg = avg_length_ > 0.0 ? avg_length_ : 1.0;
    for (auto term : tokens) {
        auto it = postings_.find(term);
        if (it == postings_.end()) continue;
        const double w = idf(term);
        for (const auto& p : it->second) {
            const double tf = static_cast<double>(p.tf);
            const double norm =
                params_.k1 * (1.0 - params_.b + params_.b * static_cast<double>(lengths_[p.doc]) / avg);
            acc[p.doc] += w * tf * (params_.k1 + 1.0) / (tf + norm);
        }
    }
    std::vector<ScoredItem> scored;
    scored.reserve(acc.size());
    for (auto [doc, s] : acc) scored.push_back({doc_ids_[doc], s});
    return make_ranked_list(query_id, std::move(scored), top_n, gold_id);
}

}  // namespace gradselect
