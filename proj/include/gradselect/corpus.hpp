#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gradselect/error.hpp"

namespace gradselect {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kMaskId = 2;
inline constexpr std::size_t kDefaultSegmentLength = 32;

class Vocab {
public:
    Vocab();

    // Tokens ordered by descending frequency, ties by token string.
    static Vocab from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                             std::size_t min_count);
    static Vocab from_tokens(std::vector<std::string> tokens_after_specials);

    TokenId id(std::string_view token) const;  // kUnkId when absent
    bool contains(std::string_view token) const;
    const std::string& token(TokenId id) const;
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

private:
    void add(std::string token);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
};

std::vector<std::string> tokenize(std::string_view text);
std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab);

Vocab build_vocab(std::span<const std::string> texts, std::size_t min_count = 1);

// Half-open token span [begin, end).
struct SentenceSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    friend bool operator==(const SentenceSpan&, const SentenceSpan&) = default;
};

struct Circumlocution {
    std::string id;
    std::vector<TokenId> tokens;
    std::vector<SentenceSpan> sentences;
    std::optional<std::string> gold_item_id;
    std::vector<std::size_t> excluded_sentences;  // indices skipped by sentence studies
};

struct Item {
    std::string id;
    std::vector<TokenId> tokens;
    std::vector<std::vector<TokenId>> segments;
};

// Non-overlapping windows of `segment_length`; the last one may be short.
// An empty token sequence yields a single empty segment.
std::vector<std::vector<TokenId>> segment_tokens(std::span<const TokenId> tokens,
                                                 std::size_t segment_length);

// Id-indexed store with stable insertion order.
template <typename T>
class Store {
public:
    void add(T value);
    const T& at(std::string_view id) const;
    const T* find(std::string_view id) const;
    bool contains(std::string_view id) const { return index_.contains(std::string(id)); }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }
    const std::vector<T>& values() const { return values_; }
    auto begin() const { return values_.begin(); }
    auto end() const { return values_.end(); }

private:
    std::vector<T> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

using ItemStore = Store<Item>;
using QuerySet = Store<Circumlocution>;

// Raw line records, before tokenization against a vocab.
struct ItemRecord {
    std::string id;
    std::string text;
};

struct QueryRecord {
    std::string id;
    std::string text;
    std::optional<std::string> gold_id;
    std::vector<std::string> sentences;
    std::vector<std::size_t> excluded_sentences;
};

std::vector<ItemRecord> read_item_records(const std::filesystem::path& path);
std::vector<QueryRecord> read_query_records(const std::filesystem::path& path);

ItemStore make_item_store(std::span<const ItemRecord> records, const Vocab& vocab,
                          std::size_t segment_length = kDefaultSegmentLength);
QuerySet make_query_set(std::span<const QueryRecord> records, const Vocab& vocab);

ItemStore load_items(const std::filesystem::path& path, const Vocab& vocab,
                     std::size_t segment_length = kDefaultSegmentLength);
QuerySet load_queries(const std::filesystem::path& path, const Vocab& vocab);

enum class Provenance { Original, Augmented };

struct TrainingPair {
    std::string query_id;
    std::string item_id;
    Provenance provenance = Provenance::Original;
    friend bool operator==(const TrainingPair&, const TrainingPair&) = default;
};

class TrainingSet {
public:
    // Throws DataError on an unknown id or a duplicate (query, item, provenance).
    void add(const TrainingPair& pair, const QuerySet& queries, const ItemStore& items);
    const std::vector<TrainingPair>& pairs() const { return pairs_; }
    std::size_t size() const { return pairs_.size(); }
    bool empty() const { return pairs_.empty(); }

    // One ORIGINAL pair per query carrying a gold id.
    static TrainingSet from_gold(const QuerySet& queries, const ItemStore& items);

private:
    std::vector<TrainingPair> pairs_;
    std::map<std::tuple<std::string, std::string, int>, std::size_t> seen_;
};

struct ScoredItem {
    std::string item_id;
    double score = 0.0;
    friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

struct RankedList {
    std::string query_id;
    std::vector<ScoredItem> entries;
    std::optional<std::size_t> gold_rank;  // 1-based, over the full candidate set

    // 1-based rank of `item_id` among entries, if present.
    std::optional<std::size_t> rank_of(std::string_view item_id) const;
};

// Orders by descending score, ties by ascending item id.
bool ranks_before(const ScoredItem& a, const ScoredItem& b);
void sort_ranking(std::vector<ScoredItem>& entries);
bool is_sorted_ranking(std::span<const ScoredItem> entries);

// Sorts the candidates, records the gold rank, and truncates to top_n.
RankedList make_ranked_list(std::string query_id, std::vector<ScoredItem> candidates,
                            std::size_t top_n, const std::optional<std::string>& gold_id);

using Rankings = std::map<std::string, RankedList>;

struct RunLine {
    std::string query_id;
    std::string item_id;
    std::size_t rank = 0;
    double score = 0.0;
    std::string tag;
    friend bool operator==(const RunLine&, const RunLine&) = default;
};

// "qid Q0 item_id rank score tag"; scores printed with round-trip precision.
void write_run(const Rankings& rankings, std::string_view tag, const std::filesystem::path& path);
std::string format_run(const Rankings& rankings, std::string_view tag);
std::vector<RunLine> read_run(const std::filesystem::path& path);
std::vector<RunLine> parse_run(std::string_view text);
Rankings rankings_from_run(std::span<const RunLine> lines);

template <typename T>
void Store<T>::add(T value) {
    auto [it, inserted] = index_.emplace(value.id, values_.size());
    if (!inserted) throw DataError("duplicate id '" + value.id + "'");
    values_.push_back(std::move(value));
}

template <typename T>
const T* Store<T>::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &values_[it->second];
}

template <typename T>
const T& Store<T>::at(std::string_view id) const {
    if (const T* v = find(id)) return *v;
    throw DataError("unknown id '" + std::string(id) + "'");
}

}  // namespace gradselect
