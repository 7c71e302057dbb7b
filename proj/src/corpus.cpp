#include "gradselect/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace gradselect {

namespace {

const std::array<std::string_view, 3> kSpecials = {"<pad>", "<unk>", "<mask>"};

// Byte length of a Unicode whitespace sequence starting at `i`, or 0.
std::size_t whitespace_length(std::string_view s, std::size_t i) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c == ' ' || (c >= 0x09 && c <= 0x0d)) return 1;
    auto at = [&](std::size_t k) {
        return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) : 0u;
    };
    if (c == 0xc2 && (at(1) == 0x85 || at(1) == 0xa0)) return 2;
    if (c == 0xe1 && at(1) == 0x9a && at(2) == 0x80) return 3;  // U+1680
    if (c == 0xe2 && at(1) == 0x80) {
        const auto c2 = at(2);
        if ((c2 >= 0x80 && c2 <= 0x8a) || c2 == 0xa8 || c2 == 0xa9 || c2 == 0xaf) return 3;
    }
    if (c == 0xe2 && at(1) == 0x81 && at(2) == 0x9f) return 3;  // U+205F
    if (c == 0xe3 && at(1) == 0x80 && at(2) == 0x80) return 3;  // U+3000
    return 0;
}

bool is_ascii_punct(char c) {
    const auto u = static_cast<unsigned char>(c);
    return u < 0x80 && std::ispunct(u);
}

std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

std::string line_error(const std::filesystem::path& path, std::size_t line_no,
                       const std::string& what) {
    return path.string() + ": line " + std::to_string(line_no) + ": " + what;
}

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }))
            continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(line_error(path, line_no, std::string("malformed JSON: ") + e.what()));
        }
        if (!obj.is_object()) throw DataError(line_error(path, line_no, "expected a JSON object"));
        try {
            fn(obj, line_no);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(line_error(path, line_no, e.what()));
        }
    }
}

std::string required_string(const nlohmann::json& obj, const char* key,
                            const std::filesystem::path& path, std::size_t line_no) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string())
        throw DataError(line_error(path, line_no, std::string("missing string field '") + key + "'"));
    return it->get<std::string>();
}

}  // namespace

Vocab::Vocab() {
    for (auto s : kSpecials) add(std::string(s));
}

void Vocab::add(std::string token) {
    const auto id = static_cast<TokenId>(tokens_.size());
    ids_.emplace(token, id);
    tokens_.push_back(std::move(token));
}

Vocab Vocab::from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                         std::size_t min_count) {
    if (min_count < 1) throw UsageError("min_count must be >= 1");
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [tok, n] : counts)
        if (n >= min_count) kept.emplace_back(tok, n);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocab v;
    for (auto& [tok, n] : kept)
        if (!v.contains(tok)) v.add(std::move(tok));
    return v;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens_after_specials) {
    Vocab v;
    for (auto& t : tokens_after_specials) {
        if (v.contains(t)) throw DataError("duplicate vocab token '" + t + "'");
        v.add(std::move(t));
    }
    return v;
}

TokenId Vocab::id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

const std::string& Vocab::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw DataError("token id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    for (std::size_t i = kSpecials.size(); i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) toks.push_back(line);
    return from_tokens(std::move(toks));
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        std::size_t b = 0, e = current.size();
        while (b < e && is_ascii_punct(current[b])) ++b;
        while (e > b && is_ascii_punct(current[e - 1])) --e;
        if (e > b) out.emplace_back(current.substr(b, e - b));
        current.clear();
    };
    for (std::size_t i = 0; i < text.size();) {
        if (auto ws = whitespace_length(text, i)) {
            flush();
            i += ws;
            continue;
        }
        const auto c = static_cast<unsigned char>(text[i]);
        current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : text[i]);
        ++i;
    }
    flush();
    return out;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
    std::vector<TokenId> ids;
    for (const auto& t : tokenize(text)) ids.push_back(vocab.id(t));
    return ids;
}

Vocab build_vocab(std::span<const std::string> texts, std::size_t min_count) {
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& text : texts)
        for (auto& tok : tokenize(text)) ++counts[std::move(tok)];
    return Vocab::from_counts(counts, min_count);
}

std::vector<std::vector<TokenId>> segment_tokens(std::span<const TokenId> tokens,
                                                 std::size_t segment_length) {
    if (segment_length == 0) throw UsageError("segment length must be >= 1");
    std::vector<std::vector<TokenId>> segments;
    for (std::size_t b = 0; b < tokens.size(); b += segment_length) {
        const auto e = std::min(tokens.size(), b + segment_length);
        segments.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(b),
                              tokens.begin() + static_cast<std::ptrdiff_t>(e));
    }
    if (segments.empty()) segments.emplace_back();
    return segments;
}

std::vector<ItemRecord> read_item_records(const std::filesystem::path& path) {
    std::vector<ItemRecord> records;
    std::unordered_map<std::string, std::size_t> seen;
    for_each_json_line(path, [&](const nlohmann::json& obj, std::size_t line_no) {
        ItemRecord r{required_string(obj, "id", path, line_no),
                     required_string(obj, "text", path, line_no)};
        if (!seen.emplace(r.id, line_no).second)
            throw DataError(line_error(path, line_no, "duplicate id '" + r.id + "'"));
        records.push_back(std::move(r));
    });
    return records;
}

std::vector<QueryRecord> read_query_records(const std::filesystem::path& path) {
    std::vector<QueryRecord> records;
    std::unordered_map<std::string, std::size_t> seen;
    for_each_json_line(path, [&](const nlohmann::json& obj, std::size_t line_no) {
        QueryRecord r;
        r.id = required_string(obj, "id", path, line_no);
        r.text = required_string(obj, "text", path, line_no);
        if (auto it = obj.find("gold_id"); it != obj.end() && !it->is_null())
            r.gold_id = it->get<std::string>();
        if (auto it = obj.find("sentences"); it != obj.end() && !it->is_null())
            r.sentences = it->get<std::vector<std::string>>();
        if (auto it = obj.find("excluded_sentences"); it != obj.end() && !it->is_null())
            r.excluded_sentences = it->get<std::vector<std::size_t>>();
        if (!r.sentences.empty() && tokenize(r.text) != [&] {
                std::vector<std::string> joined;
                for (const auto& s : r.sentences)
                    for (auto& t : tokenize(s)) joined.push_back(std::move(t));
                return joined;
            }())
            throw DataError(line_error(path, line_no, "sentences do not concatenate to text"));
        for (auto idx : r.excluded_sentences)
            if (idx >= r.sentences.size())
                throw DataError(line_error(path, line_no, "excluded sentence index out of range"));
        if (!seen.emplace(r.id, line_no).second)
            throw DataError(line_error(path, line_no, "duplicate id '" + r.id + "'"));
        records.push_back(std::move(r));
    });
    return records;
}

ItemStore make_item_store(std::span<const ItemRecord> records, const Vocab& vocab,
                          std::size_t segment_length) {
    ItemStore store;
    for (const auto& r : records) {
        Item item{r.id, tokenize(r.text, vocab), {}};
        item.segments = segment_tokens(item.tokens, segment_length);
        store.add(std::move(item));
    }
    return store;
}

QuerySet make_query_set(std::span<const QueryRecord> records, const Vocab& vocab) {
    QuerySet set;
    for (const auto& r : records) {
        Circumlocution c{r.id, tokenize(r.text, vocab), {}, r.gold_id, r.excluded_sentences};
        std::size_t pos = 0;
        for (const auto& s : r.sentences) {
            const auto n = tokenize(s).size();
            c.sentences.push_back({pos, pos + n});
            pos += n;
        }
        if (!r.sentences.empty() && pos != c.tokens.size())
            throw DataError("query '" + r.id + "': sentence spans do not cover its tokens");
        if (c.tokens.empty()) throw DataError("query '" + r.id + "' has no tokens");
        set.add(std::move(c));
    }
    return set;
}

ItemStore load_items(const std::filesystem::path& path, const Vocab& vocab,
                     std::size_t segment_length) {
    return make_item_store(read_item_records(path), vocab, segment_length);
}

QuerySet load_queries(const std::filesystem::path& path, const Vocab& vocab) {
    return make_query_set(read_query_records(path), vocab);
}

void TrainingSet::add(const TrainingPair& pair, const QuerySet& queries, const ItemStore& items) {
    if (!queries.contains(pair.query_id))
        throw DataError("training pair references unknown query '" + pair.query_id + "'");
    if (!items.contains(pair.item_id))
        throw DataError("training pair references unknown item '" + pair.item_id + "'");
    auto key = std::make_tuple(pair.query_id, pair.item_id, static_cast<int>(pair.provenance));
    if (!seen_.emplace(std::move(key), pairs_.size()).second)
        throw DataError("duplicate training pair (" + pair.query_id + ", " + pair.item_id + ")");
    pairs_.push_back(pair);
}

TrainingSet TrainingSet::from_gold(const QuerySet& queries, const ItemStore& items) {
    TrainingSet t;
    for (const auto& q : queries)
        if (q.gold_item_id) t.add({q.id, *q.gold_item_id, Provenance::Original}, queries, items);
    return t;
}

std::optional<std::size_t> RankedList::rank_of(std::string_view item_id) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].item_id == item_id) return i + 1;
    return std::nullopt;
}

bool ranks_before(const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item_id < b.item_id;
}

void sort_ranking(std::vector<ScoredItem>& entries) {
    std::sort(entries.begin(), entries.end(), ranks_before);
}

bool is_sorted_ranking(std::span<const ScoredItem> entries) {
    return std::is_sorted(entries.begin(), entries.end(), ranks_before);
}

RankedList make_ranked_list(std::string query_id, std::vector<ScoredItem> candidates,
                            std::size_t top_n, const std::optional<std::string>& gold_id) {
    sort_ranking(candidates);
    RankedList list{std::move(query_id), {}, std::nullopt};
    if (gold_id) {
        for (std::size_t i = 0; i < candidates.size(); ++i)
            if (candidates[i].item_id == *gold_id) {
                list.gold_rank = i + 1;
                break;
            }
    }
    if (candidates.size() > top_n) candidates.resize(top_n);
    list.entries = std::move(candidates);
    return list;
}

std::string format_run(const Rankings& rankings, std::string_view tag) {
    std::string out;
    for (const auto& [qid, list] : rankings) {
        if (!is_sorted_ranking(list.entries))
            throw UsageError("ranking for query '" + qid + "' is not sorted by descending score");
        for (std::size_t i = 0; i < list.entries.size(); ++i) {
            const auto& e = list.entries[i];
            out += qid;
            out += " Q0 ";
            out += e.item_id;
            out += ' ';
            out += std::to_string(i + 1);
            out += ' ';
            out += format_double(e.score);
            out += ' ';
            out += tag;
            out += '\n';
        }
    }
    return out;
}

void write_run(const Rankings& rankings, std::string_view tag, const std::filesystem::path& path) {
    const auto text = format_run(rankings, tag);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

std::vector<RunLine> parse_run(std::string_view text) {
    std::vector<RunLine> lines;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream fields(line);
        std::string qid, q0, item, rank, score, tag;
        if (!(fields >> qid)) continue;
        if (!(fields >> q0 >> item >> rank >> score >> tag))
            throw DataError("run line " + std::to_string(line_no) + ": expected 6 fields");
        RunLine r{qid, item, 0, 0.0, tag};
        auto [p1, e1] = std::from_chars(rank.data(), rank.data() + rank.size(), r.rank);
        auto [p2, e2] = std::from_chars(score.data(), score.data() + score.size(), r.score);
        if (e1 != std::errc{} || e2 != std::errc{} || p1 != rank.data() + rank.size() ||
            p2 != score.data() + score.size())
            throw DataError("run line " + std::to_string(line_no) + ": bad rank or score");
        lines.push_back(std::move(r));
    }
    return lines;
}

std::vector<RunLine> read_run(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_run(buf.str());
}

Rankings rankings_from_run(std::span<const RunLine> lines) {
    std::map<std::string, std::vector<std::pair<std::size_t, ScoredItem>>> grouped;
    for (const auto& l : lines) grouped[l.query_id].push_back({l.rank, {l.item_id, l.score}});
    Rankings out;
    for (auto& [qid, rows] : grouped) {
        std::sort(rows.begin(), rows.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        RankedList list{qid, {}, std::nullopt};
        for (auto& [rank, item] : rows) list.entries.push_back(std::move(item));
        out.emplace(qid, std::move(list));
    }
    return out;
}

}  // namespace gradselect
