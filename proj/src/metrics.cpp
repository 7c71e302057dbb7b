#include "gradselect/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "gradselect/error.hpp"

namespace gradselect {

namespace {

std::optional<std::size_t> gold_rank(const RankedList& ranked, std::string_view gold_id) {
    if (gold_id.empty()) throw DataError("query '" + ranked.query_id + "' has no gold item");
    return ranked.rank_of(gold_id);
}

}  // namespace

double ndcg(const RankedList& ranked, std::string_view gold_id, std::optional<std::size_t> cutoff) {
    const auto r = gold_rank(ranked, gold_id);
    if (!r || (cutoff && *r > *cutoff)) return 0.0;
    return 1.0 / std::log2(1.0 + static_cast<double>(*r));
}

double mrr(const RankedList& ranked, std::string_view gold_id) {
    const auto r = gold_rank(ranked, gold_id);
    return r ? 1.0 / static_cast<double>(*r) : 0.0;
}

double recall_at(const RankedList& ranked, std::string_view gold_id, std::size_t k) {
    const auto r = gold_rank(ranked, gold_id);
    return r && *r <= k ? 1.0 : 0.0;
}

GoldMap gold_map(const QuerySet& queries) {
    GoldMap g;
    for (const auto& q : queries)
        if (q.gold_item_id) g.emplace(q.id, *q.gold_item_id);
    return g;
}

GoldMap read_gold_map(const std::filesystem::path& queries_file) {
    GoldMap g;
    for (const auto& r : read_query_records(queries_file))
        if (r.gold_id) g.emplace(r.id, *r.gold_id);
    return g;
}

MetricsReport evaluate_run(const Rankings& rankings, const GoldMap& gold, const ItemStore* items) {
    MetricsReport rep;
    for (const auto& [qid, list] : rankings) {
        auto it = gold.find(qid);
        if (it == gold.end()) throw DataError("no gold item for query '" + qid + "'");
        if (items && !items->contains(it->second))
            throw DataError("gold item '" + it->second + "' of query '" + qid + "' is not in the corpus");
        QueryMetrics m;
        m.query_id = qid;
        m.gold_rank = list.rank_of(it->second);
        m.ndcg = ndcg(list, it->second);
        m.ndcg_at_10 = ndcg(list, it->second, 10);
        m.recall_at_1 = recall_at(list, it->second, 1);
        m.acc_at_5 = recall_at(list, it->second, 5);
        m.mrr = mrr(list, it->second);
        rep.per_query.push_back(std::move(m));
    }
    rep.query_count = rep.per_query.size();
    if (rep.query_count == 0) return rep;
    for (const auto& m : rep.per_query) {
        rep.ndcg += m.ndcg;
        rep.ndcg_at_10 += m.ndcg_at_10;
        rep.recall_at_1 += m.recall_at_1;
        rep.acc_at_5 += m.acc_at_5;
        rep.mrr += m.mrr;
    }
    const double n = static_cast<double>(rep.query_count);
    rep.ndcg /= n;
    rep.ndcg_at_10 /= n;
    rep.recall_at_1 /= n;
    rep.acc_at_5 /= n;
    rep.mrr /= n;
    return rep;
}

std::string MetricsReport::to_text() const {
    std::string out;
    char buf[128];
    auto line = [&](const char* name, double v) {
        std::snprintf(buf, sizeof buf, "%-10s %.6f\n", name, v);
        out += buf;
    };
    line("ndcg", ndcg);
    line("ndcg@10", ndcg_at_10);
    line("recall@1", recall_at_1);
    line("acc@5", acc_at_5);
    line("mrr", mrr);
    std::snprintf(buf, sizeof buf, "%-10s %zu\n", "queries", query_count);
    out += buf;
    return out;
}

std::string MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["query_count"] = query_count;
    j["ndcg"] = ndcg;
    j["ndcg@10"] = ndcg_at_10;
    j["recall@1"] = recall_at_1;
    j["em"] = recall_at_1;
    j["acc@5"] = acc_at_5;
    j["mrr"] = mrr;
    auto& per = j["per_query"] = nlohmann::ordered_json::array();
    for (const auto& m : per_query) {
        nlohmann::ordered_json q;
        q["query_id"] = m.query_id;
        q["gold_rank"] = m.gold_rank ? nlohmann::ordered_json(*m.gold_rank) : nlohmann::ordered_json();
        q["ndcg"] = m.ndcg;
        q["ndcg@10"] = m.ndcg_at_10;
        q["recall@1"] = m.recall_at_1;
        q["acc@5"] = m.acc_at_5;
        q["mrr"] = m.mrr;
        per.push_back(std::move(q));
    }
    return j.dump(2) + "\n";
}

void write_report(const MetricsReport& report, const std::filesystem::path& json_path,
                  const std::filesystem::path& text_path) {
    std::ofstream js(json_path, std::ios::binary);
    std::ofstream tx(text_path, std::ios::binary);
    if (!js || !tx) throw DataError("cannot write metrics report");
    js << report.to_json();
    tx << report.to_text();
}

}  // namespace gradselect
