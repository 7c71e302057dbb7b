#include "gradselect/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <unordered_map>

#include "gradselect/error.hpp"
#include "gradselect/metrics.hpp"

namespace gradselect {

DenseBackend::DenseBackend(const ModelParams& params, const ItemStore& items)
    : params_(params), corpus_(params, items) {}

RankedList DenseBackend::rank(const Circumlocution& query, const std::vector<double>& keep) const {
    QueryView view{query.tokens, keep, {}};
    return retrieve(params_, query.id, view, query.gold_item_id, corpus_, corpus_.size());
}

RankedList Bm25Backend::rank(const Circumlocution& query, const std::vector<double>& keep) const {
    std::vector<TokenId> kept;
    for (std::size_t i = 0; i < query.tokens.size(); ++i)
        if (keep.empty() || keep[i] != 0.0) kept.push_back(query.tokens[i]);
    return index_.rank(query.id, kept, query.gold_item_id, index_.document_count());
}

SentenceDeletionResult sentence_deletion_study(const RankingBackend& backend,
                                               const QuerySet& queries) {
    SentenceDeletionResult r;
    for (const auto& q : queries) {
        if (q.sentences.empty() || !q.gold_item_id) continue;
        const double before = ndcg(backend.rank(q, {}), *q.gold_item_id);
        for (std::size_t s = 0; s < q.sentences.size(); ++s) {
            if (std::find(q.excluded_sentences.begin(), q.excluded_sentences.end(), s) !=
                q.excluded_sentences.end()) {
                ++r.excluded;
                continue;
            }
            std::vector<double> keep(q.tokens.size(), 1.0);
            for (auto i = q.sentences[s].begin; i < q.sentences[s].end; ++i) keep[i] = 0.0;
            if (std::none_of(keep.begin(), keep.end(), [](double k) { return k != 0.0; })) {
                ++r.skipped;
                continue;
            }
            const double after = ndcg(backend.rank(q, keep), *q.gold_item_id);
            DeletionDelta d{q.id, s, before, after};
            if (d.delta() > 0.0)
                ++r.improved;
            else if (d.delta() < 0.0)
                ++r.decreased;
            else
                ++r.unchanged;
            r.deltas.push_back(std::move(d));
        }
    }
    const auto changed = r.improved + r.decreased;
    const auto total = changed + r.unchanged;
    if (changed) {
        r.improved_ratio = static_cast<double>(r.improved) / static_cast<double>(changed);
        r.decreased_ratio = static_cast<double>(r.decreased) / static_cast<double>(changed);
    }
    if (total) {
        r.improved_share = static_cast<double>(r.improved) / static_cast<double>(total);
        r.decreased_share = static_cast<double>(r.decreased) / static_cast<double>(total);
        r.unchanged_share = static_cast<double>(r.unchanged) / static_cast<double>(total);
    }
    return r;
}

double exact_match(const ModelParams& params, const QuerySet& queries,
                   std::span<const std::string> eval_ids, const ItemStore& items) {
    if (eval_ids.empty()) return 0.0;
    const EncodedCorpus corpus(params, items);
    double hits = 0.0;
    for (const auto& id : eval_ids) {
        const auto& q = queries.at(id);
        if (!q.gold_item_id) throw DataError("evaluation query '" + id + "' has no gold item");
        hits += recall_at(retrieve(params, q, corpus, 1), *q.gold_item_id, 1);
    }
    return hits / static_cast<double>(eval_ids.size());
}

double retrain_without_tokens(const AblationSetup& setup,
                              const std::map<std::string, std::vector<std::size_t>>& removals,
                              ModelParams* trained) {
    QuerySet variant;
    for (const auto& q : *setup.queries) {
        auto it = removals.find(q.id);
        if (it == removals.end() || it->second.empty()) {
            variant.add(q);
            continue;
        }
        const std::set<std::size_t> drop(it->second.begin(), it->second.end());
        Circumlocution c{q.id, {}, {}, q.gold_item_id, {}};
        for (std::size_t i = 0; i < q.tokens.size(); ++i)
            if (!drop.contains(i)) c.tokens.push_back(q.tokens[i]);
        if (c.tokens.empty()) throw UsageError("token removal emptied query '" + q.id + "'");
        variant.add(std::move(c));
    }
    auto model = reinitialized(*setup.initial);
    const auto examples = resolve(*setup.train, variant, *setup.items);
    train(model, examples, setup.objective);
    const double em = exact_match(model, *setup.queries, setup.eval_queries, *setup.items);
    if (trained) *trained = std::move(model);
    return em;
}

std::map<std::string, std::vector<std::size_t>> interval_removals(
    const ModelParams& reference, const AblationSetup& setup, std::size_t interval,
    std::size_t intervals) {
    if (intervals < 1 || interval < 1 || interval > intervals)
        throw UsageError("interval index out of range");
    const EncodedCorpus corpus(reference, *setup.items);
    std::unordered_map<std::string, std::size_t> position;
    for (std::size_t i = 0; i < corpus.size(); ++i) position.emplace(corpus.id(i), i);

    std::map<std::string, std::vector<std::size_t>> removals;
    for (const auto& pair : setup.train->pairs()) {
        if (pair.provenance != Provenance::Original || removals.contains(pair.query_id)) continue;
        const auto& q = setup.queries->at(pair.query_id);
        const auto imp = importance_scores(reference, QueryView::of(q), corpus.all_segments(),
                                           position.at(pair.item_id));
        const auto l = imp.order.size();
        const auto begin = (interval - 1) * l / intervals;
        const auto end = interval * l / intervals;
        std::vector<std::size_t> drop;
        for (auto r = begin; r < end; r += 2) drop.push_back(imp.order[r]);
        if (drop.size() == l) drop.pop_back();
        removals.emplace(q.id, std::move(drop));
    }
    return removals;
}

IntervalAblationResult gradient_interval_ablation(const AblationSetup& setup, std::size_t intervals) {
    if (!setup.initial || !setup.train || !setup.queries || !setup.items)
        throw UsageError("interval ablation setup is incomplete");
    IntervalAblationResult out;
    ModelParams reference;
    out.baseline_em = retrain_without_tokens(setup, {}, &reference);
    for (std::size_t j = 1; j <= intervals; ++j) {
        const auto removals = interval_removals(reference, setup, j, intervals);
        std::size_t removed = 0;
        for (const auto& [id, idx] : removals) removed += idx.size();
        const double em = retrain_without_tokens(setup, removals);
        out.intervals.push_back({j, removed, em, out.baseline_em - em});
    }
    return out;
}

AugmentationQuality augmentation_quality(const ModelParams& model,
                                         std::span<const Example> examples,
                                         const ItemStore& items, const AugmentConfig& config,
                                         std::uint64_t seed) {
    config.validate();
    const EncodedCorpus corpus(model, items);
    std::unordered_map<std::string, std::size_t> position;
    for (std::size_t i = 0; i < corpus.size(); ++i) position.emplace(corpus.id(i), i);

    AugmentationQuality q;
    double errors = 0.0, distance = 0.0;
    for (const auto& ex : examples) {
        const auto view = QueryView::of(*ex.query);
        const auto encoded = encode_query(model, view);
        auto rng = make_rng({seed, 0xa9a11ULL, ex.id});
        const auto aug = realize_augmentation(model, view, encoded, corpus.all_segments(),
                                              position.at(ex.gold->id), config, rng);
        const auto aug_encoded = encode_query(model, aug.view);
        const auto before = retrieve(model, ex.query->id, view, ex.gold->id, corpus, 5);
        const auto after = retrieve(model, ex.query->id, aug.view, ex.gold->id, corpus, 5);
        if (recall_at(after, ex.gold->id, 5) < recall_at(before, ex.gold->id, 5)) errors += 1.0;
        const auto& a = encoded.vector();
        const auto& b = aug_encoded.vector();
        const double denom = a.norm() * b.norm();
        const double cos = denom > 0.0 ? a.dot(b) / denom : 1.0;
        distance += 1.0 - std::clamp(cos, -1.0, 1.0);
        if (!aug.mask.realized.empty()) ++q.noised_examples;
        ++q.examples;
    }
    if (q.examples) {
        q.error_rate = errors / static_cast<double>(q.examples);
        q.mean_cosine_distance = distance / static_cast<double>(q.examples);
    }
    return q;
}

void write_scalar_report(const std::vector<std::pair<std::string, double>>& values,
                         const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << std::setprecision(17);
    for (const auto& [name, v] : values) out << name << ' ' << v << '\n';
}

}  // namespace gradselect
