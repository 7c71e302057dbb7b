#include "gradselect/itemaug.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "gradselect/error.hpp"

namespace gradselect {

namespace {

constexpr double kRrfOffset = 60.0;

std::vector<double> softmax(std::span<const double> s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : s) mx = std::max(mx, v);
    std::vector<double> p(s.size());
    double z = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        p[i] = std::exp(s[i] - mx);
        z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
}

// 1-based rank of each position under the standard ordering.
std::vector<double> ranks_of(std::span<const double> s, std::span<const std::string> ids) {
    std::vector<ScoredItem> tmp;
    for (std::size_t i = 0; i < s.size(); ++i) tmp.push_back({ids[i], s[i]});
    std::vector<std::size_t> order(s.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return ranks_before(tmp[a], tmp[b]); });
    std::vector<double> r(s.size());
    for (std::size_t k = 0; k < order.size(); ++k) r[order[k]] = static_cast<double>(k + 1);
    return r;
}

}  // namespace

std::string to_string(EnsembleRule r) {
    return r == EnsembleRule::SoftmaxSum ? "softmax_sum" : "recip_rank_sum";
}

EnsembleRule parse_ensemble_rule(std::string_view s) {
    if (s == "softmax_sum") return EnsembleRule::SoftmaxSum;
    if (s == "recip_rank_sum") return EnsembleRule::ReciprocalRankSum;
    throw UsageError("unknown ensemble_rule '" + std::string(s) + "'");
}

void ItemAugConfig::validate() const {
    if (k < 1) throw UsageError("itemaug: k must be >= 1");
}

AugmentedPairs build_augmented_pairs(const ModelParams& teacher, const TrainingSet& train,
                                     const QuerySet& queries, const ItemStore& items,
                                     const ItemAugConfig& config) {
    config.validate();
    const EncodedCorpus corpus(teacher, items);
    AugmentedPairs out;
    for (const auto& pair : train.pairs()) {
        if (pair.provenance != Provenance::Original) continue;
        const auto& query = queries.at(pair.query_id);
        ++out.examined_queries;
        const auto ranked = retrieve(teacher, query.id, QueryView::of(query), pair.item_id, corpus,
                                     corpus.size());
        if (!ranked.gold_rank || *ranked.gold_rank <= config.k) continue;
        ++out.gated_queries;
        for (std::size_t r = 0; r < config.k && r < ranked.entries.size(); ++r)
            out.pairs.push_back({query.id, ranked.entries[r].item_id, r + 1});
    }
    return out;
}

void write_augmented_pairs(const AugmentedPairs& pairs, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& p : pairs.pairs)
        out << nlohmann::json{{"query_id", p.query_id}, {"item_id", p.item_id},
                              {"source_rank", p.source_rank}}
                   .dump()
            << '\n';
}

std::vector<AugmentedPair> read_augmented_pairs(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<AugmentedPair> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("query_id").get<std::string>(), j.at("item_id").get<std::string>(),
                           j.at("source_rank").get<std::size_t>()});
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

TrainingSet merge_training_sets(const TrainingSet& original, std::span<const AugmentedPair> extra,
                                const QuerySet& queries, const ItemStore& items) {
    TrainingSet merged;
    for (const auto& p : original.pairs()) merged.add(p, queries, items);
    for (const auto& p : extra)
        merged.add({p.query_id, p.item_id, Provenance::Augmented}, queries, items);
    return merged;
}

ModelParams train_student(const ModelParams& teacher, const TrainingSet& merged,
                          const QuerySet& queries, const ItemStore& items,
                          const Objective* objective, TrainReport* report) {
    if (teacher.initial.query_embeddings.size() == 0)
        throw UsageError("teacher carries no initial parameter snapshot");
    auto student = reinitialized(teacher);
    const auto examples = resolve(merged, queries, items);
    auto r = train(student, examples, objective);
    if (report) *report = std::move(r);
    return student;
}

std::vector<double> ensemble_scores(std::span<const double> teacher_scores,
                                    std::span<const double> student_scores,
                                    std::span<const std::string> ids, EnsembleRule rule) {
    if (teacher_scores.size() != student_scores.size() || ids.size() != teacher_scores.size())
        throw UsageError("ensemble: score vectors differ in length");
    std::vector<double> out(teacher_scores.size());
    if (rule == EnsembleRule::SoftmaxSum) {
        const auto pt = softmax(teacher_scores);
        const auto ps = softmax(student_scores);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = pt[i] + ps[i];
    } else {
        const auto rt = ranks_of(teacher_scores, ids);
        const auto rs = ranks_of(student_scores, ids);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = 1.0 / (kRrfOffset + rt[i]) + 1.0 / (kRrfOffset + rs[i]);
    }
    return out;
}

RankedList ensemble_retrieve(const ModelParams& teacher, const EncodedCorpus& teacher_corpus,
                             const ModelParams& student, const EncodedCorpus& student_corpus,
                             const Circumlocution& query, std::size_t top_n, EnsembleRule rule) {
    if (teacher_corpus.size() != student_corpus.size())
        throw UsageError("ensemble: corpora differ in size");
    const auto st = teacher_corpus.scores(encode_query(teacher, query).vector());
    const auto ss = student_corpus.scores(encode_query(student, query).vector());
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < teacher_corpus.size(); ++i) {
        if (teacher_corpus.id(i) != student_corpus.id(i))
            throw UsageError("ensemble: corpora are not aligned");
        ids.push_back(teacher_corpus.id(i));
    }
    const auto combined = ensemble_scores(st, ss, ids, rule);
    std::vector<ScoredItem> scored;
    for (std::size_t i = 0; i < ids.size(); ++i) scored.push_back({ids[i], combined[i]});
    return make_ranked_list(query.id, std::move(scored), top_n, query.gold_item_id);
}

}  // namespace gradselect
