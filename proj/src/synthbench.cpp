#include "gradselect/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "gradselect/error.hpp"
#include "gradselect/gradaug.hpp"
#include "gradselect/rng.hpp"

namespace gradselect {

namespace {

// Cumulative-weight sampler over a fixed set of term indices.
class WeightedPool {
public:
    WeightedPool(std::vector<std::size_t> terms, double exponent) : terms_(std::move(terms)) {
        double acc = 0.0;
        for (auto t : terms_) {
            acc += 1.0 / std::pow(static_cast<double>(t + 1), exponent);
            cumulative_.push_back(acc);
        }
    }
    std::size_t draw(Rng& rng) const {
        const double u = uniform01(rng) * cumulative_.back();
        auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
        if (it == cumulative_.end()) --it;
        return terms_[static_cast<std::size_t>(it - cumulative_.begin())];
    }

private:
    std::vector<std::size_t> terms_;
    std::vector<double> cumulative_;
};

std::string term_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "w%04zu", index);
    return buf;
}

std::string id_name(char prefix, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%c%04zu", prefix, index);
    return buf;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

std::string sentence_text(std::span<const std::size_t> terms) {
    std::string s;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (i) s += ' ';
        s += term_name(terms[i]);
    }
    return s + ".";
}

}  // namespace

void SynthConfig::validate() const {
    if (n_items < 2) throw UsageError("synth: n_items must be >= 2");
    if (terms_per_item < 1) throw UsageError("synth: terms_per_item must be >= 1");
    if (!(unseen_rate >= 0.0 && unseen_rate < 1.0)) throw UsageError("synth: unseen_rate must be in [0, 1)");
    if (!(spe_rate >= 0.0 && spe_rate < 1.0)) throw UsageError("synth: spe_rate must be in [0, 1)");
    if (queries_per_item < 1) throw UsageError("synth: queries_per_item must be >= 1");
    if (n_topics < 1) throw UsageError("synth: n_topics must be >= 1");
    if (!(topic_bias >= 0.0 && topic_bias <= 1.0)) throw UsageError("synth: topic_bias must be in [0, 1]");
    if (common_terms < 1 || vocab_size < common_terms + n_topics * terms_per_item)
        throw UsageError("synth: vocab_size too small for the topic pools");
    if (true_sentences < 1) throw UsageError("synth: true_sentences must be >= 1");
    const double true_terms = std::ceil(static_cast<double>(query_terms) * (1.0 - spe_rate) - 1e-9);
    if (query_terms == 0 || true_terms < 1.0)
        throw UsageError("synth: configuration leaves queries without a true term");
}

std::string to_string(TermLabel l) {
    switch (l) {
        case TermLabel::TrueTerm: return "TRUE_TERM";
        case TermLabel::SpeTerm: return "SPE_TERM";
        case TermLabel::Filler: return "FILLER";
    }
    return "?";
}

TermLabel parse_term_label(std::string_view s) {
    if (s == "TRUE_TERM") return TermLabel::TrueTerm;
    if (s == "SPE_TERM") return TermLabel::SpeTerm;
    if (s == "FILLER") return TermLabel::Filler;
    throw DataError("unknown term label '" + std::string(s) + "'");
}

SynthData generate(const SynthConfig& config) {
    config.validate();
    auto rng = make_rng({config.seed, 0x5e7ULL});

    std::vector<std::size_t> common(config.common_terms);
    std::iota(common.begin(), common.end(), 0);
    std::vector<std::size_t> rest(config.vocab_size - config.common_terms);
    std::iota(rest.begin(), rest.end(), config.common_terms);
    shuffle(rest, rng);
    std::vector<std::vector<std::size_t>> topic_terms(config.n_topics);
    for (std::size_t i = 0; i < rest.size(); ++i) topic_terms[i % config.n_topics].push_back(rest[i]);
    std::vector<WeightedPool> topics;
    for (auto& t : topic_terms) {
        std::sort(t.begin(), t.end());
        topics.emplace_back(t, config.zipf_exponent);
    }
    std::vector<std::size_t> all(config.vocab_size);
    std::iota(all.begin(), all.end(), 0);
    const WeightedPool global(all, config.zipf_exponent);

    SynthData data;
    std::vector<std::vector<std::size_t>> item_terms(config.n_items);
    for (std::size_t i = 0; i < config.n_items; ++i) {
        const auto& topic = topics[i % config.n_topics];
        std::set<std::size_t> chosen;
        auto& terms = item_terms[i];
        while (terms.size() < config.terms_per_item) {
            const auto t = uniform01(rng) < config.topic_bias ? topic.draw(rng) : global.draw(rng);
            if (chosen.insert(t).second) terms.push_back(t);
        }
        data.items.push_back({id_name('i', i), sentence_text(terms)});
    }

    const auto n_true = static_cast<std::size_t>(
        std::ceil(static_cast<double>(config.query_terms) * (1.0 - config.spe_rate) - 1e-9));
    const auto n_spe = config.query_terms - n_true;
    const auto n_withheld = std::min<std::size_t>(
        config.terms_per_item - 1,
        static_cast<std::size_t>(std::llround(config.unseen_rate * static_cast<double>(config.terms_per_item))));

    for (std::size_t qi = 0; qi < config.n_items * config.queries_per_item; ++qi) {
        const std::size_t i = qi / config.queries_per_item;
        auto visible = item_terms[i];
        shuffle(visible, rng);
        visible.resize(visible.size() - n_withheld);

        std::vector<std::size_t> true_tokens;
        auto pool = visible;
        while (true_tokens.size() < n_true) {
            if (pool.empty()) {
                pool = visible;
                shuffle(pool, rng);
            }
            true_tokens.push_back(pool.back());
            pool.pop_back();
        }

        const std::set<std::size_t> gold_set(item_terms[i].begin(), item_terms[i].end());
        std::vector<std::size_t> spe_tokens;
        std::size_t confuser = (i + 1 + uniform_index(rng, config.n_items - 1)) % config.n_items;
        for (std::size_t attempts = 0; spe_tokens.size() < n_spe && attempts < config.n_items; ++attempts) {
            std::vector<std::size_t> candidates;
            for (auto t : item_terms[confuser])
                if (!gold_set.contains(t) &&
                    std::find(spe_tokens.begin(), spe_tokens.end(), t) == spe_tokens.end())
                    candidates.push_back(t);
            shuffle(candidates, rng);
            for (auto t : candidates) {
                if (spe_tokens.size() == n_spe) break;
                spe_tokens.push_back(t);
            }
            confuser = (confuser + 1) % config.n_items;
            if (confuser == i) confuser = (confuser + 1) % config.n_items;
        }
        if (spe_tokens.size() < n_spe) throw UsageError("synth: cannot draw enough SPE terms");

        SynthQuery q;
        q.record.id = id_name('q', qi);
        q.record.gold_id = id_name('i', i);
        auto add_sentence = [&](std::span<const std::size_t> terms, TermLabel label) {
            if (terms.empty()) return;
            q.record.sentences.push_back(sentence_text(terms));
            q.labels.insert(q.labels.end(), terms.size(), label);
        };
        const auto chunks = std::min(config.true_sentences, true_tokens.size());
        for (std::size_t c = 0; c < chunks; ++c) {
            const auto b = c * true_tokens.size() / chunks;
            const auto e = (c + 1) * true_tokens.size() / chunks;
            add_sentence(std::span(true_tokens).subspan(b, e - b), TermLabel::TrueTerm);
        }
        add_sentence(spe_tokens, TermLabel::SpeTerm);
        for (std::size_t s = 0; s < config.distractor_sentences; ++s) {
            std::vector<std::size_t> filler;
            for (std::size_t k = 0; k < config.filler_terms; ++k)
                filler.push_back(common[uniform_index(rng, common.size())]);
            add_sentence(filler, TermLabel::Filler);
        }
        for (const auto& s : q.record.sentences) {
            if (!q.record.text.empty()) q.record.text += ' ';
            q.record.text += s;
        }
        data.queries.push_back(std::move(q));
    }
    return data;
}

std::vector<QueryRecord> query_records(const SynthData& data) {
    std::vector<QueryRecord> out;
    for (const auto& q : data.queries) out.push_back(q.record);
    return out;
}

LabelMap labels_of(const SynthData& data) {
    LabelMap m;
    for (const auto& q : data.queries) m.emplace(q.record.id, q.labels);
    return m;
}

SynthFiles write_synth(const SynthData& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    SynthFiles f{dir / "items.jsonl", dir / "queries.jsonl", dir / "labels.jsonl"};
    std::ofstream items(f.items, std::ios::binary), queries(f.queries, std::ios::binary),
        labels(f.labels, std::ios::binary);
    if (!items || !queries || !labels) throw DataError("cannot write synth files under " + dir.string());
    for (const auto& it : data.items)
        items << nlohmann::ordered_json{{"id", it.id}, {"text", it.text}}.dump() << '\n';
    for (const auto& q : data.queries) {
        nlohmann::ordered_json j{{"id", q.record.id},
                                 {"text", q.record.text},
                                 {"gold_id", *q.record.gold_id},
                                 {"sentences", q.record.sentences}};
        queries << j.dump() << '\n';
        std::vector<std::string> names;
        for (auto l : q.labels) names.push_back(to_string(l));
        labels << nlohmann::ordered_json{{"query_id", q.record.id}, {"labels", names}}.dump() << '\n';
    }
    return f;
}

LabelMap read_labels(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    LabelMap m;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            std::vector<TermLabel> labels;
            for (const auto& s : j.at("labels")) labels.push_back(parse_term_label(s.get<std::string>()));
            m.emplace(j.at("query_id").get<std::string>(), std::move(labels));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return m;
}

double auroc(std::span<const double> positives, std::span<const double> negatives) {
    if (positives.empty() || negatives.empty()) throw UsageError("auroc needs both classes");
    double wins = 0.0;
    for (double p : positives)
        for (double n : negatives) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
    return wins / (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

ProxyGrade grade_gradient_proxy(const ModelParams& model, const QuerySet& queries,
                                const LabelMap& labels, const ItemStore& items) {
    const EncodedCorpus corpus(model, items);
    std::unordered_map<std::string, std::size_t> position;
    for (std::size_t i = 0; i < corpus.size(); ++i) position.emplace(corpus.id(i), i);

    ProxyGrade g;
    double rank_sum[3] = {0, 0, 0};
    std::size_t rank_n[3] = {0, 0, 0};
    double auc_sum = 0.0, auc_spe_sum = 0.0;
    std::size_t auc_spe_n = 0;
    for (const auto& q : queries) {
        auto lit = labels.find(q.id);
        if (lit == labels.end() || !q.gold_item_id) continue;
        const auto& lab = lit->second;
        if (lab.size() != q.tokens.size())
            throw DataError("labels of query '" + q.id + "' do not match its tokens");
        const auto imp = importance_scores(model, QueryView::of(q), corpus.all_segments(),
                                           position.at(*q.gold_item_id));
        const auto ranks = imp.ranks();
        std::vector<double> pos, neg, spe;
        for (std::size_t i = 0; i < lab.size(); ++i) {
            const auto k = static_cast<std::size_t>(lab[i]);
            rank_sum[k] += static_cast<double>(ranks[i]);
            ++rank_n[k];
            if (lab[i] == TermLabel::TrueTerm)
                pos.push_back(imp.scores[i]);
            else
                neg.push_back(imp.scores[i]);
            if (lab[i] == TermLabel::SpeTerm) spe.push_back(imp.scores[i]);
        }
        if (pos.empty() || neg.empty()) {
            ++g.skipped_queries;
            continue;
        }
        ++g.graded_queries;
        auc_sum += auroc(pos, neg);
        if (!spe.empty()) {
            auc_spe_sum += auroc(pos, spe);
            ++auc_spe_n;
        }
    }
    auto mean = [](double s, std::size_t n) { return n ? s / static_cast<double>(n) : 0.0; };
    g.mean_rank_true = mean(rank_sum[0], rank_n[0]);
    g.mean_rank_spe = mean(rank_sum[1], rank_n[1]);
    g.mean_rank_filler = mean(rank_sum[2], rank_n[2]);
    g.auroc = mean(auc_sum, g.graded_queries);
    g.auroc_vs_spe = mean(auc_spe_sum, auc_spe_n);
    return g;
}

}  // namespace gradselect
