#include <doctest.h>

#include <set>

#include "gradselect/error.hpp"
#include "gradselect/lexical.hpp"
#include "gradselect/synthbench.hpp"
#include "test_util.hpp"

using namespace gradselect;

namespace {

std::vector<std::string> words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string w; in >> w;) {
        while (!w.empty() && std::ispunct(static_cast<unsigned char>(w.back()))) w.pop_back();
        out.push_back(w);
    }
    return out;
}

}  // namespace

TEST_CASE("generated counts and labels") {
    SynthConfig cfg;
    cfg.n_items = 50;
    const auto data = generate(cfg);
    REQUIRE(data.items.size() == 50);
    REQUIRE(data.queries.size() == 50);
    std::map<std::string, std::set<std::string>> item_terms;
    for (const auto& item : data.items) {
        const auto w = words(item.text);
        item_terms[item.id] = {w.begin(), w.end()};
        CHECK(item_terms[item.id].size() == cfg.terms_per_item);
    }
    for (const auto& q : data.queries) {
        const auto w = words(q.record.text);
        REQUIRE(q.labels.size() == w.size());
        CHECK(std::count(q.labels.begin(), q.labels.end(), TermLabel::SpeTerm) == 3);
        CHECK(std::count(q.labels.begin(), q.labels.end(), TermLabel::TrueTerm) == 7);
        CHECK(std::count(q.labels.begin(), q.labels.end(), TermLabel::Filler) == 4);
        CHECK(q.record.sentences.size() == 4);
        const auto& gold = item_terms.at(*q.record.gold_id);
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (q.labels[i] == TermLabel::TrueTerm) CHECK(gold.contains(w[i]));
            if (q.labels[i] == TermLabel::SpeTerm) CHECK_FALSE(gold.contains(w[i]));
        }
    }
}

TEST_CASE("unseen terms are withheld from each query") {
    SynthConfig cfg;
    cfg.n_items = 30;
    cfg.query_terms = 30;
    cfg.spe_rate = 0.0;
    cfg.distractor_sentences = 0;
    const auto data = generate(cfg);
    for (std::size_t i = 0; i < data.queries.size(); ++i) {
        const auto w = words(data.queries[i].record.text);
        const std::set<std::string> distinct(w.begin(), w.end());
        CHECK(distinct.size() == cfg.terms_per_item - 5);
    }
}

TEST_CASE("several queries per item") {
    SynthConfig cfg;
    cfg.n_items = 10;
    cfg.queries_per_item = 3;
    const auto data = generate(cfg);
    REQUIRE(data.queries.size() == 30);
    CHECK(data.queries[4].record.id == "q0004");
    CHECK(*data.queries[4].record.gold_id == "i0001");
    CHECK(data.queries[3].record.text != data.queries[4].record.text);
}

TEST_CASE("generation is deterministic per seed") {
    SynthConfig cfg;
    cfg.n_items = 40;
    const auto a = test_util::scratch_dir("synth_a");
    const auto b = test_util::scratch_dir("synth_b");
    const auto fa = write_synth(generate(cfg), a);
    const auto fb = write_synth(generate(cfg), b);
    CHECK(test_util::read_file(fa.items) == test_util::read_file(fb.items));
    CHECK(test_util::read_file(fa.queries) == test_util::read_file(fb.queries));
    CHECK(test_util::read_file(fa.labels) == test_util::read_file(fb.labels));
    cfg.seed = 2;
    const auto c = generate(cfg);
    CHECK(c.items[0].text != generate(SynthConfig{.n_items = 40}).items[0].text);

    const auto labels = read_labels(fa.labels);
    CHECK(labels == labels_of(generate(SynthConfig{.n_items = 40})));
    const auto records = read_query_records(fa.queries);
    REQUIRE(records.size() == 40);
    CHECK(records[7].sentences.size() == 4);
}

TEST_CASE("clean queries rank their gold item first under BM25") {
    SynthConfig cfg;
    cfg.unseen_rate = 0.0;
    cfg.spe_rate = 0.0;
    cfg.distractor_sentences = 0;
    const auto data = generate(cfg);
    std::vector<std::string> texts;
    for (const auto& i : data.items) texts.push_back(i.text);
    const auto vocab = build_vocab(texts);
    const auto items = make_item_store(data.items, vocab);
    const auto queries = make_query_set(query_records(data), vocab);
    const Bm25Index index(items);
    for (const auto& q : queries) {
        CAPTURE(q.id);
        CHECK(index.rank(q, 10).gold_rank == std::optional<std::size_t>(1));
    }
}

TEST_CASE("synth config validation") {
    SynthConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.unseen_rate = 1.0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = {};
    cfg.spe_rate = 1.0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = {};
    cfg.query_terms = 0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = {};
    cfg.n_items = 1;
    CHECK_THROWS_AS(generate(cfg), UsageError);
    CHECK(parse_term_label(to_string(TermLabel::SpeTerm)) == TermLabel::SpeTerm);
}

TEST_CASE("AUROC with ties") {
    CHECK(auroc(std::vector<double>{3, 4}, std::vector<double>{1, 2}) == 1.0);
    CHECK(auroc(std::vector<double>{1, 2}, std::vector<double>{3, 4}) == 0.0);
    CHECK(auroc(std::vector<double>{1, 1}, std::vector<double>{1}) == 0.5);
    CHECK(auroc(std::vector<double>{2, 1}, std::vector<double>{1, 0}) == doctest::Approx(0.875));
}

TEST_CASE("proxy grading skips queries without both classes") {
    SynthConfig cfg;
    cfg.n_items = 20;
    const auto data = generate(cfg);
    std::vector<std::string> texts;
    for (const auto& i : data.items) texts.push_back(i.text);
    for (const auto& q : data.queries) texts.push_back(q.record.text);
    const auto vocab = build_vocab(texts);
    const auto items = make_item_store(data.items, vocab);
    const auto queries = make_query_set(query_records(data), vocab);
    ModelConfig mc;
    mc.vocab_size = vocab.size();
    mc.embed_dim = 16;
    mc.hidden_dim = 16;
    const auto model = init_params(mc);

    auto labels = labels_of(data);
    labels.at("q0000").assign(labels.at("q0000").size(), TermLabel::SpeTerm);
    const auto g = grade_gradient_proxy(model, queries, labels, items);
    CHECK(g.skipped_queries == 1);
    CHECK(g.graded_queries == 19);
    CHECK(g.auroc >= 0.0);
    CHECK(g.auroc <= 1.0);

    labels.at("q0001").pop_back();
    CHECK_THROWS_AS(grade_gradient_proxy(model, queries, labels, items), DataError);
}
