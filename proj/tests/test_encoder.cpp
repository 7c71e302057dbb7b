#include <doctest.h>

#include <cmath>
#include <set>

#include "gradselect/encoder.hpp"
#include "gradselect/error.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace gradselect;

namespace {

ModelConfig small_config(std::size_t vocab, std::uint64_t seed, Pooling pooling = Pooling::Attention) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.embed_dim = 6;
    c.hidden_dim = 5;
    c.segment_length = 4;
    c.seed = seed;
    c.pooling = pooling;
    c.batch_size = 4;
    return c;
}

// Randomizes biases and attention vectors so every tensor carries gradient.
void perturb_all(ModelParams& p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto* t : {&p.current.query, &p.current.item}) {
        for (Eigen::Index i = 0; i < t->b1.size(); ++i) t->b1(i) = n(rng);
        for (Eigen::Index i = 0; i < t->b2.size(); ++i) t->b2(i) = n(rng);
        for (Eigen::Index i = 0; i < t->attention.size(); ++i) t->attention(i) = n(rng);
    }
}

}  // namespace

TEST_CASE("init is deterministic and snapshots the initial parameters") {
    const auto a = init_params(small_config(20, 1));
    const auto b = init_params(small_config(20, 1));
    const auto c = init_params(small_config(20, 2));
    CHECK(a.current == b.current);
    CHECK_FALSE(a.current == c.current);
    CHECK(a.current == a.initial);
    CHECK(a.current.query.b1.isZero());
    CHECK(a.current.query.attention.isZero());
}

TEST_CASE("Glorot bound when the embedding scale is zero") {
    auto cfg = small_config(20, 3);
    cfg.embedding_init_std = 0.0;
    const auto p = init_params(cfg);
    const double a = std::sqrt(6.0 / (20.0 + 6.0));
    CHECK(p.current.query_embeddings.cwiseAbs().maxCoeff() <= a);
    CHECK(p.current.query.w1.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 11.0));
}

TEST_CASE("query encoding properties") {
    const auto p = init_params(small_config(10, 4));
    auto encode = [&](std::vector<TokenId> toks) {
        Circumlocution c{"q", std::move(toks), {}, std::nullopt, {}};
        return encode_query(p, c);
    };
    for (auto pooling : {Pooling::Mean, Pooling::Attention}) {
        auto cfg = small_config(10, 4, pooling);
        const auto params = init_params(cfg);
        auto enc = [&](std::vector<TokenId> toks) {
            Circumlocution c{"q", std::move(toks), {}, std::nullopt, {}};
            return encode_query(params, c);
        };
        const auto single = enc({5});
        CHECK(single.pool.pooled.isApprox(params.current.query_embeddings.row(5).transpose(), 1e-14));
        CHECK(enc({5, 5}).vector() == enc({5}).vector());
        const auto x = enc({3, 4, 5, 6}).vector();
        const auto y = enc({6, 4, 3, 5}).vector();
        CHECK((x - y).cwiseAbs().maxCoeff() < 1e-14);
    }
    Circumlocution c{"q", {3, 4}, {}, std::nullopt, {}};
    QueryView v = QueryView::of(c);
    v.keep = {0.0, 0.0};
    CHECK_THROWS_AS(encode_query(p, v), DataError);
    CHECK_THROWS_AS(encode({}), DataError);
}

TEST_CASE("item encoding and MaxSim") {
    const auto p = init_params(small_config(12, 5));
    Item single{"m", {3, 4}, {{3, 4}}};
    CHECK(encode_item(p, single).segments.size() == 1);
    Item three{"m", {3, 4, 5, 6, 7, 8, 9, 10, 11}, segment_tokens(std::vector<TokenId>{3, 4, 5, 6, 7, 8, 9, 10, 11}, 4)};
    CHECK(encode_item(p, three).segments.size() == 3);
    Item same{"m", {3, 4, 3, 4}, {{3, 4}, {3, 4}}};
    const auto e = encode_item(p, same);
    CHECK(e.segments[0].tower.output == e.segments[1].tower.output);

    Vector q(2);
    q << 1.0, 0.0;
    std::vector<Vector> segs(3, Vector(2));
    segs[0] << 0.2, 5.0;
    segs[1] << 0.9, -1.0;
    segs[2] << -1.0, 0.0;
    CHECK(score(q, segs) == doctest::Approx(0.9));
    CHECK(max_sim(q, segs).segment == 1);
    CHECK(score(q, std::span(segs).subspan(0, 1)) == doctest::Approx(0.2));
    segs.push_back(segs[1]);
    CHECK(score(q, segs) == doctest::Approx(0.9));
    CHECK(max_sim(q, segs).segment == 1);
}

TEST_CASE("batch loss matches the scalar oracle") {
    const auto toy = oracle::make_toy(11, 3, 7, 5, 3);
    auto params = init_params(small_config(toy.vocab.size(), 11));
    perturb_all(params, 11);
    const auto ex = resolve(toy.train, toy.queries, toy.items);
    std::vector<oracle::View> views;
    for (const auto& e : ex) views.push_back(oracle::view_of(*e.query));
    const auto r = batch_loss_ce(params, ex);
    CHECK(r.loss == doctest::Approx(oracle::batch_ce(params, ex, views)).epsilon(1e-12));
    for (Eigen::Index i = 0; i < r.probabilities.rows(); ++i)
        CHECK(r.probabilities.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("symmetric scores give ln 2") {
    ModelConfig cfg = small_config(8, 1);
    auto p = init_params(cfg);
    Vocab vocab;
    ItemStore items;
    items.add(Item{"a", {3}, {{3}}});
    items.add(Item{"b", {3}, {{3}}});
    QuerySet qs;
    qs.add(Circumlocution{"q1", {4}, {}, "a", {}});
    qs.add(Circumlocution{"q2", {5}, {}, "b", {}});
    std::vector<Example> batch{{&qs.at("q1"), &items.at("a"), 0}, {&qs.at("q2"), &items.at("b"), 1}};
    CHECK(batch_loss_ce(p, batch).loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Vector s(2);
    s << 60.0, 0.0;
    CHECK(cross_entropy(s, 0) < 1e-20);
}

TEST_CASE("analytic gradients match central differences") {
    struct Case {
        Pooling pooling;
        bool share_table;
        bool share_towers;
        std::uint64_t seed;
    };
    for (const Case c : {Case{Pooling::Attention, true, false, 21}, Case{Pooling::Mean, true, false, 22},
                         Case{Pooling::Attention, false, false, 23}, Case{Pooling::Attention, true, true, 24}}) {
        CAPTURE(c.seed);
        const auto toy = oracle::make_toy(c.seed, 3, 7, 5, 3);
        auto cfg = small_config(toy.vocab.size(), c.seed, c.pooling);
        cfg.share_embedding_table = c.share_table;
        cfg.share_towers = c.share_towers;
        auto params = init_params(cfg);
        perturb_all(params, c.seed);
        const auto ex = resolve(toy.train, toy.queries, toy.items);
        std::vector<oracle::View> views;
        for (const auto& e : ex) views.push_back(oracle::view_of(*e.query));

        Gradients g = params.current.zeros_like();
        std::vector<RowMatrix> input_grads;
        batch_loss_ce(params, ex, &g, &input_grads);

        const double h = 1e-4;
        double worst = 0.0;
        auto tensors = params.current.tensors();
        const auto grads = g.tensors();
        REQUIRE(tensors.size() == grads.size());
        for (std::size_t t = 0; t < tensors.size(); ++t)
            for (std::size_t i = 0; i < tensors[t].size(); ++i) {
                const double saved = tensors[t][i];
                tensors[t][i] = saved + h;
                const double up = oracle::batch_ce(params, ex, views);
                tensors[t][i] = saved - h;
                const double down = oracle::batch_ce(params, ex, views);
                tensors[t][i] = saved;
                worst = std::max(worst, oracle::relative_error(grads[t][i], (up - down) / (2 * h)));
            }
        CHECK(worst < 1e-4);

        double worst_input = 0.0;
        for (std::size_t b = 0; b < views.size(); ++b) {
            const auto d = static_cast<std::size_t>(cfg.embed_dim);
            auto& v = views[b];
            v.offsets.assign(v.tokens.size(), oracle::Vec(d, 0.0));
            for (std::size_t i = 0; i < v.tokens.size(); ++i)
                for (std::size_t j = 0; j < d; ++j) {
                    v.offsets[i][j] = h;
                    const double up = oracle::batch_ce(params, ex, views);
                    v.offsets[i][j] = -h;
                    const double down = oracle::batch_ce(params, ex, views);
                    v.offsets[i][j] = 0.0;
                    const double analytic = input_grads[b](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                    worst_input = std::max(worst_input, oracle::relative_error(analytic, (up - down) / (2 * h)));
                }
            v.offsets.clear();
        }
        CHECK(worst_input < 1e-4);
    }
}

TEST_CASE("deleted rows receive zero gradient") {
    const auto toy = oracle::make_toy(31, 2, 6, 5, 3);
    auto params = init_params(small_config(toy.vocab.size(), 31));
    perturb_all(params, 31);
    const auto ex = resolve(toy.train, toy.queries, toy.items);
    const EncodedItem gold = encode_item(params, *ex[0].gold);
    QueryView v = QueryView::of(*ex[0].query);
    v.keep.assign(v.tokens.size(), 1.0);
    v.keep[1] = 0.0;
    const EncodedQuery enc = encode_query(params, v);
    Vector d_out = Vector::Ones(params.config.embed_dim);
    const RowMatrix rows = query_input_gradient(params, enc, d_out);
    CHECK(rows.row(1).isZero());
    CHECK_FALSE(rows.row(0).isZero());
}

TEST_CASE("training descends, is deterministic, and zero epochs is a no-op") {
    const auto toy = oracle::make_toy(41, 8, 6, 5, 8, 60);
    auto cfg = small_config(toy.vocab.size(), 41);
    cfg.embed_dim = 16;
    cfg.hidden_dim = 16;
    cfg.epochs = 50;
    cfg.batch_size = 4;
    const auto ex = resolve(toy.train, toy.queries, toy.items);
    auto a = init_params(cfg);
    auto b = init_params(cfg);
    const double before = batch_loss_ce(a, ex).loss;
    const auto report = train(a, ex);
    train(b, ex);
    CHECK(batch_loss_ce(a, ex).loss < before);
    CHECK(report.epochs.back().mean_loss < report.epochs.front().mean_loss);
    CHECK(a.current == b.current);
    CHECK(a.initial == b.initial);

    cfg.epochs = 0;
    auto z = init_params(cfg);
    train(z, ex);
    CHECK(z.current == z.initial);
}

TEST_CASE("non-finite loss aborts with a numerical error") {
    const auto toy = oracle::make_toy(43, 4, 6, 5, 8);
    auto p = init_params(small_config(toy.vocab.size(), 43));
    p.current.query.b2(0) = std::numeric_limits<double>::quiet_NaN();
    const auto ex = resolve(toy.train, toy.queries, toy.items);
    CHECK_THROWS_AS(train(p, ex), NumericalError);
}

TEST_CASE("batches never repeat a gold item") {
    const auto toy = oracle::make_toy(51, 10, 6, 5, 8);
    TrainingSet t = toy.train;
    t.add({"q1", "m0", Provenance::Augmented}, toy.queries, toy.items);
    t.add({"q2", "m0", Provenance::Augmented}, toy.queries, toy.items);
    const auto ex = resolve(t, toy.queries, toy.items);
    for (std::size_t epoch = 0; epoch < 5; ++epoch)
        for (const auto& batch : make_batches(ex, 4, 7, epoch)) {
            CHECK(batch.size() >= 2);
            std::set<const Item*> golds;
            for (const auto& e : batch) CHECK(golds.insert(e.gold).second);
        }
    CHECK(make_batches(ex, 4, 7, 1).size() == make_batches(ex, 4, 7, 1).size());
}

TEST_CASE("retrieval is the sorted rescoring of the corpus") {
    const auto toy = oracle::make_toy(61, 6, 9, 5, 4);
    auto params = init_params(small_config(toy.vocab.size(), 61));
    perturb_all(params, 61);
    const EncodedCorpus corpus(params, toy.items);
    const auto& q = toy.queries.at("q2");
    const RankedList r = retrieve(params, q, corpus, 100);
    REQUIRE(r.entries.size() == toy.items.size());
    std::vector<std::pair<double, std::string>> oracle_scores;
    for (const auto& item : toy.items) {
        const double s = oracle::max_sim(oracle::encode_query(params, oracle::view_of(q)), oracle::encode_item(params, item));
        oracle_scores.emplace_back(s, item.id);
    }
    std::sort(oracle_scores.begin(), oracle_scores.end(),
              [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    for (std::size_t i = 0; i < r.entries.size(); ++i) {
        CHECK(r.entries[i].item_id == oracle_scores[i].second);
        CHECK(r.entries[i].score == doctest::Approx(oracle_scores[i].first).epsilon(1e-12));
    }
    CHECK(r.gold_rank == r.rank_of("m2"));
    CHECK(retrieve(params, q, corpus, 3).entries.size() == 3);

    ItemStore one;
    one.add(toy.items.at("m2"));
    const RankedList single = retrieve(params, q, EncodedCorpus(params, one), 10);
    CHECK(single.entries.size() == 1);
    CHECK(single.gold_rank == std::optional<std::size_t>(1));
}

TEST_CASE("checkpoint round trip is bitwise") {
    const auto dir = test_util::scratch_dir("ckpt");
    for (bool share : {true, false}) {
        auto cfg = small_config(15, 71);
        cfg.share_embedding_table = share;
        cfg.share_towers = !share;
        auto p = init_params(cfg);
        perturb_all(p, 71);
        save_checkpoint(p, dir / "m.ckpt");
        const auto back = load_checkpoint(dir / "m.ckpt");
        CHECK(back.current == p.current);
        CHECK(back.initial == p.initial);
        CHECK(back.config.share_embedding_table == share);
        CHECK(back.config.seed == 71);
    }
    test_util::write_file(dir / "bad.ckpt", "not a checkpoint");
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), DataError);
}
