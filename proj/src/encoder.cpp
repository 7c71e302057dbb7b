#include "gradselect/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "gradselect/error.hpp"
#include "gradselect/rng.hpp"

namespace gradselect {

namespace {

constexpr char kCheckpointMagic[8] = {'G', 'S', 'E', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename M>
void fill_uniform(M& m, double bound, Rng& rng) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * uniform01(rng) - 1.0) * bound;
}

template <typename M>
void fill_normal(M& m, double stddev, Rng& rng) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * standard_normal(rng);
}

double glorot(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Tower init_tower(std::size_t d, std::size_t h, Rng& rng) {
    Tower t;
    t.w1.resize(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(d));
    t.w2.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(h));
    fill_uniform(t.w1, glorot(d, h), rng);
    fill_uniform(t.w2, glorot(h, d), rng);
    t.b1 = Vector::Zero(static_cast<Eigen::Index>(h));
    t.b2 = Vector::Zero(static_cast<Eigen::Index>(d));
    // Bias-like: pooling starts from the content term alone.
    t.attention = Vector::Zero(static_cast<Eigen::Index>(d));
    return t;
}

Tower zeros_like(const Tower& t) {
    return Tower{Matrix::Zero(t.w1.rows(), t.w1.cols()), Vector::Zero(t.b1.size()),
                 Matrix::Zero(t.w2.rows(), t.w2.cols()), Vector::Zero(t.b2.size()),
                 Vector::Zero(t.attention.size())};
}

PoolCache pool_forward(const RowMatrix& table, std::span<const TokenId> tokens,
                       const std::vector<double>& keep, const RowMatrix& offsets, Pooling pooling,
                       const Vector& attention) {
    const auto l = static_cast<Eigen::Index>(tokens.size());
    const auto d = table.cols();
    PoolCache c;
    c.rows.resize(l, d);
    c.keep.assign(tokens.size(), 1.0);
    if (!keep.empty()) {
        if (keep.size() != tokens.size()) throw UsageError("mask length differs from token count");
        c.keep = keep;
    }
    if (offsets.size() && (offsets.rows() != l || offsets.cols() != d))
        throw UsageError("noise offsets shape differs from the embedding sequence");
    for (Eigen::Index i = 0; i < l; ++i) {
        const auto tok = tokens[static_cast<std::size_t>(i)];
        if (tok < 0 || tok >= table.rows()) throw DataError("token id outside the embedding table");
        c.rows.row(i) = table.row(tok);
        if (offsets.size()) c.rows.row(i) += offsets.row(i);
    }
    c.kept_count = 0.0;
    for (double k : c.keep) c.kept_count += k;
    c.context = Vector::Zero(d);
    c.weights.assign(tokens.size(), 0.0);
    if (l == 0) {
        c.pooled = Vector::Zero(d);
        return c;
    }
    if (c.kept_count <= 0.0) throw DataError("fully deleted query");
    for (Eigen::Index i = 0; i < l; ++i)
        if (c.keep[static_cast<std::size_t>(i)] != 0.0)
            c.context += c.keep[static_cast<std::size_t>(i)] * c.rows.row(i).transpose();
    c.context /= c.kept_count;

    if (pooling == Pooling::Mean) {
        for (std::size_t i = 0; i < c.keep.size(); ++i) c.weights[i] = c.keep[i] / c.kept_count;
        c.pooled = c.context;
        return c;
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> s(tokens.size(), 0.0);
    double max_s = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < l; ++i) {
        if (c.keep[static_cast<std::size_t>(i)] == 0.0) continue;
        s[static_cast<std::size_t>(i)] = scale * c.rows.row(i).dot(attention + c.context);
        max_s = std::max(max_s, s[static_cast<std::size_t>(i)]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (c.keep[i] == 0.0) continue;
        c.weights[i] = c.keep[i] * std::exp(s[i] - max_s);
        z += c.weights[i];
    }
    c.pooled = Vector::Zero(d);
    for (Eigen::Index i = 0; i < l; ++i) {
        auto& w = c.weights[static_cast<std::size_t>(i)];
        w /= z;
        if (w != 0.0) c.pooled += w * c.rows.row(i).transpose();
    }
    return c;
}

// d loss / d rows given d loss / d pooled. Accumulates the pooling-vector gradient.
RowMatrix pool_backward(const PoolCache& c, Pooling pooling, const Vector& attention,
                        const Vector& g, Vector& d_attention) {
    const auto l = c.rows.rows();
    RowMatrix d_rows = RowMatrix::Zero(l, c.rows.cols());
    if (l == 0) return d_rows;
    if (pooling == Pooling::Mean) {
        for (Eigen::Index i = 0; i < l; ++i)
            d_rows.row(i) = (c.keep[static_cast<std::size_t>(i)] / c.kept_count) * g.transpose();
        return d_rows;
    }
    const double gx = g.dot(c.pooled);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c.rows.cols()));
    std::vector<double> ds(static_cast<std::size_t>(l), 0.0);
    Vector sum_ds_rows = Vector::Zero(c.rows.cols());
    for (Eigen::Index i = 0; i < l; ++i) {
        const auto w = c.weights[static_cast<std::size_t>(i)];
        if (w == 0.0) continue;
        ds[static_cast<std::size_t>(i)] = scale * w * (c.rows.row(i).dot(g) - gx);
        sum_ds_rows += ds[static_cast<std::size_t>(i)] * c.rows.row(i).transpose();
    }
    const Vector direct = attention + c.context;
    for (Eigen::Index i = 0; i < l; ++i) {
        const auto k = c.keep[static_cast<std::size_t>(i)];
        if (k == 0.0) continue;
        d_rows.row(i) = c.weights[static_cast<std::size_t>(i)] * g.transpose() +
                        ds[static_cast<std::size_t>(i)] * direct.transpose() +
                        (k / c.kept_count) * sum_ds_rows.transpose();
    }
    d_attention += sum_ds_rows;
    return d_rows;
}

TowerCache tower_forward(const Tower& t, const Vector& x) {
    TowerCache c;
    c.input = x;
    c.hidden = (t.w1 * x + t.b1).array().tanh().matrix();
    c.output = t.w2 * c.hidden + t.b2;
    return c;
}

Vector tower_backward(const Tower& t, const TowerCache& c, const Vector& dy, Tower& g) {
    g.w2.noalias() += dy * c.hidden.transpose();
    g.b2 += dy;
    const Vector dz = ((t.w2.transpose() * dy).array() * (1.0 - c.hidden.array().square())).matrix();
    g.w1.noalias() += dz * c.input.transpose();
    g.b1 += dz;
    return t.w1.transpose() * dz;
}

void scatter_rows(const RowMatrix& d_rows, std::span<const TokenId> tokens, RowMatrix& table_grad) {
    for (Eigen::Index i = 0; i < d_rows.rows(); ++i)
        table_grad.row(tokens[static_cast<std::size_t>(i)]) += d_rows.row(i);
}

template <typename T>
void append_tensor(std::vector<std::span<T>>& out, auto& m) {
    if (m.size()) out.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
}

template <typename T, typename P>
std::vector<std::span<T>> collect(P& p) {
    std::vector<std::span<T>> out;
    append_tensor<T>(out, p.query_embeddings);
    append_tensor<T>(out, p.item_embeddings);
    for (auto* t : {&p.query, &p.item}) {
        append_tensor<T>(out, t->w1);
        append_tensor<T>(out, t->b1);
        append_tensor<T>(out, t->w2);
        append_tensor<T>(out, t->b2);
        append_tensor<T>(out, t->attention);
    }
    return out;
}

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size},
            {"embed_dim", c.embed_dim},
            {"hidden_dim", c.hidden_dim},
            {"segment_length", c.segment_length},
            {"share_embedding_table", c.share_embedding_table},
            {"share_towers", c.share_towers},
            {"tie_tower_init", c.tie_tower_init},
            {"embedding_init_std", c.embedding_init_std},
            {"pooling", c.pooling == Pooling::Mean ? "mean" : "attention"},
            {"seed", c.seed},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_epsilon", c.adam_epsilon}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.segment_length = j.at("segment_length").get<std::size_t>();
    c.share_embedding_table = j.at("share_embedding_table").get<bool>();
    c.share_towers = j.at("share_towers").get<bool>();
    c.tie_tower_init = j.at("tie_tower_init").get<bool>();
    c.embedding_init_std = j.at("embedding_init_std").get<double>();
    c.pooling = j.at("pooling").get<std::string>() == "mean" ? Pooling::Mean : Pooling::Attention;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.adam_beta1 = j.at("adam_beta1").get<double>();
    c.adam_beta2 = j.at("adam_beta2").get<double>();
    c.adam_epsilon = j.at("adam_epsilon").get<double>();
    return c;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 3) throw UsageError("vocab_size must include the special tokens");
    if (embed_dim < 1 || hidden_dim < 1) throw UsageError("embed_dim and hidden_dim must be >= 1");
    if (segment_length < 1) throw UsageError("segment_length must be >= 1");
    if (batch_size < 2) throw UsageError("batch_size must be >= 2 for in-batch negatives");
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
    if (!(embedding_init_std >= 0.0)) throw UsageError("embedding_init_std must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw UsageError("Adam moments must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) throw UsageError("adam_epsilon must be positive");
}

std::vector<std::span<double>> ParamSet::tensors() { return collect<double>(*this); }
std::vector<std::span<const double>> ParamSet::tensors() const {
    return collect<const double>(*this);
}

ParamSet ParamSet::zeros_like() const {
    ParamSet z;
    z.query_embeddings = RowMatrix::Zero(query_embeddings.rows(), query_embeddings.cols());
    z.item_embeddings = RowMatrix::Zero(item_embeddings.rows(), item_embeddings.cols());
    z.query = gradselect::zeros_like(query);
    z.item = gradselect::zeros_like(item);
    return z;
}

bool ParamSet::all_finite() const {
    for (auto t : tensors())
        for (double v : t)
            if (!std::isfinite(v)) return false;
    return true;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
    const auto ta = a.tensors();
    const auto tb = b.tensors();
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i].size() != tb[i].size()) return false;
        if (std::memcmp(ta[i].data(), tb[i].data(), ta[i].size_bytes()) != 0) return false;
    }
    return true;
}

ModelParams init_params(const ModelConfig& config) {
    config.validate();
    const auto v = config.vocab_size, d = config.embed_dim, h = config.hidden_dim;
    auto rng = make_rng({config.seed, 0x1417ULL});
    ModelParams p{config, {}, {}};
    p.current.query_embeddings.resize(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(d));
    auto fill_table = [&](RowMatrix& table) {
        if (config.embedding_init_std > 0.0)
            fill_normal(table, config.embedding_init_std, rng);
        else
            fill_uniform(table, glorot(v, d), rng);
    };
    fill_table(p.current.query_embeddings);
    if (!config.share_embedding_table) {
        p.current.item_embeddings.resize(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(d));
        fill_table(p.current.item_embeddings);
    }
    p.current.query = init_tower(d, h, rng);
    if (!config.share_towers)
        p.current.item = config.tie_tower_init ? p.current.query : init_tower(d, h, rng);
    p.initial = p.current;
    return p;
}

ModelParams reinitialized(const ModelParams& params) {
    return ModelParams{params.config, params.initial, params.initial};
}

EncodedQuery encode_query(const ModelParams& params, const QueryView& view) {
    if (view.tokens.empty()) throw DataError("query has no tokens");
    EncodedQuery e;
    e.tokens.assign(view.tokens.begin(), view.tokens.end());
    e.pool = pool_forward(params.current.query_embeddings, view.tokens, view.keep, view.offsets,
                          params.config.pooling, params.current.query.attention);
    e.tower = tower_forward(params.current.query, e.pool.pooled);
    return e;
}

EncodedQuery encode_query(const ModelParams& params, const Circumlocution& c) {
    return encode_query(params, QueryView::of(c));
}

EncodedItem encode_item(const ModelParams& params, const Item& item) {
    EncodedItem e;
    static const std::vector<double> no_mask;
    static const RowMatrix no_offsets;
    for (const auto& seg : item.segments) {
        EncodedSegment s;
        s.tokens = seg;
        s.pool = pool_forward(params.current.item_table(), seg, no_mask, no_offsets,
                              params.config.pooling, params.current.item_tower().attention);
        s.tower = tower_forward(params.current.item_tower(), s.pool.pooled);
        e.segments.push_back(std::move(s));
    }
    if (e.segments.empty()) throw DataError("item '" + item.id + "' has no segments");
    return e;
}

std::vector<Vector> EncodedItem::vectors() const {
    std::vector<Vector> out;
    for (const auto& s : segments) out.push_back(s.tower.output);
    return out;
}

MaxSim max_sim(const Vector& q, std::span<const Vector> segment_vectors) {
    if (segment_vectors.empty()) throw UsageError("MaxSim over an empty segment list");
    MaxSim best{q.dot(segment_vectors[0]), 0};
    for (std::size_t s = 1; s < segment_vectors.size(); ++s) {
        const double v = q.dot(segment_vectors[s]);
        if (v > best.score) best = {v, s};
    }
    return best;
}

MaxSim max_sim(const Vector& q, const EncodedItem& item) {
    if (item.segments.empty()) throw UsageError("MaxSim over an empty segment list");
    MaxSim best{q.dot(item.segments[0].tower.output), 0};
    for (std::size_t s = 1; s < item.segments.size(); ++s) {
        const double v = q.dot(item.segments[s].tower.output);
        if (v > best.score) best = {v, s};
    }
    return best;
}

double score(const Vector& q, std::span<const Vector> segment_vectors) {
    return max_sim(q, segment_vectors).score;
}

void backward_query(const ModelParams& params, const EncodedQuery& enc, const Vector& d_output,
                    Gradients& grads, RowMatrix* input_grads) {
    const Vector d_pooled = tower_backward(params.current.query, enc.tower, d_output, grads.query);
    RowMatrix d_rows = pool_backward(enc.pool, params.config.pooling,
                                     params.current.query.attention, d_pooled,
                                     grads.query.attention);
    scatter_rows(d_rows, enc.tokens, grads.query_embeddings);
    if (input_grads) *input_grads = std::move(d_rows);
}

RowMatrix query_input_gradient(const ModelParams& params, const EncodedQuery& enc,
                               const Vector& d_output) {
    const auto& tower = params.current.query;
    const Vector dz = ((tower.w2.transpose() * d_output).array() *
                       (1.0 - enc.tower.hidden.array().square()))
                          .matrix();
    const Vector d_pooled = tower.w1.transpose() * dz;
    Vector unused = Vector::Zero(tower.attention.size());
    return pool_backward(enc.pool, params.config.pooling, tower.attention, d_pooled, unused);
}

void backward_segment(const ModelParams& params, const EncodedSegment& enc,
                      const Vector& d_output, Gradients& grads) {
    const Vector d_pooled = tower_backward(params.current.item_tower(), enc.tower, d_output, grads.item_tower());
    const RowMatrix d_rows = pool_backward(enc.pool, params.config.pooling,
                                           params.current.item_tower().attention, d_pooled,
                                           grads.item_tower().attention);
    scatter_rows(d_rows, enc.tokens, grads.item_table());
}

std::vector<Example> resolve(const TrainingSet& set, const QuerySet& queries,
                             const ItemStore& items) {
    std::vector<Example> out;
    out.reserve(set.size());
    std::uint64_t id = 0;
    for (const auto& p : set.pairs()) out.push_back({&queries.at(p.query_id), &items.at(p.item_id), id++});
    return out;
}

ScoreTable score_views(std::span<const EncodedQuery> views, std::span<const EncodedItem> candidates) {
    ScoreTable t;
    t.scores.resize(static_cast<Eigen::Index>(views.size()), static_cast<Eigen::Index>(candidates.size()));
    t.argmax.assign(views.size(), std::vector<std::size_t>(candidates.size(), 0));
    for (std::size_t v = 0; v < views.size(); ++v)
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            const auto m = max_sim(views[v].vector(), candidates[j]);
            t.scores(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j)) = m.score;
            t.argmax[v][j] = m.segment;
        }
    return t;
}

Matrix softmax_rows(const Matrix& scores) {
    Matrix p(scores.rows(), scores.cols());
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        const double mx = scores.row(r).maxCoeff();
        double z = 0.0;
        for (Eigen::Index c = 0; c < scores.cols(); ++c) {
            p(r, c) = std::exp(scores(r, c) - mx);
            z += p(r, c);
        }
        p.row(r) /= z;
    }
    return p;
}

double cross_entropy(const Eigen::Ref<const Vector>& scores, std::size_t target, Vector* d_scores) {
    const double mx = scores.maxCoeff();
    double z = 0.0;
    for (Eigen::Index c = 0; c < scores.size(); ++c) z += std::exp(scores(c) - mx);
    const double log_z = mx + std::log(z);
    if (d_scores) {
        d_scores->resize(scores.size());
        for (Eigen::Index c = 0; c < scores.size(); ++c) (*d_scores)(c) = std::exp(scores(c) - log_z);
        (*d_scores)(static_cast<Eigen::Index>(target)) -= 1.0;
    }
    return log_z - scores(static_cast<Eigen::Index>(target));
}

void backward_scores(const ModelParams& params, std::span<const EncodedQuery> views,
                     std::span<const EncodedItem> candidates, const ScoreTable& table,
                     const Matrix& d_scores, Gradients& grads,
                     std::vector<RowMatrix>* input_grads) {
    const auto d = static_cast<Eigen::Index>(params.config.embed_dim);
    if (input_grads) input_grads->assign(views.size(), RowMatrix{});
    for (std::size_t v = 0; v < views.size(); ++v) {
        Vector dq = Vector::Zero(d);
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            const double g = d_scores(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j));
            dq += g * candidates[j].segments[table.argmax[v][j]].tower.output;
        }
        backward_query(params, views[v], dq, grads, input_grads ? &(*input_grads)[v] : nullptr);
    }
    for (std::size_t j = 0; j < candidates.size(); ++j) {
        const auto& item = candidates[j];
        for (std::size_t s = 0; s < item.segments.size(); ++s) {
            Vector dv = Vector::Zero(d);
            bool routed = false;
            for (std::size_t v = 0; v < views.size(); ++v) {
                if (table.argmax[v][j] != s) continue;
                routed = true;
                dv += d_scores(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j)) *
                      views[v].vector();
            }
            if (routed) backward_segment(params, item.segments[s], dv, grads);
        }
    }
}

CeBatchResult batch_loss_ce(const ModelParams& params, std::span<const Example> batch,
                            Gradients* grads, std::vector<RowMatrix>* input_grads) {
    if (batch.size() < 2) throw UsageError("in-batch cross-entropy needs at least two examples");
    std::vector<EncodedQuery> views;
    std::vector<EncodedItem> items;
    for (const auto& ex : batch) {
        views.push_back(encode_query(params, *ex.query));
        items.push_back(encode_item(params, *ex.gold));
    }
    const auto table = score_views(views, items);
    const auto b = static_cast<Eigen::Index>(batch.size());
    CeBatchResult r{0.0, softmax_rows(table.scores)};
    Matrix d_scores = Matrix::Zero(b, b);
    for (Eigen::Index i = 0; i < b; ++i) {
        Vector g;
        r.loss += cross_entropy(table.scores.row(i).transpose(), static_cast<std::size_t>(i), &g);
        d_scores.row(i) = g.transpose() / static_cast<double>(b);
    }
    r.loss /= static_cast<double>(b);
    if (grads) backward_scores(params, views, items, table, d_scores, *grads, input_grads);
    return r;
}

double CrossEntropyObjective::loss_and_gradient(const ModelParams& params,
                                                std::span<const Example> batch, std::uint64_t,
                                                Gradients& grads) const {
    return batch_loss_ce(params, batch, &grads).loss;
}

AdamOptimizer::AdamOptimizer(const ModelConfig& config, const ParamSet& shape)
    : lr_(config.learning_rate),
      beta1_(config.adam_beta1),
      beta2_(config.adam_beta2),
      eps_(config.adam_epsilon),
      m_(shape.zeros_like()),
      v_(shape.zeros_like()) {}

void AdamOptimizer::step(ParamSet& params, const Gradients& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto p = params.tensors();
    auto g = grads.tensors();
    auto m = m_.tensors();
    auto v = v_.tensors();
    for (std::size_t k = 0; k < p.size(); ++k) {
        for (std::size_t i = 0; i < p[k].size(); ++i) {
            const double gi = g[k][i];
            m[k][i] = beta1_ * m[k][i] + (1.0 - beta1_) * gi;
            v[k][i] = beta2_ * v[k][i] + (1.0 - beta2_) * gi * gi;
            const double m_hat = m[k][i] / c1;
            const double v_hat = v[k][i] / c2;
            p[k][i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
        }
    }
}

std::vector<std::vector<Example>> make_batches(std::span<const Example> examples,
                                               std::size_t batch_size, std::uint64_t seed,
                                               std::size_t epoch) {
    std::vector<Example> order(examples.begin(), examples.end());
    auto rng = make_rng({seed, 0xba7c4ULL, epoch});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

    std::vector<std::vector<Example>> batches;
    std::deque<Example> pending(order.begin(), order.end());
    while (!pending.empty()) {
        std::vector<Example> batch;
        std::unordered_set<const Item*> golds;
        std::deque<Example> deferred;
        while (!pending.empty() && batch.size() < batch_size) {
            Example e = pending.front();
            pending.pop_front();
            if (golds.insert(e.gold).second)
                batch.push_back(e);
            else
                deferred.push_back(e);
        }
        for (auto it = deferred.rbegin(); it != deferred.rend(); ++it) pending.push_front(*it);
        if (batch.size() >= 2) batches.push_back(std::move(batch));
    }
    return batches;
}

TrainReport train(ModelParams& params, std::span<const Example> examples,
                  const Objective* objective, const EpochCallback& on_epoch) {
    if (examples.empty()) throw DataError("training set is empty");
    const CrossEntropyObjective plain;
    const Objective& obj = objective ? *objective : plain;
    AdamOptimizer opt(params.config, params.current);
    TrainReport report;
    for (std::size_t epoch = 0; epoch < params.config.epochs; ++epoch) {
        const auto batches =
            make_batches(examples, params.config.batch_size, params.config.seed, epoch);
        EpochStats stats{epoch, 0.0, 0};
        for (const auto& batch : batches) {
            Gradients grads = params.current.zeros_like();
            const double loss = obj.loss_and_gradient(params, batch, report.steps, grads);
            if (!std::isfinite(loss) || !grads.all_finite()) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << ", step " << report.steps
                    << " (loss=" << loss << ", batch of " << batch.size() << ", first query '"
                    << batch.front().query->id << "')";
                throw NumericalError(msg.str());
            }
            opt.step(params.current, grads);
            stats.mean_loss += loss;
            ++stats.steps;
            ++report.steps;
        }
        if (stats.steps) stats.mean_loss /= static_cast<double>(stats.steps);
        report.epochs.push_back(stats);
        if (on_epoch) on_epoch(stats);
    }
    return report;
}

EncodedCorpus::EncodedCorpus(const ModelParams& params, const ItemStore& items) {
    for (const auto& item : items) {
        ids_.push_back(item.id);
        vectors_.push_back(encode_item(params, item).vectors());
    }
}

std::vector<double> EncodedCorpus::scores(const Vector& q) const {
    std::vector<double> out(vectors_.size());
    for (std::size_t i = 0; i < vectors_.size(); ++i) out[i] = score(q, vectors_[i]);
    return out;
}

RankedList retrieve(const ModelParams& params, const std::string& query_id, const QueryView& view,
                    const std::optional<std::string>& gold_id, const EncodedCorpus& corpus,
                    std::size_t top_n) {
    if (top_n < 1) throw UsageError("topN must be >= 1");
    const auto q = encode_query(params, view);
    const auto s = corpus.scores(q.vector());
    std::vector<ScoredItem> scored;
    scored.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) scored.push_back({corpus.id(i), s[i]});
    return make_ranked_list(query_id, std::move(scored), top_n, gold_id);
}

RankedList retrieve(const ModelParams& params, const Circumlocution& query,
                    const EncodedCorpus& corpus, std::size_t top_n) {
    return retrieve(params, query.id, QueryView::of(query), query.gold_item_id, corpus, top_n);
}

namespace {

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw DataError("truncated checkpoint");
    return v;
}

void write_params(std::ostream& out, const ParamSet& p) {
    const auto ts = p.tensors();
    write_u64(out, ts.size());
    for (auto t : ts) {
        write_u64(out, t.size());
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size_bytes()));
    }
}

void read_params(std::istream& in, ParamSet& p) {
    auto ts = p.tensors();
    if (read_u64(in) != ts.size()) throw DataError("checkpoint tensor count mismatch");
    for (auto t : ts) {
        if (read_u64(in) != t.size()) throw DataError("checkpoint tensor shape mismatch");
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size_bytes()));
        if (!in) throw DataError("truncated checkpoint");
    }
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    const auto header = config_to_json(params.config).dump();
    write_u64(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    write_params(out, params.current);
    write_params(out, params.initial);
    if (!out) throw DataError("failed writing " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    char magic[sizeof kCheckpointMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw DataError(path.string() + " is not a checkpoint");
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    std::string header(read_u64(in), '\0');
    in.read(header.data(), static_cast<std::streamsize>(header.size()));
    ModelConfig config;
    try {
        config = config_from_json(nlohmann::json::parse(header));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad checkpoint header: ") + e.what());
    }
    auto params = init_params(config);
    read_params(in, params.current);
    read_params(in, params.initial);
    return params;
}

}  // namespace gradselect
