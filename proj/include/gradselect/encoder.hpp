#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gradselect/corpus.hpp"

namespace gradselect {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Pooling {
    Mean,       // masked mean over embedding rows
    Attention,  // masked softmax over row scores w.c_i + c_i.mean
};

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 64;
    std::size_t hidden_dim = 64;
    std::size_t segment_length = kDefaultSegmentLength;
    bool share_embedding_table = true;
    bool share_towers = false;   // one tower encodes queries and items
    bool tie_tower_init = true;  // both towers start from the same weights
    double embedding_init_std = 1.0;  // 0 selects Glorot uniform
    Pooling pooling = Pooling::Attention;
    std::uint64_t seed = 1;
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epochs = 20;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;

    void validate() const;
};

// Two affine layers d -> h -> d with tanh between, plus the pooling vector.
struct Tower {
    Matrix w1;  // h x d
    Vector b1;
    Matrix w2;  // d x h
    Vector b2;
    Vector attention;  // d; unused under mean pooling
};

struct ParamSet {
    RowMatrix query_embeddings;  // |V| x d
    RowMatrix item_embeddings;   // empty when the table is shared
    Tower query;
    Tower item;

    const RowMatrix& item_table() const {
        return item_embeddings.size() ? item_embeddings : query_embeddings;
    }
    RowMatrix& item_table() { return item_embeddings.size() ? item_embeddings : query_embeddings; }
    const Tower& item_tower() const { return item.w1.size() ? item : query; }
    Tower& item_tower() { return item.w1.size() ? item : query; }

    // Every trainable tensor in a fixed order.
    std::vector<std::span<double>> tensors();
    std::vector<std::span<const double>> tensors() const;

    ParamSet zeros_like() const;
    bool all_finite() const;
    friend bool operator==(const ParamSet& a, const ParamSet& b);
};

struct ModelParams {
    ModelConfig config;
    ParamSet current;
    ParamSet initial;  // snapshot taken at initialization; never trained
};

ModelParams init_params(const ModelConfig& config);

// Restarts training from the stored initial snapshot.
ModelParams reinitialized(const ModelParams& params);

using Gradients = ParamSet;

// One query presentation: token ids plus optional deletion mask and additive
// row noise (replacement augmentation).
struct QueryView {
    std::span<const TokenId> tokens;
    std::vector<double> keep;  // 1 keeps a row, 0 deletes it; empty = all kept
    RowMatrix offsets;         // l x d; empty = no noise

    static QueryView of(const Circumlocution& c) { return QueryView{c.tokens, {}, {}}; }
    double kept(std::size_t i) const { return keep.empty() ? 1.0 : keep[i]; }
};

struct PoolCache {
    RowMatrix rows;               // l x d, embedding rows after noise
    std::vector<double> keep;     // l
    std::vector<double> weights;  // pooling weights, zero on deleted rows
    Vector context;               // masked mean of rows
    Vector pooled;
    double kept_count = 0.0;
};

struct TowerCache {
    Vector input;
    Vector hidden;  // tanh output
    Vector output;
};

struct EncodedQuery {
    PoolCache pool;
    TowerCache tower;
    std::vector<TokenId> tokens;
    const Vector& vector() const { return tower.output; }
};

struct EncodedSegment {
    PoolCache pool;
    TowerCache tower;
    std::vector<TokenId> tokens;
};

struct EncodedItem {
    std::vector<EncodedSegment> segments;
    std::vector<Vector> vectors() const;
};

// Throws DataError("fully deleted query") when every row is masked.
EncodedQuery encode_query(const ModelParams& params, const QueryView& view);
EncodedQuery encode_query(const ModelParams& params, const Circumlocution& c);
EncodedItem encode_item(const ModelParams& params, const Item& item);

struct MaxSim {
    double score = 0.0;
    std::size_t segment = 0;  // argmax, lowest index on ties
};

MaxSim max_sim(const Vector& q, std::span<const Vector> segment_vectors);
MaxSim max_sim(const Vector& q, const EncodedItem& item);
double score(const Vector& q, std::span<const Vector> segment_vectors);

// Reverse pass for one query view. Adds parameter gradients into `grads`
// and, when requested, writes d loss / d row for every token row (l x d).
void backward_query(const ModelParams& params, const EncodedQuery& enc, const Vector& d_output,
                    Gradients& grads, RowMatrix* input_grads = nullptr);
// Input-row gradients only; parameters are left untouched.
RowMatrix query_input_gradient(const ModelParams& params, const EncodedQuery& enc,
                               const Vector& d_output);
void backward_segment(const ModelParams& params, const EncodedSegment& enc,
                      const Vector& d_output, Gradients& grads);

// A training example resolved against the stores.
struct Example {
    const Circumlocution* query = nullptr;
    const Item* gold = nullptr;
    std::uint64_t id = 0;  // stable index used to derive per-example rng streams
};

std::vector<Example> resolve(const TrainingSet& set, const QuerySet& queries,
                             const ItemStore& items);

// Query views scored against the batch's gold items (in-batch negatives).
struct ScoreTable {
    Matrix scores;                                // views x candidates
    std::vector<std::vector<std::size_t>> argmax;  // MaxSim segment per cell
};

ScoreTable score_views(std::span<const EncodedQuery> views, std::span<const EncodedItem> candidates);

Matrix softmax_rows(const Matrix& scores);

// Cross-entropy of `target` under softmax(scores) for each row, and its
// gradient with respect to the scores (unscaled).
double cross_entropy(const Eigen::Ref<const Vector>& scores, std::size_t target,
                     Vector* d_scores = nullptr);

// Routes d loss / d scores back into the towers and embeddings. `input_grads`
// (optional) receives per-view row gradients.
void backward_scores(const ModelParams& params, std::span<const EncodedQuery> views,
                     std::span<const EncodedItem> candidates, const ScoreTable& table,
                     const Matrix& d_scores, Gradients& grads,
                     std::vector<RowMatrix>* input_grads = nullptr);

struct CeBatchResult {
    double loss = 0.0;
    Matrix probabilities;  // P(candidate | query), rows = queries
};

// Mean in-batch cross-entropy; gold items must be distinct within the batch.
CeBatchResult batch_loss_ce(const ModelParams& params, std::span<const Example> batch,
                            Gradients* grads = nullptr,
                            std::vector<RowMatrix>* input_grads = nullptr);

// Loss definition plugged into the training loop.
class Objective {
public:
    virtual ~Objective() = default;
    // Returns the batch loss and accumulates its gradient into `grads`.
    virtual double loss_and_gradient(const ModelParams& params, std::span<const Example> batch,
                                     std::uint64_t step, Gradients& grads) const = 0;
};

class CrossEntropyObjective : public Objective {
public:
    double loss_and_gradient(const ModelParams& params, std::span<const Example> batch,
                             std::uint64_t step, Gradients& grads) const override;
};

class AdamOptimizer {
public:
    explicit AdamOptimizer(const ModelConfig& config, const ParamSet& shape);
    void step(ParamSet& params, const Gradients& grads);

private:
    double lr_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    ParamSet m_, v_;
};

struct EpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    std::size_t steps = 0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::uint64_t steps = 0;
};

// Batches for one epoch: a seeded shuffle, then greedy packing that defers an
// example whose gold item already appears in the open batch. Batches smaller
// than two are dropped.
std::vector<std::vector<Example>> make_batches(std::span<const Example> examples,
                                               std::size_t batch_size, std::uint64_t seed,
                                               std::size_t epoch);

using EpochCallback = std::function<void(const EpochStats&)>;

// Adam training; `objective` defaults to plain in-batch cross-entropy.
// Throws NumericalError on a non-finite loss.
TrainReport train(ModelParams& params, std::span<const Example> examples,
                  const Objective* objective = nullptr, const EpochCallback& on_epoch = {});

// Precomputed item encodings for one store.
class EncodedCorpus {
public:
    EncodedCorpus(const ModelParams& params, const ItemStore& items);
    std::size_t size() const { return ids_.size(); }
    const std::string& id(std::size_t i) const { return ids_[i]; }
    std::span<const Vector> segments(std::size_t i) const { return vectors_[i]; }
    std::vector<double> scores(const Vector& q) const;
    std::span<const std::vector<Vector>> all_segments() const { return vectors_; }

private:
    std::vector<std::string> ids_;
    std::vector<std::vector<Vector>> vectors_;
};

RankedList retrieve(const ModelParams& params, const Circumlocution& query,
                    const EncodedCorpus& corpus, std::size_t top_n);
RankedList retrieve(const ModelParams& params, const std::string& query_id, const QueryView& view,
                    const std::optional<std::string>& gold_id, const EncodedCorpus& corpus,
                    std::size_t top_n);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace gradselect
