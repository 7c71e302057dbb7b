#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gradselect/encoder.hpp"
#include "gradselect/rng.hpp"

namespace gradselect {

enum class NoiseKind { Delete, Replace };

// How many eligible rows are noised.
enum class NoiseCount {
    PerToken,  // each eligible row independently with probability p_aug
    Fixed,     // exactly round(p_aug * l) rows drawn from the eligible set, capped by its size
};

enum class Selector {
    GradBand,   // noise only tokens ranked inside the importance band
    Random,     // token cutoff over every position
    LargeLoss,  // random, kept only when it raises the loss
    SmallLoss,  // random, kept only when it lowers the loss
};

// Scalar whose input gradient defines token importance.
enum class ImportanceTarget {
    GoldCrossEntropy,  // -log P(gold) over the candidate scores
    GoldScore,         // the gold item's MaxSim score
};

struct AugmentConfig {
    double m = 0.05;
    double n = 0.7;
    NoiseKind noise_kind = NoiseKind::Delete;
    NoiseCount noise_count = NoiseCount::PerToken;
    double p_aug = 0.2;
    double sigma = 1e-2;
    double alpha = 0.05;
    double beta = 0.3;
    Selector selector = Selector::GradBand;
    ImportanceTarget target = ImportanceTarget::GoldCrossEntropy;

    void validate() const;
};

std::string to_string(NoiseKind k);
std::string to_string(NoiseCount c);
std::string to_string(Selector s);
std::string to_string(ImportanceTarget t);
NoiseKind parse_noise_kind(std::string_view s);
NoiseCount parse_noise_count(std::string_view s);
Selector parse_selector(std::string_view s);
ImportanceTarget parse_importance_target(std::string_view s);

struct ImportanceVector {
    std::vector<double> scores;       // squared gradient norm per token
    std::vector<std::size_t> order;   // token indices by descending score, ties by index

    static ImportanceVector from_scores(std::vector<double> scores);
    // 1-based importance rank of every token.
    std::vector<std::size_t> ranks() const;
};

// Candidates are given as per-item segment vectors; `gold` indexes them.
ImportanceVector importance_scores(const ModelParams& params, const QueryView& view,
                                   std::span<const std::vector<Vector>> candidates,
                                   std::size_t gold,
                                   ImportanceTarget target = ImportanceTarget::GoldCrossEntropy,
                                   double scale = 1.0);
ImportanceVector importance_scores(const ModelParams& params, const EncodedQuery& query,
                                   std::span<const std::vector<Vector>> candidates,
                                   std::size_t gold, ImportanceTarget target, double scale = 1.0);

struct BandBounds {
    std::size_t protected_count = 0;  // ceil(m * l)
    std::size_t cutoff = 0;           // floor(n * l)
};

BandBounds band_bounds(std::size_t length, double m, double n);

// Token indices (ascending) whose 1-based rank lies in (ceil(m*l), floor(n*l)].
std::vector<std::size_t> select_band(const ImportanceVector& imp, double m, double n);

struct AugmentMask {
    std::vector<std::size_t> eligible;
    std::vector<std::size_t> realized;
    NoiseKind kind = NoiseKind::Delete;
};

struct Augmentation {
    QueryView view;
    AugmentMask mask;
};

// Noises eligible rows per `noise_count`; never deletes every row.
Augmentation apply_noise(const QueryView& base, std::span<const std::size_t> eligible,
                         const AugmentConfig& config, std::size_t embed_dim, Rng& rng);

// Eligible set per the configured selector, then noise.
Augmentation realize_augmentation(const ModelParams& params, const QueryView& base,
                                  const EncodedQuery& encoded,
                                  std::span<const std::vector<Vector>> candidates,
                                  std::size_t gold, const AugmentConfig& config, Rng& rng);

// Jensen-Shannon divergence with natural logs; throws UsageError on invalid input.
double js_divergence(std::span<const double> p, std::span<const double> q);

// JS(softmax(a), softmax(b)) and its gradients with respect to both score vectors.
double js_of_scores(const Vector& a, const Vector& b, Vector* d_a, Vector* d_b);

// L = CE(C) + alpha * CE(C_aug) + beta * JS(P(C), P(C_aug)), batch-averaged.
class CompositeObjective : public Objective {
public:
    CompositeObjective(AugmentConfig config, std::uint64_t seed);

    double loss_and_gradient(const ModelParams& params, std::span<const Example> batch,
                             std::uint64_t step, Gradients& grads) const override;

    struct Breakdown {
        double loss = 0.0;
        double ce_clean = 0.0;
        double ce_aug = 0.0;
        double js = 0.0;
        std::vector<Augmentation> augmentations;
        std::vector<bool> included;
    };

    // Same computation, exposing the per-example augmentations.
    Breakdown evaluate(const ModelParams& params, std::span<const Example> batch,
                       std::uint64_t step, Gradients* grads) const;

    // Loss with the augmentations held fixed (noise treated as a constant input).
    Breakdown evaluate_fixed(const ModelParams& params, std::span<const Example> batch,
                             std::span<const Augmentation> augmentations, Gradients* grads) const;

    // Per-example rng stream for a training step.
    Rng example_rng(std::uint64_t example_id, std::uint64_t step) const;

    const AugmentConfig& config() const { return config_; }

private:
    AugmentConfig config_;
    std::uint64_t seed_;
};

}  // namespace gradselect
