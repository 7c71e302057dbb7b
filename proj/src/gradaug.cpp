#include "gradselect/gradaug.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradselect/error.hpp"

namespace gradselect {

namespace {

constexpr double kFractionSlack = 1e-9;

std::vector<std::size_t> all_indices(std::size_t l) {
    std::vector<std::size_t> v(l);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::replace(out.begin(), out.end(), '-', '_');
    return out;
}

}  // namespace

void AugmentConfig::validate() const {
    if (!(m >= 0.0 && m < n && n <= 1.0)) throw UsageError("augment: need 0 <= m < n <= 1");
    if (!(p_aug > 0.0 && p_aug <= 1.0)) throw UsageError("augment: p_aug must be in (0, 1]");
    if (!(alpha >= 0.0 && beta >= 0.0)) throw UsageError("augment: alpha and beta must be >= 0");
    if (!(sigma > 0.0)) throw UsageError("augment: sigma must be > 0");
}

std::string to_string(NoiseKind k) { return k == NoiseKind::Delete ? "delete" : "replace"; }

std::string to_string(NoiseCount c) { return c == NoiseCount::PerToken ? "per_token" : "fixed"; }

std::string to_string(Selector s) {
    switch (s) {
        case Selector::GradBand: return "grad_band";
        case Selector::Random: return "random";
        case Selector::LargeLoss: return "large_loss";
        case Selector::SmallLoss: return "small_loss";
    }
    return "?";
}

std::string to_string(ImportanceTarget t) {
    return t == ImportanceTarget::GoldCrossEntropy ? "gold_ce" : "gold_score";
}

NoiseKind parse_noise_kind(std::string_view s) {
    const auto v = lower(s);
    if (v == "delete") return NoiseKind::Delete;
    if (v == "replace") return NoiseKind::Replace;
    throw UsageError("unknown noise_kind '" + std::string(s) + "'");
}

NoiseCount parse_noise_count(std::string_view s) {
    const auto v = lower(s);
    if (v == "per_token") return NoiseCount::PerToken;
    if (v == "fixed") return NoiseCount::Fixed;
    throw UsageError("unknown noise_count '" + std::string(s) + "'");
}

Selector parse_selector(std::string_view s) {
    const auto v = lower(s);
    if (v == "grad_band") return Selector::GradBand;
    if (v == "random") return Selector::Random;
    if (v == "large_loss") return Selector::LargeLoss;
    if (v == "small_loss") return Selector::SmallLoss;
    throw UsageError("unknown selector '" + std::string(s) + "'");
}

ImportanceTarget parse_importance_target(std::string_view s) {
    const auto v = lower(s);
    if (v == "gold_ce") return ImportanceTarget::GoldCrossEntropy;
    if (v == "gold_score") return ImportanceTarget::GoldScore;
    throw UsageError("unknown importance target '" + std::string(s) + "'");
}

ImportanceVector ImportanceVector::from_scores(std::vector<double> scores) {
    ImportanceVector imp{std::move(scores), {}};
    imp.order = all_indices(imp.scores.size());
    std::stable_sort(imp.order.begin(), imp.order.end(), [&](std::size_t a, std::size_t b) {
        return imp.scores[a] > imp.scores[b];
    });
    return imp;
}

std::vector<std::size_t> ImportanceVector::ranks() const {
    std::vector<std::size_t> r(order.size());
    for (std::size_t k = 0; k < order.size(); ++k) r[order[k]] = k + 1;
    return r;
}

ImportanceVector importance_scores(const ModelParams& params, const EncodedQuery& query,
                                   std::span<const std::vector<Vector>> candidates,
                                   std::size_t gold, ImportanceTarget target, double scale) {
    if (gold >= candidates.size()) throw UsageError("gold item is not among the candidates");
    const auto d = query.vector().size();
    Vector dq = Vector::Zero(d);
    if (target == ImportanceTarget::GoldScore) {
        dq = scale * candidates[gold][max_sim(query.vector(), candidates[gold]).segment];
    } else {
        Vector s(static_cast<Eigen::Index>(candidates.size()));
        std::vector<std::size_t> argmax(candidates.size());
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            const auto m = max_sim(query.vector(), candidates[j]);
            s(static_cast<Eigen::Index>(j)) = m.score;
            argmax[j] = m.segment;
        }
        Vector g;
        cross_entropy(s, gold, &g);
        for (std::size_t j = 0; j < candidates.size(); ++j)
            dq += (scale * g(static_cast<Eigen::Index>(j))) * candidates[j][argmax[j]];
    }
    const RowMatrix rows = query_input_gradient(params, query, dq);
    std::vector<double> scores(static_cast<std::size_t>(rows.rows()));
    for (Eigen::Index i = 0; i < rows.rows(); ++i) scores[static_cast<std::size_t>(i)] = rows.row(i).squaredNorm();
    return ImportanceVector::from_scores(std::move(scores));
}

ImportanceVector importance_scores(const ModelParams& params, const QueryView& view,
                                   std::span<const std::vector<Vector>> candidates,
                                   std::size_t gold, ImportanceTarget target, double scale) {
    return importance_scores(params, encode_query(params, view), candidates, gold, target, scale);
}

BandBounds band_bounds(std::size_t length, double m, double n) {
    const double l = static_cast<double>(length);
    return {static_cast<std::size_t>(std::ceil(m * l - kFractionSlack)),
            static_cast<std::size_t>(std::floor(n * l + kFractionSlack))};
}

std::vector<std::size_t> select_band(const ImportanceVector& imp, double m, double n) {
    const auto b = band_bounds(imp.order.size(), m, n);
    std::vector<std::size_t> eligible;
    for (std::size_t r = b.protected_count; r < std::min(b.cutoff, imp.order.size()); ++r)
        eligible.push_back(imp.order[r]);
    std::sort(eligible.begin(), eligible.end());
    return eligible;
}

Augmentation apply_noise(const QueryView& base, std::span<const std::size_t> eligible,
                         const AugmentConfig& config, std::size_t embed_dim, Rng& rng) {
    const auto l = base.tokens.size();
    Augmentation aug{base, {{eligible.begin(), eligible.end()}, {}, config.noise_kind}};
    for (auto i : eligible)
        if (i >= l) throw UsageError("eligible index outside the query");
    if (config.noise_count == NoiseCount::PerToken) {
        for (auto i : eligible)
            if (uniform01(rng) < config.p_aug) aug.mask.realized.push_back(i);
    } else {
        auto pool = aug.mask.eligible;
        const auto count = std::min<std::size_t>(
            pool.size(), static_cast<std::size_t>(std::llround(config.p_aug * static_cast<double>(l))));
        for (std::size_t k = 0; k < count; ++k) {
            const auto j = k + uniform_index(rng, pool.size() - k);
            std::swap(pool[k], pool[j]);
            aug.mask.realized.push_back(pool[k]);
        }
        std::sort(aug.mask.realized.begin(), aug.mask.realized.end());
    }
    if (config.noise_kind == NoiseKind::Delete) {
        if (aug.view.keep.empty()) aug.view.keep.assign(l, 1.0);
        for (auto i : aug.mask.realized) aug.view.keep[i] = 0.0;
        const bool none_left = std::none_of(aug.view.keep.begin(), aug.view.keep.end(),
                                            [](double k) { return k != 0.0; });
        if (none_left && !aug.mask.realized.empty()) {
            const auto drop = uniform_index(rng, aug.mask.realized.size());
            aug.view.keep[aug.mask.realized[drop]] = 1.0;
            aug.mask.realized.erase(aug.mask.realized.begin() + static_cast<std::ptrdiff_t>(drop));
        }
    } else if (!aug.mask.realized.empty()) {
        const auto d = static_cast<Eigen::Index>(embed_dim);
        if (aug.view.offsets.size() == 0) aug.view.offsets = RowMatrix::Zero(static_cast<Eigen::Index>(l), d);
        for (auto i : aug.mask.realized)
            for (Eigen::Index k = 0; k < d; ++k)
                aug.view.offsets(static_cast<Eigen::Index>(i), k) += config.sigma * standard_normal(rng);
    }
    return aug;
}

Augmentation realize_augmentation(const ModelParams& params, const QueryView& base,
                                  const EncodedQuery& encoded,
                                  std::span<const std::vector<Vector>> candidates,
                                  std::size_t gold, const AugmentConfig& config, Rng& rng) {
    std::vector<std::size_t> eligible;
    if (config.selector == Selector::GradBand) {
        const auto imp = importance_scores(params, encoded, candidates, gold, config.target);
        eligible = select_band(imp, config.m, config.n);
    } else {
        eligible = all_indices(base.tokens.size());
    }
    return apply_noise(base, eligible, config, params.config.embed_dim, rng);
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw UsageError("js_divergence: length mismatch");
    auto check = [](std::span<const double> v) {
        double sum = 0.0;
        for (double x : v) {
            if (!(x >= 0.0)) throw UsageError("js_divergence: negative or NaN probability");
            sum += x;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw UsageError("js_divergence: probabilities do not sum to 1");
    };
    check(p);
    check(q);
    double js = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) js += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) js += 0.5 * q[i] * std::log(q[i] / m);
    }
    return std::max(js, 0.0);
}

double js_of_scores(const Vector& a, const Vector& b, Vector* d_a, Vector* d_b) {
    const Matrix pa = softmax_rows(a.transpose());
    const Matrix pb = softmax_rows(b.transpose());
    if (!pa.allFinite() || !pb.allFinite()) throw NumericalError("non-finite scores in the consistency term");
    const auto n = a.size();
    std::vector<double> p(static_cast<std::size_t>(n)), q(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        p[static_cast<std::size_t>(i)] = pa(0, i);
        q[static_cast<std::size_t>(i)] = pb(0, i);
    }
    const double js = js_divergence(p, q);
    // dJS/dP_i = 0.5 ln(P_i / M_i), then through the softmax Jacobian.
    auto through_softmax = [&](const std::vector<double>& x, Vector* out) {
        if (!out) return;
        Vector g(n);
        double inner = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(i);
            const double m = 0.5 * (p[k] + q[k]);
            g(i) = x[k] > 0.0 ? 0.5 * std::log(x[k] / m) : 0.0;
            inner += x[k] * g(i);
        }
        out->resize(n);
        for (Eigen::Index i = 0; i < n; ++i)
            (*out)(i) = x[static_cast<std::size_t>(i)] * (g(i) - inner);
    };
    through_softmax(p, d_a);
    through_softmax(q, d_b);
    return js;
}

CompositeObjective::CompositeObjective(AugmentConfig config, std::uint64_t seed)
    : config_(config), seed_(seed) {
    config_.validate();
}

Rng CompositeObjective::example_rng(std::uint64_t example_id, std::uint64_t step) const {
    return make_rng({seed_, 0xa06a06ULL, example_id, step});
}

double CompositeObjective::loss_and_gradient(const ModelParams& params,
                                             std::span<const Example> batch, std::uint64_t step,
                                             Gradients& grads) const {
    return evaluate(params, batch, step, &grads).loss;
}

CompositeObjective::Breakdown CompositeObjective::evaluate(const ModelParams& params,
                                                           std::span<const Example> batch,
                                                           std::uint64_t step,
                                                           Gradients* grads) const {
    std::vector<EncodedItem> items;
    std::vector<std::vector<Vector>> candidates;
    for (const auto& ex : batch) {
        items.push_back(encode_item(params, *ex.gold));
        candidates.push_back(items.back().vectors());
    }
    std::vector<Augmentation> augs;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto view = QueryView::of(*batch[b].query);
        auto rng = example_rng(batch[b].id, step);
        augs.push_back(realize_augmentation(params, view, encode_query(params, view), candidates,
                                            b, config_, rng));
    }
    return evaluate_fixed(params, batch, augs, grads);
}

CompositeObjective::Breakdown CompositeObjective::evaluate_fixed(
    const ModelParams& params, std::span<const Example> batch,
    std::span<const Augmentation> augmentations, Gradients* grads) const {
    const auto bsz = batch.size();
    if (bsz < 2) throw UsageError("in-batch cross-entropy needs at least two examples");
    if (augmentations.size() != bsz) throw UsageError("one augmentation per example required");
    std::vector<EncodedItem> items;
    std::vector<EncodedQuery> views;
    for (const auto& ex : batch) {
        views.push_back(encode_query(params, *ex.query));
        items.push_back(encode_item(params, *ex.gold));
    }
    for (const auto& a : augmentations) views.push_back(encode_query(params, a.view));
    const auto table = score_views(views, items);

    Breakdown out;
    out.augmentations.assign(augmentations.begin(), augmentations.end());
    const auto b_rows = static_cast<Eigen::Index>(bsz);
    Matrix d_scores = Matrix::Zero(2 * b_rows, b_rows);
    const double count = static_cast<double>(bsz);
    for (Eigen::Index b = 0; b < b_rows; ++b) {
        const Vector clean = table.scores.row(b).transpose();
        const Vector noisy = table.scores.row(b_rows + b).transpose();
        Vector g_clean, g_aug, js_clean, js_aug;
        const double ce_clean = cross_entropy(clean, static_cast<std::size_t>(b), &g_clean);
        const double ce_aug = cross_entropy(noisy, static_cast<std::size_t>(b), &g_aug);
        const double js = js_of_scores(clean, noisy, &js_clean, &js_aug);
        bool include = true;
        if (config_.selector == Selector::LargeLoss) include = ce_aug > ce_clean;
        if (config_.selector == Selector::SmallLoss) include = ce_aug < ce_clean;
        out.included.push_back(include);
        const double w = include ? 1.0 : 0.0;
        out.ce_clean += ce_clean;
        out.ce_aug += w * ce_aug;
        out.js += w * js;
        out.loss += ce_clean + w * (config_.alpha * ce_aug + config_.beta * js);
        // Same arithmetic as plain cross-entropy when alpha = beta = 0.
        d_scores.row(b) = (g_clean + w * config_.beta * js_clean).transpose() / count;
        d_scores.row(b_rows + b) =
            (w * (config_.alpha * g_aug + config_.beta * js_aug)).transpose() / count;
    }
    out.loss /= count;
    out.ce_clean /= count;
    out.ce_aug /= count;
    out.js /= count;
    if (grads) backward_scores(params, views, items, table, d_scores, *grads);
    return out;
}

}  // namespace gradselect
