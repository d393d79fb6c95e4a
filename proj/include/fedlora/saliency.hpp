// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedlora/backbone.hpp"
#include "fedlora/common.hpp"
#include "fedlora/numerics.hpp"

namespace fedlora {

enum class Metric : uint8_t { First, Second, Mixed };

inline const char* metric_name(Metric m) {
    switch (m) {
        case Metric::First: return "first";
        case Metric::Second: return "second";
        case Metric::Mixed: return "mixed";
    }
    return "?";
}

inline Metric metric_from_name(const std::string& s) {
    if (s == "first") return Metric::First;
    if (s == "second") return Metric::Second;
    if (s == "mixed") return Metric::Mixed;
    throw ConfigError("unknown metric: " + s + " (expected first|second|mixed)");
}

// Exponential pruning schedule: the kept fraction after epoch t of T_p is
// (1 - s)^(t / T_p), reaching the target sparsity s at the final epoch.
struct PruneSchedule {
    size_t total_epochs = 5;
    double target_sparsity = 0.5;

    double keep_fraction(size_t t) const {
        return std::pow(1.0 - target_sparsity,
                        static_cast<double>(t) / static_cast<double>(total_epochs));
    }

    // Kept count over a matrix of n coordinates, consistent with
    // percentile_threshold: exactly floor((1 - keep_fraction) * n) coordinates
    // rank below the retained set.
    size_t keep_count(size_t n, size_t t) const {
        double fraction_below = 1.0 - keep_fraction(t);
        size_t below = static_cast<size_t>(std::floor(fraction_below * static_cast<double>(n)));
        return n - std::min(below, n);
    }
};

// --------------------------------------------------------------------------
// Importance scores. All three reduce to element-wise formulas on the
// parameter value, its gradient, and the Fisher diagonal.
// --------------------------------------------------------------------------
inline Mat score_first_order(const Mat& theta, const Mat& grad) {
    if (!theta.same_shape(grad)) throw ConfigError("score_first_order: shape mismatch");
    Mat s(theta.rows, theta.cols);
    for (size_t i = 0; i < s.size(); ++i) s.data[i] = std::abs(grad.data[i] * theta.data[i]);
    return s;
}

inline Mat score_second_order(const Mat& theta, const Mat& fisher) {
    if (!theta.same_shape(fisher)) throw ConfigError("score_second_order: shape mismatch");
    Mat s(theta.rows, theta.cols);
    for (size_t i = 0; i < s.size(); ++i)
        s.data[i] = std::abs(theta.data[i] * fisher.data[i] * theta.data[i]);
    return s;
}

inline Mat score_mixed(const Mat& theta, const Mat& grad, const Mat& fisher) {
    if (!theta.same_shape(grad) || !theta.same_shape(fisher))
        throw ConfigError("score_mixed: shape mismatch");
    Mat s(theta.rows, theta.cols);
    for (size_t i = 0; i < s.size(); ++i)
        s.data[i] = std::abs(grad.data[i] * theta.data[i] -
                             0.5 * theta.data[i] * fisher.data[i] * theta.data[i]);
    return s;
}

// --------------------------------------------------------------------------
// Batch gradients and the Fisher diagonal estimate.
// --------------------------------------------------------------------------

// Mean adapter gradient over a batch, accumulated in batch order with uniform
// example weighting.
inline AdapterGrads batch_gradient(const Backbone& bb, const AdapterSet& set,
                                   const std::vector<const TokenSeq*>& batch,
                                   bool response_only, double* mean_loss_out = nullptr) {
    if (batch.empty()) throw DataError("batch_gradient: empty batch");
    AdapterGrads acc = AdapterGrads::zeros_like(set);
    const double w = 1.0 / static_cast<double>(batch.size());
    double loss_sum = 0.0;
    for (const TokenSeq* seq : batch) {
        ForwardTape tape;
        loss_sum += forward(bb, set, *seq, response_only, tape);
        AdapterGrads g = backward_adapters(bb, set, tape);
        acc.add_scaled(g, w);
    }
    if (mean_loss_out) *mean_loss_out = loss_sum * w;
    return acc;
}

struct FisherEstimate {
    AdapterGrads diag;  // element-wise squared-gradient means, A/B shaped
    size_t sample_count = 0;
};

// F = mean over micro-batches of the element-wise squared micro-batch
// gradient. The batch splits into `micro_batches` near-equal contiguous
// chunks; each chunk contributes one squared-gradient sample.
inline FisherEstimate estimate_fisher(const Backbone& bb, const AdapterSet& set,
                                      const std::vector<const TokenSeq*>& batch,
                                      size_t micro_batches, bool response_only) {
    if (batch.empty()) throw DataError("estimate_fisher: empty batch");
    if (micro_batches < 1) throw ConfigError("estimate_fisher: micro_batches must be >= 1");
    micro_batches = std::min(micro_batches, batch.size());
    FisherEstimate est;
    est.diag = AdapterGrads::zeros_like(set);
    est.sample_count = micro_batches;
    const size_t base = batch.size() / micro_batches;
    const size_t extra = batch.size() % micro_batches;
    const double w = 1.0 / static_cast<double>(micro_batches);
    size_t cursor = 0;
    for (size_t m = 0; m < micro_batches; ++m) {
        size_t take = base + (m < extra ? 1 : 0);
        std::vector<const TokenSeq*> chunk(batch.begin() + static_cast<long>(cursor),
                                           batch.begin() + static_cast<long>(cursor + take));
        cursor += take;
        AdapterGrads g = batch_gradient(bb, set, chunk, response_only);
        est.diag.add_squared_scaled(g, w);
    }
    return est;
}

// --------------------------------------------------------------------------
// Iterative foresight pruning: per epoch, score the currently kept
// coordinates of each matrix on a fresh deterministic batch and keep the
// top slice dictated by the exponential schedule. Masks never regrow.
// --------------------------------------------------------------------------
struct MatrixTrace {
    InjectionSite site;
    char which = 'a';
    size_t dense_size = 0;
    std::vector<size_t> kept_per_epoch;
};

struct SearchReport {
    std::vector<MatrixTrace> traces;  // site-major, A before B
    // Mask snapshots per epoch (A, B per site), filled when requested.
    std::vector<std::vector<std::pair<BitMask, BitMask>>> mask_snapshots;
};

struct SearchInputs {
    const Backbone& backbone;
    std::vector<LoraPair>& pairs;
    const std::vector<TokenSeq>& corpus_tokens;
    const std::vector<uint32_t>& train_ids;
    RngStream& rng;
    size_t score_batch = 64;
    size_t micro_batch = 8;
    bool response_only = false;
    bool capture_masks = false;
};

namespace detail {

// Keep the top keep_count currently-kept coordinates by score; ties resolve
// to the lower flat index. Never re-admits pruned coordinates.
inline void shrink_mask(BitMask& mask, const Mat& scores, size_t keep_count) {
    size_t current = mask.count();
    if (keep_count >= current) return;
    std::vector<std::pair<double, uint32_t>> cand;
    cand.reserve(current);
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask.get_flat(i)) cand.push_back({scores.data[i], static_cast<uint32_t>(i)});
    std::sort(cand.begin(), cand.end(), [](const auto& x, const auto& y) {
        if (x.first != y.first) return x.first > y.first;
        return x.second < y.second;
    });
    BitMask next(mask.rows(), mask.cols(), false);
    for (size_t i = 0; i < keep_count; ++i) next.set_flat(cand[i].second, true);
    mask = next;
}

}  // namespace detail

inline SearchReport search_architecture(const SearchInputs& in, const PruneSchedule& schedule,
                                        Metric metric) {
    if (in.train_ids.empty()) throw DataError("search_architecture: empty train split");
    if (schedule.total_epochs < 1)
        throw ConfigError("search_architecture: schedule needs at least one epoch");
    for (const auto& p : in.pairs) {
        if (p.mask_a.count() != p.mask_a.size() || p.mask_b.count() != p.mask_b.size())
            throw LogicError("search_architecture: masks must start all-ones");
        if (schedule.keep_count(p.a.size(), schedule.total_epochs) == 0 ||
            schedule.keep_count(p.b.size(), schedule.total_epochs) == 0)
            throw ConfigError("search_architecture: schedule prunes a matrix to zero");
    }

    AdapterSet set = AdapterSet::from_pairs(in.pairs, in.backbone.config().n_layers);

    SearchReport report;
    for (const auto& p : in.pairs) {
        report.traces.push_back({p.site, 'a', p.a.size(), {}});
        report.traces.push_back({p.site, 'b', p.b.size(), {}});
    }

    const bool needs_fisher = metric != Metric::First;
    for (size_t t = 1; t <= schedule.total_epochs; ++t) {
        // One fresh deterministic score batch per pruning epoch.
        size_t take = std::min(in.score_batch, in.train_ids.size());
        auto positions = in.rng.sample_without_replacement(in.train_ids.size(), take);
        std::vector<const TokenSeq*> batch;
        batch.reserve(take);
        for (size_t pos : positions) batch.push_back(&in.corpus_tokens[in.train_ids[pos]]);

        size_t micro_count = (take + in.micro_batch - 1) / in.micro_batch;
        AdapterGrads grad = batch_gradient(in.backbone, set, batch, in.response_only);
        FisherEstimate fisher;
        if (needs_fisher)
            fisher = estimate_fisher(in.backbone, set, batch, micro_count, in.response_only);

        for (size_t si = 0; si < in.pairs.size(); ++si) {
            LoraPair& p = in.pairs[si];
            size_t gi = 0;  // grads are in site_list order, pairs may not be
            while (gi < grad.sites.size() && !(grad.sites[gi] == p.site)) ++gi;
            if (gi == grad.sites.size())
                throw LogicError("search_architecture: pair site missing from gradients");
            auto matrix_scores = [&](const Mat& theta, const Mat& g, const Mat* f) {
                switch (metric) {
                    case Metric::First: return score_first_order(theta, g);
                    case Metric::Second: return score_second_order(theta, *f);
                    case Metric::Mixed: return score_mixed(theta, g, *f);
                }
                throw LogicError("unreachable metric");
            };
            const Mat* fa = needs_fisher ? &fisher.diag.grads[gi].a : nullptr;
            const Mat* fb = needs_fisher ? &fisher.diag.grads[gi].b : nullptr;
            Mat sa = matrix_scores(p.a, grad.grads[gi].a, fa);
            Mat sb = matrix_scores(p.b, grad.grads[gi].b, fb);
            detail::shrink_mask(p.mask_a, sa, schedule.keep_count(p.a.size(), t));
            detail::shrink_mask(p.mask_b, sb, schedule.keep_count(p.b.size(), t));
            apply_masks(p);
            report.traces[2 * si].kept_per_epoch.push_back(p.mask_a.count());
            report.traces[2 * si + 1].kept_per_epoch.push_back(p.mask_b.count());
        }

        if (in.capture_masks) {
            std::vector<std::pair<BitMask, BitMask>> snap;
            for (const auto& p : in.pairs) snap.push_back({p.mask_a, p.mask_b});
            report.mask_snapshots.push_back(std::move(snap));
        }
    }
    return report;
}

}  // namespace fedlora
