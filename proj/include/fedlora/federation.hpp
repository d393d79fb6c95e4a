// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "fedlora/backbone.hpp"
#include "fedlora/common.hpp"
#include "fedlora/metrics.hpp"
#include "fedlora/saliency.hpp"

namespace fedlora {

// ---------------------------------------------------------------------------
// Heterogeneous budget groups: every client shares the same expanded rank
// R_max and realizes its budget as a sparsity, so uploads stay shape-compatible
// for aggregation.
// ---------------------------------------------------------------------------
struct SparsityGroup {
    size_t rank = 8;        // trainable-parameter budget expressed as a rank
    double sparsity = 0.0;  // 1 - rank / R_max
};

struct HeteroGroup {
    std::vector<SparsityGroup> levels;       // as given, smallest budget first
    size_t expanded_rank = 0;                // common dense rank
    std::vector<uint32_t> level_of_client;   // size m
};

inline const char* budget_level_name(uint32_t level, size_t n_levels) {
    static const char* kThree[] = {"Small", "Medium", "Large"};
    if (n_levels == 3 && level < 3) return kThree[level];
    return "Level";
}

inline HeteroGroup build_heterogeneous_group(const std::vector<size_t>& level_ranks, size_t r_max,
                                             size_t m) {
    if (level_ranks.empty()) throw ConfigError("heterogeneous group: no level ranks");
    if (m == 0) throw ConfigError("heterogeneous group: zero clients");
    HeteroGroup g;
    g.expanded_rank = r_max;
    for (size_t r : level_ranks) {
        if (r < 1) throw ConfigError("heterogeneous group: rank must be >= 1");
        if (r > r_max)
            throw ConfigError("heterogeneous group: level rank " + std::to_string(r) +
                              " exceeds R_max " + std::to_string(r_max));
        g.levels.push_back({r, 1.0 - static_cast<double>(r) / static_cast<double>(r_max)});
    }
    // Near-equal level sizes, earlier levels take the remainder (m=100 over
    // three levels gives 34/33/33); clients are assigned in contiguous blocks.
    const size_t n_levels = g.levels.size();
    const size_t base = m / n_levels;
    const size_t extra = m % n_levels;
    g.level_of_client.reserve(m);
    for (size_t lvl = 0; lvl < n_levels; ++lvl) {
        size_t count = base + (lvl < extra ? 1 : 0);
        for (size_t i = 0; i < count; ++i)
            g.level_of_client.push_back(static_cast<uint32_t>(lvl));
    }
    return g;
}

// ---------------------------------------------------------------------------
// Client and server state.
// ---------------------------------------------------------------------------
struct ClientState {
    uint32_t id = 0;
    std::vector<uint32_t> train_ids;
    std::vector<uint32_t> eval_ids;
    std::vector<LoraPair> pairs;  // ordered by (layer, projection)
    uint32_t level = 0;
    double sparsity = 0.0;
    uint32_t target_rank = 8;
    RngStream search_rng;
    RngStream init_rng;
    RngStream train_rng;
};

class ServerState {
  public:
    explicit ServerState(uint64_t seed) : sample_rng_(derive_stream(seed, stream::kServer)) {}

    // Masks are transmitted exactly once per client per run; re-registration
    // is a protocol violation.
    void register_masks(uint32_t client_id, std::vector<std::pair<BitMask, BitMask>> masks) {
        if (registry_.count(client_id))
            throw LogicError("server: masks already registered for client " +
                             std::to_string(client_id));
        registry_.emplace(client_id, std::move(masks));
    }

    bool registered(uint32_t client_id) const { return registry_.count(client_id) > 0; }

    const std::vector<std::pair<BitMask, BitMask>>& masks_of(uint32_t client_id) const {
        auto it = registry_.find(client_id);
        if (it == registry_.end())
            throw LogicError("server: no masks registered for client " +
                             std::to_string(client_id));
        return it->second;
    }

    std::vector<uint32_t> sample_participants(size_t m, size_t k) {
        if (k > m) throw ConfigError("server: participants per round exceeds client count");
        auto idx = sample_rng_.sample_without_replacement(m, k);
        return {idx.begin(), idx.end()};
    }

    size_t registered_count() const { return registry_.size(); }
    size_t rounds_completed = 0;

  private:
    std::map<uint32_t, std::vector<std::pair<BitMask, BitMask>>> registry_;
    RngStream sample_rng_;
};

// ---------------------------------------------------------------------------
// Local fine-tuning: masked SGD with gradient accumulation. Each window of
// `batch` examples (walked in shuffled order, micro-batched under the hood)
// produces one optimizer step; gradients are masked so pruned coordinates
// stay exactly zero.
// ---------------------------------------------------------------------------
struct TrainOptions {
    size_t epochs = 1;
    size_t batch = 64;
    double learning_rate = 0.05;
    bool response_only = false;
};

struct TrainTrace {
    std::vector<double> step_losses;
    size_t examples_seen = 0;
};

inline TrainTrace local_finetune(ClientState& client, const Backbone& bb,
                                 const std::vector<TokenSeq>& corpus_tokens,
                                 const TrainOptions& opt) {
    TrainTrace trace;
    if (client.train_ids.empty()) {
        std::cerr << "warning: client " << client.id << " has no training data, skipped\n";
        return trace;
    }
    if (opt.epochs < 1) throw ConfigError("local_finetune: epochs must be >= 1");
    AdapterSet set = AdapterSet::from_pairs(client.pairs, bb.config().n_layers);

    for (size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::vector<uint32_t> order = client.train_ids;
        client.train_rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += opt.batch) {
            size_t stop = std::min(start + opt.batch, order.size());
            std::vector<const TokenSeq*> window;
            window.reserve(stop - start);
            for (size_t i = start; i < stop; ++i) window.push_back(&corpus_tokens[order[i]]);

            double mean_loss = 0.0;
            AdapterGrads grad = batch_gradient(bb, set, window, opt.response_only, &mean_loss);
            if (!std::isfinite(mean_loss))
                throw NumericError("local_finetune: non-finite training loss");

            for (size_t si = 0; si < client.pairs.size(); ++si) {
                LoraPair& p = client.pairs[si];
                size_t gi = 0;
                while (gi < grad.sites.size() && !(grad.sites[gi] == p.site)) ++gi;
                const SiteGrads& g = grad.grads[gi];
                for (size_t i = 0; i < p.a.size(); ++i)
                    if (p.mask_a.get_flat(i)) p.a.data[i] -= opt.learning_rate * g.a.data[i];
                for (size_t i = 0; i < p.b.size(); ++i)
                    if (p.mask_b.get_flat(i)) p.b.data[i] -= opt.learning_rate * g.b.data[i];
            }
            trace.step_losses.push_back(mean_loss);
            trace.examples_seen += window.size();
        }
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Personalized aggregation.
// ---------------------------------------------------------------------------
enum class AggMode : uint8_t {
    // Dense weighted sum of uploads, masked by each recipient's own masks.
    Literal,
    // Per coordinate, weights renormalize over the uploaders that retain the
    // coordinate; coordinates no uploader retains keep the recipient's value.
    Overlap,
};

inline const char* agg_mode_name(AggMode m) {
    return m == AggMode::Literal ? "literal" : "overlap";
}

inline AggMode agg_mode_from_name(const std::string& s) {
    if (s == "literal") return AggMode::Literal;
    if (s == "overlap") return AggMode::Overlap;
    throw ConfigError("unknown aggregation mode: " + s + " (expected literal|overlap)");
}

struct SiteUpload {
    Mat a;
    Mat b;
};

struct AdapterUpload {
    uint32_t client_id = 0;
    std::vector<SiteUpload> sites;
};

// Aggregates the round's uploads and returns the personalized modules for
// every uploader, keyed by client id. Uploads must be masked, shape-uniform,
// and listed in ascending client-id order (summation order is part of the
// determinism contract).
inline std::map<uint32_t, std::vector<SiteUpload>> aggregate(
    const std::vector<AdapterUpload>& uploads, const std::vector<double>& gamma,
    const ServerState& server, AggMode mode) {
    if (uploads.empty()) throw ConfigError("aggregate: no uploads");
    if (gamma.size() != uploads.size()) throw ConfigError("aggregate: gamma size mismatch");
    double gsum = 0.0;
    for (double g : gamma) gsum += g;
    if (std::abs(gsum - 1.0) > 1e-9)
        throw ConfigError("aggregate: weights must sum to 1, got " + fmt_g17(gsum));

    const size_t n_sites = uploads[0].sites.size();
    for (size_t u = 1; u < uploads.size(); ++u) {
        if (uploads[u].client_id <= uploads[u - 1].client_id)
            throw LogicError("aggregate: uploads must be in ascending client-id order");
        if (uploads[u].sites.size() != n_sites)
            throw LogicError("aggregate: protocol error, site count mismatch");
    }
    for (const auto& up : uploads) {
        const auto& masks = server.masks_of(up.client_id);
        if (masks.size() != n_sites)
            throw LogicError("aggregate: protocol error, registry site count mismatch");
        for (size_t s = 0; s < n_sites; ++s) {
            if (up.sites[s].a.rows != masks[s].first.rows() ||
                up.sites[s].a.cols != masks[s].first.cols() ||
                up.sites[s].b.rows != masks[s].second.rows() ||
                up.sites[s].b.cols != masks[s].second.cols() ||
                !up.sites[s].a.same_shape(uploads[0].sites[s].a) ||
                !up.sites[s].b.same_shape(uploads[0].sites[s].b))
                throw LogicError("aggregate: protocol error, upload shape mismatch with registry");
        }
    }

    // Dense accumulators per site: weighted sums and, for the overlap mode,
    // per-coordinate retained-weight totals.
    std::vector<SiteUpload> sum(n_sites);
    std::vector<std::pair<std::vector<double>, std::vector<double>>> wsum(n_sites);
    for (size_t s = 0; s < n_sites; ++s) {
        sum[s].a = Mat(uploads[0].sites[s].a.rows, uploads[0].sites[s].a.cols);
        sum[s].b = Mat(uploads[0].sites[s].b.rows, uploads[0].sites[s].b.cols);
        wsum[s].first.assign(sum[s].a.size(), 0.0);
        wsum[s].second.assign(sum[s].b.size(), 0.0);
    }
    for (size_t u = 0; u < uploads.size(); ++u) {
        const auto& masks = server.masks_of(uploads[u].client_id);
        for (size_t s = 0; s < n_sites; ++s) {
            axpy(sum[s].a, gamma[u], uploads[u].sites[s].a);
            axpy(sum[s].b, gamma[u], uploads[u].sites[s].b);
            if (mode == AggMode::Overlap) {
                for (size_t i = 0; i < wsum[s].first.size(); ++i)
                    if (masks[s].first.get_flat(i)) wsum[s].first[i] += gamma[u];
                for (size_t i = 0; i < wsum[s].second.size(); ++i)
                    if (masks[s].second.get_flat(i)) wsum[s].second[i] += gamma[u];
            }
        }
    }

    std::map<uint32_t, std::vector<SiteUpload>> out;
    for (const auto& up : uploads) {
        const auto& masks = server.masks_of(up.client_id);
        std::vector<SiteUpload> personalized(n_sites);
        for (size_t s = 0; s < n_sites; ++s) {
            personalized[s].a = Mat(sum[s].a.rows, sum[s].a.cols);
            personalized[s].b = Mat(sum[s].b.rows, sum[s].b.cols);
            auto emit = [&](Mat& dst, const Mat& dense, const std::vector<double>& w,
                            const BitMask& mask, const Mat& own) {
                for (size_t i = 0; i < dst.size(); ++i) {
                    if (!mask.get_flat(i)) continue;  // pruned stays exactly zero
                    if (mode == AggMode::Literal)
                        dst.data[i] = dense.data[i];
                    else
                        dst.data[i] = w[i] > 0.0 ? dense.data[i] / w[i] : own.data[i];
                }
            };
            emit(personalized[s].a, sum[s].a, wsum[s].first, masks[s].first, up.sites[s].a);
            emit(personalized[s].b, sum[s].b, wsum[s].second, masks[s].second, up.sites[s].b);
        }
        out.emplace(up.client_id, std::move(personalized));
    }
    return out;
}

// ---------------------------------------------------------------------------
// One federated round: sample, fine-tune, upload, aggregate, dispatch, eval.
// ---------------------------------------------------------------------------
struct RoundOptions {
    TrainOptions train;
    AggMode agg = AggMode::Literal;
    size_t participants = 1;  // k
    size_t workers = 1;
};

struct ParticipantReport {
    uint32_t client_id = 0;
    double mean_train_loss = 0.0;
    size_t steps = 0;
    double eval_ppl = 0.0;
    bool eval_skipped = false;
    double wall_ms = 0.0;
};

struct RoundReport {
    size_t round = 0;
    std::vector<ParticipantReport> rows;  // ascending client id
    double mean_train_loss = 0.0;
    double mean_eval_ppl = 0.0;
};

inline RoundReport run_round(ServerState& server, std::vector<ClientState>& clients,
                             const Backbone& bb, const std::vector<TokenSeq>& corpus_tokens,
                             const RoundOptions& opt, size_t round_idx) {
    RoundReport report;
    report.round = round_idx;
    const size_t m = clients.size();
    auto participants = server.sample_participants(m, opt.participants);

    for (uint32_t c : participants)
        if (!server.registered(clients[c].id))
            throw LogicError("run_round: participant " + std::to_string(clients[c].id) +
                             " has no registered masks");

    // Size-proportional aggregation weights over the round's participants.
    std::vector<double> gamma(participants.size());
    double total = 0.0;
    for (size_t i = 0; i < participants.size(); ++i)
        total += static_cast<double>(clients[participants[i]].train_ids.size());
    if (total <= 0.0) throw DataError("run_round: no participant has training data");
    for (size_t i = 0; i < participants.size(); ++i)
        gamma[i] =
            static_cast<double>(clients[participants[i]].train_ids.size()) / total;

    // Local fine-tuning on independent workers; slot-indexed results keep the
    // round deterministic for any pool size.
    std::vector<TrainTrace> traces(participants.size());
    std::vector<double> wall_ms(participants.size(), 0.0);
    parallel_for(participants.size(), opt.workers, [&](size_t i) {
        auto t0 = std::chrono::steady_clock::now();
        traces[i] = local_finetune(clients[participants[i]], bb, corpus_tokens, opt.train);
        wall_ms[i] = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    });

    // Upload masked modules in ascending client-id order.
    std::vector<AdapterUpload> uploads;
    uploads.reserve(participants.size());
    for (uint32_t c : participants) {
        AdapterUpload up;
        up.client_id = clients[c].id;
        for (const auto& p : clients[c].pairs) up.sites.push_back({p.a, p.b});
        uploads.push_back(std::move(up));
    }

    auto personalized = aggregate(uploads, gamma, server, opt.agg);

    // Dispatch to the round's participants only; everyone else keeps stale
    // modules.
    for (uint32_t c : participants) {
        auto& modules = personalized.at(clients[c].id);
        for (size_t s = 0; s < clients[c].pairs.size(); ++s) {
            clients[c].pairs[s].a = std::move(modules[s].a);
            clients[c].pairs[s].b = std::move(modules[s].b);
        }
    }

    // Personalized evaluation after dispatch.
    std::vector<EvalReport> evals(participants.size());
    parallel_for(participants.size(), opt.workers, [&](size_t i) {
        const ClientState& cl = clients[participants[i]];
        AdapterSet set = AdapterSet::from_pairs(cl.pairs, bb.config().n_layers);
        evals[i] = perplexity(bb, set, corpus_tokens, cl.eval_ids, opt.train.response_only,
                              cl.id, static_cast<uint32_t>(round_idx));
    });

    double loss_sum = 0.0, ppl_sum = 0.0;
    size_t loss_n = 0, ppl_n = 0;
    for (size_t i = 0; i < participants.size(); ++i) {
        ParticipantReport row;
        row.client_id = clients[participants[i]].id;
        row.steps = traces[i].step_losses.size();
        for (double l : traces[i].step_losses) row.mean_train_loss += l;
        if (row.steps) {
            row.mean_train_loss /= static_cast<double>(row.steps);
            loss_sum += row.mean_train_loss;
            ++loss_n;
        }
        row.eval_skipped = evals[i].skipped;
        row.eval_ppl = evals[i].perplexity;
        if (!row.eval_skipped) {
            ppl_sum += row.eval_ppl;
            ++ppl_n;
        }
        row.wall_ms = wall_ms[i];
        report.rows.push_back(row);
    }
    report.mean_train_loss = loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0;
    report.mean_eval_ppl = ppl_n ? ppl_sum / static_cast<double>(ppl_n) : 0.0;
    server.rounds_completed = round_idx + 1;
    return report;
}

}  // namespace fedlora
