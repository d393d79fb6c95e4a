// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "fedlora/backbone.hpp"
#include "fedlora/common.hpp"
#include "fedlora/numerics.hpp"

namespace fedlora {

// ---------------------------------------------------------------------------
// Perplexity: exp of the token-weighted mean NLL over all scored positions of
// the eval split, accumulated in 64-bit.
// ---------------------------------------------------------------------------
struct EvalReport {
    uint32_t client_id = 0;
    uint32_t round = 0;
    double nll_sum = 0.0;
    size_t token_count = 0;
    double perplexity = 0.0;
    bool skipped = false;
};

inline EvalReport perplexity(const Backbone& bb, const AdapterSet& adapters,
                             const std::vector<TokenSeq>& corpus_tokens,
                             const std::vector<uint32_t>& eval_ids, bool response_only,
                             uint32_t client_id = 0, uint32_t round = 0) {
    EvalReport rep;
    rep.client_id = client_id;
    rep.round = round;
    if (eval_ids.empty()) {
        rep.skipped = true;
        return rep;
    }
    for (uint32_t id : eval_ids) {
        size_t n_pred = 0;
        double loss = forward_loss(bb, adapters, corpus_tokens[id], response_only, &n_pred);
        rep.nll_sum += loss * static_cast<double>(n_pred);
        rep.token_count += n_pred;
    }
    rep.perplexity = std::exp(rep.nll_sum / static_cast<double>(rep.token_count));
    if (!(rep.perplexity > 0.0) || !std::isfinite(rep.perplexity))
        throw NumericError("perplexity: non-finite result");
    return rep;
}

// ---------------------------------------------------------------------------
// Pairwise mask similarity. Entries average the A-mask and B-mask hamming
// similarity of the selected site; site = -1 averages over all sites.
// ---------------------------------------------------------------------------
struct ClientMasks {
    uint32_t client_id = 0;
    std::vector<std::pair<BitMask, BitMask>> sites;  // (m_a, m_b) per site
};

struct SimilarityMatrix {
    std::vector<uint32_t> client_ids;
    Mat values;  // square, symmetric, unit diagonal
};

inline SimilarityMatrix similarity_matrix(const std::vector<ClientMasks>& clients,
                                          int site_selector) {
    if (clients.size() < 2) throw ConfigError("similarity_matrix: need at least 2 clients");
    const size_t n = clients.size();
    const size_t n_sites = clients[0].sites.size();
    for (const auto& c : clients)
        if (c.sites.size() != n_sites)
            throw ConfigError("similarity_matrix: inconsistent site counts");
    if (site_selector >= 0 && static_cast<size_t>(site_selector) >= n_sites)
        throw ConfigError("similarity_matrix: site selector out of range");

    SimilarityMatrix sim;
    sim.values = Mat(n, n);
    for (const auto& c : clients) sim.client_ids.push_back(c.client_id);
    auto pair_sim = [&](const ClientMasks& x, const ClientMasks& y, size_t s) {
        return 0.5 * (hamming_similarity(x.sites[s].first, y.sites[s].first) +
                      hamming_similarity(x.sites[s].second, y.sites[s].second));
    };
    for (size_t i = 0; i < n; ++i) {
        sim.values.at(i, i) = 1.0;
        for (size_t j = i + 1; j < n; ++j) {
            double v = 0.0;
            if (site_selector >= 0) {
                v = pair_sim(clients[i], clients[j], static_cast<size_t>(site_selector));
            } else {
                for (size_t s = 0; s < n_sites; ++s) v += pair_sim(clients[i], clients[j], s);
                v /= static_cast<double>(n_sites);
            }
            sim.values.at(i, j) = v;
            sim.values.at(j, i) = v;
        }
    }
    return sim;
}

// ---------------------------------------------------------------------------
// CSV emitters. Schemas are fixed; formatting is deterministic, so reruns of
// the same configuration produce byte-identical files.
// ---------------------------------------------------------------------------
struct LossCurveRow {
    size_t round = 0;
    double mean_train_loss = 0.0;
    double mean_eval_ppl = 0.0;
};

inline std::string loss_curve_csv(const std::vector<LossCurveRow>& rows) {
    std::ostringstream out;
    out << "round,mean_train_loss,mean_eval_ppl\n";
    for (const auto& r : rows)
        out << r.round << "," << fmt_g9(r.mean_train_loss) << "," << fmt_g9(r.mean_eval_ppl)
            << "\n";
    return out.str();
}

struct RoundRow {
    size_t round = 0;
    uint32_t client_id = 0;
    double mean_train_loss = 0.0;
    double eval_ppl = 0.0;
    double wall_ms = 0.0;
};

inline std::string rounds_csv(const std::vector<RoundRow>& rows) {
    std::ostringstream out;
    out << "round,client_id,mean_train_loss,eval_ppl,wall_ms\n";
    for (const auto& r : rows)
        out << r.round << "," << r.client_id << "," << fmt_g9(r.mean_train_loss) << ","
            << fmt_g9(r.eval_ppl) << "," << fmt_g9(r.wall_ms) << "\n";
    return out.str();
}

inline std::string similarity_csv(const SimilarityMatrix& sim) {
    std::ostringstream out;
    out << "client_id";
    for (uint32_t id : sim.client_ids) out << "," << id;
    out << "\n";
    for (size_t i = 0; i < sim.client_ids.size(); ++i) {
        out << sim.client_ids[i];
        for (size_t j = 0; j < sim.client_ids.size(); ++j)
            out << "," << fmt_g9(sim.values.at(i, j));
        out << "\n";
    }
    return out.str();
}

inline std::string partition_csv(const std::vector<std::vector<uint32_t>>& shards) {
    std::ostringstream out;
    out << "example_id,client_id\n";
    std::vector<std::pair<uint32_t, uint32_t>> rows;
    for (uint32_t c = 0; c < shards.size(); ++c)
        for (uint32_t id : shards[c]) rows.push_back({id, c});
    std::sort(rows.begin(), rows.end());
    for (const auto& [id, c] : rows) out << id << "," << c << "\n";
    return out.str();
}

struct SummaryRow {
    std::string metric;
    double value = 0.0;
};

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream out;
    out << "metric,value\n";
    for (const auto& r : rows) out << r.metric << "," << fmt_g9(r.value) << "\n";
    return out.str();
}

}  // namespace fedlora
