// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "fedlora/config.hpp"
#include "fedlora/federation.hpp"
#include "fedlora/metrics.hpp"

namespace fedlora {

// ---------------------------------------------------------------------------
// Mask files: one per client, all sites, versioned structured text.
// ---------------------------------------------------------------------------
inline constexpr const char* kMasksMagic = "fedlora-masks v1";

inline std::string serialize_masks(const ClientMasks& cm,
                                   const std::vector<InjectionSite>& sites) {
    std::ostringstream out;
    out << kMasksMagic << "\n";
    out << "client " << cm.client_id << "\n";
    out << "sites " << cm.sites.size() << "\n";
    for (size_t s = 0; s < cm.sites.size(); ++s) {
        out << "site " << sites[s].layer << " " << proj_name(sites[s].proj) << " "
            << cm.sites[s].first.rows() << " " << cm.sites[s].first.cols() << "\n";
        out << "a " << cm.sites[s].first.to_string01() << "\n";
        out << "b " << cm.sites[s].second.to_string01() << "\n";
    }
    return out.str();
}

inline ClientMasks deserialize_masks(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    auto fail = [&](const std::string& why) -> void {
        throw DataError("mask file " + origin + ": " + why);
    };
    if (!std::getline(in, line) || trim(line) != kMasksMagic) fail("bad magic/version");
    ClientMasks cm;
    std::string tag;
    size_t n_sites = 0;
    if (!(in >> tag >> cm.client_id) || tag != "client") fail("bad client line");
    if (!(in >> tag >> n_sites) || tag != "sites") fail("bad sites line");
    for (size_t s = 0; s < n_sites; ++s) {
        uint32_t layer = 0;
        std::string projname, bits;
        size_t d = 0, r = 0;
        if (!(in >> tag >> layer >> projname >> d >> r) || tag != "site") fail("bad site line");
        if (!(in >> tag >> bits) || tag != "a") fail("bad a line");
        BitMask a = BitMask::from_string01(d, r, bits);
        if (!(in >> tag >> bits) || tag != "b") fail("bad b line");
        BitMask b = BitMask::from_string01(r, d, bits);
        cm.sites.push_back({std::move(a), std::move(b)});
    }
    return cm;
}

// ---------------------------------------------------------------------------
// End-to-end run. Owns the backbone, corpus, clients, server and reports;
// the CLI subcommands and the acceptance suite both drive it.
// ---------------------------------------------------------------------------
class Run {
  public:
    explicit Run(const RunConfig& cfg)
        : cfg_(cfg),
          backbone_(cfg.backbone_checkpoint.empty()
                        ? Backbone(cfg.backbone_config())
                        : Backbone::load_checkpoint(cfg.backbone_checkpoint)),
          server_(cfg.seed) {
        cfg_.validate();
        corpus_ = cfg_.data_jsonl.empty() ? synth_corpus(cfg_.synth_per_category, cfg_.seed)
                                          : load_jsonl(cfg_.data_jsonl);
        if (corpus_.empty()) throw DataError("run: empty corpus");
        tokens_ = tokenize_corpus(corpus_, backbone_.config().max_seq);
        shards_ = make_partition(corpus_, cfg_.partition_spec());
        build_clients();
    }

    const RunConfig& config() const { return cfg_; }
    const Backbone& backbone() const { return backbone_; }
    const std::vector<Example>& corpus() const { return corpus_; }
    const std::vector<TokenSeq>& tokens() const { return tokens_; }
    const Partition& shards() const { return shards_; }
    std::vector<ClientState>& clients() { return clients_; }
    const std::vector<ClientState>& clients() const { return clients_; }
    ServerState& server() { return server_; }
    const std::vector<RoundReport>& reports() const { return reports_; }
    const std::vector<SearchReport>& search_reports() const { return search_reports_; }
    size_t expanded_rank() const { return expanded_rank_; }
    const std::vector<InjectionSite>& sites() const { return sites_; }

    // Alg. 1 for every client (parallel, stream-isolated), mask registration,
    // then the fine-tuning re-initialization.
    void search(size_t workers) {
        search_reports_.assign(clients_.size(), SearchReport{});
        PruneSchedule base_schedule{cfg_.effective_prune_epochs(expanded_rank_), 0.0};
        parallel_for(clients_.size(), workers, [&](size_t i) {
            ClientState& cl = clients_[i];
            PruneSchedule schedule = base_schedule;
            schedule.target_sparsity = cl.sparsity;
            if (cl.sparsity > 0.0 && !cl.train_ids.empty()) {
                SearchInputs in{backbone_, cl.pairs,          tokens_,
                                cl.train_ids, cl.search_rng,  cfg_.batch,
                                cfg_.micro_batch, cfg_.response_only, false};
                search_reports_[i] = search_architecture(in, schedule, cfg_.metric);
            }
            // Fine-tuning start state under the fixed masks.
            for (auto& p : cl.pairs) {
                if (cfg_.finetune_init == FinetuneInit::Reinit) {
                    init_finetune(p, cl.init_rng);
                } else {
                    apply_masks(p);
                }
            }
        });
        for (auto& cl : clients_) {
            std::vector<std::pair<BitMask, BitMask>> masks;
            for (const auto& p : cl.pairs) masks.push_back({p.mask_a, p.mask_b});
            server_.register_masks(cl.id, std::move(masks));
        }
    }

    RoundReport round(size_t round_idx, size_t workers) {
        RoundOptions opt;
        opt.train.epochs = cfg_.local_epochs;
        opt.train.batch = cfg_.batch;
        opt.train.learning_rate = cfg_.learning_rate;
        opt.train.response_only = cfg_.response_only;
        opt.agg = cfg_.aggregation;
        opt.participants = cfg_.participants_per_round();
        opt.workers = workers;
        RoundReport rep = run_round(server_, clients_, backbone_, tokens_, opt, round_idx);
        reports_.push_back(rep);
        return rep;
    }

    void federate(size_t workers) {
        for (size_t t = 0; t < cfg_.rounds; ++t) round(t, workers);
    }

    // Personalized perplexity of every client's current module.
    std::vector<EvalReport> eval_all_clients(size_t workers) const {
        std::vector<EvalReport> out(clients_.size());
        parallel_for(clients_.size(), workers, [&](size_t i) {
            const ClientState& cl = clients_[i];
            AdapterSet set = AdapterSet::from_pairs(cl.pairs, backbone_.config().n_layers);
            out[i] = perplexity(backbone_, set, tokens_, cl.eval_ids, cfg_.response_only, cl.id,
                                static_cast<uint32_t>(reports_.size()));
        });
        return out;
    }

    std::vector<ClientMasks> registered_masks() const {
        std::vector<ClientMasks> out;
        for (const auto& cl : clients_) {
            ClientMasks cm;
            cm.client_id = cl.id;
            cm.sites = server_.masks_of(cl.id);
            out.push_back(std::move(cm));
        }
        return out;
    }

    // Writes manifest, partition, per-round and loss-curve CSVs, the mask
    // similarity matrix, per-client mask files and adapter checkpoints, and a
    // summary. Deterministic byte-for-byte given the same config.
    void emit(const std::string& outdir, size_t workers) const {
        ensure_dir(outdir);
        auto path = [&](const std::string& name) {
            return (std::filesystem::path(outdir) / name).string();
        };
        write_text_file(path("manifest.cfg"), serialize_manifest(cfg_));
        write_text_file(path("partition.csv"), partition_csv(shards_));

        std::vector<RoundRow> round_rows;
        std::vector<LossCurveRow> curve;
        for (const auto& rep : reports_) {
            for (const auto& row : rep.rows)
                round_rows.push_back({rep.round, row.client_id, row.mean_train_loss,
                                      row.eval_ppl, cfg_.timing ? row.wall_ms : 0.0});
            curve.push_back({rep.round, rep.mean_train_loss, rep.mean_eval_ppl});
        }
        write_text_file(path("rounds.csv"), rounds_csv(round_rows));
        write_text_file(path("loss_curve.csv"), loss_curve_csv(curve));

        if (clients_.size() >= 2) {
            SimilarityMatrix sim = similarity_matrix(registered_masks(), 0);
            write_text_file(path("similarity.csv"), similarity_csv(sim));
        }

        ensure_dir(path("masks"));
        for (const auto& cl : clients_) {
            ClientMasks cm;
            cm.client_id = cl.id;
            cm.sites = server_.masks_of(cl.id);
            write_text_file(path("masks/client_" + zero_pad(cl.id) + ".masks"),
                            serialize_masks(cm, sites_));
        }

        ensure_dir(path("adapters"));
        for (const auto& cl : clients_) {
            std::string dir = path("adapters/client_" + zero_pad(cl.id));
            ensure_dir(dir);
            for (const auto& p : cl.pairs)
                save_adapter(p, (std::filesystem::path(dir) / (p.site.name() + ".adapter"))
                                    .string());
        }

        std::vector<SummaryRow> summary;
        auto finals = eval_all_clients(workers);
        double ppl_sum = 0.0;
        size_t ppl_n = 0;
        for (const auto& e : finals)
            if (!e.skipped) {
                ppl_sum += e.perplexity;
                ++ppl_n;
            }
        summary.push_back(
            {"final_mean_eval_ppl", ppl_n ? ppl_sum / static_cast<double>(ppl_n) : 0.0});
        if (!reports_.empty()) {
            summary.push_back({"last_round_mean_eval_ppl", reports_.back().mean_eval_ppl});
            summary.push_back({"last_round_mean_train_loss", reports_.back().mean_train_loss});
        }
        summary.push_back({"rounds_completed", static_cast<double>(reports_.size())});
        summary.push_back({"clients", static_cast<double>(clients_.size())});
        write_text_file(path("summary.csv"), summary_csv(summary));
    }

    static std::string zero_pad(uint32_t id) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%03u", id);
        return buf;
    }

  private:
    void build_clients() {
        const size_t d = backbone_.config().d_model;
        sites_.clear();
        for (uint32_t l = 0; l < backbone_.config().n_layers; ++l)
            for (uint32_t pr = 0; pr < 3; ++pr) sites_.push_back({l, static_cast<Proj>(pr)});

        std::vector<uint32_t> level_of(cfg_.clients, 0);
        std::vector<SparsityGroup> groups;
        if (cfg_.hetero_ranks.empty()) {
            expanded_rank_ = dense_rank(cfg_.rank, cfg_.sparsity);
            groups.push_back({cfg_.rank, cfg_.sparsity});
        } else {
            size_t r_max = *std::max_element(cfg_.hetero_ranks.begin(), cfg_.hetero_ranks.end());
            HeteroGroup hg = build_heterogeneous_group(cfg_.hetero_ranks, r_max, cfg_.clients);
            expanded_rank_ = hg.expanded_rank;
            groups = hg.levels;
            level_of = hg.level_of_client;
        }

        clients_.clear();
        clients_.reserve(cfg_.clients);
        for (uint32_t c = 0; c < cfg_.clients; ++c) {
            ClientState cl;
            cl.id = c;
            cl.level = level_of[c];
            cl.sparsity = groups[cl.level].sparsity;
            cl.target_rank = static_cast<uint32_t>(groups[cl.level].rank);
            cl.search_rng = derive_stream(cfg_.seed, stream::kSearch, c);
            cl.init_rng = derive_stream(cfg_.seed, stream::kInit, c);
            cl.train_rng = derive_stream(cfg_.seed, stream::kTrain, c);

            if (!shards_[c].empty()) {
                RngStream split_rng = derive_stream(cfg_.seed, stream::kSplit, c);
                TrainEvalSplit split = split_train_eval(shards_[c], cfg_.train_fraction,
                                                        split_rng);
                cl.train_ids = std::move(split.train);
                cl.eval_ids = std::move(split.eval);
            }

            for (const auto& site : sites_) {
                LoraPair p = LoraPair::make_expanded(site, d, cl.target_rank, cl.sparsity,
                                                     expanded_rank_);
                init_symmetric(p, cl.init_rng);
                cl.pairs.push_back(std::move(p));
            }
            clients_.push_back(std::move(cl));
        }
    }

    RunConfig cfg_;
    Backbone backbone_;
    ServerState server_;
    std::vector<Example> corpus_;
    std::vector<TokenSeq> tokens_;
    Partition shards_;
    std::vector<ClientState> clients_;
    std::vector<InjectionSite> sites_;
    std::vector<RoundReport> reports_;
    std::vector<SearchReport> search_reports_;
    size_t expanded_rank_ = 0;
};

}  // namespace fedlora
