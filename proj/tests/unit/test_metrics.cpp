// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fedlora/driver.hpp"
#include "fedlora/metrics.hpp"

using namespace fedlora;

namespace {

BackboneConfig eval_config(size_t vocab, uint64_t seed) {
    BackboneConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq = 32;
    cfg.init_seed = seed;
    return cfg;
}

std::vector<TokenSeq> fixed_token_corpus(const BackboneConfig& cfg, size_t n_seqs, size_t len,
                                         uint64_t seed) {
    std::vector<TokenSeq> out;
    RngStream rng(seed, 808);
    for (size_t s = 0; s < n_seqs; ++s) {
        TokenSeq seq;
        for (size_t i = 0; i < len; ++i)
            seq.ids.push_back(static_cast<uint16_t>(rng.next_below(cfg.vocab_size)));
        seq.response_start = len / 2;
        out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace

TEST_CASE("uniform logits give perplexity equal to the vocabulary size") {
    BackboneConfig cfg = eval_config(37, 5);
    Backbone bb(cfg);
    bb.mutable_head().fill(0.0);  // all logits zero: uniform distribution
    auto corpus = fixed_token_corpus(cfg, 3, 12, 6);
    AdapterSet none = AdapterSet::none(cfg.n_layers);
    EvalReport rep = perplexity(bb, none, corpus, {0, 1, 2}, false);
    REQUIRE(std::abs(rep.perplexity - 37.0) < 1e-9);
    REQUIRE(rep.token_count == 3 * 11);
}

TEST_CASE("near-one-hot correct predictions drive perplexity to one") {
    BackboneConfig cfg = eval_config(5, 7);
    Backbone bb(cfg);
    // All-identical tokens and zeroed positional rows make every final-norm
    // row the same vector u; pointing the target row of the head along u and
    // the rest against it yields near-one-hot correct predictions.
    for (double& v : bb.mutable_positional().data) v = 0.0;
    TokenSeq seq;
    seq.ids.assign(10, 2);
    AdapterSet none = AdapterSet::none(cfg.n_layers);
    ForwardTape tape;
    forward(bb, none, seq, false, tape);
    std::vector<double> u(tape.xf.row(0), tape.xf.row(0) + cfg.d_model);
    double norm2 = 0.0;
    for (double v : u) norm2 += v * v;
    Mat& head = bb.mutable_head();
    for (size_t v = 0; v < cfg.vocab_size; ++v)
        for (size_t i = 0; i < cfg.d_model; ++i)
            head.at(v, i) = (v == 2 ? 60.0 : -60.0) * u[i] / norm2;

    std::vector<TokenSeq> corpus = {seq};
    EvalReport rep = perplexity(bb, none, corpus, {0}, false);
    REQUIRE(rep.perplexity < 1.0 + 1e-6);
    REQUIRE(rep.perplexity >= 1.0);
}

TEST_CASE("perplexity matches an independent NLL accumulation oracle") {
    BackboneConfig cfg = eval_config(43, 9);
    Backbone bb(cfg);
    auto corpus = fixed_token_corpus(cfg, 4, 14, 10);
    AdapterSet none = AdapterSet::none(cfg.n_layers);
    std::vector<uint32_t> ids = {0, 1, 2, 3};
    EvalReport rep = perplexity(bb, none, corpus, ids, false);

    // Oracle: accumulate per-token NLL from logits directly.
    double nll = 0.0;
    size_t count = 0;
    for (uint32_t id : ids) {
        ForwardTape tape;
        forward(bb, none, corpus[id], false, tape);
        for (size_t r = 0; r < tape.n_pred; ++r) {
            uint16_t target = corpus[id].ids[tape.pred_pos[r] + 1];
            nll += tape.logsumexp[r] - tape.logits.at(r, target);
            ++count;
        }
    }
    double oracle = std::exp(nll / static_cast<double>(count));
    REQUIRE(std::abs(rep.perplexity - oracle) < 1e-9);
    REQUIRE(rep.token_count == count);
}

TEST_CASE("empty eval split produces a skipped report") {
    BackboneConfig cfg = eval_config(11, 3);
    Backbone bb(cfg);
    auto corpus = fixed_token_corpus(cfg, 1, 8, 4);
    AdapterSet none = AdapterSet::none(cfg.n_layers);
    EvalReport rep = perplexity(bb, none, corpus, {}, false);
    REQUIRE(rep.skipped);
}

TEST_CASE("zeroed adapters give every client the same model") {
    BackboneConfig cfg = eval_config(29, 12);
    Backbone bb(cfg);
    auto corpus = fixed_token_corpus(cfg, 5, 12, 13);
    std::vector<uint32_t> shared_eval = {1, 3, 4};

    // Two clients, different masks, both with B = 0 (delta is zero).
    double ppl[2];
    for (int c = 0; c < 2; ++c) {
        std::vector<LoraPair> pairs;
        RngStream rng(20 + c, 1);
        for (uint32_t pr = 0; pr < 3; ++pr) {
            LoraPair p = LoraPair::make({0, static_cast<Proj>(pr)}, cfg.d_model, 4, 0.5);
            init_symmetric(p, rng);
            for (size_t i = 0; i < p.mask_a.size(); ++i)
                p.mask_a.set_flat(i, rng.next_double() < 0.5);
            p.b.fill(0.0);
            apply_masks(p);
            pairs.push_back(std::move(p));
        }
        AdapterSet set = AdapterSet::from_pairs(pairs, cfg.n_layers);
        ppl[c] = perplexity(bb, set, corpus, shared_eval, false).perplexity;
    }
    REQUIRE(ppl[0] == ppl[1]);
}

TEST_CASE("similarity matrix contracts") {
    BitMask ones(4, 4, true);
    BitMask zeros(4, 4, false);

    std::vector<ClientMasks> dup(3);
    for (uint32_t c = 0; c < 3; ++c) {
        dup[c].client_id = c;
        dup[c].sites.push_back({ones, ones});
        dup[c].sites.push_back({zeros, zeros});
    }
    SimilarityMatrix sim = similarity_matrix(dup, 0);
    for (size_t i = 0; i < 3; ++i)
        for (size_t j = 0; j < 3; ++j) REQUIRE(sim.values.at(i, j) == 1.0);

    std::vector<ClientMasks> comp(2);
    comp[0].client_id = 0;
    comp[0].sites.push_back({ones, ones});
    comp[1].client_id = 1;
    comp[1].sites.push_back({zeros, zeros});
    SimilarityMatrix s2 = similarity_matrix(comp, 0);
    REQUIRE(s2.values.at(0, 1) == 0.0);
    REQUIRE(s2.values.at(0, 0) == 1.0);
    REQUIRE(s2.values.at(1, 0) == s2.values.at(0, 1));

    // Averaged-over-sites selector.
    std::vector<ClientMasks> two(2);
    two[0].client_id = 0;
    two[0].sites.push_back({ones, ones});
    two[0].sites.push_back({ones, ones});
    two[1].client_id = 1;
    two[1].sites.push_back({ones, ones});
    two[1].sites.push_back({zeros, zeros});
    SimilarityMatrix s3 = similarity_matrix(two, -1);
    REQUIRE(s3.values.at(0, 1) == 0.5);

    std::vector<ClientMasks> one(1);
    REQUIRE_THROWS_AS(similarity_matrix(one, 0), ConfigError);
}

TEST_CASE("csv emitters have fixed schemas and deterministic bytes") {
    std::vector<LossCurveRow> curve = {{0, 5.5, 220.0}, {1, 5.25, 210.5}};
    std::string csv = loss_curve_csv(curve);
    REQUIRE(csv.rfind("round,mean_train_loss,mean_eval_ppl\n", 0) == 0);
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 3);
    REQUIRE(csv == loss_curve_csv(curve));

    std::vector<RoundRow> rows = {{0, 3, 5.5, 220.0, 0.0}};
    std::string rcsv = rounds_csv(rows);
    REQUIRE(rcsv.rfind("round,client_id,mean_train_loss,eval_ppl,wall_ms\n", 0) == 0);

    std::vector<std::vector<uint32_t>> shards = {{1, 0}, {2}};
    REQUIRE(partition_csv(shards) == "example_id,client_id\n0,0\n1,0\n2,1\n");

    std::vector<SummaryRow> summary = {{"final_mean_eval_ppl", 123.5}};
    REQUIRE(summary_csv(summary) == "metric,value\nfinal_mean_eval_ppl,123.5\n");
}

TEST_CASE("run emit writes the full artifact set deterministically") {
    RunConfig cfg;
    cfg.seed = 31;
    cfg.clients = 4;
    cfg.partition = PartitionKind::Dirichlet;
    cfg.participation = 0.5;
    cfg.rounds = 2;
    cfg.rank = 2;
    cfg.sparsity = 0.5;
    cfg.prune_epochs = 1;
    cfg.batch = 4;
    cfg.synth_per_category = 4;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq = 48;

    auto run_and_emit = [&](const std::string& dir) {
        Run run(cfg);
        run.search(2);
        run.federate(2);
        run.emit(dir, 2);
    };
    auto base = std::filesystem::temp_directory_path() /
                ("fedlora_emit_" + std::to_string(::getpid()));
    std::filesystem::remove_all(base);
    run_and_emit((base / "a").string());
    run_and_emit((base / "b").string());

    for (const char* name : {"manifest.cfg", "partition.csv", "rounds.csv", "loss_curve.csv",
                             "similarity.csv", "summary.csv"}) {
        std::string a = read_text_file((base / "a" / name).string());
        std::string b = read_text_file((base / "b" / name).string());
        REQUIRE(a == b);
        REQUIRE(!a.empty());
    }
    // loss_curve has one data row per round.
    std::string curve = read_text_file((base / "a" / "loss_curve.csv").string());
    REQUIRE(std::count(curve.begin(), curve.end(), '\n') == 1 + 2);

    // Mask files round-trip and match the registry.
    Run probe(cfg);
    probe.search(1);
    std::string mask_text = read_text_file((base / "a" / "masks" / "client_000.masks").string());
    ClientMasks cm = deserialize_masks(mask_text, "client_000.masks");
    REQUIRE(cm.client_id == 0);
    REQUIRE(cm.sites.size() == 3);  // 1 layer x Q/K/V
    for (size_t s = 0; s < cm.sites.size(); ++s) {
        REQUIRE(cm.sites[s].first == probe.server().masks_of(0)[s].first);
        REQUIRE(cm.sites[s].second == probe.server().masks_of(0)[s].second);
    }
    std::filesystem::remove_all(base);
}
