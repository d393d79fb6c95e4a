// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "fedlora/driver.hpp"
#include "fedlora/federation.hpp"

using namespace fedlora;

namespace {

RunConfig small_run_config(uint64_t seed = 3) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.clients = 4;
    cfg.partition = PartitionKind::Dirichlet;  // pathological needs more clients
    cfg.participation = 0.5;
    cfg.rounds = 2;
    cfg.rank = 4;
    cfg.sparsity = 0.5;
    cfg.prune_epochs = 2;
    cfg.batch = 8;
    cfg.synth_per_category = 8;
    cfg.learning_rate = 0.05;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq = 64;
    return cfg;
}

double max_abs_diff(const Mat& a, const Mat& b) {
    double mx = 0.0;
    for (size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a.data[i] - b.data[i]));
    return mx;
}

// Registers one client with the given single-site masks.
void register_one_site(ServerState& server, uint32_t id, const BitMask& ma, const BitMask& mb) {
    std::vector<std::pair<BitMask, BitMask>> masks;
    masks.push_back({ma, mb});
    server.register_masks(id, std::move(masks));
}

}  // namespace

TEST_CASE("heterogeneous group maps ranks to keep ratios on a common dense rank") {
    HeteroGroup g = build_heterogeneous_group({8, 12, 16}, 16, 100);
    REQUIRE(g.expanded_rank == 16);
    REQUIRE(g.levels.size() == 3);
    REQUIRE(g.levels[0].sparsity == 0.5);
    REQUIRE(g.levels[1].sparsity == 0.25);
    REQUIRE(g.levels[2].sparsity == 0.0);

    std::array<size_t, 3> sizes{};
    for (uint32_t lvl : g.level_of_client) sizes[lvl]++;
    REQUIRE(sizes == std::array<size_t, 3>{34, 33, 33});

    HeteroGroup eq = build_heterogeneous_group({16, 16, 16}, 16, 9);
    for (const auto& lvl : eq.levels) REQUIRE(lvl.sparsity == 0.0);

    REQUIRE_THROWS_AS(build_heterogeneous_group({8, 24}, 16, 10), ConfigError);
}

TEST_CASE("zero learning rate leaves adapters unchanged") {
    Run run(small_run_config());
    run.search(1);
    ClientState& cl = run.clients()[0];
    auto before = cl.pairs;
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch = 4;
    opt.learning_rate = 0.0;
    TrainTrace trace = local_finetune(cl, run.backbone(), run.tokens(), opt);
    REQUIRE(!trace.step_losses.empty());
    for (double l : trace.step_losses) REQUIRE(std::isfinite(l));
    for (size_t s = 0; s < cl.pairs.size(); ++s) {
        REQUIRE(cl.pairs[s].a.data == before[s].a.data);
        REQUIRE(cl.pairs[s].b.data == before[s].b.data);
    }
}

TEST_CASE("masked coordinates stay exactly zero through training") {
    Run run(small_run_config(7));
    run.search(1);
    ClientState& cl = run.clients()[1];
    TrainOptions opt;
    opt.epochs = 3;
    opt.batch = 4;
    opt.learning_rate = 0.1;
    local_finetune(cl, run.backbone(), run.tokens(), opt);
    for (const auto& p : cl.pairs) {
        for (size_t i = 0; i < p.a.size(); ++i)
            if (!p.mask_a.get_flat(i)) REQUIRE(p.a.data[i] == 0.0);
        for (size_t i = 0; i < p.b.size(); ++i)
            if (!p.mask_b.get_flat(i)) REQUIRE(p.b.data[i] == 0.0);
    }
}

TEST_CASE("all-ones masks reproduce a plain dense SGD trajectory") {
    RunConfig cfg = small_run_config(9);
    cfg.sparsity = 0.0;  // masks stay all-ones
    Run run(cfg);
    run.search(1);
    ClientState& cl = run.clients()[2];
    auto oracle_pairs = cl.pairs;

    TrainOptions opt;
    opt.epochs = 2;
    opt.batch = 4;
    opt.learning_rate = 0.05;
    local_finetune(cl, run.backbone(), run.tokens(), opt);

    // Oracle: unmasked SGD over the same shuffled windows, written as its own
    // loop. The shuffle stream is reconstructed from the client's identity.
    RngStream shuffle_rng = derive_stream(cfg.seed, stream::kTrain, cl.id);
    AdapterSet set = AdapterSet::from_pairs(oracle_pairs, run.backbone().config().n_layers);
    for (size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::vector<uint32_t> order = cl.train_ids;
        shuffle_rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += opt.batch) {
            size_t stop = std::min(start + opt.batch, order.size());
            std::vector<const TokenSeq*> window;
            for (size_t i = start; i < stop; ++i) window.push_back(&run.tokens()[order[i]]);
            AdapterGrads g = batch_gradient(run.backbone(), set, window, false);
            for (size_t s = 0; s < oracle_pairs.size(); ++s) {
                for (size_t i = 0; i < oracle_pairs[s].a.size(); ++i)
                    oracle_pairs[s].a.data[i] -= opt.learning_rate * g.grads[s].a.data[i];
                for (size_t i = 0; i < oracle_pairs[s].b.size(); ++i)
                    oracle_pairs[s].b.data[i] -= opt.learning_rate * g.grads[s].b.data[i];
            }
        }
    }
    for (size_t s = 0; s < cl.pairs.size(); ++s) {
        REQUIRE(max_abs_diff(cl.pairs[s].a, oracle_pairs[s].a) < 1e-9);
        REQUIRE(max_abs_diff(cl.pairs[s].b, oracle_pairs[s].b) < 1e-9);
    }
}

TEST_CASE("aggregate reproduces the hand-evaluated example") {
    ServerState server(1);
    BitMask m1(2, 2, false);  // diagonal
    m1.set(0, 0, true);
    m1.set(1, 1, true);
    BitMask m2(2, 2, false);  // top row
    m2.set(0, 0, true);
    m2.set(0, 1, true);
    BitMask mb(2, 2, true);  // B masks all-ones, B values zero
    register_one_site(server, 0, m1, mb);
    register_one_site(server, 1, m2, mb);

    AdapterUpload u1, u2;
    u1.client_id = 0;
    u1.sites.resize(1);
    u1.sites[0].a = Mat(2, 2);
    u1.sites[0].a.data = {2.0, 0.0, 0.0, 4.0};
    u1.sites[0].b = Mat(2, 2);
    u2.client_id = 1;
    u2.sites.resize(1);
    u2.sites[0].a = Mat(2, 2);
    u2.sites[0].a.data = {4.0, 6.0, 0.0, 0.0};
    u2.sites[0].b = Mat(2, 2);

    auto out = aggregate({u1, u2}, {0.5, 0.5}, server, AggMode::Literal);
    // Dense sum is [[3,3],[0,2]]; client 0 keeps its diagonal.
    REQUIRE(out.at(0)[0].a.data == std::vector<double>{3.0, 0.0, 0.0, 2.0});
    // Client 1 keeps the top row.
    REQUIRE(out.at(1)[0].a.data == std::vector<double>{3.0, 3.0, 0.0, 0.0});

    // Overlap mode renormalizes by the retained weight: the (1,1) coordinate
    // is held only by client 0, so its value recovers the upload.
    auto ov = aggregate({u1, u2}, {0.5, 0.5}, server, AggMode::Overlap);
    REQUIRE(ov.at(0)[0].a.data == std::vector<double>{3.0, 0.0, 0.0, 4.0});
    REQUIRE(ov.at(1)[0].a.data == std::vector<double>{3.0, 6.0, 0.0, 0.0});
}

TEST_CASE("identical masks reduce aggregation to FedAvg in both modes") {
    ServerState server(2);
    BitMask ones_a(3, 2, true);
    BitMask ones_b(2, 3, true);
    std::vector<AdapterUpload> uploads;
    RngStream rng(4, 4);
    for (uint32_t c = 0; c < 4; ++c) {
        register_one_site(server, c, ones_a, ones_b);
        AdapterUpload up;
        up.client_id = c;
        up.sites.resize(1);
        up.sites[0].a = Mat(3, 2);
        up.sites[0].b = Mat(2, 3);
        for (double& v : up.sites[0].a.data) v = rng.next_double();
        for (double& v : up.sites[0].b.data) v = rng.next_double();
        uploads.push_back(std::move(up));
    }
    std::vector<double> gamma(4, 0.25);

    Mat fedavg_a(3, 2), fedavg_b(2, 3);
    for (const auto& up : uploads) {
        add_inplace(fedavg_a, up.sites[0].a);
        add_inplace(fedavg_b, up.sites[0].b);
    }
    scale_inplace(fedavg_a, 0.25);
    scale_inplace(fedavg_b, 0.25);

    for (AggMode mode : {AggMode::Literal, AggMode::Overlap}) {
        auto out = aggregate(uploads, gamma, server, mode);
        for (uint32_t c = 0; c < 4; ++c) {
            REQUIRE(max_abs_diff(out.at(c)[0].a, fedavg_a) < 1e-12);
            REQUIRE(max_abs_diff(out.at(c)[0].b, fedavg_b) < 1e-12);
        }
    }
}

TEST_CASE("single participant with weight one receives its upload unchanged") {
    ServerState server(3);
    RngStream rng(5, 5);
    BitMask ma(4, 3, false), mb(3, 4, false);
    for (size_t i = 0; i < ma.size(); ++i) ma.set_flat(i, rng.next_double() < 0.6);
    for (size_t i = 0; i < mb.size(); ++i) mb.set_flat(i, rng.next_double() < 0.6);
    register_one_site(server, 7, ma, mb);

    AdapterUpload up;
    up.client_id = 7;
    up.sites.resize(1);
    up.sites[0].a = Mat(4, 3);
    up.sites[0].b = Mat(3, 4);
    for (size_t i = 0; i < up.sites[0].a.size(); ++i)
        up.sites[0].a.data[i] = ma.get_flat(i) ? rng.next_double() : 0.0;
    for (size_t i = 0; i < up.sites[0].b.size(); ++i)
        up.sites[0].b.data[i] = mb.get_flat(i) ? rng.next_double() : 0.0;

    for (AggMode mode : {AggMode::Literal, AggMode::Overlap}) {
        auto out = aggregate({up}, {1.0}, server, mode);
        REQUIRE(out.at(7)[0].a.data == up.sites[0].a.data);
        REQUIRE(out.at(7)[0].b.data == up.sites[0].b.data);
    }
}

TEST_CASE("aggregate validates weights, order and registry shapes") {
    ServerState server(4);
    BitMask ones(2, 2, true);
    register_one_site(server, 0, ones, ones);
    register_one_site(server, 1, ones, ones);

    AdapterUpload u0, u1;
    u0.client_id = 0;
    u0.sites.resize(1);
    u0.sites[0].a = Mat(2, 2);
    u0.sites[0].b = Mat(2, 2);
    u1 = u0;
    u1.client_id = 1;

    REQUIRE_THROWS_AS(aggregate({u0, u1}, {0.5, 0.6}, server, AggMode::Literal), ConfigError);
    REQUIRE_THROWS_AS(aggregate({u1, u0}, {0.5, 0.5}, server, AggMode::Literal), LogicError);

    AdapterUpload bad = u1;
    bad.sites[0].a = Mat(3, 2);  // registry says 2x2
    REQUIRE_THROWS_AS(aggregate({u0, bad}, {0.5, 0.5}, server, AggMode::Literal), LogicError);
}

TEST_CASE("masks register exactly once") {
    ServerState server(5);
    BitMask ones(2, 2, true);
    register_one_site(server, 3, ones, ones);
    REQUIRE(server.registered(3));
    REQUIRE_THROWS_AS(register_one_site(server, 3, ones, ones), LogicError);
    REQUIRE_THROWS_AS(server.masks_of(9), LogicError);
}

TEST_CASE("participant sampling draws distinct ids") {
    ServerState server(6);
    auto ids = server.sample_participants(100, 10);
    REQUIRE(ids.size() == 10);
    std::set<uint32_t> uniq(ids.begin(), ids.end());
    REQUIRE(uniq.size() == 10);
    for (uint32_t id : ids) REQUIRE(id < 100);
    REQUIRE_THROWS_AS(server.sample_participants(5, 6), ConfigError);
}

TEST_CASE("dispatched modules preserve the registered mask support") {
    RunConfig cfg = small_run_config(11);
    Run run(cfg);
    run.search(1);
    for (size_t t = 0; t < 2; ++t) run.round(t, 1);
    for (const auto& cl : run.clients()) {
        const auto& masks = run.server().masks_of(cl.id);
        for (size_t s = 0; s < cl.pairs.size(); ++s) {
            REQUIRE(cl.pairs[s].mask_a == masks[s].first);
            for (size_t i = 0; i < cl.pairs[s].a.size(); ++i)
                if (!masks[s].first.get_flat(i)) REQUIRE(cl.pairs[s].a.data[i] == 0.0);
            for (size_t i = 0; i < cl.pairs[s].b.size(); ++i)
                if (!masks[s].second.get_flat(i)) REQUIRE(cl.pairs[s].b.data[i] == 0.0);
        }
    }
}

TEST_CASE("round reports are identical for any worker-pool size") {
    auto run_once = [](size_t workers) {
        RunConfig cfg = small_run_config(13);
        Run run(cfg);
        run.search(workers);
        std::vector<RoundReport> reps;
        for (size_t t = 0; t < 2; ++t) reps.push_back(run.round(t, workers));
        return reps;
    };
    auto a = run_once(1);
    auto b = run_once(3);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].mean_train_loss == b[i].mean_train_loss);
        REQUIRE(a[i].mean_eval_ppl == b[i].mean_eval_ppl);
        REQUIRE(a[i].rows.size() == b[i].rows.size());
        for (size_t r = 0; r < a[i].rows.size(); ++r) {
            REQUIRE(a[i].rows[r].client_id == b[i].rows[r].client_id);
            REQUIRE(a[i].rows[r].mean_train_loss == b[i].rows[r].mean_train_loss);
            REQUIRE(a[i].rows[r].eval_ppl == b[i].rows[r].eval_ppl);
        }
    }
}

TEST_CASE("single client federation equals sequential training") {
    RunConfig cfg = small_run_config(17);
    cfg.clients = 1;
    cfg.participation = 1.0;
    cfg.sparsity = 0.0;
    cfg.partition = PartitionKind::Dirichlet;  // pathological needs >= 4 clients
    Run fed(cfg);
    fed.search(1);

    // Clone the post-search client for the sequential oracle before any
    // federated round touches it.
    Run seq(cfg);
    seq.search(1);

    const size_t rounds = 3;
    for (size_t t = 0; t < rounds; ++t) fed.round(t, 1);

    ClientState& cl = seq.clients()[0];
    TrainOptions opt;
    opt.epochs = cfg.local_epochs;
    opt.batch = cfg.batch;
    opt.learning_rate = cfg.learning_rate;
    for (size_t t = 0; t < rounds; ++t) local_finetune(cl, seq.backbone(), seq.tokens(), opt);

    for (size_t s = 0; s < cl.pairs.size(); ++s) {
        REQUIRE(max_abs_diff(fed.clients()[0].pairs[s].a, cl.pairs[s].a) < 1e-9);
        REQUIRE(max_abs_diff(fed.clients()[0].pairs[s].b, cl.pairs[s].b) < 1e-9);
    }
}
