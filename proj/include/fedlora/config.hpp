// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedlora/common.hpp"
#include "fedlora/data.hpp"
#include "fedlora/federation.hpp"
#include "fedlora/saliency.hpp"

namespace fedlora {

enum class FinetuneInit : uint8_t { Reinit, Keep };

inline const char* finetune_init_name(FinetuneInit f) {
    return f == FinetuneInit::Reinit ? "reinit" : "keep";
}

inline FinetuneInit finetune_init_from_name(const std::string& s) {
    if (s == "reinit") return FinetuneInit::Reinit;
    if (s == "keep") return FinetuneInit::Keep;
    throw ConfigError("unknown finetune_init: " + s + " (expected reinit|keep)");
}

inline const char* partition_kind_name(PartitionKind k) {
    return k == PartitionKind::Pathological ? "pathological" : "dirichlet";
}

inline PartitionKind partition_kind_from_name(const std::string& s) {
    if (s == "pathological") return PartitionKind::Pathological;
    if (s == "dirichlet") return PartitionKind::Dirichlet;
    throw ConfigError("unknown partition kind: " + s + " (expected pathological|dirichlet)");
}

// Every experiment knob. One key per field in the flat key=value grammar;
// the emitted manifest is itself a loadable config file.
struct RunConfig {
    uint64_t seed = 1;

    // Federation.
    size_t clients = 16;
    double participation = 0.1;
    size_t rounds = 30;
    size_t local_epochs = 1;
    size_t prune_epochs = 0;  // 0 = auto: 10 when the expanded rank is 16, else 5
    size_t rank = 8;
    double sparsity = 0.5;
    std::vector<size_t> hetero_ranks;  // non-empty switches to heterogeneous budgets
    Metric metric = Metric::First;
    AggMode aggregation = AggMode::Literal;

    // Data.
    PartitionKind partition = PartitionKind::Pathological;
    size_t classes_per_client = 2;
    double beta = 0.5;
    std::string data_jsonl;  // empty = synthetic corpus
    size_t synth_per_category = 50;
    double train_fraction = 0.8;

    // Optimization.
    size_t batch = 64;
    size_t micro_batch = 8;
    double learning_rate = 0.05;
    bool response_only = false;
    FinetuneInit finetune_init = FinetuneInit::Reinit;

    // Backbone.
    size_t vocab_size = kByteVocabSize;
    size_t d_model = 64;
    size_t n_layers = 2;
    size_t n_heads = 4;
    size_t d_ff = 128;
    size_t max_seq = 128;
    std::string backbone_checkpoint;

    // Reporting.
    bool timing = false;

    size_t participants_per_round() const {
        auto k = static_cast<size_t>(
            std::llround(participation * static_cast<double>(clients)));
        return std::min(std::max<size_t>(k, 1), clients);
    }

    size_t effective_prune_epochs(size_t expanded_rank) const {
        if (prune_epochs > 0) return prune_epochs;
        return expanded_rank == 16 ? 10 : 5;
    }

    void validate() const {
        if (clients < 1) throw ConfigError("config: clients must be >= 1");
        if (!(participation > 0.0 && participation <= 1.0))
            throw ConfigError("config: participation must be in (0, 1]");
        if (local_epochs < 1) throw ConfigError("config: local_epochs must be >= 1");
        if (rank < 1) throw ConfigError("config: rank must be >= 1");
        if (!(sparsity >= 0.0 && sparsity < 1.0))
            throw ConfigError("config: sparsity must be in [0, 1)");
        if (!(beta > 0.0)) throw ConfigError("config: beta must be > 0");
        if (batch < 1 || micro_batch < 1)
            throw ConfigError("config: batch and micro_batch must be >= 1");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw ConfigError("config: train_fraction must be in (0, 1)");
        if (classes_per_client < 1 || classes_per_client > kCategories.size())
            throw ConfigError("config: classes_per_client outside [1, 8]");
        if (!hetero_ranks.empty()) {
            for (size_t r : hetero_ranks)
                if (r < 1) throw ConfigError("config: hetero rank must be >= 1");
        }
        BackboneConfig bc = backbone_config();
        bc.validate();
    }

    BackboneConfig backbone_config() const {
        BackboneConfig bc;
        bc.vocab_size = vocab_size;
        bc.d_model = d_model;
        bc.n_layers = n_layers;
        bc.n_heads = n_heads;
        bc.d_ff = d_ff;
        bc.max_seq = max_seq;
        bc.init_seed = seed;
        return bc;
    }

    PartitionSpec partition_spec() const {
        PartitionSpec ps;
        ps.kind = partition;
        ps.classes_per_client = classes_per_client;
        ps.beta = beta;
        ps.clients = clients;
        ps.seed = seed;
        return ps;
    }
};

namespace detail {

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for " + key + ": \"" + v + "\"");
    }
}

inline double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for " + key + ": \"" + v + "\"");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean for " + key + ": \"" + v + "\"");
}

inline std::vector<size_t> parse_rank_list(const std::string& key, const std::string& v) {
    std::vector<size_t> out;
    if (trim(v).empty()) return out;
    for (const auto& part : split(v, ','))
        out.push_back(static_cast<size_t>(parse_u64(key, trim(part))));
    return out;
}

}  // namespace detail

// Applies one key=value setting; unknown keys are config errors so typos
// never pass silently.
inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_f64;
    using detail::parse_u64;
    if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "clients") cfg.clients = parse_u64(key, value);
    else if (key == "participation") cfg.participation = parse_f64(key, value);
    else if (key == "rounds") cfg.rounds = parse_u64(key, value);
    else if (key == "local_epochs") cfg.local_epochs = parse_u64(key, value);
    else if (key == "prune_epochs") cfg.prune_epochs = parse_u64(key, value);
    else if (key == "rank") cfg.rank = parse_u64(key, value);
    else if (key == "sparsity") cfg.sparsity = parse_f64(key, value);
    else if (key == "hetero_ranks") cfg.hetero_ranks = detail::parse_rank_list(key, value);
    else if (key == "metric") cfg.metric = metric_from_name(value);
    else if (key == "aggregation") cfg.aggregation = agg_mode_from_name(value);
    else if (key == "partition") cfg.partition = partition_kind_from_name(value);
    else if (key == "classes_per_client") cfg.classes_per_client = parse_u64(key, value);
    else if (key == "beta") cfg.beta = parse_f64(key, value);
    else if (key == "data_jsonl") cfg.data_jsonl = value;
    else if (key == "synth_per_category") cfg.synth_per_category = parse_u64(key, value);
    else if (key == "train_fraction") cfg.train_fraction = parse_f64(key, value);
    else if (key == "batch") cfg.batch = parse_u64(key, value);
    else if (key == "micro_batch") cfg.micro_batch = parse_u64(key, value);
    else if (key == "learning_rate") cfg.learning_rate = parse_f64(key, value);
    else if (key == "response_only") cfg.response_only = parse_bool(key, value);
    else if (key == "finetune_init") cfg.finetune_init = finetune_init_from_name(value);
    else if (key == "vocab_size") cfg.vocab_size = parse_u64(key, value);
    else if (key == "d_model") cfg.d_model = parse_u64(key, value);
    else if (key == "n_layers") cfg.n_layers = parse_u64(key, value);
    else if (key == "n_heads") cfg.n_heads = parse_u64(key, value);
    else if (key == "d_ff") cfg.d_ff = parse_u64(key, value);
    else if (key == "max_seq") cfg.max_seq = parse_u64(key, value);
    else if (key == "backbone_checkpoint") cfg.backbone_checkpoint = value;
    else if (key == "timing") cfg.timing = parse_bool(key, value);
    else throw ConfigError("config: unknown key \"" + key + "\"");
}

// Flat key=value grammar: one setting per line, '#' starts a comment, blank
// lines ignored.
inline void config_apply_text(RunConfig& cfg, const std::string& text,
                              const std::string& origin) {
    size_t line_no = 0;
    for (const auto& raw : split(text, '\n')) {
        ++line_no;
        std::string line = raw;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + " line " + std::to_string(line_no) +
                              ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        config_set(cfg, key, value);
    }
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = RunConfig{}) {
    config_apply_text(base, read_text_file(path), path);
    return base;
}

// The manifest records every effective experiment parameter in config grammar
// (worker count and output paths are execution environment, not experiment
// state, and are deliberately absent). Feeding the manifest back through
// `--config` replays the run.
inline std::string serialize_manifest(const RunConfig& cfg) {
    std::ostringstream out;
    out << "# fedlora run manifest (loadable as a config file)\n";
    out << "seed = " << cfg.seed << "\n";
    out << "clients = " << cfg.clients << "\n";
    out << "participation = " << fmt_g17(cfg.participation) << "\n";
    out << "rounds = " << cfg.rounds << "\n";
    out << "local_epochs = " << cfg.local_epochs << "\n";
    out << "prune_epochs = " << cfg.prune_epochs << "\n";
    out << "rank = " << cfg.rank << "\n";
    out << "sparsity = " << fmt_g17(cfg.sparsity) << "\n";
    out << "hetero_ranks = ";
    for (size_t i = 0; i < cfg.hetero_ranks.size(); ++i)
        out << (i ? "," : "") << cfg.hetero_ranks[i];
    out << "\n";
    out << "metric = " << metric_name(cfg.metric) << "\n";
    out << "aggregation = " << agg_mode_name(cfg.aggregation) << "\n";
    out << "partition = " << partition_kind_name(cfg.partition) << "\n";
    out << "classes_per_client = " << cfg.classes_per_client << "\n";
    out << "beta = " << fmt_g17(cfg.beta) << "\n";
    out << "data_jsonl = " << cfg.data_jsonl << "\n";
    out << "synth_per_category = " << cfg.synth_per_category << "\n";
    out << "train_fraction = " << fmt_g17(cfg.train_fraction) << "\n";
    out << "batch = " << cfg.batch << "\n";
    out << "micro_batch = " << cfg.micro_batch << "\n";
    out << "learning_rate = " << fmt_g17(cfg.learning_rate) << "\n";
    out << "response_only = " << (cfg.response_only ? "true" : "false") << "\n";
    out << "finetune_init = " << finetune_init_name(cfg.finetune_init) << "\n";
    out << "vocab_size = " << cfg.vocab_size << "\n";
    out << "d_model = " << cfg.d_model << "\n";
    out << "n_layers = " << cfg.n_layers << "\n";
    out << "n_heads = " << cfg.n_heads << "\n";
    out << "d_ff = " << cfg.d_ff << "\n";
    out << "max_seq = " << cfg.max_seq << "\n";
    out << "backbone_checkpoint = " << cfg.backbone_checkpoint << "\n";
    out << "timing = " << (cfg.timing ? "true" : "false") << "\n";
    return out.str();
}

}  // namespace fedlora
