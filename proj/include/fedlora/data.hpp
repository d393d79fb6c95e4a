// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <iostream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fedlora/common.hpp"
#include "fedlora/numerics.hpp"

namespace fedlora {

// The eight instruction categories, fixed for both real JSONL corpora and the
// synthetic stand-in.
inline constexpr std::array<std::string_view, 8> kCategories = {
    "creative_writing", "brainstorming",          "classification", "closed_qa",
    "generation",       "information_extraction", "open_qa",        "summarization"};

inline int category_index(std::string_view name) {
    for (size_t i = 0; i < kCategories.size(); ++i)
        if (kCategories[i] == name) return static_cast<int>(i);
    return -1;
}

struct Example {
    std::string instruction;
    std::string context;  // may be empty
    std::string response;
    uint32_t category = 0;
};

// ---------------------------------------------------------------------------
// Byte-level tokenizer. Vocabulary: 3 specials + 256 byte values = 259 ids.
// Serialization order: BOS, instruction bytes, SEP, context bytes, SEP,
// response bytes, EOS; truncated to max_seq (no padding is ever needed since
// sequences are processed one at a time).
// ---------------------------------------------------------------------------
inline constexpr uint16_t kBosId = 0;
inline constexpr uint16_t kSepId = 1;
inline constexpr uint16_t kEosId = 2;
inline constexpr uint16_t kByteOffset = 3;
inline constexpr size_t kByteVocabSize = 259;

struct TokenSeq {
    std::vector<uint16_t> ids;
    // Index of the first response token (position right after the second SEP);
    // equals ids.size() when truncation cut the response off entirely.
    size_t response_start = 0;
};

inline TokenSeq tokenize(const Example& ex, size_t max_seq) {
    TokenSeq seq;
    seq.ids.reserve(ex.instruction.size() + ex.context.size() + ex.response.size() + 4);
    seq.ids.push_back(kBosId);
    for (unsigned char c : ex.instruction) seq.ids.push_back(kByteOffset + c);
    seq.ids.push_back(kSepId);
    for (unsigned char c : ex.context) seq.ids.push_back(kByteOffset + c);
    seq.ids.push_back(kSepId);
    seq.response_start = seq.ids.size();
    for (unsigned char c : ex.response) seq.ids.push_back(kByteOffset + c);
    seq.ids.push_back(kEosId);
    if (seq.ids.size() > max_seq) seq.ids.resize(max_seq);
    seq.response_start = std::min(seq.response_start, seq.ids.size());
    return seq;
}

struct DetokenizedExample {
    std::string instruction;
    std::string context;
    std::string response;
};

inline DetokenizedExample detokenize(const TokenSeq& seq) {
    DetokenizedExample out;
    int field = 0;
    for (uint16_t id : seq.ids) {
        if (id == kBosId) continue;
        if (id == kEosId) break;
        if (id == kSepId) {
            ++field;
            continue;
        }
        char c = static_cast<char>(id - kByteOffset);
        if (field == 0)
            out.instruction.push_back(c);
        else if (field == 1)
            out.context.push_back(c);
        else
            out.response.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL ingestion: one object per line with instruction/context/response/
// category. Errors carry 1-based line numbers.
// ---------------------------------------------------------------------------
inline std::vector<Example> load_jsonl(const std::string& path) {
    std::string content = read_text_file(path);
    std::vector<Example> out;
    size_t line_no = 0;
    size_t pos = 0;
    while (pos < content.size()) {
        size_t end = content.find('\n', pos);
        if (end == std::string::npos) end = content.size();
        std::string line = trim(content.substr(pos, end - pos));
        pos = end + 1;
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + " line " + std::to_string(line_no) +
                            ": malformed JSON: " + e.what());
        }
        auto require_string = [&](const char* key) -> std::string {
            if (!j.contains(key) || !j[key].is_string())
                throw DataError(path + " line " + std::to_string(line_no) + ": missing \"" +
                                key + "\"");
            return j[key].get<std::string>();
        };
        Example ex;
        ex.instruction = require_string("instruction");
        ex.context = j.contains("context") && j["context"].is_string()
                         ? j["context"].get<std::string>()
                         : "";
        ex.response = require_string("response");
        if (ex.response.empty())
            throw DataError(path + " line " + std::to_string(line_no) + ": empty response");
        std::string cat = require_string("category");
        int ci = category_index(cat);
        if (ci < 0)
            throw DataError(path + " line " + std::to_string(line_no) + ": unknown category \"" +
                            cat + "\"");
        ex.category = static_cast<uint32_t>(ci);
        out.push_back(std::move(ex));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus: each category is a seeded first-order Markov source over
// lowercase letters. 70% of transitions land in a category-specific window of
// the alphabet (absolute, so unigram statistics separate categories), 15%
// ride locally off the previous letter, 15% are uniform noise.
// ---------------------------------------------------------------------------
namespace detail {

inline char synth_next_char(RngStream& rng, uint32_t category, char prev) {
    double r = rng.next_double();
    if (r < 0.70) {
        return static_cast<char>('a' + (3 * category + rng.next_below(8)) % 26);
    }
    if (r < 0.85) {
        return static_cast<char>('a' + (static_cast<uint32_t>(prev - 'a') + 1 +
                                        static_cast<uint32_t>(rng.next_below(3))) %
                                           26);
    }
    return static_cast<char>('a' + rng.next_below(26));
}

inline std::string synth_words(RngStream& rng, uint32_t category, size_t n_words) {
    std::string out;
    char prev = static_cast<char>('a' + (3 * category) % 26);
    for (size_t w = 0; w < n_words; ++w) {
        if (w) out.push_back(' ');
        size_t len = 3 + rng.next_below(5);
        for (size_t i = 0; i < len; ++i) {
            char c = synth_next_char(rng, category, prev);
            out.push_back(c);
            prev = c;
        }
    }
    return out;
}

}  // namespace detail

inline std::vector<Example> synth_corpus(size_t per_category, uint64_t seed) {
    if (per_category == 0) throw ConfigError("synth_corpus: per_category must be >= 1");
    std::vector<Example> out;
    out.reserve(per_category * kCategories.size());
    for (uint32_t cat = 0; cat < kCategories.size(); ++cat) {
        RngStream rng = derive_stream(seed, stream::kCorpus, cat);
        for (size_t i = 0; i < per_category; ++i) {
            Example ex;
            ex.category = cat;
            ex.instruction = detail::synth_words(rng, cat, 3 + rng.next_below(4));
            ex.context = rng.next_double() < 0.5
                             ? std::string()
                             : detail::synth_words(rng, cat, 3 + rng.next_below(5));
            ex.response = detail::synth_words(rng, cat, 6 + rng.next_below(7));
            out.push_back(std::move(ex));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Non-IID partitioners. Both produce an exact cover: every example lands in
// exactly one client shard. Shards are returned as ascending example-id lists.
// ---------------------------------------------------------------------------
enum class PartitionKind : uint8_t { Pathological, Dirichlet };

struct PartitionSpec {
    PartitionKind kind = PartitionKind::Pathological;
    size_t classes_per_client = 2;  // pathological
    double beta = 0.5;              // Dirichlet concentration
    size_t clients = 16;
    uint64_t seed = 1;
};

using Partition = std::vector<std::vector<uint32_t>>;  // client -> example ids

namespace detail {

inline std::vector<std::vector<uint32_t>> ids_by_class(const std::vector<Example>& corpus) {
    std::vector<std::vector<uint32_t>> cls(kCategories.size());
    for (uint32_t i = 0; i < corpus.size(); ++i) cls[corpus[i].category].push_back(i);
    return cls;
}

}  // namespace detail

// Each client holds examples of exactly `classes_per_client` classes; each
// class's examples are split into near-equal shards over its holders.
inline Partition partition_pathological(const std::vector<Example>& corpus,
                                        const PartitionSpec& spec) {
    if (spec.kind != PartitionKind::Pathological)
        throw ConfigError("partition_pathological: wrong spec kind");
    const size_t m = spec.clients;
    const size_t n_classes = kCategories.size();
    if (m == 0) throw ConfigError("partition_pathological: zero clients");
    if (spec.classes_per_client == 0 || spec.classes_per_client > n_classes)
        throw ConfigError("partition_pathological: classes_per_client outside [1, 8]");
    RngStream rng = derive_stream(spec.seed, stream::kPartition);
    auto by_class = detail::ids_by_class(corpus);

    // Draw class assignments until every non-empty class has a holder.
    constexpr int kMaxAttempts = 100;
    std::vector<std::vector<uint32_t>> holders;  // class -> client ids, ascending
    std::vector<std::vector<size_t>> client_classes;
    bool ok = false;
    for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
        holders.assign(n_classes, {});
        client_classes.assign(m, {});
        for (uint32_t c = 0; c < m; ++c) {
            client_classes[c] = rng.sample_without_replacement(n_classes, spec.classes_per_client);
            for (size_t cls : client_classes[c]) holders[cls].push_back(c);
        }
        ok = true;
        for (size_t cls = 0; cls < n_classes; ++cls)
            if (!by_class[cls].empty() && holders[cls].empty()) ok = false;
    }
    if (!ok)
        throw ConfigError(
            "partition_pathological: a class has zero holders after retries; "
            "increase clients or classes_per_client");

    Partition shards(m);
    for (size_t cls = 0; cls < n_classes; ++cls) {
        auto ids = by_class[cls];
        if (ids.empty()) continue;
        rng.shuffle(ids);
        const auto& h = holders[cls];
        const size_t base = ids.size() / h.size();
        const size_t extra = ids.size() % h.size();
        size_t cursor = 0;
        for (size_t j = 0; j < h.size(); ++j) {
            size_t take = base + (j < extra ? 1 : 0);
            for (size_t t = 0; t < take; ++t) shards[h[j]].push_back(ids[cursor++]);
        }
    }
    for (auto& s : shards) std::sort(s.begin(), s.end());
    return shards;
}

// Per class, proportions over clients are drawn from Dir(beta) and converted
// to counts by largest-remainder rounding.
inline Partition partition_dirichlet(const std::vector<Example>& corpus,
                                     const PartitionSpec& spec) {
    if (spec.kind != PartitionKind::Dirichlet)
        throw ConfigError("partition_dirichlet: wrong spec kind");
    if (!(spec.beta > 0.0)) throw ConfigError("partition_dirichlet: beta must be > 0");
    const size_t m = spec.clients;
    if (m == 0) throw ConfigError("partition_dirichlet: zero clients");
    RngStream rng = derive_stream(spec.seed, stream::kPartition);
    auto by_class = detail::ids_by_class(corpus);

    Partition shards(m);
    for (size_t cls = 0; cls < by_class.size(); ++cls) {
        auto ids = by_class[cls];
        if (ids.empty()) continue;
        rng.shuffle(ids);
        std::vector<double> p = rng.next_dirichlet(spec.beta, m);
        const size_t n = ids.size();
        std::vector<size_t> counts(m);
        std::vector<std::pair<double, size_t>> rema(m);
        size_t assigned = 0;
        for (size_t c = 0; c < m; ++c) {
            double quota = p[c] * static_cast<double>(n);
            counts[c] = static_cast<size_t>(std::floor(quota));
            assigned += counts[c];
            rema[c] = {quota - std::floor(quota), c};
        }
        std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (size_t i = 0; assigned < n; ++i, ++assigned) counts[rema[i].second]++;
        size_t cursor = 0;
        for (size_t c = 0; c < m; ++c)
            for (size_t t = 0; t < counts[c]; ++t) shards[c].push_back(ids[cursor++]);
    }
    for (auto& s : shards) std::sort(s.begin(), s.end());
    return shards;
}

inline Partition make_partition(const std::vector<Example>& corpus, const PartitionSpec& spec) {
    return spec.kind == PartitionKind::Pathological ? partition_pathological(corpus, spec)
                                                    : partition_dirichlet(corpus, spec);
}

// Deterministic shuffled 80/20-style split. Train size is
// clamp(floor(fraction * n), 1, n-1) for shards of two or more examples; a
// singleton shard keeps its example for training and logs a warning.
struct TrainEvalSplit {
    std::vector<uint32_t> train;
    std::vector<uint32_t> eval;
};

inline TrainEvalSplit split_train_eval(const std::vector<uint32_t>& shard, double fraction,
                                       RngStream& rng) {
    if (shard.empty()) throw DataError("split_train_eval: empty shard");
    if (!(fraction > 0.0 && fraction < 1.0))
        throw ConfigError("split_train_eval: fraction outside (0,1)");
    std::vector<uint32_t> ids = shard;
    rng.shuffle(ids);
    TrainEvalSplit out;
    if (ids.size() == 1) {
        std::cerr << "warning: shard with a single example has no eval split\n";
        out.train = ids;
        return out;
    }
    size_t n_train = static_cast<size_t>(std::floor(fraction * static_cast<double>(ids.size())));
    n_train = std::clamp<size_t>(n_train, 1, ids.size() - 1);
    out.train.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
    out.eval.assign(ids.begin() + static_cast<long>(n_train), ids.end());
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.eval.begin(), out.eval.end());
    return out;
}

inline std::vector<TokenSeq> tokenize_corpus(const std::vector<Example>& corpus, size_t max_seq) {
    std::vector<TokenSeq> out;
    out.reserve(corpus.size());
    for (const auto& ex : corpus) out.push_back(tokenize(ex, max_seq));
    return out;
}

}  // namespace fedlora
