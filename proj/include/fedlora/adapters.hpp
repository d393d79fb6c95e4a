// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "fedlora/common.hpp"
#include "fedlora/numerics.hpp"

namespace fedlora {

// Adapters attach to the three attention projections only.
enum class Proj : uint8_t { Query = 0, Key = 1, Value = 2 };

inline const char* proj_name(Proj p) {
    switch (p) {
        case Proj::Query: return "Q";
        case Proj::Key: return "K";
        case Proj::Value: return "V";
    }
    return "?";
}

inline Proj proj_from_name(const std::string& s) {
    if (s == "Q") return Proj::Query;
    if (s == "K") return Proj::Key;
    if (s == "V") return Proj::Value;
    throw DataError("unknown projection name: " + s);
}

struct InjectionSite {
    uint32_t layer = 0;
    Proj proj = Proj::Query;

    bool operator==(const InjectionSite& o) const { return layer == o.layer && proj == o.proj; }
    std::string name() const { return "L" + std::to_string(layer) + proj_name(proj); }
};

// Dense rank of the expanded search space: round(r / (1 - s)), at least 1.
inline size_t dense_rank(size_t r, double s) {
    if (r < 1) throw ConfigError("dense_rank: rank must be >= 1");
    if (!(s >= 0.0 && s < 1.0)) throw ConfigError("dense_rank: sparsity must be in [0, 1)");
    double expanded = static_cast<double>(r) / (1.0 - s);
    auto rounded = static_cast<size_t>(std::llround(expanded));
    return std::max<size_t>(rounded, 1);
}

// A rank-expanded low-rank adapter pair with element-wise masks. The
// effective update is always (A .* m_a)(B .* m_b); the update rule keeps
// pruned coordinates at exactly zero.
struct LoraPair {
    Mat a;           // [d x R]
    Mat b;           // [R x d]
    BitMask mask_a;  // d x R
    BitMask mask_b;  // R x d
    uint32_t target_rank = 0;
    double sparsity = 0.0;
    InjectionSite site;

    size_t d() const { return a.rows; }
    size_t expanded_rank() const { return a.cols; }

    static LoraPair make(InjectionSite site, size_t d, size_t rank, double s) {
        LoraPair p;
        size_t expanded = dense_rank(rank, s);
        p.a = Mat(d, expanded);
        p.b = Mat(expanded, d);
        p.mask_a = BitMask(d, expanded, true);
        p.mask_b = BitMask(expanded, d, true);
        p.target_rank = static_cast<uint32_t>(rank);
        p.sparsity = s;
        p.site = site;
        return p;
    }

    // Pair with a caller-chosen expanded rank; used by heterogeneous groups
    // where every client shares R_max and differs in sparsity.
    static LoraPair make_expanded(InjectionSite site, size_t d, size_t rank, double s,
                                  size_t expanded) {
        LoraPair p = make(site, d, rank, s);
        if (expanded != p.expanded_rank()) {
            p.a = Mat(d, expanded);
            p.b = Mat(expanded, d);
            p.mask_a = BitMask(d, expanded, true);
            p.mask_b = BitMask(expanded, d, true);
        }
        return p;
    }
};

inline void apply_masks(LoraPair& p) {
    for (size_t i = 0; i < p.a.size(); ++i)
        if (!p.mask_a.get_flat(i)) p.a.data[i] = 0.0;
    for (size_t i = 0; i < p.b.size(); ++i)
        if (!p.mask_b.get_flat(i)) p.b.data[i] = 0.0;
}

// Search-phase state: both matrices drawn from N(0, 1/d) so saliency scores
// are informative from the first batch. Requires the pre-search all-ones
// masks.
inline void init_symmetric(LoraPair& p, RngStream& rng) {
    if (p.mask_a.count() != p.mask_a.size() || p.mask_b.count() != p.mask_b.size())
        throw LogicError("init_symmetric: masks must be all-ones (pre-search state)");
    const double variance = 1.0 / static_cast<double>(p.d());
    for (double& v : p.a.data) v = rng.next_gaussian(variance);
    for (double& v : p.b.data) v = rng.next_gaussian(variance);
}

// Fine-tuning start state once masks are fixed: A fresh from N(0, 1/d) under
// its mask, B = 0, so the round-0 model equals the bare backbone. The full
// dense A is drawn before masking to keep stream consumption independent of
// the mask contents.
inline void init_finetune(LoraPair& p, RngStream& rng) {
    const double variance = 1.0 / static_cast<double>(p.d());
    for (double& v : p.a.data) v = rng.next_gaussian(variance);
    p.b.fill(0.0);
    apply_masks(p);
}

// ---------------------------------------------------------------------------
// Adapter checkpoint: versioned structured text, one file per (client, site).
// Field order is fixed so diffs stay stable; values are %.17g decimals, which
// round-trip doubles bit-exactly. Only retained (mask = 1) values are stored;
// the checkpoint represents the masked pair.
// ---------------------------------------------------------------------------
inline constexpr const char* kAdapterMagic = "fedlora-adapter v1";

inline std::string serialize_adapter(const LoraPair& p) {
    std::ostringstream out;
    out << kAdapterMagic << "\n";
    out << "site " << p.site.layer << " " << proj_name(p.site.proj) << "\n";
    out << "shape " << p.a.rows << " " << p.a.cols << "\n";
    out << "rank " << p.target_rank << "\n";
    out << "sparsity " << fmt_g17(p.sparsity) << "\n";
    out << "mask_a " << p.mask_a.to_string01() << "\n";
    out << "mask_b " << p.mask_b.to_string01() << "\n";
    out << "values_a";
    for (size_t i = 0; i < p.a.size(); ++i)
        if (p.mask_a.get_flat(i)) out << " " << fmt_g17(p.a.data[i]);
    out << "\nvalues_b";
    for (size_t i = 0; i < p.b.size(); ++i)
        if (p.mask_b.get_flat(i)) out << " " << fmt_g17(p.b.data[i]);
    out << "\n";
    return out.str();
}

inline LoraPair deserialize_adapter(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    auto fail = [&](const std::string& why) -> void {
        throw DataError("adapter checkpoint " + origin + ": " + why);
    };
    if (!std::getline(in, line) || trim(line) != kAdapterMagic) fail("bad magic/version");

    LoraPair p;
    std::string tag, projname, maskstr;
    size_t d = 0, expanded = 0;
    uint32_t layer = 0;

    if (!(in >> tag >> layer >> projname) || tag != "site") fail("bad site line");
    if (!(in >> tag >> d >> expanded) || tag != "shape") fail("bad shape line");
    if (!(in >> tag >> p.target_rank) || tag != "rank") fail("bad rank line");
    if (!(in >> tag >> p.sparsity) || tag != "sparsity") fail("bad sparsity line");
    p.site = InjectionSite{layer, proj_from_name(projname)};

    if (!(in >> tag >> maskstr) || tag != "mask_a") fail("bad mask_a line");
    p.mask_a = BitMask::from_string01(d, expanded, maskstr);
    if (!(in >> tag >> maskstr) || tag != "mask_b") fail("bad mask_b line");
    p.mask_b = BitMask::from_string01(expanded, d, maskstr);

    p.a = Mat(d, expanded);
    p.b = Mat(expanded, d);
    if (!(in >> tag) || tag != "values_a") fail("bad values_a section");
    for (size_t i = 0; i < p.a.size(); ++i) {
        if (!p.mask_a.get_flat(i)) continue;
        if (!(in >> p.a.data[i])) fail("truncated values_a");
    }
    if (!(in >> tag) || tag != "values_b") fail("bad values_b section");
    for (size_t i = 0; i < p.b.size(); ++i) {
        if (!p.mask_b.get_flat(i)) continue;
        if (!(in >> p.b.data[i])) fail("truncated values_b");
    }
    return p;
}

inline void save_adapter(const LoraPair& p, const std::string& path) {
    write_text_file(path, serialize_adapter(p));
}

inline LoraPair load_adapter(const std::string& path) {
    return deserialize_adapter(read_text_file(path), path);
}

}  // namespace fedlora
