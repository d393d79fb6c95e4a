// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "fedlora/common.hpp"

namespace fedlora {

// ---------------------------------------------------------------------------
// Dense row-major matrix of doubles. Everything in the simulator is 64-bit:
// desk-scale shapes make precision cheap and keep gradient checks tight.
// ---------------------------------------------------------------------------
struct Mat {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    static Mat zeros(size_t r, size_t c) { return Mat(r, c); }

    double& at(size_t r, size_t c) { return data[r * cols + c]; }
    double at(size_t r, size_t c) const { return data[r * cols + c]; }
    double* row(size_t r) { return data.data() + r * cols; }
    const double* row(size_t r) const { return data.data() + r * cols; }
    size_t size() const { return data.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline void assert_finite(const Mat& m, const char* context) {
    for (double v : m.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value in ") + context);
        }
    }
}

// c = a * b. Summation over the inner index runs ascending (row-major,
// left-to-right), so results are reproducible against a naive triple loop.
inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) {
        throw ConfigError("matmul: shape mismatch " + std::to_string(a.rows) + "x" +
                          std::to_string(a.cols) + " * " + std::to_string(b.rows) + "x" +
                          std::to_string(b.cols));
    }
    Mat c(a.rows, b.cols);
    const size_t n = b.cols, k = a.cols;
    for (size_t i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b.row(p);
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
    assert_finite(c, "matmul");
    return c;
}

// c = a * b^T (rows of both operands are contiguous dot-product operands).
inline Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols != b.cols) throw ConfigError("matmul_nt: inner dimension mismatch");
    Mat c(a.rows, b.rows);
    const size_t k = a.cols;
    for (size_t i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (size_t j = 0; j < b.rows; ++j) {
            const double* bj = b.row(j);
            double s = 0.0;
            for (size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = s;
        }
    }
    assert_finite(c, "matmul_nt");
    return c;
}

// c = a^T * b where a is [k x m] and b is [k x n].
inline Mat matmul_tn(const Mat& a, const Mat& b) {
    if (a.rows != b.rows) throw ConfigError("matmul_tn: inner dimension mismatch");
    Mat c(a.cols, b.cols);
    const size_t k = a.rows, n = b.cols;
    for (size_t p = 0; p < k; ++p) {
        const double* ap = a.row(p);
        const double* bp = b.row(p);
        for (size_t i = 0; i < a.cols; ++i) {
            const double av = ap[i];
            double* ci = c.row(i);
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
    assert_finite(c, "matmul_tn");
    return c;
}

inline void add_inplace(Mat& dst, const Mat& src) {
    if (!dst.same_shape(src)) throw ConfigError("add_inplace: shape mismatch");
    for (size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

inline void axpy(Mat& dst, double alpha, const Mat& src) {
    if (!dst.same_shape(src)) throw ConfigError("axpy: shape mismatch");
    for (size_t i = 0; i < dst.size(); ++i) dst.data[i] += alpha * src.data[i];
}

inline void scale_inplace(Mat& m, double alpha) {
    for (double& v : m.data) v *= alpha;
}

// ---------------------------------------------------------------------------
// Deterministic split-stream PRNG.
//
// SplitMix64 with a per-stream odd increment: the (seed, stream id) pair is
// hashed into both the starting state and the gamma, so distinct stream ids
// walk distinct sequences and the draw order of one stream never depends on
// any other. Integer and uniform output is bit-identical everywhere; the
// Gaussian transform (Marsaglia polar, documented below) additionally goes
// through libm sqrt/log and is bit-stable per platform.
// ---------------------------------------------------------------------------
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class RngStream {
  public:
    RngStream() : RngStream(0, 0) {}
    RngStream(uint64_t seed, uint64_t stream_id)
        : seed_(seed),
          stream_(stream_id),
          state_(mix64(seed ^ mix64(stream_id))),
          gamma_(mix64(stream_id ^ mix64(seed + 0x632be59bd9b4e019ULL)) | 1ULL) {}

    uint64_t seed() const { return seed_; }
    uint64_t stream_id() const { return stream_; }

    uint64_t next_u64() {
        state_ += gamma_;
        return mix64(state_);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Unbiased uniform integer in [0, bound) by rejection.
    uint64_t next_below(uint64_t bound) {
        if (bound == 0) throw ConfigError("next_below: zero bound");
        uint64_t threshold = (0ULL - bound) % bound;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Standard normal via the Marsaglia polar method; the second deviate of
    // each accepted pair is cached and returned by the following call.
    double next_standard_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

    // N(0, variance). A zero variance consumes no randomness.
    double next_gaussian(double variance) {
        if (variance < 0.0) throw ConfigError("next_gaussian: negative variance");
        if (variance == 0.0) return 0.0;
        return std::sqrt(variance) * next_standard_normal();
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct values from {0, ..., n-1}, returned ascending.
    std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
        if (k > n) throw ConfigError("sample_without_replacement: k > n");
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t{0});
        for (size_t i = 0; i < k; ++i) {
            size_t j = i + static_cast<size_t>(next_below(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        return idx;
    }

    // Gamma(shape, 1) via Marsaglia-Tsang, with the shape<1 boost.
    double next_gamma(double shape) {
        if (shape <= 0.0) throw ConfigError("next_gamma: shape must be positive");
        if (shape < 1.0) {
            double u = next_double();
            while (u == 0.0) u = next_double();
            return next_gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = next_standard_normal();
            double t = 1.0 + c * x;
            if (t <= 0.0) continue;
            double v = t * t * t;
            double u = next_double();
            while (u == 0.0) u = next_double();
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
        }
    }

    // Symmetric Dirichlet(beta) proportions over m bins.
    std::vector<double> next_dirichlet(double beta, size_t m) {
        std::vector<double> p(m);
        double sum = 0.0;
        for (size_t i = 0; i < m; ++i) {
            p[i] = next_gamma(beta);
            sum += p[i];
        }
        for (double& v : p) v /= sum;
        return p;
    }

  private:
    uint64_t seed_;
    uint64_t stream_;
    uint64_t state_;
    uint64_t gamma_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Fixed stream-id layout: every consumer of randomness gets its own stream
// derived from the run seed, so per-client draws are independent of worker
// scheduling and of each other.
namespace stream {
inline constexpr uint64_t kBackbone = 0;
inline constexpr uint64_t kCorpus = 1;    // index = category
inline constexpr uint64_t kPartition = 2;
inline constexpr uint64_t kSplit = 3;     // index = client id
inline constexpr uint64_t kServer = 4;
inline constexpr uint64_t kSearch = 5;    // index = client id
inline constexpr uint64_t kInit = 6;      // index = client id
inline constexpr uint64_t kFinetune = 7;  // index = client id
inline constexpr uint64_t kTrain = 8;     // index = client id
}  // namespace stream

inline RngStream derive_stream(uint64_t seed, uint64_t purpose, uint64_t index = 0) {
    return RngStream(seed, (purpose << 32) | index);
}

inline Mat sample_gaussian(RngStream& rng, size_t rows, size_t cols, double variance) {
    Mat m(rows, cols);
    if (variance > 0.0) {
        for (double& v : m.data) v = rng.next_gaussian(variance);
    }
    assert_finite(m, "sample_gaussian");
    return m;
}

// ---------------------------------------------------------------------------
// Packed binary occupancy mask, shape-matched to the Mat it gates.
// ---------------------------------------------------------------------------
class BitMask {
  public:
    BitMask() = default;
    BitMask(size_t rows, size_t cols, bool ones)
        : rows_(rows), cols_(cols), words_((rows * cols + 63) / 64, 0) {
        if (ones) {
            std::fill(words_.begin(), words_.end(), ~uint64_t{0});
            clear_tail();
        }
    }

    size_t rows() const { return rows_; }
    size_t cols() const { return cols_; }
    size_t size() const { return rows_ * cols_; }
    bool same_shape(const BitMask& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool get_flat(size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1ULL; }
    void set_flat(size_t i, bool v) {
        uint64_t bit = 1ULL << (i & 63);
        if (v)
            words_[i >> 6] |= bit;
        else
            words_[i >> 6] &= ~bit;
    }
    bool get(size_t r, size_t c) const { return get_flat(r * cols_ + c); }
    void set(size_t r, size_t c, bool v) { set_flat(r * cols_ + c, v); }

    size_t count() const {
        size_t n = 0;
        for (uint64_t w : words_) n += static_cast<size_t>(std::popcount(w));
        return n;
    }

    size_t diff_count(const BitMask& o) const {
        size_t n = 0;
        for (size_t i = 0; i < words_.size(); ++i)
            n += static_cast<size_t>(std::popcount(words_[i] ^ o.words_[i]));
        return n;
    }

    bool operator==(const BitMask& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && words_ == o.words_;
    }

    // Support containment: every set bit of *this is set in o.
    bool subset_of(const BitMask& o) const {
        for (size_t i = 0; i < words_.size(); ++i)
            if (words_[i] & ~o.words_[i]) return false;
        return true;
    }

    std::string to_string01() const {
        std::string s(size(), '0');
        for (size_t i = 0; i < size(); ++i)
            if (get_flat(i)) s[i] = '1';
        return s;
    }

    static BitMask from_string01(size_t rows, size_t cols, const std::string& s) {
        if (s.size() != rows * cols) throw DataError("mask string length mismatch");
        BitMask m(rows, cols, false);
        for (size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '1')
                m.set_flat(i, true);
            else if (s[i] != '0')
                throw DataError("mask string must be 0/1");
        }
        return m;
    }

  private:
    void clear_tail() {
        size_t used = rows_ * cols_;
        if (words_.empty()) return;
        size_t rem = used & 63;
        if (rem) words_.back() &= (1ULL << rem) - 1;
    }

    size_t rows_ = 0;
    size_t cols_ = 0;
    std::vector<uint64_t> words_;
};

// 1 - (differing bits / total bits); symmetric by construction.
inline double hamming_similarity(const BitMask& a, const BitMask& b) {
    if (!a.same_shape(b)) throw ConfigError("hamming_similarity: shape mismatch");
    if (a.size() == 0) throw ConfigError("hamming_similarity: empty mask");
    return 1.0 - static_cast<double>(a.diff_count(b)) / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Order statistics. Ranking is by value descending with ties broken by
// ascending flat index, so equal scores never make the retained set depend
// on sort-internal ordering.
// ---------------------------------------------------------------------------

// Flags marking the top keep_count values of `values`.
inline std::vector<uint8_t> retain_top_count(const double* values, size_t n, size_t keep_count) {
    std::vector<uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    keep_count = std::min(keep_count, n);
    std::sort(idx.begin(), idx.end(), [&](uint32_t i, uint32_t j) {
        if (values[i] != values[j]) return values[i] > values[j];
        return i < j;
    });
    std::vector<uint8_t> keep(n, 0);
    for (size_t i = 0; i < keep_count; ++i) keep[idx[i]] = 1;
    return keep;
}

// Threshold tau for which the retained set is the top (1 - fraction_below)
// of the input: exactly floor(fraction_below * n) values rank strictly below
// it. Returns the score of the lowest-ranked retained element, or +inf when
// nothing is retained.
inline double percentile_threshold(const std::vector<double>& values, double fraction_below) {
    if (values.empty()) throw ConfigError("percentile_threshold: empty input");
    if (!(fraction_below >= 0.0 && fraction_below <= 1.0))
        throw ConfigError("percentile_threshold: fraction_below outside [0,1]");
    const size_t n = values.size();
    const size_t below = static_cast<size_t>(std::floor(fraction_below * static_cast<double>(n)));
    const size_t keep = n - std::min(below, n);
    if (keep == 0) return std::numeric_limits<double>::infinity();
    std::vector<uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    std::nth_element(idx.begin(), idx.begin() + (keep - 1), idx.end(),
                     [&](uint32_t i, uint32_t j) {
                         if (values[i] != values[j]) return values[i] > values[j];
                         return i < j;
                     });
    return values[idx[keep - 1]];
}

}  // namespace fedlora
