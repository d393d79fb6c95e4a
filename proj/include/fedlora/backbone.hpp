// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "fedlora/adapters.hpp"
#include "fedlora/common.hpp"
#include "fedlora/data.hpp"
#include "fedlora/numerics.hpp"

namespace fedlora {

struct BackboneConfig {
    size_t vocab_size = kByteVocabSize;
    size_t d_model = 64;
    size_t n_layers = 2;
    size_t n_heads = 4;
    size_t d_ff = 128;
    size_t max_seq = 128;
    uint64_t init_seed = 1;

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
            max_seq < 1)
            throw ConfigError("backbone config: all counts must be >= 1");
        if (d_model % n_heads != 0)
            throw ConfigError("backbone config: d_model must be divisible by n_heads");
    }

    size_t head_dim() const { return d_model / n_heads; }
};

namespace detail {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC1 = 0.044715;

inline double gelu(double x) {
    double u = kGeluC0 * (x + kGeluC1 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
    double u = kGeluC0 * (x + kGeluC1 * x * x * x);
    double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
}

}  // namespace detail

struct LayerWeights {
    std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;  // [d]
    Mat wq, wk, wv, wo;                              // [d x d], rows index outputs
    Mat w1;                                          // [d_ff x d]
    std::vector<double> b1;                          // [d_ff]
    Mat w2;                                          // [d x d_ff]
    std::vector<double> b2;                          // [d]
};

// Pointer view over a client's adapters, indexed by (layer, projection).
// Absent sites are null; the forward pass then uses the bare projection.
struct AdapterSet {
    std::vector<std::array<const LoraPair*, 3>> by_layer;

    static AdapterSet none(size_t n_layers) {
        AdapterSet s;
        s.by_layer.assign(n_layers, {nullptr, nullptr, nullptr});
        return s;
    }

    static AdapterSet from_pairs(const std::vector<LoraPair>& pairs, size_t n_layers) {
        AdapterSet s = none(n_layers);
        for (const auto& p : pairs) {
            if (p.site.layer >= n_layers)
                throw ConfigError("adapter site layer out of range: " + p.site.name());
            s.by_layer[p.site.layer][static_cast<size_t>(p.site.proj)] = &p;
        }
        return s;
    }

    const LoraPair* at(size_t layer, Proj proj) const {
        return by_layer[layer][static_cast<size_t>(proj)];
    }

    // Sites with an adapter attached, ordered by (layer, projection).
    std::vector<InjectionSite> site_list() const {
        std::vector<InjectionSite> out;
        for (uint32_t l = 0; l < by_layer.size(); ++l)
            for (uint32_t pr = 0; pr < 3; ++pr)
                if (by_layer[l][pr]) out.push_back({l, static_cast<Proj>(pr)});
        return out;
    }
};

struct SiteGrads {
    Mat a;  // [d x R]
    Mat b;  // [R x d]
};

// Gradients aligned with AdapterSet::site_list() order.
struct AdapterGrads {
    std::vector<InjectionSite> sites;
    std::vector<SiteGrads> grads;

    static AdapterGrads zeros_like(const AdapterSet& set) {
        AdapterGrads g;
        g.sites = set.site_list();
        g.grads.reserve(g.sites.size());
        for (const auto& site : g.sites) {
            const LoraPair* p = set.at(site.layer, site.proj);
            g.grads.push_back({Mat(p->a.rows, p->a.cols), Mat(p->b.rows, p->b.cols)});
        }
        return g;
    }

    void add_scaled(const AdapterGrads& o, double alpha) {
        for (size_t i = 0; i < grads.size(); ++i) {
            axpy(grads[i].a, alpha, o.grads[i].a);
            axpy(grads[i].b, alpha, o.grads[i].b);
        }
    }

    void add_squared_scaled(const AdapterGrads& o, double alpha) {
        for (size_t i = 0; i < grads.size(); ++i) {
            for (size_t j = 0; j < grads[i].a.size(); ++j)
                grads[i].a.data[j] += alpha * o.grads[i].a.data[j] * o.grads[i].a.data[j];
            for (size_t j = 0; j < grads[i].b.size(); ++j)
                grads[i].b.data[j] += alpha * o.grads[i].b.data[j] * o.grads[i].b.data[j];
        }
    }

    void scale(double alpha) {
        for (auto& g : grads) {
            scale_inplace(g.a, alpha);
            scale_inplace(g.b, alpha);
        }
    }
};

// Per-layer activations cached for the adapter-only backward pass.
struct LayerTape {
    Mat x_in;  // layer input [T x d]
    Mat n1;    // LN1 output
    std::vector<double> ln1_mean, ln1_inv;
    Mat q, k, v;                                // [T x d] after adapters
    std::array<Mat, 3> adapter_u;               // [T x R] per projection (empty if no adapter)
    std::vector<Mat> attn_p;                    // per head, [T x T] lower-triangular softmax
    Mat attn_concat;                            // [T x d] heads concatenated
    Mat x_mid;                                  // after attention residual
    Mat n2;
    std::vector<double> ln2_mean, ln2_inv;
    Mat mlp_pre;  // [T x d_ff]
    Mat mlp_act;
};

struct ForwardTape {
    std::vector<uint16_t> tokens;
    bool response_only = false;
    std::vector<LayerTape> layers;
    Mat x_final;  // input of the final layer norm [T x d]
    std::vector<double> lnf_mean, lnf_inv;
    Mat xf;                           // final layer-norm output
    std::vector<uint32_t> pred_pos;   // sequence positions whose next token is scored
    Mat logits;                       // [n_pred x V]
    std::vector<double> logsumexp;    // per predicted row
    double loss = 0.0;
    size_t n_pred = 0;
    bool consumed = false;
};

class Backbone {
  public:
    explicit Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        RngStream rng = derive_stream(cfg_.init_seed, stream::kBackbone);
        const size_t d = cfg_.d_model;
        const double wvar = 1.0 / static_cast<double>(d);
        embedding_ = sample_gaussian(rng, cfg_.vocab_size, d, 1.0);
        pos_ = sample_gaussian(rng, cfg_.max_seq, d, 1.0);
        layers_.resize(cfg_.n_layers);
        for (auto& lw : layers_) {
            lw.ln1_g.assign(d, 1.0);
            lw.ln1_b.assign(d, 0.0);
            lw.ln2_g.assign(d, 1.0);
            lw.ln2_b.assign(d, 0.0);
            lw.wq = sample_gaussian(rng, d, d, wvar);
            lw.wk = sample_gaussian(rng, d, d, wvar);
            lw.wv = sample_gaussian(rng, d, d, wvar);
            lw.wo = sample_gaussian(rng, d, d, wvar);
            lw.w1 = sample_gaussian(rng, cfg_.d_ff, d, wvar);
            lw.b1.assign(cfg_.d_ff, 0.0);
            lw.w2 = sample_gaussian(rng, d, cfg_.d_ff, 1.0 / static_cast<double>(cfg_.d_ff));
            lw.b2.assign(d, 0.0);
        }
        lnf_g_.assign(d, 1.0);
        lnf_b_.assign(d, 0.0);
        head_ = sample_gaussian(rng, cfg_.vocab_size, d, wvar);
    }

    const BackboneConfig& config() const { return cfg_; }
    const Mat& embedding() const { return embedding_; }
    const Mat& positional() const { return pos_; }
    const LayerWeights& layer(size_t i) const { return layers_[i]; }
    const std::vector<double>& final_gain() const { return lnf_g_; }
    const std::vector<double>& final_bias() const { return lnf_b_; }
    const Mat& head() const { return head_; }

    // Construction-time mutation seams (checkpoint loading, test fixtures).
    // The frozen contract applies from first use onward and is checked via
    // param_hash.
    Mat& mutable_head() { return head_; }
    Mat& mutable_embedding() { return embedding_; }
    Mat& mutable_positional() { return pos_; }

    uint64_t param_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](const double* p, size_t n) {
            for (size_t i = 0; i < n; ++i) {
                uint64_t bits;
                static_assert(sizeof(bits) == sizeof(double));
                std::memcpy(&bits, &p[i], sizeof(bits));
                for (int b = 0; b < 8; ++b) {
                    h ^= (bits >> (8 * b)) & 0xff;
                    h *= 0x100000001b3ULL;
                }
            }
        };
        feed(embedding_.data.data(), embedding_.size());
        feed(pos_.data.data(), pos_.size());
        for (const auto& lw : layers_) {
            feed(lw.ln1_g.data(), lw.ln1_g.size());
            feed(lw.ln1_b.data(), lw.ln1_b.size());
            feed(lw.wq.data.data(), lw.wq.size());
            feed(lw.wk.data.data(), lw.wk.size());
            feed(lw.wv.data.data(), lw.wv.size());
            feed(lw.wo.data.data(), lw.wo.size());
            feed(lw.ln2_g.data(), lw.ln2_g.size());
            feed(lw.ln2_b.data(), lw.ln2_b.size());
            feed(lw.w1.data.data(), lw.w1.size());
            feed(lw.b1.data(), lw.b1.size());
            feed(lw.w2.data.data(), lw.w2.size());
            feed(lw.b2.data(), lw.b2.size());
        }
        feed(lnf_g_.data(), lnf_g_.size());
        feed(lnf_b_.data(), lnf_b_.size());
        feed(head_.data.data(), head_.size());
        return h;
    }

    void save_checkpoint(const std::string& path) const;
    static Backbone load_checkpoint(const std::string& path);

  private:
    friend struct BackboneIo;
    BackboneConfig cfg_;
    Mat embedding_;  // [V x d]
    Mat pos_;        // [max_seq x d]
    std::vector<LayerWeights> layers_;
    std::vector<double> lnf_g_, lnf_b_;
    Mat head_;  // [V x d]
};

namespace detail {

inline void layer_norm_forward(const Mat& x, const std::vector<double>& g,
                               const std::vector<double>& b, Mat& y, std::vector<double>& mean,
                               std::vector<double>& inv) {
    const size_t t_len = x.rows, c = x.cols;
    y = Mat(t_len, c);
    mean.resize(t_len);
    inv.resize(t_len);
    for (size_t t = 0; t < t_len; ++t) {
        const double* xr = x.row(t);
        double mu = 0.0;
        for (size_t i = 0; i < c; ++i) mu += xr[i];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (size_t i = 0; i < c; ++i) {
            double dlt = xr[i] - mu;
            var += dlt * dlt;
        }
        var /= static_cast<double>(c);
        double iv = 1.0 / std::sqrt(var + kLnEps);
        mean[t] = mu;
        inv[t] = iv;
        double* yr = y.row(t);
        for (size_t i = 0; i < c; ++i) yr[i] = g[i] * ((xr[i] - mu) * iv) + b[i];
    }
}

// dx for y = g .* xhat + b; backbone gain/bias gradients are never formed.
inline void layer_norm_backward(const Mat& x, const std::vector<double>& mean,
                                const std::vector<double>& inv, const std::vector<double>& g,
                                const Mat& dy, Mat& dx) {
    const size_t t_len = x.rows, c = x.cols;
    dx = Mat(t_len, c);
    const double cd = static_cast<double>(c);
    for (size_t t = 0; t < t_len; ++t) {
        const double* xr = x.row(t);
        const double* dyr = dy.row(t);
        double* dxr = dx.row(t);
        const double mu = mean[t], iv = inv[t];
        double s1 = 0.0, s2 = 0.0;
        for (size_t i = 0; i < c; ++i) {
            double a = dyr[i] * g[i];
            double xhat = (xr[i] - mu) * iv;
            s1 += a;
            s2 += a * xhat;
        }
        for (size_t i = 0; i < c; ++i) {
            double a = dyr[i] * g[i];
            double xhat = (xr[i] - mu) * iv;
            dxr[i] = (iv / cd) * (cd * a - s1 - xhat * s2);
        }
    }
}

// y += x * (A .* m_a)(B .* m_b)^T computed via the adapter intermediate
// u = x * B^T, which the tape keeps for the backward pass.
inline void adapter_forward(const Mat& x, const LoraPair& pair, Mat& y, Mat& u_out) {
    u_out = matmul_nt(x, pair.b);
    Mat delta = matmul_nt(u_out, pair.a);
    add_inplace(y, delta);
}

}  // namespace detail

// Causal next-token cross-entropy, averaged over the scored positions, plus
// the activation tape for backward_adapters. Adapter masks must already be
// applied to the pair values. Throws DataError for out-of-vocabulary ids,
// over-long sequences, and sequences with no scored position.
inline double forward(const Backbone& bb, const AdapterSet& adapters, const TokenSeq& seq,
                      bool response_only, ForwardTape& tape) {
    const auto& cfg = bb.config();
    const size_t t_len = seq.ids.size();
    if (t_len > cfg.max_seq)
        throw DataError("forward: sequence length " + std::to_string(t_len) + " exceeds max_seq");
    for (uint16_t id : seq.ids)
        if (id >= cfg.vocab_size)
            throw DataError("forward: token id " + std::to_string(id) + " >= vocab_size");
    if (adapters.by_layer.size() != cfg.n_layers)
        throw ConfigError("forward: adapter set layer count mismatch");

    tape = ForwardTape{};
    tape.tokens = seq.ids;
    tape.response_only = response_only;

    // Scored positions: t predicts tokens[t+1]; response_only keeps only
    // targets inside the response section.
    for (uint32_t t = 0; t + 1 < t_len; ++t) {
        if (response_only && (t + 1) < seq.response_start) continue;
        tape.pred_pos.push_back(t);
    }
    tape.n_pred = tape.pred_pos.size();
    if (tape.n_pred == 0)
        throw DataError("forward: no scored positions (sequence too short or response truncated)");

    const size_t d = cfg.d_model;
    const size_t hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    Mat x(t_len, d);
    for (size_t t = 0; t < t_len; ++t) {
        const double* e = bb.embedding().row(seq.ids[t]);
        const double* p = bb.positional().row(t);
        double* xr = x.row(t);
        for (size_t i = 0; i < d; ++i) xr[i] = e[i] + p[i];
    }

    tape.layers.resize(cfg.n_layers);
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = bb.layer(l);
        LayerTape& lt = tape.layers[l];
        lt.x_in = x;

        detail::layer_norm_forward(lt.x_in, lw.ln1_g, lw.ln1_b, lt.n1, lt.ln1_mean, lt.ln1_inv);

        lt.q = matmul_nt(lt.n1, lw.wq);
        lt.k = matmul_nt(lt.n1, lw.wk);
        lt.v = matmul_nt(lt.n1, lw.wv);
        if (const LoraPair* p = adapters.at(l, Proj::Query))
            detail::adapter_forward(lt.n1, *p, lt.q, lt.adapter_u[0]);
        if (const LoraPair* p = adapters.at(l, Proj::Key))
            detail::adapter_forward(lt.n1, *p, lt.k, lt.adapter_u[1]);
        if (const LoraPair* p = adapters.at(l, Proj::Value))
            detail::adapter_forward(lt.n1, *p, lt.v, lt.adapter_u[2]);

        lt.attn_p.assign(cfg.n_heads, Mat(t_len, t_len));
        lt.attn_concat = Mat(t_len, d);
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const size_t off = h * hd;
            Mat& p = lt.attn_p[h];
            for (size_t t = 0; t < t_len; ++t) {
                const double* qt = lt.q.row(t) + off;
                double* pr = p.row(t);
                double mx = -std::numeric_limits<double>::infinity();
                for (size_t j = 0; j <= t; ++j) {
                    const double* kj = lt.k.row(j) + off;
                    double s = 0.0;
                    for (size_t i = 0; i < hd; ++i) s += qt[i] * kj[i];
                    s *= inv_sqrt_hd;
                    pr[j] = s;
                    mx = std::max(mx, s);
                }
                double denom = 0.0;
                for (size_t j = 0; j <= t; ++j) {
                    pr[j] = std::exp(pr[j] - mx);
                    denom += pr[j];
                }
                double* out = lt.attn_concat.row(t) + off;
                for (size_t j = 0; j <= t; ++j) {
                    pr[j] /= denom;
                    const double* vj = lt.v.row(j) + off;
                    for (size_t i = 0; i < hd; ++i) out[i] += pr[j] * vj[i];
                }
            }
        }

        Mat attn_out = matmul_nt(lt.attn_concat, lw.wo);
        lt.x_mid = lt.x_in;
        add_inplace(lt.x_mid, attn_out);

        detail::layer_norm_forward(lt.x_mid, lw.ln2_g, lw.ln2_b, lt.n2, lt.ln2_mean, lt.ln2_inv);
        lt.mlp_pre = matmul_nt(lt.n2, lw.w1);
        for (size_t t = 0; t < t_len; ++t) {
            double* r = lt.mlp_pre.row(t);
            for (size_t i = 0; i < cfg.d_ff; ++i) r[i] += lw.b1[i];
        }
        lt.mlp_act = Mat(t_len, cfg.d_ff);
        for (size_t i = 0; i < lt.mlp_pre.size(); ++i)
            lt.mlp_act.data[i] = detail::gelu(lt.mlp_pre.data[i]);
        Mat mlp_out = matmul_nt(lt.mlp_act, lw.w2);
        for (size_t t = 0; t < t_len; ++t) {
            double* r = mlp_out.row(t);
            for (size_t i = 0; i < d; ++i) r[i] += lw.b2[i];
        }
        x = lt.x_mid;
        add_inplace(x, mlp_out);
    }

    tape.x_final = x;
    detail::layer_norm_forward(tape.x_final, bb.final_gain(), bb.final_bias(), tape.xf,
                               tape.lnf_mean, tape.lnf_inv);

    // Head applied only to scored rows.
    Mat pred_x(tape.n_pred, d);
    for (size_t r = 0; r < tape.n_pred; ++r)
        std::copy_n(tape.xf.row(tape.pred_pos[r]), d, pred_x.row(r));
    tape.logits = matmul_nt(pred_x, bb.head());

    tape.logsumexp.resize(tape.n_pred);
    double nll_sum = 0.0;
    for (size_t r = 0; r < tape.n_pred; ++r) {
        const double* lr = tape.logits.row(r);
        double mx = lr[0];
        for (size_t v = 1; v < cfg.vocab_size; ++v) mx = std::max(mx, lr[v]);
        double denom = 0.0;
        for (size_t v = 0; v < cfg.vocab_size; ++v) denom += std::exp(lr[v] - mx);
        double lse = mx + std::log(denom);
        tape.logsumexp[r] = lse;
        uint16_t target = seq.ids[tape.pred_pos[r] + 1];
        nll_sum += lse - lr[target];
    }
    tape.loss = nll_sum / static_cast<double>(tape.n_pred);
    if (!std::isfinite(tape.loss)) throw NumericError("forward: non-finite loss");
    return tape.loss;
}

inline double forward_loss(const Backbone& bb, const AdapterSet& adapters, const TokenSeq& seq,
                           bool response_only, size_t* n_pred_out = nullptr) {
    ForwardTape tape;
    double loss = forward(bb, adapters, seq, response_only, tape);
    if (n_pred_out) *n_pred_out = tape.n_pred;
    return loss;
}

// Exact reverse-mode gradients of the tape's scalar loss with respect to the
// dense A and B entries of every adapter site. Gradients are reported as
// computed through the masked forward; callers multiply by the masks when
// updating. The tape is consumed: a second backward on it throws.
inline AdapterGrads backward_adapters(const Backbone& bb, const AdapterSet& adapters,
                                      ForwardTape& tape) {
    if (tape.consumed) throw LogicError("backward_adapters: tape already consumed");
    tape.consumed = true;
    const auto& cfg = bb.config();
    if (adapters.by_layer.size() != cfg.n_layers)
        throw ConfigError("backward_adapters: adapter set layer count mismatch");
    const size_t t_len = tape.tokens.size();
    const size_t d = cfg.d_model;
    const size_t hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    AdapterGrads out = AdapterGrads::zeros_like(adapters);
    auto grads_at = [&](size_t layer, Proj proj) -> SiteGrads* {
        for (size_t i = 0; i < out.sites.size(); ++i)
            if (out.sites[i].layer == layer && out.sites[i].proj == proj) return &out.grads[i];
        return nullptr;
    };

    // Softmax cross-entropy backward on the scored rows.
    const double inv_n = 1.0 / static_cast<double>(tape.n_pred);
    Mat dlogits(tape.n_pred, cfg.vocab_size);
    for (size_t r = 0; r < tape.n_pred; ++r) {
        const double* lr = tape.logits.row(r);
        double* dr = dlogits.row(r);
        const double lse = tape.logsumexp[r];
        for (size_t v = 0; v < cfg.vocab_size; ++v) dr[v] = std::exp(lr[v] - lse) * inv_n;
        dr[tape.tokens[tape.pred_pos[r] + 1]] -= inv_n;
    }

    Mat dpred_x = matmul(dlogits, bb.head());  // [n_pred x d]
    Mat dxf(t_len, d);
    for (size_t r = 0; r < tape.n_pred; ++r)
        std::copy_n(dpred_x.row(r), d, dxf.row(tape.pred_pos[r]));

    Mat dx;
    detail::layer_norm_backward(tape.x_final, tape.lnf_mean, tape.lnf_inv, bb.final_gain(), dxf,
                                dx);

    for (size_t li = cfg.n_layers; li-- > 0;) {
        const LayerWeights& lw = bb.layer(li);
        const LayerTape& lt = tape.layers[li];

        // MLP block.
        Mat dmlp_act = matmul(dx, lw.w2);  // [T x d_ff]
        for (size_t i = 0; i < dmlp_act.size(); ++i)
            dmlp_act.data[i] *= detail::gelu_grad(lt.mlp_pre.data[i]);
        Mat dn2 = matmul(dmlp_act, lw.w1);  // [T x d]
        Mat dx_mid;
        detail::layer_norm_backward(lt.x_mid, lt.ln2_mean, lt.ln2_inv, lw.ln2_g, dn2, dx_mid);
        add_inplace(dx_mid, dx);

        // Attention block.
        Mat dconcat = matmul(dx_mid, lw.wo);  // [T x d]
        Mat dq(t_len, d), dk(t_len, d), dv(t_len, d);
        std::vector<double> dp(t_len);
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const size_t off = h * hd;
            const Mat& p = lt.attn_p[h];
            for (size_t t = 0; t < t_len; ++t) {
                const double* pr = p.row(t);
                const double* dct = dconcat.row(t) + off;
                double dot_p = 0.0;
                for (size_t j = 0; j <= t; ++j) {
                    const double* vj = lt.v.row(j) + off;
                    double s = 0.0;
                    for (size_t i = 0; i < hd; ++i) s += dct[i] * vj[i];
                    dp[j] = s;
                    dot_p += s * pr[j];
                    double* dvj = dv.row(j) + off;
                    for (size_t i = 0; i < hd; ++i) dvj[i] += pr[j] * dct[i];
                }
                const double* qt = lt.q.row(t) + off;
                double* dqt = dq.row(t) + off;
                for (size_t j = 0; j <= t; ++j) {
                    double ds = pr[j] * (dp[j] - dot_p) * inv_sqrt_hd;
                    const double* kj = lt.k.row(j) + off;
                    double* dkj = dk.row(j) + off;
                    for (size_t i = 0; i < hd; ++i) {
                        dqt[i] += ds * kj[i];
                        dkj[i] += ds * qt[i];
                    }
                }
            }
        }

        // Projection backward: base path plus adapter path per site.
        Mat dn1(t_len, d);
        struct ProjRef {
            Proj proj;
            const Mat* w;
            const Mat* dproj;
            const Mat* u;
        };
        const std::array<ProjRef, 3> refs = {{{Proj::Query, &lw.wq, &dq, &lt.adapter_u[0]},
                                              {Proj::Key, &lw.wk, &dk, &lt.adapter_u[1]},
                                              {Proj::Value, &lw.wv, &dv, &lt.adapter_u[2]}}};
        for (const auto& ref : refs) {
            add_inplace(dn1, matmul(*ref.dproj, *ref.w));
            const LoraPair* pair = adapters.at(li, ref.proj);
            if (!pair) continue;
            SiteGrads* sg = grads_at(li, ref.proj);
            add_inplace(sg->a, matmul_tn(*ref.dproj, *ref.u));  // dA = dY^T u
            Mat du = matmul(*ref.dproj, pair->a);               // [T x R]
            add_inplace(sg->b, matmul_tn(du, lt.n1));           // dB = du^T x
            add_inplace(dn1, matmul(du, pair->b));
        }

        Mat dx_in;
        detail::layer_norm_backward(lt.x_in, lt.ln1_mean, lt.ln1_inv, lw.ln1_g, dn1, dx_in);
        add_inplace(dx_in, dx_mid);
        dx = std::move(dx_in);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: structured text with a shape header and %.17g decimal arrays.
// ---------------------------------------------------------------------------
inline constexpr const char* kBackboneMagic = "fedlora-backbone v1";

struct BackboneIo {
    static void write_mat(std::ostringstream& out, const char* name, const Mat& m) {
        out << "mat " << name << " " << m.rows << " " << m.cols;
        for (double v : m.data) out << " " << fmt_g17(v);
        out << "\n";
    }
    static void write_vec(std::ostringstream& out, const char* name,
                          const std::vector<double>& v) {
        out << "vec " << name << " " << v.size();
        for (double x : v) out << " " << fmt_g17(x);
        out << "\n";
    }
    static void read_mat(std::istringstream& in, const char* name, Mat& m) {
        std::string tag, got;
        size_t r = 0, c = 0;
        if (!(in >> tag >> got >> r >> c) || tag != "mat" || got != name)
            throw DataError(std::string("backbone checkpoint: expected mat ") + name);
        m = Mat(r, c);
        for (double& v : m.data)
            if (!(in >> v)) throw DataError(std::string("backbone checkpoint: truncated ") + name);
    }
    static void read_vec(std::istringstream& in, const char* name, std::vector<double>& v) {
        std::string tag, got;
        size_t n = 0;
        if (!(in >> tag >> got >> n) || tag != "vec" || got != name)
            throw DataError(std::string("backbone checkpoint: expected vec ") + name);
        v.assign(n, 0.0);
        for (double& x : v)
            if (!(in >> x)) throw DataError(std::string("backbone checkpoint: truncated ") + name);
    }
};

inline void Backbone::save_checkpoint(const std::string& path) const {
    std::ostringstream out;
    out << kBackboneMagic << "\n";
    out << "config " << cfg_.vocab_size << " " << cfg_.d_model << " " << cfg_.n_layers << " "
        << cfg_.n_heads << " " << cfg_.d_ff << " " << cfg_.max_seq << " " << cfg_.init_seed
        << "\n";
    BackboneIo::write_mat(out, "embedding", embedding_);
    BackboneIo::write_mat(out, "positional", pos_);
    for (size_t l = 0; l < layers_.size(); ++l) {
        const auto& lw = layers_[l];
        std::string p = "L" + std::to_string(l) + ".";
        BackboneIo::write_vec(out, (p + "ln1_g").c_str(), lw.ln1_g);
        BackboneIo::write_vec(out, (p + "ln1_b").c_str(), lw.ln1_b);
        BackboneIo::write_mat(out, (p + "wq").c_str(), lw.wq);
        BackboneIo::write_mat(out, (p + "wk").c_str(), lw.wk);
        BackboneIo::write_mat(out, (p + "wv").c_str(), lw.wv);
        BackboneIo::write_mat(out, (p + "wo").c_str(), lw.wo);
        BackboneIo::write_vec(out, (p + "ln2_g").c_str(), lw.ln2_g);
        BackboneIo::write_vec(out, (p + "ln2_b").c_str(), lw.ln2_b);
        BackboneIo::write_mat(out, (p + "w1").c_str(), lw.w1);
        BackboneIo::write_vec(out, (p + "b1").c_str(), lw.b1);
        BackboneIo::write_mat(out, (p + "w2").c_str(), lw.w2);
        BackboneIo::write_vec(out, (p + "b2").c_str(), lw.b2);
    }
    BackboneIo::write_vec(out, "lnf_g", lnf_g_);
    BackboneIo::write_vec(out, "lnf_b", lnf_b_);
    BackboneIo::write_mat(out, "head", head_);
    write_text_file(path, out.str());
}

inline Backbone Backbone::load_checkpoint(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string magic_line;
    std::getline(in, magic_line);
    if (trim(magic_line) != kBackboneMagic)
        throw DataError("backbone checkpoint " + path + ": bad magic/version");
    std::string tag;
    BackboneConfig cfg;
    if (!(in >> tag >> cfg.vocab_size >> cfg.d_model >> cfg.n_layers >> cfg.n_heads >> cfg.d_ff >>
          cfg.max_seq >> cfg.init_seed) ||
        tag != "config")
        throw DataError("backbone checkpoint " + path + ": bad config line");
    Backbone bb(cfg);
    BackboneIo::read_mat(in, "embedding", bb.embedding_);
    BackboneIo::read_mat(in, "positional", bb.pos_);
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        auto& lw = bb.layers_[l];
        std::string p = "L" + std::to_string(l) + ".";
        BackboneIo::read_vec(in, (p + "ln1_g").c_str(), lw.ln1_g);
        BackboneIo::read_vec(in, (p + "ln1_b").c_str(), lw.ln1_b);
        BackboneIo::read_mat(in, (p + "wq").c_str(), lw.wq);
        BackboneIo::read_mat(in, (p + "wk").c_str(), lw.wk);
        BackboneIo::read_mat(in, (p + "wv").c_str(), lw.wv);
        BackboneIo::read_mat(in, (p + "wo").c_str(), lw.wo);
        BackboneIo::read_vec(in, (p + "ln2_g").c_str(), lw.ln2_g);
        BackboneIo::read_vec(in, (p + "ln2_b").c_str(), lw.ln2_b);
        BackboneIo::read_mat(in, (p + "w1").c_str(), lw.w1);
        BackboneIo::read_vec(in, (p + "b1").c_str(), lw.b1);
        BackboneIo::read_mat(in, (p + "w2").c_str(), lw.w2);
        BackboneIo::read_vec(in, (p + "b2").c_str(), lw.b2);
    }
    BackboneIo::read_vec(in, "lnf_g", bb.lnf_g_);
    BackboneIo::read_vec(in, "lnf_b", bb.lnf_b_);
    BackboneIo::read_mat(in, "head", bb.head_);
    return bb;
}

}  // namespace fedlora
