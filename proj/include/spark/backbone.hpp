#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spark/config.hpp"
#include "spark/kv_cache.hpp"
#include "spark/linalg.hpp"
#include "spark/rng.hpp"

namespace spark {

inline Vec softmax(const Vec& logits) {
    Vec out = (logits.array() - logits.maxCoeff()).exp();
    return out / out.sum();
}

// One pre-norm transformer block: attention with rotary positions, then a
// feed-forward with expansion factor 4.
struct Block {
    Vec attn_gain;
    Mat wq, wk, wv, wo;
    Vec mlp_gain;
    Mat w_in, w_out;
};

// Reference to one named parameter tensor, used by init, digests and the
// weight container.
struct ParamRef {
    std::string path;
    double* data;
    Eigen::Index rows;
    Eigen::Index cols;  // 1 for vectors
    size_t count() const { return static_cast<size_t>(rows) * cols; }
};

// Probe hook for adaptive-depth forward passes. Called after each computed
// layer below the requested depth; returning true stops the pass there.
using LayerProbe = std::function<bool(int layer, const Vec& hidden)>;

// A small deterministic decoder-only transformer. Frozen after construction;
// every forward pass is a pure function of (weights, cache contents, inputs).
class Backbone {
  public:
    const ModelConfig& config() const { return config_; }
    const std::string& digest() const { return digest_; }
    const Mat& unembed_weight() const { return unembed_w_; }
    const Vec& unembed_bias() const { return unembed_b_; }

    Vec embed(int token) const {
        if (token < 0 || token >= config_.vocab_size())
            throw std::invalid_argument("token id " + std::to_string(token) +
                                        " outside vocabulary");
        return embedding_.row(token).transpose();
    }

    // Final-layer affine head applied to a hidden state.
    Vec logits(const Vec& h) const { return unembed_w_ * h + unembed_b_; }
    Vec next_token_distribution(const Vec& h) const { return softmax(logits(h)); }

    // Runs blocks [from_layer, to_layer] (1-based, inclusive) on residual x
    // for an already-open cache position, writing K/V along the way.
    Vec resume_layers(KVCache& cache, int position, Vec x, int from_layer,
                      int to_layer) const {
        for (int l = from_layer; l <= to_layer; ++l)
            x = block_forward(cache, std::move(x), l, position);
        return x;
    }

    // Forward pass for one new token at `position`, stopping at `upto_layer`
    // (or earlier if `probe` fires). Returns hidden states in layer order.
    // If the pass stops below the top layer, the position joins the cache's
    // pending set with its stored hidden state.
    std::vector<Vec> forward_step(KVCache& cache, int token, int position,
                                  int upto_layer,
                                  const LayerProbe& probe = nullptr) const {
        const int L = config_.num_layers;
        if (upto_layer < 1 || upto_layer > L)
            throw std::invalid_argument("upto_layer " + std::to_string(upto_layer) +
                                        " outside [1, " + std::to_string(L) + "]");
        // No pending position may block attention at the requested depth.
        for (int t = 0; t < position; ++t) {
            if (!cache.complete(t, upto_layer))
                throw std::logic_error(
                    "forward_step: position " + std::to_string(t) +
                    " incomplete at layer " + std::to_string(upto_layer) +
                    " (scheduler bug: backfill required before this step)");
        }

        cache.begin_position(position);
        Vec x = embed(token);
        std::vector<Vec> hiddens;
        hiddens.reserve(upto_layer);
        for (int l = 1; l <= upto_layer; ++l) {
            x = block_forward(cache, std::move(x), l, position);
            hiddens.push_back(x);
            if (probe && l < upto_layer && probe(l, hiddens.back())) break;
        }
        const int reached = static_cast<int>(hiddens.size());
        if (reached < L) cache.add_pending(position, reached, hiddens.back());
        return hiddens;
    }

    // Completes layers above the stored exit layer for every pending position,
    // oldest first, as one causal batch: each position attends only to
    // positions at or before itself, and later pending positions see the
    // freshly written entries of earlier ones. The result matches a full-depth
    // teacher-forced pass over the same tokens.
    void backfill_pending(KVCache& cache, int current_position) const {
        const int L = config_.num_layers;
        auto pending = cache.take_pending();
        int prev = -1;
        for (const auto& p : pending) {
            if (p.position >= current_position)
                throw std::logic_error("backfill_pending: pending position " +
                                       std::to_string(p.position) +
                                       " not before current position " +
                                       std::to_string(current_position));
            if (p.position <= prev)
                throw std::logic_error("backfill_pending: pending set out of order");
            if (p.hidden.size() != config_.hidden_dim)
                throw std::logic_error("backfill_pending: stored hidden missing at position " +
                                       std::to_string(p.position));
            prev = p.position;
            resume_layers(cache, p.position, p.hidden, p.exit_layer + 1, L);
        }
    }

    // One block. Writes this position's K/V at `layer` before attending, so
    // self-attention always sees a complete row.
    Vec block_forward(KVCache& cache, Vec x, int layer, int position) const {
        const Block& b = blocks_[layer - 1];
        const int d = config_.hidden_dim;
        const int nh = config_.num_heads;
        const int hd = config_.head_dim();

        Vec a_in = rms_norm(x, b.attn_gain);
        Vec q = b.wq * a_in;
        Vec k = b.wk * a_in;
        rope(q, position);
        rope(k, position);
        cache.write(layer, position, k, b.wv * a_in);

        const int n = position + 1;
        for (int t = 0; t + 1 < n; ++t) {
            if (!cache.complete(t, layer))
                throw std::logic_error("attention at layer " + std::to_string(layer) +
                                       " read incomplete K/V of position " +
                                       std::to_string(t) + " (scheduler bug)");
        }

        const Mat& K = cache.key_plane(layer);
        const Mat& V = cache.value_plane(layer);
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        Vec attn(d);
        for (int h = 0; h < nh; ++h) {
            Vec scores = K.middleRows(h * hd, hd).leftCols(n).transpose() *
                         q.segment(h * hd, hd) * scale;
            Vec w = softmax(scores);
            attn.segment(h * hd, hd) = V.middleRows(h * hd, hd).leftCols(n) * w;
        }
        x += b.wo * attn;
        x += b.w_out * silu(b.w_in * rms_norm(x, b.mlp_gain));
        return x;
    }

    // Canonical parameter order; init, digest and the weight container all
    // iterate this list.
    std::vector<ParamRef> params() {
        std::vector<ParamRef> out;
        out.push_back({"embedding", embedding_.data(), embedding_.rows(), embedding_.cols()});
        for (size_t i = 0; i < blocks_.size(); ++i) {
            const std::string pre = "blocks." + std::to_string(i) + ".";
            Block& b = blocks_[i];
            out.push_back({pre + "attn_norm.gain", b.attn_gain.data(), b.attn_gain.size(), 1});
            out.push_back({pre + "attn.wq", b.wq.data(), b.wq.rows(), b.wq.cols()});
            out.push_back({pre + "attn.wk", b.wk.data(), b.wk.rows(), b.wk.cols()});
            out.push_back({pre + "attn.wv", b.wv.data(), b.wv.rows(), b.wv.cols()});
            out.push_back({pre + "attn.wo", b.wo.data(), b.wo.rows(), b.wo.cols()});
            out.push_back({pre + "mlp_norm.gain", b.mlp_gain.data(), b.mlp_gain.size(), 1});
            out.push_back({pre + "mlp.w_in", b.w_in.data(), b.w_in.rows(), b.w_in.cols()});
            out.push_back({pre + "mlp.w_out", b.w_out.data(), b.w_out.rows(), b.w_out.cols()});
        }
        out.push_back({"unembed.weight", unembed_w_.data(), unembed_w_.rows(), unembed_w_.cols()});
        out.push_back({"unembed.bias", unembed_b_.data(), unembed_b_.size(), 1});
        return out;
    }

    std::string compute_digest() {
        Digest d;
        for (const auto& p : params()) {
            d.str(p.path);
            d.bytes(p.data, p.count() * sizeof(double));
        }
        return d.hex();
    }

    // Shape-allocated, zero-filled backbone; used by the weight loader.
    static Backbone allocate(const ModelConfig& cfg) {
        cfg.validate();
        Backbone m;
        m.config_ = cfg;
        const int d = cfg.hidden_dim;
        const int V = cfg.vocab_size();
        m.embedding_.setZero(V, d);
        m.blocks_.resize(cfg.num_layers);
        for (auto& b : m.blocks_) {
            b.attn_gain.setZero(d);
            b.wq.setZero(d, d);
            b.wk.setZero(d, d);
            b.wv.setZero(d, d);
            b.wo.setZero(d, d);
            b.mlp_gain.setZero(d);
            b.w_in.setZero(4 * d, d);
            b.w_out.setZero(d, 4 * d);
        }
        m.unembed_w_.setZero(V, d);
        m.unembed_b_.setZero(V);
        const int hd = cfg.head_dim();
        m.rope_inv_freq_.resize(hd / 2);
        for (int i = 0; i < hd / 2; ++i)
            m.rope_inv_freq_[i] = std::pow(10000.0, -2.0 * i / hd);
        return m;
    }

    void set_digest(std::string digest) { digest_ = std::move(digest); }

  private:
    static Vec silu(Vec v) {
        return v.array() / (1.0 + (-v.array()).exp());
    }

    static Vec rms_norm(const Vec& x, const Vec& gain) {
        const double rms = std::sqrt(x.squaredNorm() / x.size() + 1e-6);
        return gain.array() * x.array() / rms;
    }

    // Rotary position encoding on interleaved pairs within each head.
    void rope(Vec& v, int position) const {
        const int nh = config_.num_heads;
        const int hd = config_.head_dim();
        for (int h = 0; h < nh; ++h) {
            for (int i = 0; i < hd / 2; ++i) {
                const double a = position * rope_inv_freq_[i];
                const double c = std::cos(a), s = std::sin(a);
                const int base = h * hd + 2 * i;
                const double x0 = v[base], x1 = v[base + 1];
                v[base] = x0 * c - x1 * s;
                v[base + 1] = x0 * s + x1 * c;
            }
        }
    }

    ModelConfig config_;
    Mat embedding_;  // |V| x d
    std::vector<Block> blocks_;
    Mat unembed_w_;  // |V| x d
    Vec unembed_b_;  // |V|
    std::vector<double> rope_inv_freq_;  // per rotation pair within a head
    std::string digest_;

    friend Backbone build_backbone(const ModelConfig&);
};

// Deterministic construction: every tensor is drawn from a stream keyed by
// (seed, parameter path), so the digest is stable regardless of the order
// tensors are filled in.
inline Backbone build_backbone(const ModelConfig& cfg) {
    Backbone m = Backbone::allocate(cfg);
    const int d = cfg.hidden_dim;
    const double res_scale = 1.0 / std::sqrt(2.0 * cfg.num_layers);
    for (auto& p : m.params()) {
        double sigma;
        if (p.path == "embedding") {
            sigma = 1.0;
        } else if (p.path == "unembed.bias") {
            sigma = 0.02;
        } else if (p.path.ends_with("gain")) {
            sigma = 0.02;  // gain = 1 + jitter
        } else if (p.path.ends_with("wo")) {
            sigma = res_scale / std::sqrt(static_cast<double>(d));
        } else if (p.path.ends_with("w_out")) {
            sigma = res_scale / std::sqrt(4.0 * d);
        } else {
            sigma = 1.0 / std::sqrt(static_cast<double>(d));
        }
        CounterRng rng = CounterRng::keyed(cfg.init_seed, p.path);
        const double shift = p.path.ends_with("gain") ? 1.0 : 0.0;
        for (size_t i = 0; i < p.count(); ++i)
            p.data[i] = shift + sigma * rng.next_gaussian();
    }
    m.set_digest(m.compute_digest());
    return m;
}

}  // namespace spark
