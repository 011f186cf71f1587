#pragma once

#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "spark/backbone.hpp"
#include "spark/interleave.hpp"
#include "spark/linalg.hpp"
#include "spark/policy.hpp"
#include "spark/sampling.hpp"

namespace spark {

// Affine map from a layer's hidden state to vocabulary logits.
struct LayerHead {
    Mat w;  // |V| x d
    Vec b;  // |V|
    bool trained = false;

    Vec logits(const Vec& hidden) const { return w * hidden + b; }
};

struct TrainRecord {
    long long step;
    int layer;
    double loss;
};

// Per-layer prediction heads. The top layer's head is always the backbone's
// own unembedding and is never retrained; other layers start as copies of it
// and are distilled toward the final-layer distribution.
struct HeadSet {
    int num_layers = 0;
    std::map<int, LayerHead> heads;

    // training metadata
    long long train_steps = 0;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    std::string corpus_digest;
    std::vector<TrainRecord> curve;

    bool has(int layer) const { return heads.count(layer) > 0; }

    const LayerHead& at(int layer) const {
        auto it = heads.find(layer);
        if (it == heads.end())
            throw std::invalid_argument("no head available for layer " + std::to_string(layer));
        return it->second;
    }

    std::set<int> layers() const {
        std::set<int> out;
        for (const auto& [l, h] : heads) out.insert(l);
        return out;
    }

    // Heads initialized as copies of the final unembedding. The top layer is
    // always included.
    static HeadSet warm_start(const Backbone& backbone, const std::set<int>& layers) {
        HeadSet hs;
        hs.num_layers = backbone.config().num_layers;
        std::set<int> wanted = layers;
        wanted.insert(hs.num_layers);
        for (int l : wanted) {
            if (l < 1 || l > hs.num_layers)
                throw std::invalid_argument("head layer " + std::to_string(l) + " out of range");
            hs.heads[l] = LayerHead{backbone.unembed_weight(), backbone.unembed_bias(), false};
        }
        return hs;
    }

    std::string compute_digest() const {
        Digest d;
        for (const auto& [l, h] : heads) {
            d.pod(l);
            d.bytes(h.w.data(), sizeof(double) * h.w.size());
            d.bytes(h.b.data(), sizeof(double) * h.b.size());
        }
        return d.hex();
    }
};

inline Vec predict_at_layer(const HeadSet& heads, int layer, const Vec& hidden) {
    return softmax(heads.at(layer).logits(hidden));
}

// One distillation sample: an intermediate hidden state paired with the
// final layer's next-token distribution at the same step.
struct DistillPair {
    Vec hidden;
    Vec teacher;
};
using DistillBatch = std::vector<DistillPair>;

struct DistillCorpus {
    std::map<int, DistillBatch> per_layer;
    std::string digest;
};

// Mean soft cross-entropy of a head over a batch: E[-sum_v p_T(v) log p(v)].
inline double soft_cross_entropy(const LayerHead& head, const DistillBatch& batch) {
    if (batch.empty()) throw std::invalid_argument("soft_cross_entropy: empty batch");
    double total = 0.0;
    for (const auto& pair : batch) {
        const Vec l = head.logits(pair.hidden);
        const double mx = l.maxCoeff();
        const double lse = mx + std::log((l.array() - mx).exp().sum());
        total += lse - pair.teacher.dot(l);
    }
    return total / batch.size();
}

struct LossAndGrad {
    double loss;
    Mat grad_w;
    Vec grad_b;
};

// Loss and analytic gradient of the distillation objective over a batch.
// d loss / d logits = softmax(logits) - teacher.
inline LossAndGrad head_loss_and_grad(const LayerHead& head, const DistillBatch& batch,
                                      const std::vector<size_t>& indices) {
    if (indices.empty()) throw std::invalid_argument("head_loss_and_grad: empty batch");
    LossAndGrad out{0.0, Mat::Zero(head.w.rows(), head.w.cols()), Vec::Zero(head.b.size())};
    for (size_t idx : indices) {
        const auto& pair = batch[idx];
        const Vec l = head.logits(pair.hidden);
        const double mx = l.maxCoeff();
        const double lse = mx + std::log((l.array() - mx).exp().sum());
        out.loss += lse - pair.teacher.dot(l);
        const Vec d_logits = softmax(l) - pair.teacher;
        out.grad_w += d_logits * pair.hidden.transpose();
        out.grad_b += d_logits;
    }
    const double inv = 1.0 / indices.size();
    out.loss *= inv;
    out.grad_w *= inv;
    out.grad_b *= inv;
    return out;
}

// Full-depth rollouts over the prompt set, recording (hidden, teacher
// distribution) pairs for every requested layer at every generated step.
// The backbone is read-only throughout.
inline DistillCorpus collect_distill_corpus(const Backbone& backbone,
                                            const std::vector<std::vector<int>>& prompts,
                                            const std::set<int>& layers,
                                            const SamplingConfig& sampling,
                                            int max_new_tokens) {
    if (prompts.empty())
        throw std::invalid_argument("collect_distill_corpus: empty prompt list");
    const ModelConfig& cfg = backbone.config();
    const int L = cfg.num_layers;
    for (int l : layers)
        if (l < 1 || l > L)
            throw std::invalid_argument("corpus layer " + std::to_string(l) + " out of range");

    DistillCorpus corpus;
    for (int l : layers) corpus.per_layer[l] = {};

    CounterRng rng = CounterRng::keyed(sampling.rng_seed, "distill-rollout");
    Digest digest;
    for (const auto& prompt : prompts) {
        if (prompt.empty()) throw std::invalid_argument("empty prompt");
        KVCache cache(cfg);
        std::vector<Vec> hiddens;
        for (size_t i = 0; i < prompt.size(); ++i)
            hiddens = backbone.forward_step(cache, prompt[i], static_cast<int>(i), L);

        InterleaveState state = initial_state(cfg);
        int prev_token = -1;
        for (int step = 0; step < max_new_tokens; ++step) {
            if (step > 0) {
                if (cache.next_position() >= cfg.max_seq_len) break;
                hiddens = backbone.forward_step(cache, prev_token, cache.next_position(), L);
                state = advance(state, cfg);
            }
            const Vec teacher = backbone.next_token_distribution(hiddens[L - 1]);
            for (int l : layers) {
                corpus.per_layer[l].push_back(DistillPair{hiddens[l - 1], teacher});
                digest.pod(l);
                digest.bytes(hiddens[l - 1].data(), sizeof(double) * hiddens[l - 1].size());
            }
            const auto mask = modality_mask(state, cfg);
            const int token = sample(teacher, mask, sampling, rng);
            digest.pod(token);
            if (token == cfg.end_of_response()) break;
            prev_token = token;
        }
    }
    corpus.digest = digest.hex();
    return corpus;
}

struct TrainConfig {
    double learning_rate = 0.05;
    long long steps = 400;
    int batch_size = 32;
    uint64_t seed = 0;
    long long log_every = 25;
};

// Distills per-layer heads toward the final-layer distribution with plain
// SGD and global gradient-norm clipping at 1.0. The top layer keeps the
// shared unembedding untouched; the backbone is never modified.
inline HeadSet train_heads(const Backbone& backbone, const DistillCorpus& corpus,
                           const TrainConfig& tc) {
    std::set<int> layers;
    for (const auto& [l, batch] : corpus.per_layer) {
        if (batch.empty())
            throw std::invalid_argument("train_heads: empty corpus for layer " +
                                        std::to_string(l));
        for (const auto& pair : batch)
            if (std::abs(pair.teacher.sum() - 1.0) > 1e-6)
                throw std::invalid_argument("train_heads: teacher distribution not normalized");
        layers.insert(l);
    }
    const int L = backbone.config().num_layers;
    HeadSet hs = HeadSet::warm_start(backbone, layers);
    hs.corpus_digest = corpus.digest;

    for (int layer : layers) {
        if (layer == L) continue;  // shared unembedding, never retrained
        LayerHead& head = hs.heads.at(layer);
        const DistillBatch& batch = corpus.per_layer.at(layer);
        CounterRng rng = CounterRng::keyed(tc.seed, "train-head." + std::to_string(layer));
        double last_loss = 0.0;
        for (long long step = 1; step <= tc.steps; ++step) {
            std::vector<size_t> idx(tc.batch_size);
            for (auto& i : idx) i = rng.next_below(batch.size());
            LossAndGrad lg = head_loss_and_grad(head, batch, idx);
            if (!std::isfinite(lg.loss))
                throw std::runtime_error("train_heads: loss diverged at layer " +
                                         std::to_string(layer) + ", step " +
                                         std::to_string(step));
            const double gnorm =
                std::sqrt(lg.grad_w.squaredNorm() + lg.grad_b.squaredNorm());
            const double scale = gnorm > 1.0 ? 1.0 / gnorm : 1.0;
            head.w -= tc.learning_rate * scale * lg.grad_w;
            head.b -= tc.learning_rate * scale * lg.grad_b;
            last_loss = lg.loss;
            if (step % tc.log_every == 0 || step == tc.steps)
                hs.curve.push_back(TrainRecord{step, layer, lg.loss});
        }
        head.trained = true;
        hs.final_loss = last_loss;
        hs.train_steps = tc.steps;
    }
    return hs;
}

}  // namespace spark
