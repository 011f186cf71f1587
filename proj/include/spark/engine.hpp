#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "spark/backbone.hpp"
#include "spark/heads.hpp"
#include "spark/interleave.hpp"
#include "spark/policy.hpp"
#include "spark/sampling.hpp"

namespace spark {

inline Vec masked_renormalize(const Vec& dist, const std::vector<uint8_t>& mask) {
    Vec out = dist;
    double total = 0.0;
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        if (!mask[i]) out[i] = 0.0;
        total += out[i];
    }
    if (total <= 0.0) throw std::invalid_argument("masked_renormalize: no admissible mass");
    return out / total;
}

enum class StopReason { EndOfResponse, MaxLength };

inline const char* stop_reason_name(StopReason r) {
    return r == StopReason::EndOfResponse ? "end_of_response" : "max_length";
}

struct StepRecord {
    int t = 0;  // 1-based generated step index
    int token = 0;
    Modality modality = Modality::Text;
    int exit_layer = 0;  // realized depth d_t
    std::map<int, double> probe_entropies;  // confidence-governed steps only
    long long cumulative_layer_compute = 0;
};

// Token stream with per-step depth diagnostics; the source of all efficiency
// metrics. seq_depth is the wall-clock-critical sum of per-step depths;
// layer_computations additionally counts backfill work.
struct GenerationResult {
    std::vector<int> prompt;
    std::vector<StepRecord> steps;
    StopReason stop_reason = StopReason::MaxLength;
    long long seq_depth = 0;
    long long backfill_layers = 0;
    long long layer_computations = 0;
    long long probe_count = 0;

    std::vector<int> tokens() const {
        std::vector<int> out;
        out.reserve(steps.size());
        for (const auto& s : steps) out.push_back(s.token);
        return out;
    }
};

namespace detail {

inline const ExitPolicy* pick_policy(const std::vector<ExitPolicy>& policies, Modality m) {
    for (const auto& p : policies)
        if (p.applies(m)) return &p;
    return nullptr;
}

inline void check_head_coverage(const HeadSet& heads, const std::vector<ExitPolicy>& policies,
                                int L) {
    auto require = [&](int layer, const std::string& who) {
        if (!heads.has(layer))
            throw std::invalid_argument("head missing for exit layer " + std::to_string(layer) +
                                        " required by policy " + who);
    };
    for (const auto& p : policies) {
        if (p.applies_to.empty()) continue;
        switch (p.kind) {
            case ExitPolicy::Kind::FixedLayer:
            case ExitPolicy::Kind::Spark:
                require(p.exit_layer, p.label());
                break;
            case ExitPolicy::Kind::Confidence:
                for (int l = p.min_layer; l < L; ++l) require(l, p.label());
                break;
            case ExitPolicy::Kind::Disable:
                break;
        }
    }
}

inline long long pending_backfill_layers(const KVCache& cache, int L) {
    long long sum = 0;
    for (const auto& p : cache.pending()) sum += L - p.exit_layer;
    return sum;
}

// Lowest pending exit layer, or L when nothing is pending. Any step that
// needs depth beyond this must backfill first.
inline int pending_floor(const KVCache& cache, int L) {
    int floor = L;
    for (const auto& p : cache.pending()) floor = std::min(floor, p.exit_layer);
    return floor;
}

}  // namespace detail

// Autoregressive generation under a set of modality-scoped exit policies
// (one policy per modality; the first applicable one governs a step, and
// steps with no applicable policy run full depth).
//
// The prompt is prefilled full-depth. Each generated step decides its depth
// from the interleave slot, runs the backbone to that depth, predicts
// through the head at that depth, masks to the slot's sub-vocabulary and
// samples. Pending positions are backfilled as soon as a step needs depth
// beyond their stored layer, and once more at termination, so the final
// cache is always complete.
inline GenerationResult generate(const Backbone& backbone, const HeadSet& heads,
                                 const std::vector<ExitPolicy>& policies,
                                 const std::vector<int>& prompt,
                                 const SamplingConfig& sampling, int max_new_tokens,
                                 KVCache* external_cache = nullptr) {
    const ModelConfig& cfg = backbone.config();
    const int L = cfg.num_layers;
    sampling.validate();
    for (const auto& p : policies) p.validate(L);
    detail::check_head_coverage(heads, policies, L);
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (static_cast<int>(prompt.size()) + max_new_tokens > cfg.max_seq_len)
        throw std::invalid_argument("generate: prompt length + max_new_tokens exceeds max_seq_len");

    KVCache local(cfg);
    KVCache& cache = external_cache ? *external_cache : local;
    if (cache.size() != 0) throw std::invalid_argument("generate: cache must be empty");

    GenerationResult result;
    result.prompt = prompt;

    // Full-depth prefill; the last prompt position's hidden stack feeds the
    // first generated step.
    std::vector<Vec> hiddens;
    for (size_t i = 0; i < prompt.size(); ++i)
        hiddens = backbone.forward_step(cache, prompt[i], static_cast<int>(i), L);

    CounterRng rng = CounterRng::keyed(sampling.rng_seed, "generate");
    InterleaveState state = initial_state(cfg);
    int prev_token = -1;
    bool stopped = false;

    for (int t = 1; t <= max_new_tokens; ++t) {
        const Modality modality = modality_of(state, cfg);
        const auto mask = modality_mask(state, cfg);
        const ExitPolicy* policy = detail::pick_policy(policies, modality);
        const DepthDecision decision =
            policy ? decide_depth(*policy, modality, block_local_index(state, cfg), L)
                   : DepthDecision::full();

        int depth = 0;
        std::map<int, double> step_entropies;
        if (t == 1) {
            // The last prompt forward already ran to full depth; the decision
            // only selects which stored hidden the prediction head reads.
            if (decision.kind == DepthDecision::Kind::ExitAt) {
                depth = decision.layer;
            } else if (decision.kind == DepthDecision::Kind::Dynamic) {
                depth = L;
                for (int l = policy->min_layer; l < L; ++l) {
                    const double h = entropy(
                        masked_renormalize(predict_at_layer(heads, l, hiddens[l - 1]), mask));
                    step_entropies[l] = h;
                    ++result.probe_count;
                    if (h <= policy->threshold) {
                        depth = l;
                        break;
                    }
                }
            } else {
                depth = L;
            }
        } else {
            const int need =
                decision.kind == DepthDecision::Kind::ExitAt ? decision.layer : L;
            if (detail::pending_floor(cache, L) < need) {
                result.backfill_layers += detail::pending_backfill_layers(cache, L);
                backbone.backfill_pending(cache, cache.next_position());
            }
            const int pos = cache.next_position();
            if (decision.kind == DepthDecision::Kind::Dynamic) {
                LayerProbe probe = [&](int layer, const Vec& h) {
                    if (layer < policy->min_layer) return false;
                    const double e = entropy(
                        masked_renormalize(predict_at_layer(heads, layer, h), mask));
                    step_entropies[layer] = e;
                    ++result.probe_count;
                    return e <= policy->threshold;
                };
                hiddens = backbone.forward_step(cache, prev_token, pos, L, probe);
            } else {
                hiddens = backbone.forward_step(cache, prev_token, pos, need);
            }
            depth = static_cast<int>(hiddens.size());
        }

        const Vec dist = predict_at_layer(heads, depth, hiddens[depth - 1]);
        const int token = sample(dist, mask, sampling, rng);

        result.seq_depth += depth;
        StepRecord rec;
        rec.t = t;
        rec.token = token;
        rec.modality = modality;
        rec.exit_layer = depth;
        rec.probe_entropies = std::move(step_entropies);
        rec.cumulative_layer_compute = result.seq_depth + result.backfill_layers;
        result.steps.push_back(std::move(rec));

        if (token == cfg.end_of_response()) {
            result.stop_reason = StopReason::EndOfResponse;
            stopped = true;
            break;
        }
        prev_token = token;
        state = advance(state, cfg);
    }
    if (!stopped) result.stop_reason = StopReason::MaxLength;

    if (!cache.pending().empty()) {
        result.backfill_layers += detail::pending_backfill_layers(cache, L);
        backbone.backfill_pending(cache, cache.next_position());
    }
    result.layer_computations = result.seq_depth + result.backfill_layers;
    return result;
}

inline GenerationResult generate(const Backbone& backbone, const HeadSet& heads,
                                 const ExitPolicy& policy, const std::vector<int>& prompt,
                                 const SamplingConfig& sampling, int max_new_tokens,
                                 KVCache* external_cache = nullptr) {
    return generate(backbone, heads, std::vector<ExitPolicy>{policy}, prompt, sampling,
                    max_new_tokens, external_cache);
}

// Full-depth forward over a fixed token sequence; at each position, the
// argmax next-token prediction of every requested layer's head. The sequence
// itself is never altered by intermediate predictions. Entry i predicts
// tokens[i + 1].
inline std::vector<std::map<int, int>> teacher_forced_trace(const Backbone& backbone,
                                                            const HeadSet& heads,
                                                            const std::vector<int>& tokens,
                                                            const std::set<int>& layers) {
    const ModelConfig& cfg = backbone.config();
    for (int l : layers) heads.at(l);  // throws on a layer without a head
    if (tokens.size() < 2) return {};
    KVCache cache(cfg);
    std::vector<std::map<int, int>> trace;
    trace.reserve(tokens.size() - 1);
    for (size_t pos = 0; pos + 1 < tokens.size(); ++pos) {
        const auto hiddens =
            backbone.forward_step(cache, tokens[pos], static_cast<int>(pos), cfg.num_layers);
        std::map<int, int> preds;
        for (int l : layers) {
            const Vec dist = predict_at_layer(heads, l, hiddens[l - 1]);
            Eigen::Index arg;
            dist.maxCoeff(&arg);  // first maximum: ties break toward the lowest id
            preds[l] = static_cast<int>(arg);
        }
        trace.push_back(std::move(preds));
    }
    return trace;
}

// One step per line; a header line carries config digests and seeds.
inline void write_jsonl(const GenerationResult& result, const json& header, std::ostream& os) {
    json h = header;
    h["type"] = "header";
    h["artifact_version"] = kArtifactVersion;
    os << h.dump() << "\n";
    for (const auto& s : result.steps) {
        json line{{"t", s.t},
                  {"token", s.token},
                  {"modality", modality_name(s.modality)},
                  {"exit_layer", s.exit_layer}};
        if (!s.probe_entropies.empty()) {
            json e = json::object();
            for (const auto& [l, v] : s.probe_entropies) e[std::to_string(l)] = v;
            line["entropies"] = e;
        }
        os << line.dump() << "\n";
    }
    os << json{{"type", "summary"},
               {"stop_reason", stop_reason_name(result.stop_reason)},
               {"seq_depth", result.seq_depth},
               {"backfill_layers", result.backfill_layers},
               {"layer_computations", result.layer_computations},
               {"probe_count", result.probe_count}}
              .dump()
       << "\n";
}

}  // namespace spark
