#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "spark/config.hpp"
#include "spark/linalg.hpp"
#include "spark/rng.hpp"

namespace spark {

// Decoding rule. Greedy takes the masked argmax; Nucleus temperature-scales,
// keeps the smallest probability-sorted prefix reaching top_p, renormalizes
// and draws from the seeded stream.
struct SamplingConfig {
    enum class Kind { Greedy, Nucleus };
    Kind kind = Kind::Greedy;
    double temperature = 1.0;
    double top_p = 1.0;
    uint64_t rng_seed = 0;

    static SamplingConfig greedy() { return SamplingConfig{}; }

    static SamplingConfig nucleus(double temperature, double top_p, uint64_t seed) {
        SamplingConfig c;
        c.kind = Kind::Nucleus;
        c.temperature = temperature;
        c.top_p = top_p;
        c.rng_seed = seed;
        return c;
    }

    void validate() const {
        if (kind == Kind::Nucleus) {
            if (temperature <= 0) throw std::invalid_argument("temperature must be positive");
            if (top_p <= 0 || top_p > 1) throw std::invalid_argument("top_p must be in (0, 1]");
        }
    }

    json to_json() const {
        if (kind == Kind::Greedy) return json{{"kind", "greedy"}};
        return json{{"kind", "nucleus"},
                    {"temperature", temperature},
                    {"top_p", top_p},
                    {"rng_seed", rng_seed}};
    }

    static SamplingConfig from_json(const json& j) {
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "greedy") return greedy();
        if (kind == "nucleus") {
            auto c = nucleus(j.at("temperature").get<double>(), j.at("top_p").get<double>(),
                             j.value("rng_seed", uint64_t{0}));
            c.validate();
            return c;
        }
        throw std::invalid_argument("unknown sampling kind: " + kind);
    }
};

// Draws one token id from `dist` restricted to `mask`.
//
// Greedy ties break toward the lowest id. Nucleus sorts candidates by
// (probability desc, id asc) and keeps the smallest prefix whose mass reaches
// top_p, so a tail candidate below the cut has selection probability zero.
inline int sample(const Vec& dist, const std::vector<uint8_t>& mask,
                  const SamplingConfig& cfg, CounterRng& rng) {
    const auto n = dist.size();
    if (static_cast<Eigen::Index>(mask.size()) != n)
        throw std::invalid_argument("sample: mask size mismatch");

    if (cfg.kind == SamplingConfig::Kind::Greedy) {
        int best = -1;
        double best_p = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (mask[i] && dist[i] > best_p) {
                best_p = dist[i];
                best = static_cast<int>(i);
            }
        }
        if (best < 0) throw std::invalid_argument("sample: empty admissible set");
        return best;
    }

    // Temperature on log-probabilities, restricted to admissible ids.
    std::vector<std::pair<double, int>> cand;
    cand.reserve(n);
    double max_log = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!mask[i] || dist[i] <= 0.0) continue;
        const double lg = std::log(dist[i]) / cfg.temperature;
        max_log = std::max(max_log, lg);
        cand.emplace_back(lg, static_cast<int>(i));
    }
    if (cand.empty()) throw std::invalid_argument("sample: empty admissible set");
    double total = 0.0;
    for (auto& [w, id] : cand) {
        w = std::exp(w - max_log);
        total += w;
    }
    for (auto& [w, id] : cand) w /= total;

    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    size_t keep = cand.size();
    double cum = 0.0;
    for (size_t i = 0; i < cand.size(); ++i) {
        cum += cand[i].first;
        if (cum >= cfg.top_p) {
            keep = i + 1;
            break;
        }
    }
    double kept_mass = 0.0;
    for (size_t i = 0; i < keep; ++i) kept_mass += cand[i].first;

    const double u = rng.next_unit() * kept_mass;
    double acc = 0.0;
    for (size_t i = 0; i < keep; ++i) {
        acc += cand[i].first;
        if (u < acc) return cand[i].second;
    }
    return cand[keep - 1].second;
}

}  // namespace spark
