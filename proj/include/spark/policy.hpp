#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "spark/config.hpp"
#include "spark/interleave.hpp"
#include "spark/linalg.hpp"

namespace spark {

// Exact rational, used for closed-form average-depth arithmetic.
struct Rational {
    long long num = 0;
    long long den = 1;

    Rational() = default;
    Rational(long long n, long long d) : num(n), den(d) { normalize(); }

    void normalize() {
        if (den == 0) throw std::invalid_argument("Rational: zero denominator");
        if (den < 0) {
            num = -num;
            den = -den;
        }
        const long long g = std::gcd(num < 0 ? -num : num, den);
        if (g > 1) {
            num /= g;
            den /= g;
        }
    }

    double to_double() const { return static_cast<double>(num) / den; }
    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }

    std::string str() const {
        std::ostringstream os;
        os << num;
        if (den != 1) os << "/" << den;
        return os.str();
    }
};

enum class SparkVariant { Even, Odd, Triple };

inline const char* spark_variant_name(SparkVariant v) {
    switch (v) {
        case SparkVariant::Even: return "even";
        case SparkVariant::Odd: return "odd";
        case SparkVariant::Triple: return "triple";
    }
    return "?";
}

inline int spark_period(SparkVariant v) {
    return v == SparkVariant::Triple ? 3 : 2;
}

// Exit-policy catalog. One value describes one depth rule together with the
// set of modalities it governs; steps in other modalities run full depth.
struct ExitPolicy {
    enum class Kind { Disable, FixedLayer, Spark, Confidence };

    Kind kind = Kind::Disable;
    SparkVariant variant = SparkVariant::Even;  // Spark only
    int exit_layer = 0;                         // FixedLayer / Spark
    double threshold = 0.0;                     // Confidence, entropy in nats
    int min_layer = 1;                          // Confidence
    std::set<Modality> applies_to;

    static ExitPolicy disable() { return ExitPolicy{}; }

    static ExitPolicy fixed(int layer, std::set<Modality> modes = {Modality::Speech}) {
        ExitPolicy p;
        p.kind = Kind::FixedLayer;
        p.exit_layer = layer;
        p.applies_to = std::move(modes);
        return p;
    }

    static ExitPolicy spark(SparkVariant v, int layer,
                            std::set<Modality> modes = {Modality::Speech}) {
        ExitPolicy p;
        p.kind = Kind::Spark;
        p.variant = v;
        p.exit_layer = layer;
        p.applies_to = std::move(modes);
        return p;
    }

    static ExitPolicy confidence(double tau, int min_layer,
                                 std::set<Modality> modes = {Modality::Speech}) {
        ExitPolicy p;
        p.kind = Kind::Confidence;
        p.threshold = tau;
        p.min_layer = min_layer;
        p.applies_to = std::move(modes);
        return p;
    }

    bool applies(Modality m) const { return applies_to.count(m) > 0; }
    bool schedule_based() const { return kind != Kind::Confidence; }

    void validate(int L) const {
        auto fail = [](const std::string& what) {
            throw std::invalid_argument("invalid exit policy: " + what);
        };
        switch (kind) {
            case Kind::Disable:
                return;
            case Kind::FixedLayer:
            case Kind::Spark:
                if (exit_layer < 1 || exit_layer >= L)
                    fail("exit_layer must satisfy 1 <= exit_layer < num_layers");
                break;
            case Kind::Confidence:
                if (threshold < 0) fail("threshold must be non-negative");
                if (min_layer < 1 || min_layer > L)
                    fail("min_layer must satisfy 1 <= min_layer <= num_layers");
                break;
        }
        if (applies_to.empty()) fail("applies_to must be nonempty for a non-disable policy");
    }

    // Short identifier used in reports and on the command line,
    // e.g. "spark-even-22", "fixed-25", "conf-0.5-26", "disable".
    std::string label() const {
        std::ostringstream os;
        switch (kind) {
            case Kind::Disable: return "disable";
            case Kind::FixedLayer: os << "fixed-" << exit_layer; break;
            case Kind::Spark:
                os << "spark-" << spark_variant_name(variant) << "-" << exit_layer;
                break;
            case Kind::Confidence: os << "conf-" << threshold << "-" << min_layer; break;
        }
        if (!(applies_to == std::set<Modality>{Modality::Speech}) && kind != Kind::Disable) {
            os << "[";
            for (Modality m : applies_to) os << modality_name(m)[0];
            os << "]";
        }
        return os.str();
    }

    json to_json() const {
        json modes = json::array();
        for (Modality m : applies_to) modes.push_back(modality_name(m));
        switch (kind) {
            case Kind::Disable:
                return json{{"kind", "disable"}};
            case Kind::FixedLayer: {
                json j{{"kind", "fixed"}, {"exit_layer", exit_layer}};
                // The speech-only scope is the default and stays implicit.
                if (!(applies_to == std::set<Modality>{Modality::Speech}))
                    j["applies_to"] = modes;
                return j;
            }
            case Kind::Spark:
                return json{{"kind", "spark"},
                            {"variant", spark_variant_name(variant)},
                            {"exit_layer", exit_layer},
                            {"applies_to", modes}};
            case Kind::Confidence:
                return json{{"kind", "confidence"},
                            {"threshold", threshold},
                            {"min_layer", min_layer},
                            {"applies_to", modes}};
        }
        throw std::logic_error("unreachable");
    }

    static ExitPolicy from_json(const json& j) {
        const std::string kind = j.at("kind").get<std::string>();
        std::set<Modality> modes;
        if (j.contains("applies_to")) {
            for (const auto& m : j.at("applies_to")) {
                const std::string name = m.get<std::string>();
                if (name == "text") modes.insert(Modality::Text);
                else if (name == "speech") modes.insert(Modality::Speech);
                else throw std::invalid_argument("unknown modality: " + name);
            }
        } else {
            modes = {Modality::Speech};
        }
        if (kind == "disable") return disable();
        if (kind == "fixed") return fixed(j.at("exit_layer").get<int>(), modes);
        if (kind == "spark") {
            const std::string v = j.at("variant").get<std::string>();
            SparkVariant var;
            if (v == "even") var = SparkVariant::Even;
            else if (v == "odd") var = SparkVariant::Odd;
            else if (v == "triple") var = SparkVariant::Triple;
            else throw std::invalid_argument("unknown spark variant: " + v);
            return spark(var, j.at("exit_layer").get<int>(), modes);
        }
        if (kind == "confidence")
            return confidence(j.at("threshold").get<double>(), j.at("min_layer").get<int>(), modes);
        throw std::invalid_argument("unknown policy kind: " + kind);
    }
};

// Per-step depth outcome: run all layers, stop at a known layer, or resolve
// the depth during the forward pass (confidence policies).
struct DepthDecision {
    enum class Kind { FullDepth, ExitAt, Dynamic };
    Kind kind = Kind::FullDepth;
    int layer = 0;  // ExitAt only, < L

    static DepthDecision full() { return {Kind::FullDepth, 0}; }
    static DepthDecision exit_at(int layer) { return {Kind::ExitAt, layer}; }
    static DepthDecision dynamic() { return {Kind::Dynamic, 0}; }

    bool operator==(const DepthDecision&) const = default;
};

// Schedule lookup for one step. `block_index` is the 1-based index within the
// current modality block; patterns restart at each block, and a final block
// shorter than the period simply truncates the pattern.
//
//   Even:   full, exit, full, exit, ...
//   Odd:    exit, full, exit, full, ...
//   Triple: full, exit, exit, full, exit, exit, ...
inline DepthDecision decide_depth(const ExitPolicy& policy, Modality modality,
                                  int block_index, int L) {
    if (policy.kind == ExitPolicy::Kind::Disable || !policy.applies(modality))
        return DepthDecision::full();
    switch (policy.kind) {
        case ExitPolicy::Kind::FixedLayer:
            return DepthDecision::exit_at(policy.exit_layer);
        case ExitPolicy::Kind::Confidence:
            return DepthDecision::dynamic();
        case ExitPolicy::Kind::Spark: {
            if (block_index < 1)
                throw std::invalid_argument("decide_depth: block index must be >= 1");
            bool exit_here = false;
            switch (policy.variant) {
                case SparkVariant::Even: exit_here = block_index % 2 == 0; break;
                case SparkVariant::Odd: exit_here = block_index % 2 == 1; break;
                case SparkVariant::Triple: {
                    const int r = block_index % 3;
                    exit_here = r == 2 || r == 0;
                    break;
                }
            }
            return exit_here ? DepthDecision::exit_at(policy.exit_layer)
                             : DepthDecision::full();
        }
        case ExitPolicy::Kind::Disable: break;
    }
    (void)L;
    return DepthDecision::full();
}

// Closed-form average exit layer over one speech chunk, exact. Confidence
// policies have no closed form and must be measured.
inline Rational expected_depth(const ExitPolicy& policy, const ModelConfig& cfg) {
    const int L = cfg.num_layers;
    if (!policy.schedule_based())
        throw std::invalid_argument(
            "expected_depth: confidence policies have no closed form; measure empirically");
    long long sum = 0;
    for (int i = 1; i <= cfg.n_speech; ++i) {
        const DepthDecision d = decide_depth(policy, Modality::Speech, i, L);
        sum += d.kind == DepthDecision::Kind::ExitAt ? d.layer : L;
    }
    return Rational(sum, cfg.n_speech);
}

// Speedup over always running the full stack, in percent.
inline double speedup_pct(double avg_exit_layer, int L) {
    return (L - avg_exit_layer) / L * 100.0;
}

// Shannon entropy in nats. 0 log 0 is taken as 0.
inline double entropy(const Vec& dist) {
    if (std::abs(dist.sum() - 1.0) > 1e-9)
        throw std::invalid_argument("entropy: distribution does not sum to 1");
    double h = 0.0;
    for (Eigen::Index i = 0; i < dist.size(); ++i) {
        const double p = dist[i];
        if (p < 0) throw std::invalid_argument("entropy: negative probability");
        if (p > 0) h -= p * std::log(p);
    }
    return h;
}

// First probed layer in [min_layer, L-1] whose entropy is at or below the
// threshold; L when none qualifies. The probing loop may have stopped at the
// first hit, so the map need not cover every layer.
inline int confidence_exit_layer(const std::map<int, double>& entropies, double tau,
                                 int min_layer, int L) {
    for (int l = min_layer; l < L; ++l) {
        auto it = entropies.find(l);
        if (it != entropies.end() && it->second <= tau) return l;
    }
    return L;
}

}  // namespace spark
