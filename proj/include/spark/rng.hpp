#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "spark/digest.hpp"

namespace spark {

// Counter-based generator built on splitmix64. Two properties matter:
// the stream for a given key is independent of any other key, and values
// are a pure function of (key, counter), so parameter initialization does
// not depend on construction order.
class CounterRng {
  public:
    explicit CounterRng(uint64_t key) : key_(key) {}

    // Stream keyed by an arbitrary label, e.g. a parameter path.
    static CounterRng keyed(uint64_t seed, std::string_view label) {
        Digest d;
        d.pod(seed).str(label);
        return CounterRng(d.value());
    }

    uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // Uniform in (0, 1); never returns exactly 0 so logs stay finite.
    double next_unit() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller.
    double next_gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_unit();
        double u2 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

  private:
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    uint64_t key_;
    uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace spark
