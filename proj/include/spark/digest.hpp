#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace spark {

// FNV-1a, 64-bit. Used for content digests of weights, configs and corpora.
// Not cryptographic; collision resistance is not a requirement here.
inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ull;

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
    return fnv1a64(s.data(), s.size(), h);
}

// Incremental digest over heterogeneous content.
class Digest {
  public:
    Digest& bytes(const void* data, size_t len) {
        state_ = fnv1a64(data, len, state_);
        return *this;
    }
    Digest& str(std::string_view s) { return bytes(s.data(), s.size()); }
    template <typename T>
    Digest& pod(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        return bytes(&v, sizeof(v));
    }
    uint64_t value() const { return state_; }
    std::string hex() const { return to_hex(state_); }

    static std::string to_hex(uint64_t v) {
        static const char* digits = "0123456789abcdef";
        std::string out(16, '0');
        for (int i = 15; i >= 0; --i) {
            out[i] = digits[v & 0xf];
            v >>= 4;
        }
        return out;
    }

  private:
    uint64_t state_ = kFnvOffset;
};

}  // namespace spark
