#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "spark/digest.hpp"

namespace spark {

using json = nlohmann::json;

inline constexpr const char* kArtifactVersion = "0.1.0";

// Architectural and interleave hyperparameters of the toy decoder.
//
// Token id layout over the full vocabulary:
//   [0, text_vocab_size)                          text tokens
//   [text_vocab_size, text+speech)                speech tokens
//   text+speech                                   begin-of-response
//   text+speech+1                                 end-of-response
struct ModelConfig {
    int num_layers = 8;
    int hidden_dim = 64;
    int num_heads = 4;
    int text_vocab_size = 32;
    int speech_vocab_size = 128;
    int n_text = 1;
    int n_speech = 4;
    int max_seq_len = 256;
    uint64_t init_seed = 7;

    static constexpr int kNumControlTokens = 2;

    int vocab_size() const {
        return text_vocab_size + speech_vocab_size + kNumControlTokens;
    }
    int head_dim() const { return hidden_dim / num_heads; }
    int cycle_len() const { return n_text + n_speech; }
    int begin_of_response() const { return text_vocab_size + speech_vocab_size; }
    int end_of_response() const { return begin_of_response() + 1; }
    bool is_text_token(int id) const { return id >= 0 && id < text_vocab_size; }
    bool is_speech_token(int id) const {
        return id >= text_vocab_size && id < begin_of_response();
    }

    void validate() const {
        auto fail = [](const std::string& what) {
            throw std::invalid_argument("invalid model config: " + what);
        };
        if (num_layers < 2) fail("num_layers must be >= 2");
        if (hidden_dim < 1) fail("hidden_dim must be positive");
        if (num_heads < 1) fail("num_heads must be positive");
        if (hidden_dim % num_heads != 0) fail("hidden_dim must be divisible by num_heads");
        if ((hidden_dim / num_heads) % 2 != 0)
            fail("head dimension must be even for rotary position encoding");
        if (text_vocab_size < 1) fail("text_vocab_size must be positive");
        if (speech_vocab_size < 1) fail("speech_vocab_size must be positive");
        if (n_text < 1) fail("n_text must be >= 1");
        if (n_speech < 1) fail("n_speech must be >= 1");
        if (max_seq_len < 1) fail("max_seq_len must be positive");
    }

    json to_json() const {
        return json{{"num_layers", num_layers},
                    {"hidden_dim", hidden_dim},
                    {"num_heads", num_heads},
                    {"text_vocab_size", text_vocab_size},
                    {"speech_vocab_size", speech_vocab_size},
                    {"n_text", n_text},
                    {"n_speech", n_speech},
                    {"max_seq_len", max_seq_len},
                    {"init_seed", init_seed}};
    }

    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.num_layers = j.at("num_layers").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.text_vocab_size = j.at("text_vocab_size").get<int>();
        c.speech_vocab_size = j.at("speech_vocab_size").get<int>();
        c.n_text = j.at("n_text").get<int>();
        c.n_speech = j.at("n_speech").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.init_seed = j.at("init_seed").get<uint64_t>();
        c.validate();
        return c;
    }

    // nlohmann::json keeps object keys sorted, so dump() is canonical and the
    // digest is stable under key permutations of the source document.
    std::string digest() const { return Digest().str(to_json().dump()).hex(); }

    bool operator==(const ModelConfig&) const = default;
};

// Canonical digest of any JSON document (key order independent).
inline std::string json_digest(const json& j) {
    return Digest().str(j.dump()).hex();
}

}  // namespace spark
