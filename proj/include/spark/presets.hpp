#pragma once

#include <stdexcept>
#include <string>

#include "spark/config.hpp"

namespace spark {

// Shipped toy shapes. "step-toy" mirrors a 28-layer 1:4 interleave and
// "glm-toy" a 40-layer 13:26 interleave, both at reduced width so the depth
// arithmetic of the corresponding full-scale models can be run verbatim.
// "dev-toy" is the small default used by the test suite.
inline ModelConfig preset_config(const std::string& name) {
    ModelConfig cfg;
    if (name == "dev-toy") {
        cfg.num_layers = 8;
        cfg.hidden_dim = 64;
        cfg.num_heads = 4;
        cfg.text_vocab_size = 32;
        cfg.speech_vocab_size = 128;
        cfg.n_text = 1;
        cfg.n_speech = 4;
        cfg.max_seq_len = 256;
        cfg.init_seed = 7;
    } else if (name == "step-toy") {
        cfg.num_layers = 28;
        cfg.hidden_dim = 32;
        cfg.num_heads = 4;
        cfg.text_vocab_size = 32;
        cfg.speech_vocab_size = 128;
        cfg.n_text = 1;
        cfg.n_speech = 4;
        cfg.max_seq_len = 512;
        cfg.init_seed = 1001;
    } else if (name == "glm-toy") {
        cfg.num_layers = 40;
        cfg.hidden_dim = 32;
        cfg.num_heads = 4;
        cfg.text_vocab_size = 32;
        cfg.speech_vocab_size = 128;
        cfg.n_text = 13;
        cfg.n_speech = 26;
        cfg.max_seq_len = 512;
        cfg.init_seed = 2001;
    } else {
        throw std::invalid_argument("unknown preset: " + name +
                                    " (available: dev-toy, step-toy, glm-toy)");
    }
    cfg.validate();
    return cfg;
}

}  // namespace spark
