#pragma once

#include <string>
#include <vector>

#include "spark/config.hpp"

namespace spark {

enum class Modality { Text, Speech };

inline const char* modality_name(Modality m) {
    return m == Modality::Text ? "text" : "speech";
}

// Position within the fixed text/speech cycle. Each generated step occupies
// one slot; the cycle runs n_text text slots followed by n_speech speech
// slots and repeats.
struct InterleaveState {
    int cycle_position = 1;    // 1 .. n_text + n_speech
    int chunk_local_index = 0; // 1-based within the speech chunk, 0 in text
    long cycle_count = 0;

    bool operator==(const InterleaveState&) const = default;
};

inline Modality modality_of(const InterleaveState& s, const ModelConfig& cfg) {
    return s.cycle_position <= cfg.n_text ? Modality::Text : Modality::Speech;
}

// 1-based index within the current modality block; schedules are applied to
// this index. Equals chunk_local_index for speech and cycle_position for text.
inline int block_local_index(const InterleaveState& s, const ModelConfig& cfg) {
    return modality_of(s, cfg) == Modality::Speech ? s.chunk_local_index
                                                   : s.cycle_position;
}

inline InterleaveState initial_state(const ModelConfig&) { return InterleaveState{}; }

inline InterleaveState advance(const InterleaveState& s, const ModelConfig& cfg) {
    InterleaveState n = s;
    if (s.cycle_position == cfg.cycle_len()) {
        n.cycle_position = 1;
        n.cycle_count = s.cycle_count + 1;
    } else {
        n.cycle_position = s.cycle_position + 1;
    }
    n.chunk_local_index = n.cycle_position > cfg.n_text ? n.cycle_position - cfg.n_text : 0;
    return n;
}

// Admissible token ids for the current slot: the sub-vocabulary of the slot's
// modality, plus end-of-response at the final speech position of a cycle.
// Begin-of-response is never generated.
inline std::vector<uint8_t> modality_mask(const InterleaveState& s, const ModelConfig& cfg) {
    std::vector<uint8_t> mask(cfg.vocab_size(), 0);
    if (modality_of(s, cfg) == Modality::Text) {
        for (int i = 0; i < cfg.text_vocab_size; ++i) mask[i] = 1;
    } else {
        for (int i = cfg.text_vocab_size; i < cfg.begin_of_response(); ++i) mask[i] = 1;
        if (s.cycle_position == cfg.cycle_len()) mask[cfg.end_of_response()] = 1;
    }
    return mask;
}

}  // namespace spark
