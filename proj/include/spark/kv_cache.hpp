#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "spark/config.hpp"
#include "spark/linalg.hpp"

namespace spark {

// A position whose forward pass stopped below the last layer. `hidden` is the
// residual stream at `exit_layer`, kept so the remaining layers can be
// computed later.
struct PendingEntry {
    int position = 0;
    int exit_layer = 0;  // layers 1..exit_layer have K/V entries
    Vec hidden;
};

// Per-(layer, position) key/value storage for one generation session.
//
// Completeness is always a layer prefix: a position that ran to layer l has
// K/V for layers 1..l and nothing above, so one counter per position encodes
// the full completeness map. Positions are append-only and gap-free.
class KVCache {
  public:
    KVCache(int num_layers, int num_heads, int head_dim, int max_seq_len)
        : num_layers_(num_layers),
          num_heads_(num_heads),
          head_dim_(head_dim),
          max_seq_len_(max_seq_len),
          keys_(num_layers),
          values_(num_layers) {
        const int d = num_heads * head_dim;
        for (int l = 0; l < num_layers; ++l) {
            keys_[l].setZero(d, max_seq_len);
            values_[l].setZero(d, max_seq_len);
        }
    }

    explicit KVCache(const ModelConfig& cfg)
        : KVCache(cfg.num_layers, cfg.num_heads, cfg.head_dim(), cfg.max_seq_len) {}

    int num_layers() const { return num_layers_; }
    int size() const { return static_cast<int>(filled_layers_.size()); }
    int next_position() const { return size(); }

    // True iff layers 1..layer of `pos` hold valid K/V entries.
    bool complete(int pos, int layer) const {
        return pos >= 0 && pos < size() && filled_layers_[pos] >= layer;
    }

    int filled_layers(int pos) const {
        check_pos(pos);
        return filled_layers_[pos];
    }

    // Opens the next position. Positions must be strictly increasing, gap-free
    // and below max_seq_len.
    void begin_position(int pos) {
        if (pos != next_position())
            throw std::logic_error("KVCache: position " + std::to_string(pos) +
                                   " out of order (next is " +
                                   std::to_string(next_position()) + ")");
        if (pos >= max_seq_len_)
            throw std::invalid_argument("KVCache: position overflow at " +
                                        std::to_string(pos) + " (max_seq_len " +
                                        std::to_string(max_seq_len_) + ")");
        filled_layers_.push_back(0);
    }

    // Writes the K/V entry of (layer, pos). Layers fill bottom-up, one at a
    // time; writing out of order is a scheduler bug.
    void write(int layer, int pos, const Vec& k, const Vec& v) {
        check_pos(pos);
        if (layer != filled_layers_[pos] + 1)
            throw std::logic_error("KVCache: layer " + std::to_string(layer) +
                                   " written out of order at position " +
                                   std::to_string(pos) + " (filled " +
                                   std::to_string(filled_layers_[pos]) + ")");
        keys_[layer - 1].col(pos) = k;
        values_[layer - 1].col(pos) = v;
        filled_layers_[pos] = layer;
    }

    const Mat& key_plane(int layer) const { return keys_[layer - 1]; }
    const Mat& value_plane(int layer) const { return values_[layer - 1]; }

    Vec key(int layer, int pos) const {
        check_pos(pos);
        return keys_[layer - 1].col(pos);
    }
    Vec value(int layer, int pos) const {
        check_pos(pos);
        return values_[layer - 1].col(pos);
    }

    void add_pending(int position, int exit_layer, Vec hidden) {
        pending_.push_back(PendingEntry{position, exit_layer, std::move(hidden)});
    }
    const std::vector<PendingEntry>& pending() const { return pending_; }
    std::vector<PendingEntry> take_pending() {
        auto out = std::move(pending_);
        pending_.clear();
        return out;
    }

    // All occupied positions complete to the top layer, nothing pending.
    bool fully_complete() const {
        if (!pending_.empty()) return false;
        for (int f : filled_layers_)
            if (f != num_layers_) return false;
        return true;
    }

  private:
    void check_pos(int pos) const {
        if (pos < 0 || pos >= size())
            throw std::logic_error("KVCache: unoccupied position " + std::to_string(pos));
    }

    int num_layers_;
    int num_heads_;
    int head_dim_;
    int max_seq_len_;
    std::vector<Mat> keys_;    // [layer] of (d x max_seq_len), column = position
    std::vector<Mat> values_;
    std::vector<int> filled_layers_;  // per position
    std::vector<PendingEntry> pending_;
};

}  // namespace spark
