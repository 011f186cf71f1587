#include <gtest/gtest.h>

#include "spark/backbone.hpp"
#include "spark/presets.hpp"
#include "spark/rng.hpp"

using namespace spark;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.num_layers = 4;
    cfg.hidden_dim = 32;
    cfg.num_heads = 4;
    cfg.text_vocab_size = 16;
    cfg.speech_vocab_size = 64;
    cfg.max_seq_len = 64;
    cfg.init_seed = 7;
    return cfg;
}

// Independent oracle: a plain full-depth teacher-forced pass over the same
// tokens in a fresh cache.
KVCache full_depth_cache(const Backbone& m, const std::vector<int>& tokens) {
    KVCache cache(m.config());
    for (size_t i = 0; i < tokens.size(); ++i)
        m.forward_step(cache, tokens[i], static_cast<int>(i), m.config().num_layers);
    return cache;
}

double max_abs_cache_diff(const KVCache& a, const KVCache& b, int L) {
    EXPECT_EQ(a.size(), b.size());
    double worst = 0.0;
    for (int l = 1; l <= L; ++l) {
        for (int t = 0; t < a.size(); ++t) {
            worst = std::max(worst, (a.key(l, t) - b.key(l, t)).cwiseAbs().maxCoeff());
            worst = std::max(worst, (a.value(l, t) - b.value(l, t)).cwiseAbs().maxCoeff());
        }
    }
    return worst;
}

// Teacher-forced decode with a per-position depth pattern, backfilling
// whenever a step needs more depth than some pending position has.
KVCache scheduled_cache(const Backbone& m, const std::vector<int>& tokens,
                        const std::vector<int>& depths) {
    const int L = m.config().num_layers;
    KVCache cache(m.config());
    for (size_t i = 0; i < tokens.size(); ++i) {
        int floor = L;
        for (const auto& p : cache.pending()) floor = std::min(floor, p.exit_layer);
        if (floor < depths[i]) m.backfill_pending(cache, static_cast<int>(i));
        m.forward_step(cache, tokens[i], static_cast<int>(i), depths[i]);
    }
    m.backfill_pending(cache, static_cast<int>(tokens.size()));
    return cache;
}

std::vector<int> random_tokens(const ModelConfig& cfg, int n, uint64_t seed) {
    CounterRng rng(seed);
    std::vector<int> out;
    for (int i = 0; i < n; ++i)
        out.push_back(static_cast<int>(rng.next_below(cfg.vocab_size())));
    return out;
}

}  // namespace

TEST(BuildBackbone, ShapesAndDeterminism) {
    const ModelConfig cfg = tiny_config();
    Backbone a = build_backbone(cfg);
    // 16 + 64 + 2 control tokens = 82 rows.
    bool saw_embedding = false;
    for (const auto& p : a.params()) {
        if (p.path == "embedding") {
            saw_embedding = true;
            EXPECT_EQ(p.rows, 82);
            EXPECT_EQ(p.cols, 32);
        }
    }
    EXPECT_TRUE(saw_embedding);
    EXPECT_EQ(a.params().size(), 3u + 8u * 4u);  // embedding, unembed w/b, 8 per block

    Backbone b = build_backbone(cfg);
    EXPECT_EQ(a.digest(), b.digest());

    ModelConfig other = cfg;
    other.init_seed = 8;
    EXPECT_NE(build_backbone(other).digest(), a.digest());
}

TEST(BuildBackbone, MirrorsTargetDepthRatio) {
    ModelConfig cfg = preset_config("step-toy");
    cfg.init_seed = 1;
    const Backbone m = build_backbone(cfg);
    EXPECT_EQ(m.config().num_layers, 28);
    EXPECT_EQ(m.config().n_text, 1);
    EXPECT_EQ(m.config().n_speech, 4);
    EXPECT_FALSE(m.digest().empty());
}

TEST(BuildBackbone, RejectsInvalidConfig) {
    ModelConfig cfg = tiny_config();
    cfg.num_heads = 5;  // 32 % 5 != 0
    EXPECT_THROW(build_backbone(cfg), std::invalid_argument);
}

TEST(ForwardStep, FullDepthBaseCase) {
    const Backbone m = build_backbone(tiny_config());
    KVCache cache(m.config());
    const auto hiddens = m.forward_step(cache, 3, 0, 4);
    EXPECT_EQ(hiddens.size(), 4u);
    for (const auto& h : hiddens) EXPECT_EQ(h.size(), 32);
    EXPECT_TRUE(cache.pending().empty());
    EXPECT_EQ(cache.filled_layers(0), 4);
}

TEST(ForwardStep, EarlyExitRecordsPending) {
    const Backbone m = build_backbone(tiny_config());
    KVCache cache(m.config());
    const auto hiddens = m.forward_step(cache, 3, 0, 2);
    EXPECT_EQ(hiddens.size(), 2u);
    ASSERT_EQ(cache.pending().size(), 1u);
    const PendingEntry& p = cache.pending().front();
    EXPECT_EQ(p.position, 0);
    EXPECT_EQ(p.exit_layer, 2);
    EXPECT_EQ(p.hidden, hiddens.back());
    EXPECT_EQ(cache.filled_layers(0), 2);
    EXPECT_TRUE(cache.complete(0, 2));
    EXPECT_FALSE(cache.complete(0, 3));
}

TEST(ForwardStep, DeterministicOnClonedCaches) {
    const Backbone m = build_backbone(tiny_config());
    KVCache cache(m.config());
    m.forward_step(cache, 5, 0, 4);
    KVCache c1 = cache, c2 = cache;
    const auto h1 = m.forward_step(c1, 9, 1, 4);
    const auto h2 = m.forward_step(c2, 9, 1, 4);
    for (size_t i = 0; i < h1.size(); ++i) EXPECT_EQ(h1[i], h2[i]);
}

TEST(ForwardStep, IncompletePriorPositionIsSchedulerBug) {
    const Backbone m = build_backbone(tiny_config());
    KVCache cache(m.config());
    m.forward_step(cache, 1, 0, 2);  // position 0 pending at layer 2
    EXPECT_THROW(m.forward_step(cache, 2, 1, 4), std::logic_error);
    // Depth within the pending floor is fine.
    EXPECT_NO_THROW(m.forward_step(cache, 2, 1, 2));
}

TEST(ForwardStep, PositionOverflow) {
    ModelConfig cfg = tiny_config();
    cfg.max_seq_len = 2;
    const Backbone m = build_backbone(cfg);
    KVCache cache(cfg);
    m.forward_step(cache, 0, 0, 4);
    m.forward_step(cache, 1, 1, 4);
    EXPECT_THROW(m.forward_step(cache, 2, 2, 4), std::invalid_argument);
}

TEST(Backfill, EmptyPendingIsNoOp) {
    const Backbone m = build_backbone(tiny_config());
    const auto tokens = random_tokens(m.config(), 5, 11);
    KVCache cache = full_depth_cache(m, tokens);
    const KVCache before = cache;
    m.backfill_pending(cache, 5);
    EXPECT_EQ(max_abs_cache_diff(before, cache, 4), 0.0);
}

TEST(Backfill, SinglePendingMatchesOracle) {
    const Backbone m = build_backbone(tiny_config());
    const auto tokens = random_tokens(m.config(), 6, 21);
    // Exit at layer 2 for position 3, full depth elsewhere.
    std::vector<int> depths(tokens.size(), 4);
    depths[3] = 2;
    const KVCache got = scheduled_cache(m, tokens, depths);
    const KVCache want = full_depth_cache(m, tokens);
    EXPECT_TRUE(got.fully_complete());
    EXPECT_LE(max_abs_cache_diff(got, want, 4), 1e-5);
}

TEST(Backfill, ConsecutivePendingPositionsMatchOracle) {
    // Two back-to-back exits: the later backfilled position must attend to
    // the earlier one's freshly written entries at each upper layer.
    const Backbone m = build_backbone(tiny_config());
    const auto tokens = random_tokens(m.config(), 8, 31);
    std::vector<int> depths(tokens.size(), 4);
    depths[3] = 2;
    depths[4] = 2;
    const KVCache got = scheduled_cache(m, tokens, depths);
    const KVCache want = full_depth_cache(m, tokens);
    EXPECT_TRUE(got.fully_complete());
    EXPECT_LE(max_abs_cache_diff(got, want, 4), 1e-5);
}

TEST(Backfill, RandomizedCacheParity) {
    const Backbone m = build_backbone(preset_config("dev-toy"));
    const ModelConfig& cfg = m.config();
    CounterRng rng(5150);
    for (int run = 0; run < 10; ++run) {
        const int n = 8 + static_cast<int>(rng.next_below(40));
        const auto tokens = random_tokens(cfg, n, rng.next_u64());
        std::vector<int> depths(n);
        const int exit_layer = 2 + static_cast<int>(rng.next_below(5));
        for (int i = 0; i < n; ++i)
            depths[i] = rng.next_unit() < 0.5 ? cfg.num_layers : exit_layer;
        const KVCache got = scheduled_cache(m, tokens, depths);
        const KVCache want = full_depth_cache(m, tokens);
        EXPECT_TRUE(got.fully_complete());
        EXPECT_LE(max_abs_cache_diff(got, want, cfg.num_layers), 1e-5);
    }
}

TEST(Backfill, ForwardMonotonicity) {
    // Stopping at layer a and resuming to b equals a direct pass to b.
    const Backbone m = build_backbone(tiny_config());
    const auto tokens = random_tokens(m.config(), 4, 41);
    KVCache base(m.config());
    for (int i = 0; i < 3; ++i) m.forward_step(base, tokens[i], i, 4);

    KVCache stopped = base;
    const auto ha = m.forward_step(stopped, tokens[3], 3, 2);
    KVCache resumed = stopped;
    resumed.take_pending();
    const Vec hb = m.resume_layers(resumed, 3, ha.back(), 3, 4);

    KVCache direct = base;
    const auto hd = m.forward_step(direct, tokens[3], 3, 4);
    EXPECT_EQ(hb, hd.back());
    EXPECT_EQ(max_abs_cache_diff(resumed, direct, 4), 0.0);
}

TEST(Backfill, RejectsPendingAtOrAfterCurrentPosition) {
    const Backbone m = build_backbone(tiny_config());
    KVCache cache(m.config());
    m.forward_step(cache, 1, 0, 2);
    EXPECT_THROW(m.backfill_pending(cache, 0), std::logic_error);
}

TEST(Backfill, RejectsMissingStoredHidden) {
    const Backbone m = build_backbone(tiny_config());
    KVCache cache(m.config());
    m.forward_step(cache, 1, 0, 4);
    cache.add_pending(0, 2, Vec());
    EXPECT_THROW(m.backfill_pending(cache, 1), std::logic_error);
}

TEST(KVCache, OrderingContracts) {
    const ModelConfig cfg = tiny_config();
    KVCache cache(cfg);
    EXPECT_THROW(cache.begin_position(1), std::logic_error);
    cache.begin_position(0);
    const Vec k = Vec::Zero(cfg.hidden_dim), v = Vec::Zero(cfg.hidden_dim);
    EXPECT_THROW(cache.write(2, 0, k, v), std::logic_error);
    cache.write(1, 0, k, v);
    EXPECT_THROW(cache.write(1, 0, k, v), std::logic_error);
    EXPECT_TRUE(cache.complete(0, 1));
    EXPECT_FALSE(cache.complete(0, 2));
    EXPECT_FALSE(cache.complete(1, 1));
}

TEST(Backbone, UnembeddingIsAffine) {
    const Backbone m = build_backbone(tiny_config());
    const Vec h = Vec::Zero(m.config().hidden_dim);
    const Vec dist = m.next_token_distribution(h);
    // Zero hidden: softmax of the bias alone.
    EXPECT_TRUE(dist.isApprox(softmax(m.unembed_bias()), 1e-12));
    EXPECT_NEAR(dist.sum(), 1.0, 1e-9);
}
