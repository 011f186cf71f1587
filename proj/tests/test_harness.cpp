#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "spark/harness.hpp"
#include "spark/presets.hpp"
#include "spark/run_config.hpp"

using namespace spark;
namespace fs = std::filesystem;

namespace {

const Backbone& dev_backbone() {
    static Backbone m = build_backbone(preset_config("dev-toy"));
    return m;
}

fs::path temp_path(const std::string& name) {
    static int counter = 0;
    return fs::temp_directory_path() /
           ("spark_harness_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) +
            "_" + name);
}

}  // namespace

TEST(Benchmark, DisableReportsFullDepthEverywhere) {
    const Backbone& m = dev_backbone();
    const HeadSet heads = HeadSet::warm_start(m, {});
    const auto prompts = builtin_prompt_suite(m.config(), 3, 50);
    const auto reports = run_benchmark(m, heads, std::vector<ExitPolicy>{ExitPolicy::disable()},
                                       prompts, SamplingConfig::nucleus(0.7, 0.9, 100), 20);
    ASSERT_EQ(reports.size(), 1u);
    const EfficiencyReport& r = reports[0];
    EXPECT_EQ(r.text_avg(), 8.0);
    EXPECT_EQ(r.speech_avg(), 8.0);
    EXPECT_EQ(r.text_speedup(), 0.0);
    EXPECT_EQ(r.speech_speedup(), 0.0);
    ASSERT_TRUE(r.expected_speech_depth.has_value());
    EXPECT_EQ(*r.expected_speech_depth, Rational(8, 1));
}

TEST(Benchmark, MeasuredEqualsExpectedOnCompleteCycles) {
    const Backbone& m = dev_backbone();
    const ModelConfig& cfg = m.config();
    const HeadSet heads = HeadSet::warm_start(m, {5});
    const auto prompts = builtin_prompt_suite(cfg, 4, 51);
    // 20 = 4 complete cycles of the 1:4 interleave; end-of-response can only
    // land on a cycle boundary, so cycles stay complete either way.
    for (auto variant : {SparkVariant::Even, SparkVariant::Odd, SparkVariant::Triple}) {
        const auto policy = ExitPolicy::spark(variant, 5);
        const auto reports = run_benchmark(m, heads, std::vector<ExitPolicy>{policy}, prompts,
                                           SamplingConfig::nucleus(0.7, 0.9, 7), 20);
        const EfficiencyReport& r = reports[0];
        const Rational expected = expected_depth(policy, cfg);
        ASSERT_TRUE(r.expected_speech_depth.has_value());
        EXPECT_EQ(*r.expected_speech_depth, expected);
        // Exact equality, in integer arithmetic.
        EXPECT_EQ(r.speech.depth_sum * expected.den, expected.num * r.speech.steps);
        EXPECT_EQ(r.text.depth_sum, 8 * r.text.steps);
    }
}

TEST(Benchmark, TruncatedFinalCycleMatchesPatternSum) {
    // When a run ends mid-chunk, the measured depth sum still equals the
    // schedule pattern applied to the realized slots.
    const Backbone& m = dev_backbone();
    const ModelConfig& cfg = m.config();
    const HeadSet heads = HeadSet::warm_start(m, {5});
    const auto policy = ExitPolicy::spark(SparkVariant::Triple, 5);
    const auto prompts = builtin_prompt_suite(cfg, 3, 59);
    for (const auto& prompt : prompts) {
        // 13 = 2 cycles + 3 slots; the final chunk is cut off.
        const GenerationResult r =
            generate(m, heads, policy, prompt, SamplingConfig::nucleus(0.7, 0.9, 29), 13);
        long long want_sum = 0, got_sum = 0, speech_steps = 0;
        InterleaveState state = initial_state(cfg);
        for (const auto& s : r.steps) {
            if (s.modality == Modality::Speech) {
                const auto d = decide_depth(policy, Modality::Speech,
                                            block_local_index(state, cfg), cfg.num_layers);
                want_sum += d.kind == DepthDecision::Kind::ExitAt ? d.layer : cfg.num_layers;
                got_sum += s.exit_layer;
                ++speech_steps;
            }
            state = advance(state, cfg);
        }
        ASSERT_GT(speech_steps, 0);
        EXPECT_EQ(got_sum, want_sum);
    }
}

TEST(Benchmark, ConfidenceAtZeroThresholdNeverExitsEarly) {
    const Backbone& m = dev_backbone();
    const HeadSet heads = HeadSet::warm_start(m, {3, 4, 5, 6, 7});
    const auto prompts = builtin_prompt_suite(m.config(), 2, 52);
    const auto reports =
        run_benchmark(m, heads, std::vector<ExitPolicy>{ExitPolicy::confidence(0.0, 3)},
                      prompts, SamplingConfig::nucleus(0.7, 0.9, 8), 15);
    EXPECT_EQ(reports[0].speech_avg(), 8.0);
    EXPECT_FALSE(reports[0].expected_speech_depth.has_value());
    EXPECT_GT(reports[0].probe_count, 0);
}

TEST(Benchmark, AnnotatesFailingPolicy) {
    const Backbone& m = dev_backbone();
    const HeadSet heads = HeadSet::warm_start(m, {7});  // nothing at layer 5
    const auto prompts = builtin_prompt_suite(m.config(), 1, 53);
    try {
        run_benchmark(m, heads, std::vector<ExitPolicy>{ExitPolicy::spark(SparkVariant::Even, 5)},
                      prompts, SamplingConfig::greedy(), 10);
        FAIL() << "expected failure";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("spark-even-5"), std::string::npos);
    }
}

TEST(OracleStudy, TopLayerAgreementIsExactlyHundred) {
    const Backbone& m = dev_backbone();
    const auto prompts = builtin_prompt_suite(m.config(), 3, 54);
    const auto corpus = collect_distill_corpus(m, prompts, {4, 6},
                                               SamplingConfig::nucleus(0.9, 1.0, 3), 20);
    TrainConfig tc;
    tc.steps = 80;
    const HeadSet heads = train_heads(m, corpus, tc);
    const auto study = run_oracle_study(m, heads, prompts, {4, 6},
                                        SamplingConfig::nucleus(0.7, 0.9, 11), 20);
    bool saw_top = false;
    for (const auto& s : study.layers) {
        ASSERT_TRUE(s.agreement_pct.has_value());
        EXPECT_GE(*s.agreement_pct, 0.0);
        EXPECT_LE(*s.agreement_pct, 100.0);
        if (s.layer == 8) {
            saw_top = true;
            EXPECT_EQ(*s.agreement_pct, 100.0);
        }
    }
    EXPECT_TRUE(saw_top);
    EXPECT_EQ(study.prompt_digest, prompts_digest(prompts));
}

TEST(OracleStudy, ZeroSpeechStepsReportedAsUndefined) {
    const Backbone& m = dev_backbone();
    const auto prompts = builtin_prompt_suite(m.config(), 2, 55);
    const auto corpus =
        collect_distill_corpus(m, prompts, {4}, SamplingConfig::nucleus(0.9, 1.0, 4), 8);
    TrainConfig tc;
    tc.steps = 30;
    const HeadSet heads = train_heads(m, corpus, tc);
    // One generated step on a 1:4 interleave is a text step.
    const auto study =
        run_oracle_study(m, heads, prompts, {4}, SamplingConfig::greedy(), 1);
    for (const auto& s : study.layers) {
        EXPECT_FALSE(s.agreement_pct.has_value());
        EXPECT_EQ(s.n_steps, 0);
    }
    const std::string csv = render_oracle_csv(study);
    EXPECT_NE(csv.find("NA"), std::string::npos);
}

TEST(OracleStudy, UntrainedProbeLayerRejected) {
    const Backbone& m = dev_backbone();
    const HeadSet heads = HeadSet::warm_start(m, {4});
    const auto prompts = builtin_prompt_suite(m.config(), 1, 56);
    EXPECT_THROW(run_oracle_study(m, heads, prompts, {4}, SamplingConfig::greedy(), 10),
                 std::invalid_argument);
}

TEST(Spearman, KnownValues) {
    EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-12);
    EXPECT_NEAR(spearman({1, 2, 3, 4}, {40, 30, 20, 10}), -1.0, 1e-12);
    const double rho = spearman({1, 2, 3, 4, 5}, {3, 1, 4, 2, 5});
    EXPECT_GT(rho, -1.0);
    EXPECT_LT(rho, 1.0);
    // Ties get average ranks.
    EXPECT_NEAR(spearman({1, 1, 2, 2}, {1, 1, 2, 2}), 1.0, 1e-12);
}

TEST(PromptSuite, DeterministicAndWellFormed) {
    const ModelConfig cfg = preset_config("dev-toy");
    const auto a = builtin_prompt_suite(cfg, 64, 2024);
    const auto b = builtin_prompt_suite(cfg, 64, 2024);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.size(), 64u);
    for (const auto& p : a) {
        ASSERT_GE(p.size(), 2u);
        EXPECT_EQ(p.back(), cfg.begin_of_response());
        for (size_t i = 0; i + 1 < p.size(); ++i) EXPECT_TRUE(cfg.is_speech_token(p[i]));
    }
    EXPECT_NE(prompts_digest(a), prompts_digest(builtin_prompt_suite(cfg, 64, 2025)));
}

TEST(EmitReport, CsvSchemaAndDeterminism) {
    const Backbone& m = dev_backbone();
    const HeadSet heads = HeadSet::warm_start(m, {5});
    const auto prompts = builtin_prompt_suite(m.config(), 2, 57);
    const auto run = [&] {
        return run_benchmark(
            m, heads,
            std::vector<ExitPolicy>{ExitPolicy::disable(), ExitPolicy::spark(SparkVariant::Even, 5)},
            prompts, SamplingConfig::nucleus(0.7, 0.9, 5), 20);
    };
    const std::string csv_a = render_reports_csv(run());
    const std::string csv_b = render_reports_csv(run());
    EXPECT_EQ(csv_a, csv_b);
    EXPECT_EQ(csv_a.substr(0, csv_a.find('\n')),
              "policy,modality,avg_exit_layer,speedup_pct,seq_depth,layer_computations,probe_count");

    const fs::path out = temp_path("report.csv");
    emit_report(run(), ReportFormat::Csv, out);
    std::ifstream is(out);
    std::string content((std::istreambuf_iterator<char>(is)), {});
    EXPECT_EQ(content, csv_a);
    // Write-once: the same path cannot be reused.
    EXPECT_THROW(emit_report(run(), ReportFormat::Csv, out), std::runtime_error);
    fs::remove(out);
}

TEST(EmitReport, JsonRoundTripsThroughConfigLoader) {
    const Backbone& m = dev_backbone();
    const HeadSet heads = HeadSet::warm_start(m, {5});
    const auto prompts = builtin_prompt_suite(m.config(), 1, 58);
    const auto reports =
        run_benchmark(m, heads, std::vector<ExitPolicy>{ExitPolicy::spark(SparkVariant::Even, 5)},
                      prompts, SamplingConfig::nucleus(0.7, 0.9, 5), 10);

    RunConfig rc;
    rc.model = m.config();
    rc.policies = {ExitPolicy::spark(SparkVariant::Even, 5)};
    rc.sampling = SamplingConfig::nucleus(0.7, 0.9, 5);
    const std::string rendered = render_reports_json(reports, rc.to_json(), json::object());
    const json doc = json::parse(rendered);
    const RunConfig back = RunConfig::from_json(doc.at("run_config"));
    EXPECT_EQ(back.model, rc.model);
    EXPECT_EQ(back.policies.at(0).to_json(), rc.policies.at(0).to_json());
    EXPECT_EQ(back.sampling.to_json(), rc.sampling.to_json());
    EXPECT_EQ(doc.at("reports").size(), 1u);
    EXPECT_EQ(doc.at("reports")[0].at("expected_speech_depth"), "13/2");
}

TEST(EmitReport, RejectsEmpty) {
    EXPECT_THROW(emit_report({}, ReportFormat::Csv, temp_path("x.csv")), std::invalid_argument);
}

TEST(TrainingCurve, CsvSchema) {
    const Backbone& m = dev_backbone();
    const auto prompts = builtin_prompt_suite(m.config(), 1, 59);
    const auto corpus =
        collect_distill_corpus(m, prompts, {4}, SamplingConfig::nucleus(0.9, 1.0, 2), 10);
    TrainConfig tc;
    tc.steps = 50;
    tc.log_every = 25;
    const HeadSet heads = train_heads(m, corpus, tc);
    const std::string csv = render_training_curve_csv(heads);
    std::istringstream is(csv);
    std::string line;
    ASSERT_TRUE(std::getline(is, line));
    EXPECT_EQ(line, "step,layer,loss");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, 2);  // steps 25 and 50 for the single trained layer
}
