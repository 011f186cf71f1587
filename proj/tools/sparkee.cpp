// Command-line entry point for the early-exit decoding engine.
//
// Subcommands: build-model, train-heads, generate, oracle-study, bench,
// report. All randomness flows from config seeds; repeated runs with the
// same config produce byte-identical outputs. Output files are write-once.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spark/engine.hpp"
#include "spark/errors.hpp"
#include "spark/harness.hpp"
#include "spark/run_config.hpp"
#include "spark/serialize.hpp"

namespace fs = std::filesystem;
using namespace spark;

namespace {

// Exit codes: 0 ok, 2 usage, 3 malformed config, 4 missing artifact,
// 5 internal error.
enum ExitCode { kOk = 0, kUsage = 2, kConfigError = 3, kMissingArtifact = 4, kInternal = 5 };

struct CommonFlags {
    std::string config_path;
    std::string preset;
    std::string model_path;
    std::vector<std::string> policies;
    std::string sampling;
    std::optional<uint64_t> seed;
    std::string heads_path;
    std::optional<int> prompt_count;
    std::string prompt_inline;
    std::string prompts_file;
    std::optional<int> max_new_tokens;
    std::string out;
};

void add_model_flags(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "run config JSON file");
    cmd->add_option("--preset", f.preset, "model preset: dev-toy, step-toy, glm-toy");
    cmd->add_option("--model", f.model_path, "weight container built by build-model");
}

void add_run_flags(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--policy", f.policies,
                    "exit policy, e.g. disable, fixed-25, spark-even-22, conf-0.5-26; "
                    "repeatable; scope with @text/@speech");
    cmd->add_option("--sampling", f.sampling, "greedy or nucleus-<temp>-<top_p>");
    cmd->add_option("--seed", f.seed, "sampling seed");
    cmd->add_option("--heads", f.heads_path, "weight container holding trained heads");
    cmd->add_option("--prompts", f.prompt_count, "number of builtin suite prompts");
    cmd->add_option("--prompt", f.prompt_inline, "single inline prompt: comma-separated ids");
    cmd->add_option("--prompts-file", f.prompts_file, "JSON file with an array of prompts");
    cmd->add_option("--max-new-tokens", f.max_new_tokens, "generation cap per prompt");
}

std::vector<int> parse_id_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

fs::path apply_output_env(fs::path p) {
    if (const char* dir = std::getenv("SPARK_EE_OUTPUT_DIR"); dir && *dir && p.is_relative())
        return fs::path(dir) / p;
    return p;
}

// Builds the effective run config from --config plus flag overrides, keeping
// a provenance note for every field a flag replaced.
RunConfig resolve_run_config(const CommonFlags& f) {
    RunConfig rc;
    if (!f.config_path.empty()) {
        rc = RunConfig::from_file(f.config_path);
    } else if (!f.preset.empty()) {
        rc.preset = f.preset;
        rc.model = preset_config(f.preset);
    } else if (!f.model_path.empty()) {
        rc.model = load_backbone(f.model_path).config();
    } else {
        throw std::invalid_argument("one of --config, --preset or --model is required");
    }
    auto note = [&rc](const std::string& field, const std::string& value) {
        rc.overrides.push_back(field + "=" + value + " (flag)");
    };
    if (!f.preset.empty() && !f.config_path.empty()) {
        rc.preset = f.preset;
        rc.model = preset_config(f.preset);
        note("preset", f.preset);
    }
    if (!f.policies.empty()) {
        rc.policies.clear();
        std::string joined;
        for (const auto& p : f.policies) {
            rc.policies.push_back(parse_policy_shorthand(p));
            joined += (joined.empty() ? "" : "+") + p;
        }
        note("policy", joined);
    }
    if (!f.sampling.empty()) {
        rc.sampling = parse_sampling_shorthand(f.sampling, rc.sampling.rng_seed);
        note("sampling", f.sampling);
    }
    if (f.seed) {
        rc.sampling.rng_seed = *f.seed;
        note("seed", std::to_string(*f.seed));
    }
    if (!f.heads_path.empty()) {
        rc.heads.kind = HeadsSpec::Kind::Load;
        rc.heads.path = f.heads_path;
        note("heads", f.heads_path);
    }
    if (f.prompt_count) {
        rc.prompts.kind = PromptsSpec::Kind::Builtin;
        rc.prompts.count = *f.prompt_count;
        note("prompts", std::to_string(*f.prompt_count));
    }
    if (!f.prompts_file.empty()) {
        rc.prompts.kind = PromptsSpec::Kind::File;
        rc.prompts.path = f.prompts_file;
        note("prompts_file", f.prompts_file);
    }
    if (!f.prompt_inline.empty()) {
        rc.prompts.kind = PromptsSpec::Kind::Inline;
        rc.prompts.inline_prompts = {parse_id_list(f.prompt_inline)};
        note("prompt", f.prompt_inline);
    }
    if (f.max_new_tokens) {
        rc.max_new_tokens = *f.max_new_tokens;
        note("max_new_tokens", std::to_string(*f.max_new_tokens));
    }
    for (const auto& p : rc.policies) p.validate(rc.model.num_layers);
    return rc;
}

Backbone resolve_backbone(const CommonFlags& f, const RunConfig& rc) {
    if (!f.model_path.empty()) {
        Backbone m = load_backbone(f.model_path);
        if (!(m.config() == rc.model))
            throw std::invalid_argument("--model container disagrees with the configured model");
        return m;
    }
    return build_backbone(rc.model);
}

// Layers any configured policy can select below the top.
std::set<int> exit_layers_needed(const std::vector<ExitPolicy>& policies, int L) {
    std::set<int> out;
    for (const auto& p : policies) {
        if (p.applies_to.empty()) continue;
        if (p.kind == ExitPolicy::Kind::FixedLayer || p.kind == ExitPolicy::Kind::Spark)
            out.insert(p.exit_layer);
        if (p.kind == ExitPolicy::Kind::Confidence)
            for (int l = p.min_layer; l < L; ++l) out.insert(l);
    }
    return out;
}

HeadSet resolve_heads(const RunConfig& rc, const Backbone& backbone,
                      const std::set<int>& extra_layers = {}) {
    switch (rc.heads.kind) {
        case HeadsSpec::Kind::Load:
            return load_heads(rc.heads.path, backbone);
        case HeadsSpec::Kind::Train: {
            std::set<int> layers = rc.heads.layers;
            layers.insert(extra_layers.begin(), extra_layers.end());
            const auto prompts =
                builtin_prompt_suite(backbone.config(), rc.heads.corpus_prompts,
                                     rc.prompts.seed);
            const auto corpus = collect_distill_corpus(backbone, prompts, layers, rc.sampling,
                                                       rc.heads.corpus_max_new_tokens);
            return train_heads(backbone, corpus, rc.heads.train);
        }
        case HeadsSpec::Kind::WarmStart: {
            std::set<int> layers = exit_layers_needed(rc.policies, rc.model.num_layers);
            layers.insert(extra_layers.begin(), extra_layers.end());
            return HeadSet::warm_start(backbone, layers);
        }
    }
    throw std::logic_error("unreachable");
}

int cmd_build_model(const CommonFlags& f) {
    RunConfig rc = resolve_run_config(f);
    Backbone m = build_backbone(rc.model);
    const fs::path out = apply_output_env(f.out.empty() ? "model.bin" : f.out);
    save_container(out, m);
    std::cout << json{{"model_digest", m.digest()},
                      {"config_digest", rc.model.digest()},
                      {"path", out.string()}}
                     .dump()
              << "\n";
    return kOk;
}

struct TrainFlags {
    std::string layers;
    std::optional<long long> steps;
    std::optional<double> lr;
    std::optional<int> batch;
    std::optional<uint64_t> train_seed;
    std::optional<int> corpus_prompts;
    std::optional<int> corpus_tokens;
    std::string curve_path;
};

int cmd_train_heads(const CommonFlags& f, const TrainFlags& tf) {
    RunConfig rc = resolve_run_config(f);
    if (!tf.layers.empty()) {
        rc.heads.kind = HeadsSpec::Kind::Train;
        rc.heads.layers.clear();
        for (int l : parse_id_list(tf.layers)) rc.heads.layers.insert(l);
    }
    if (rc.heads.kind != HeadsSpec::Kind::Train || rc.heads.layers.empty())
        throw std::invalid_argument("train-heads needs --layers or a heads.train config");
    if (tf.steps) rc.heads.train.steps = *tf.steps;
    if (tf.lr) rc.heads.train.learning_rate = *tf.lr;
    if (tf.batch) rc.heads.train.batch_size = *tf.batch;
    if (tf.train_seed) rc.heads.train.seed = *tf.train_seed;
    if (tf.corpus_prompts) rc.heads.corpus_prompts = *tf.corpus_prompts;
    if (tf.corpus_tokens) rc.heads.corpus_max_new_tokens = *tf.corpus_tokens;

    Backbone m = resolve_backbone(f, rc);
    const std::string digest_before = m.digest();
    HeadSet heads = resolve_heads(rc, m);
    if (m.compute_digest() != digest_before)
        throw std::logic_error("backbone changed during head training");

    const fs::path out = apply_output_env(f.out.empty() ? "heads.bin" : f.out);
    save_container(out, m, &heads);
    if (!tf.curve_path.empty())
        write_file_once(apply_output_env(tf.curve_path), render_training_curve_csv(heads));
    std::cout << json{{"model_digest", m.digest()},
                      {"heads_digest", heads.compute_digest()},
                      {"corpus_digest", heads.corpus_digest},
                      {"final_loss", heads.final_loss},
                      {"path", out.string()}}
                     .dump()
              << "\n";
    return kOk;
}

int cmd_generate(const CommonFlags& f) {
    RunConfig rc = resolve_run_config(f);
    Backbone m = resolve_backbone(f, rc);
    HeadSet heads = resolve_heads(rc, m);
    const auto prompts = rc.prompts.resolve(rc.model);

    std::ostringstream body;
    for (const auto& prompt : prompts) {
        GenerationResult r =
            generate(m, heads, rc.policies, prompt, rc.sampling, rc.max_new_tokens);
        json header = rc.header(m.digest());
        header["prompt"] = prompt;
        header["prompt_digest"] = prompts_digest({prompt});
        write_jsonl(r, header, body);
    }
    if (f.out.empty()) {
        std::cout << body.str();
    } else {
        write_file_once(apply_output_env(f.out), body.str());
        std::cout << json{{"path", f.out}, {"prompts", prompts.size()}}.dump() << "\n";
    }
    return kOk;
}

int cmd_oracle_study(const CommonFlags& f, const std::string& layers_flag) {
    RunConfig rc = resolve_run_config(f);
    if (layers_flag.empty()) throw std::invalid_argument("oracle-study needs --layers");
    std::set<int> layers;
    for (int l : parse_id_list(layers_flag)) layers.insert(l);

    Backbone m = resolve_backbone(f, rc);
    // Probing untrained heads is meaningless, so train on the probe layers
    // unless a trained container was supplied.
    if (rc.heads.kind == HeadsSpec::Kind::WarmStart) {
        rc.heads.kind = HeadsSpec::Kind::Train;
        rc.heads.layers = layers;
    }
    HeadSet heads = resolve_heads(rc, m, layers);
    const auto prompts = rc.prompts.resolve(rc.model);
    const OracleStudyResult study =
        run_oracle_study(m, heads, prompts, layers, rc.sampling, rc.max_new_tokens);

    const std::string csv = render_oracle_csv(study);
    if (f.out.empty()) {
        std::cout << csv;
    } else {
        write_file_once(apply_output_env(f.out), csv);
        std::cout << json{{"path", f.out}, {"prompt_digest", study.prompt_digest}}.dump() << "\n";
    }
    return kOk;
}

int cmd_bench(const CommonFlags& f, const std::string& format) {
    RunConfig rc = resolve_run_config(f);
    Backbone m = resolve_backbone(f, rc);

    // Each --policy is its own benchmark run; a config-file policy array is
    // treated as one combined run.
    std::vector<std::vector<ExitPolicy>> runs;
    if (!f.policies.empty())
        for (const auto& p : rc.policies) runs.push_back({p});
    else
        runs.push_back(rc.policies);

    std::set<int> needed;
    for (const auto& run : runs) {
        auto layers = exit_layers_needed(run, rc.model.num_layers);
        needed.insert(layers.begin(), layers.end());
    }
    HeadSet heads = resolve_heads(rc, m, needed);
    const auto prompts = rc.prompts.resolve(rc.model);
    const auto reports =
        run_benchmark(m, heads, runs, prompts, rc.sampling, rc.max_new_tokens);

    json metadata = rc.header(m.digest());
    metadata["prompt_digest"] = prompts_digest(prompts);
    const ReportFormat fmt = format == "csv" ? ReportFormat::Csv : ReportFormat::Json;
    if (f.out.empty()) {
        std::cout << (fmt == ReportFormat::Json
                          ? render_reports_json(reports, rc.to_json(), metadata)
                          : render_reports_csv(reports));
    } else {
        emit_report(reports, fmt, apply_output_env(f.out), rc.to_json(), metadata);
        std::cout << json{{"path", f.out}, {"reports", reports.size()}}.dump() << "\n";
    }
    return kOk;
}

int cmd_report(const std::string& in, const std::string& format, const std::string& out) {
    std::ifstream is(in);
    if (!is) throw MissingArtifactError("missing report: " + in);
    const json doc = json::parse(is);

    // Re-derive the tabular view from a previously emitted JSON report.
    std::vector<EfficiencyReport> reports;
    for (const auto& rj : doc.at("reports")) {
        EfficiencyReport r;
        r.policy_label = rj.at("policy").get<std::string>();
        r.policy_json = rj.at("policy_config");
        r.num_layers = rj.at("num_layers").get<int>();
        r.text.depth_sum = rj.at("text").at("depth_sum").get<long long>();
        r.text.steps = rj.at("text").at("steps").get<long long>();
        r.speech.depth_sum = rj.at("speech").at("depth_sum").get<long long>();
        r.speech.steps = rj.at("speech").at("steps").get<long long>();
        r.seq_depth = rj.at("seq_depth").get<long long>();
        r.layer_computations = rj.at("layer_computations").get<long long>();
        r.backfill_layers = rj.at("backfill_layers").get<long long>();
        r.probe_count = rj.at("probe_count").get<long long>();
        if (rj.contains("expected_speech_depth")) {
            const std::string frac = rj.at("expected_speech_depth").get<std::string>();
            const size_t slash = frac.find('/');
            r.expected_speech_depth =
                slash == std::string::npos
                    ? Rational(std::stoll(frac), 1)
                    : Rational(std::stoll(frac.substr(0, slash)),
                               std::stoll(frac.substr(slash + 1)));
        }
        reports.push_back(std::move(r));
    }
    const ReportFormat fmt = format == "json" ? ReportFormat::Json : ReportFormat::Csv;
    const std::string rendered = fmt == ReportFormat::Json
                                     ? render_reports_json(reports, doc.at("run_config"),
                                                           doc.at("metadata"))
                                     : render_reports_csv(reports);
    if (out.empty())
        std::cout << rendered;
    else
        write_file_once(apply_output_env(out), rendered);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("SPARK_EE_THREADS"); threads && *threads)
        Eigen::setNbThreads(std::atoi(threads));

    CLI::App app{"early-exit decoding engine for interleaved text/speech token streams"};
    app.require_subcommand(1);

    CommonFlags f;
    TrainFlags tf;
    std::string layers_flag, format = "json", report_in, report_out;

    auto* build = app.add_subcommand("build-model", "construct and save a seeded backbone");
    add_model_flags(build, f);
    build->add_option("--out", f.out, "output weight container");

    auto* train = app.add_subcommand("train-heads", "distill per-layer prediction heads");
    add_model_flags(train, f);
    add_run_flags(train, f);
    train->add_option("--layers", tf.layers, "layers to train, comma-separated");
    train->add_option("--steps", tf.steps, "SGD steps per layer");
    train->add_option("--lr", tf.lr, "learning rate");
    train->add_option("--batch", tf.batch, "batch size");
    train->add_option("--train-seed", tf.train_seed, "SGD sampling seed");
    train->add_option("--corpus-prompts", tf.corpus_prompts, "rollout prompts for the corpus");
    train->add_option("--corpus-tokens", tf.corpus_tokens, "rollout length per prompt");
    train->add_option("--curve", tf.curve_path, "training curve CSV path");
    train->add_option("--out", f.out, "output weight container");

    auto* gen = app.add_subcommand("generate", "decode under an exit policy, JSONL output");
    add_model_flags(gen, f);
    add_run_flags(gen, f);
    gen->add_option("--out", f.out, "JSONL output path (stdout when omitted)");

    auto* study = app.add_subcommand("oracle-study", "leave-at-fixed-layer agreement study");
    add_model_flags(study, f);
    add_run_flags(study, f);
    study->add_option("--layers", layers_flag, "probe layers, comma-separated");
    study->add_option("--out", f.out, "CSV output path (stdout when omitted)");

    auto* bench = app.add_subcommand("bench", "efficiency benchmark across policies");
    add_model_flags(bench, f);
    add_run_flags(bench, f);
    bench->add_option("--format", format, "json or csv")
        ->check(CLI::IsMember({"json", "csv"}));
    bench->add_option("--out", f.out, "report output path (stdout when omitted)");

    auto* rep = app.add_subcommand("report", "re-render an emitted JSON report");
    rep->add_option("--in", report_in, "input report JSON")->required();
    rep->add_option("--format", format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
    rep->add_option("--out", report_out, "output path (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return kUsage;
    }

    try {
        if (build->parsed()) return cmd_build_model(f);
        if (train->parsed()) return cmd_train_heads(f, tf);
        if (gen->parsed()) return cmd_generate(f);
        if (study->parsed()) return cmd_oracle_study(f, layers_flag);
        if (bench->parsed()) return cmd_bench(f, format);
        if (rep->parsed()) return cmd_report(report_in, format, report_out);
    } catch (const MissingArtifactError& e) {
        std::cerr << json{{"error", {{"code", kMissingArtifact}, {"kind", "missing_artifact"},
                                     {"message", e.what()}}}}.dump()
                  << "\n";
        return kMissingArtifact;
    } catch (const std::invalid_argument& e) {
        std::cerr << json{{"error", {{"code", kConfigError}, {"kind", "config"},
                                     {"message", e.what()}}}}.dump()
                  << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"code", kInternal}, {"kind", "internal"},
                                     {"message", e.what()}}}}.dump()
                  << "\n";
        return kInternal;
    }
    return kUsage;
}
