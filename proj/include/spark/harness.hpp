#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spark/engine.hpp"

namespace spark {

struct ModalityStats {
    long long depth_sum = 0;
    long long steps = 0;

    // A modality with no observed steps decoded nothing below full depth.
    double avg_exit_layer(int L) const {
        return steps == 0 ? static_cast<double>(L)
                          : static_cast<double>(depth_sum) / static_cast<double>(steps);
    }
};

// Efficiency view of one benchmark run: average exit layer and speedup per
// modality, plus the compute ledger. For schedule-based policies the exact
// closed-form speech depth is carried alongside the measurement.
struct EfficiencyReport {
    std::string policy_label;
    json policy_json;
    int num_layers = 0;
    ModalityStats text;
    ModalityStats speech;
    long long seq_depth = 0;
    long long layer_computations = 0;
    long long backfill_layers = 0;
    long long probe_count = 0;
    std::optional<Rational> expected_speech_depth;

    double text_avg() const { return text.avg_exit_layer(num_layers); }
    double speech_avg() const { return speech.avg_exit_layer(num_layers); }
    double text_speedup() const { return speedup_pct(text_avg(), num_layers); }
    double speech_speedup() const { return speedup_pct(speech_avg(), num_layers); }
};

struct OracleLayerStat {
    int layer = 0;
    std::optional<double> agreement_pct;  // empty when no speech steps were seen
    long long n_steps = 0;
};

struct OracleStudyResult {
    std::vector<OracleLayerStat> layers;
    std::string prompt_digest;
    uint64_t sampling_seed = 0;
};

inline std::string prompts_digest(const std::vector<std::vector<int>>& prompts) {
    Digest d;
    for (const auto& p : prompts) {
        d.pod(p.size());
        for (int t : p) d.pod(t);
    }
    return d.hex();
}

// Fixed synthetic prompt suite: short runs of speech tokens followed by the
// begin-of-response control token. Fully determined by (config, seed, count).
inline std::vector<std::vector<int>> builtin_prompt_suite(const ModelConfig& cfg,
                                                          int count = 64,
                                                          uint64_t seed = 2024) {
    std::vector<std::vector<int>> prompts;
    prompts.reserve(count);
    CounterRng rng = CounterRng::keyed(seed, "prompt-suite");
    for (int i = 0; i < count; ++i) {
        const int len = 4 + static_cast<int>(rng.next_below(9));
        std::vector<int> p;
        p.reserve(len + 1);
        for (int j = 0; j < len; ++j)
            p.push_back(cfg.text_vocab_size + static_cast<int>(rng.next_below(cfg.speech_vocab_size)));
        p.push_back(cfg.begin_of_response());
        prompts.push_back(std::move(p));
    }
    return prompts;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2)
        throw std::invalid_argument("spearman: need two equally sized samples");
    auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(xs), ry = ranks(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

// One report per run; a run is a set of modality-scoped policies (usually
// just one). Measured and closed-form expected speech depth are both emitted
// so they can be cross-checked.
inline std::vector<EfficiencyReport> run_benchmark(
    const Backbone& backbone, const HeadSet& heads,
    const std::vector<std::vector<ExitPolicy>>& runs,
    const std::vector<std::vector<int>>& prompts, const SamplingConfig& sampling,
    int max_new_tokens) {
    const ModelConfig& cfg = backbone.config();
    std::vector<EfficiencyReport> reports;
    for (const auto& policies : runs) {
        EfficiencyReport rep;
        rep.num_layers = cfg.num_layers;
        json pj = json::array();
        std::string label;
        for (const auto& p : policies) {
            pj.push_back(p.to_json());
            label += (label.empty() ? "" : "+") + p.label();
        }
        rep.policy_label = label.empty() ? "disable" : label;
        rep.policy_json = pj;

        const ExitPolicy* speech_policy = detail::pick_policy(policies, Modality::Speech);
        if (!speech_policy)
            rep.expected_speech_depth = Rational(cfg.num_layers, 1);
        else if (speech_policy->schedule_based())
            rep.expected_speech_depth = expected_depth(*speech_policy, cfg);

        try {
            for (const auto& prompt : prompts) {
                const GenerationResult r =
                    generate(backbone, heads, policies, prompt, sampling, max_new_tokens);
                for (const auto& s : r.steps) {
                    ModalityStats& ms = s.modality == Modality::Text ? rep.text : rep.speech;
                    ms.depth_sum += s.exit_layer;
                    ms.steps += 1;
                }
                rep.seq_depth += r.seq_depth;
                rep.layer_computations += r.layer_computations;
                rep.backfill_layers += r.backfill_layers;
                rep.probe_count += r.probe_count;
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("benchmark run '" + rep.policy_label + "': " + e.what());
        }
        reports.push_back(std::move(rep));
    }
    return reports;
}

inline std::vector<EfficiencyReport> run_benchmark(const Backbone& backbone,
                                                   const HeadSet& heads,
                                                   const std::vector<ExitPolicy>& policies,
                                                   const std::vector<std::vector<int>>& prompts,
                                                   const SamplingConfig& sampling,
                                                   int max_new_tokens) {
    std::vector<std::vector<ExitPolicy>> runs;
    for (const auto& p : policies) runs.push_back({p});
    return run_benchmark(backbone, heads, runs, prompts, sampling, max_new_tokens);
}

// Leave-at-fixed-layer agreement study. Each prompt is decoded at full depth,
// then re-run teacher-forced; agreement counts the speech steps where the
// layer's head picks the same token as the final layer's.
inline OracleStudyResult run_oracle_study(const Backbone& backbone, const HeadSet& heads,
                                          const std::vector<std::vector<int>>& prompts,
                                          const std::set<int>& layers,
                                          const SamplingConfig& sampling,
                                          int max_new_tokens) {
    const ModelConfig& cfg = backbone.config();
    const int L = cfg.num_layers;
    std::set<int> probe = layers;
    probe.insert(L);
    for (int l : probe)
        if (l != L && !(heads.has(l) && heads.at(l).trained))
            throw std::invalid_argument("oracle study: no trained head for layer " +
                                        std::to_string(l));

    std::map<int, long long> agree;
    long long speech_steps = 0;
    for (const auto& prompt : prompts) {
        const GenerationResult r =
            generate(backbone, heads, ExitPolicy::disable(), prompt, sampling, max_new_tokens);
        std::vector<int> seq = prompt;
        const auto gen = r.tokens();
        seq.insert(seq.end(), gen.begin(), gen.end());
        const auto trace = teacher_forced_trace(backbone, heads, seq, probe);
        for (const auto& s : r.steps) {
            if (s.modality != Modality::Speech) continue;
            const size_t idx = prompt.size() + s.t - 2;  // trace entry predicting step t
            ++speech_steps;
            for (int l : probe)
                if (trace[idx].at(l) == trace[idx].at(L)) ++agree[l];
        }
    }

    OracleStudyResult out;
    out.prompt_digest = prompts_digest(prompts);
    out.sampling_seed = sampling.rng_seed;
    for (int l : probe) {
        OracleLayerStat stat;
        stat.layer = l;
        stat.n_steps = speech_steps;
        if (speech_steps > 0)
            stat.agreement_pct = 100.0 * static_cast<double>(agree[l]) / speech_steps;
        out.layers.push_back(stat);
    }
    return out;
}

enum class ReportFormat { Json, Csv };

inline std::string format_double(double v, int precision = 6) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
    return buf;
}

inline json report_to_json(const EfficiencyReport& r) {
    json j{{"policy", r.policy_label},
           {"policy_config", r.policy_json},
           {"num_layers", r.num_layers},
           {"text",
            {{"avg_exit_layer", r.text_avg()},
             {"speedup_pct", r.text_speedup()},
             {"depth_sum", r.text.depth_sum},
             {"steps", r.text.steps}}},
           {"speech",
            {{"avg_exit_layer", r.speech_avg()},
             {"speedup_pct", r.speech_speedup()},
             {"depth_sum", r.speech.depth_sum},
             {"steps", r.speech.steps}}},
           {"seq_depth", r.seq_depth},
           {"layer_computations", r.layer_computations},
           {"backfill_layers", r.backfill_layers},
           {"probe_count", r.probe_count}};
    if (r.expected_speech_depth) {
        j["expected_speech_depth"] = r.expected_speech_depth->str();
        j["expected_speech_depth_value"] = r.expected_speech_depth->to_double();
    }
    return j;
}

inline std::string render_reports_json(const std::vector<EfficiencyReport>& reports,
                                       const json& run_config, const json& metadata) {
    json out{{"artifact_version", kArtifactVersion},
             {"run_config", run_config},
             {"metadata", metadata},
             {"notes",
              json::array({"end-of-response is admissible only at the final speech "
                           "position of a cycle"})}};
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(report_to_json(r));
    out["reports"] = arr;
    return out.dump(2) + "\n";
}

inline std::string render_reports_csv(const std::vector<EfficiencyReport>& reports) {
    std::ostringstream os;
    os << "policy,modality,avg_exit_layer,speedup_pct,seq_depth,layer_computations,probe_count\n";
    for (const auto& r : reports) {
        os << r.policy_label << ",text," << format_double(r.text_avg()) << ","
           << format_double(r.text_speedup()) << "," << r.seq_depth << ","
           << r.layer_computations << "," << r.probe_count << "\n";
        os << r.policy_label << ",speech," << format_double(r.speech_avg()) << ","
           << format_double(r.speech_speedup()) << "," << r.seq_depth << ","
           << r.layer_computations << "," << r.probe_count << "\n";
    }
    return os.str();
}

inline std::string render_oracle_csv(const OracleStudyResult& study) {
    std::ostringstream os;
    os << "layer,agreement_pct,n_steps\n";
    for (const auto& s : study.layers) {
        os << s.layer << ","
           << (s.agreement_pct ? format_double(*s.agreement_pct, 2) : std::string("NA")) << ","
           << s.n_steps << "\n";
    }
    return os.str();
}

inline std::string render_training_curve_csv(const HeadSet& heads) {
    std::ostringstream os;
    os << "step,layer,loss\n";
    for (const auto& rec : heads.curve)
        os << rec.step << "," << rec.layer << "," << format_double(rec.loss, 9) << "\n";
    return os.str();
}

// Output files are write-once: an existing path is an error, never replaced.
inline void write_file_once(const std::filesystem::path& path, const std::string& content) {
    namespace fs = std::filesystem;
    if (fs::exists(path))
        throw std::runtime_error("refusing to overwrite existing output: " + path.string());
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write output file: " + path.string());
    os << content;
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline void emit_report(const std::vector<EfficiencyReport>& reports, ReportFormat format,
                        const std::filesystem::path& path, const json& run_config = json::object(),
                        const json& metadata = json::object()) {
    if (reports.empty()) throw std::invalid_argument("emit_report: no reports");
    write_file_once(path, format == ReportFormat::Json
                              ? render_reports_json(reports, run_config, metadata)
                              : render_reports_csv(reports));
}

}  // namespace spark
