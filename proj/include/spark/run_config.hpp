#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "spark/config.hpp"
#include "spark/errors.hpp"
#include "spark/harness.hpp"
#include "spark/heads.hpp"
#include "spark/policy.hpp"
#include "spark/presets.hpp"
#include "spark/sampling.hpp"

namespace spark {

// Parses compact policy identifiers used on the command line:
//   disable | fixed-<layer> | spark-<even|odd|triple>-<layer>
//   | conf-<threshold>-<min_layer>
// with an optional "@text", "@speech" or "@text,speech" scope suffix.
inline ExitPolicy parse_policy_shorthand(const std::string& text) {
    std::string body = text;
    std::set<Modality> modes{Modality::Speech};
    if (const auto at = text.find('@'); at != std::string::npos) {
        body = text.substr(0, at);
        modes.clear();
        std::string scope = text.substr(at + 1);
        size_t start = 0;
        while (start <= scope.size()) {
            const size_t comma = scope.find(',', start);
            const std::string part = scope.substr(
                start, comma == std::string::npos ? std::string::npos : comma - start);
            if (part == "text") modes.insert(Modality::Text);
            else if (part == "speech") modes.insert(Modality::Speech);
            else throw std::invalid_argument("unknown policy scope: " + part);
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
    }
    auto split = [&]() {
        std::vector<std::string> parts;
        size_t start = 0;
        while (start <= body.size()) {
            const size_t dash = body.find('-', start);
            parts.push_back(body.substr(
                start, dash == std::string::npos ? std::string::npos : dash - start));
            if (dash == std::string::npos) break;
            start = dash + 1;
        }
        return parts;
    };
    const auto parts = split();
    try {
        if (parts.at(0) == "disable") return ExitPolicy::disable();
        if (parts.at(0) == "fixed") return ExitPolicy::fixed(std::stoi(parts.at(1)), modes);
        if (parts.at(0) == "spark") {
            SparkVariant v;
            if (parts.at(1) == "even") v = SparkVariant::Even;
            else if (parts.at(1) == "odd") v = SparkVariant::Odd;
            else if (parts.at(1) == "triple") v = SparkVariant::Triple;
            else throw std::invalid_argument("unknown spark variant: " + parts.at(1));
            return ExitPolicy::spark(v, std::stoi(parts.at(2)), modes);
        }
        if (parts.at(0) == "conf")
            return ExitPolicy::confidence(std::stod(parts.at(1)), std::stoi(parts.at(2)), modes);
    } catch (const std::out_of_range&) {
        throw std::invalid_argument("malformed policy: " + text);
    }
    throw std::invalid_argument("unknown policy: " + text);
}

// "greedy" or "nucleus-<temperature>-<top_p>".
inline SamplingConfig parse_sampling_shorthand(const std::string& text, uint64_t seed) {
    if (text == "greedy") return SamplingConfig::greedy();
    if (text.rfind("nucleus-", 0) == 0) {
        const std::string rest = text.substr(8);
        const size_t dash = rest.find('-');
        if (dash == std::string::npos)
            throw std::invalid_argument("malformed sampling: " + text);
        auto c = SamplingConfig::nucleus(std::stod(rest.substr(0, dash)),
                                         std::stod(rest.substr(dash + 1)), seed);
        c.validate();
        return c;
    }
    throw std::invalid_argument("unknown sampling: " + text);
}

// Head acquisition for a run: load a trained container, train on the fly, or
// fall back to warm-start copies of the final head.
struct HeadsSpec {
    enum class Kind { WarmStart, Train, Load };
    Kind kind = Kind::WarmStart;
    std::filesystem::path path;    // Load
    std::set<int> layers;          // Train
    TrainConfig train;             // Train
    // Defaults give roughly 2000 rollout steps per layer.
    int corpus_prompts = 64;       // Train: prompts drawn from the builtin suite
    int corpus_max_new_tokens = 32;

    json to_json() const {
        switch (kind) {
            case Kind::WarmStart: return json{{"kind", "warm_start"}};
            case Kind::Load: return json{{"kind", "load"}, {"path", path.string()}};
            case Kind::Train: {
                json layers_j = json::array();
                for (int l : layers) layers_j.push_back(l);
                return json{{"kind", "train"},
                            {"layers", layers_j},
                            {"steps", train.steps},
                            {"learning_rate", train.learning_rate},
                            {"batch_size", train.batch_size},
                            {"seed", train.seed},
                            {"corpus_prompts", corpus_prompts},
                            {"corpus_max_new_tokens", corpus_max_new_tokens}};
            }
        }
        throw std::logic_error("unreachable");
    }

    static HeadsSpec from_json(const json& j) {
        HeadsSpec s;
        const std::string kind = j.value("kind", j.contains("path") ? "load" : "train");
        if (kind == "warm_start") {
            s.kind = Kind::WarmStart;
        } else if (kind == "load") {
            s.kind = Kind::Load;
            s.path = j.at("path").get<std::string>();
        } else if (kind == "train") {
            s.kind = Kind::Train;
            for (const auto& l : j.at("layers")) s.layers.insert(l.get<int>());
            s.train.steps = j.value("steps", s.train.steps);
            s.train.learning_rate = j.value("learning_rate", s.train.learning_rate);
            s.train.batch_size = j.value("batch_size", s.train.batch_size);
            s.train.seed = j.value("seed", s.train.seed);
            s.corpus_prompts = j.value("corpus_prompts", s.corpus_prompts);
            s.corpus_max_new_tokens = j.value("corpus_max_new_tokens", s.corpus_max_new_tokens);
        } else {
            throw std::invalid_argument("unknown heads kind: " + kind);
        }
        return s;
    }
};

struct PromptsSpec {
    enum class Kind { Builtin, Inline, File };
    Kind kind = Kind::Builtin;
    int count = 64;
    uint64_t seed = 2024;
    std::vector<std::vector<int>> inline_prompts;
    std::filesystem::path path;

    json to_json() const {
        switch (kind) {
            case Kind::Builtin: return json{{"builtin", count}, {"seed", seed}};
            case Kind::Inline: return json{{"inline", inline_prompts}};
            case Kind::File: return json{{"path", path.string()}};
        }
        throw std::logic_error("unreachable");
    }

    static PromptsSpec from_json(const json& j) {
        PromptsSpec s;
        if (j.contains("builtin")) {
            s.kind = Kind::Builtin;
            s.count = j.at("builtin").get<int>();
            s.seed = j.value("seed", s.seed);
        } else if (j.contains("inline")) {
            s.kind = Kind::Inline;
            s.inline_prompts = j.at("inline").get<std::vector<std::vector<int>>>();
        } else if (j.contains("path")) {
            s.kind = Kind::File;
            s.path = j.at("path").get<std::string>();
        } else {
            throw std::invalid_argument("prompts config needs builtin, inline or path");
        }
        return s;
    }

    std::vector<std::vector<int>> resolve(const ModelConfig& cfg) const {
        switch (kind) {
            case Kind::Builtin: return builtin_prompt_suite(cfg, count, seed);
            case Kind::Inline: return inline_prompts;
            case Kind::File: {
                std::ifstream is(path);
                if (!is) throw MissingArtifactError("missing prompts file: " + path.string());
                json j = json::parse(is);
                return j.get<std::vector<std::vector<int>>>();
            }
        }
        throw std::logic_error("unreachable");
    }
};

// Everything one run needs, loadable from a JSON document. Flag overrides
// applied on top are recorded as provenance notes for the run header.
struct RunConfig {
    ModelConfig model;
    std::optional<std::string> preset;  // remembered when the model came from a preset
    std::vector<ExitPolicy> policies{ExitPolicy::disable()};
    SamplingConfig sampling;
    HeadsSpec heads;
    PromptsSpec prompts;
    int max_new_tokens = 40;
    std::filesystem::path output_dir;
    std::string source_digest;  // digest of the loaded JSON document
    std::vector<std::string> overrides;

    json to_json() const {
        json policies_j = json::array();
        for (const auto& p : policies) policies_j.push_back(p.to_json());
        json j{{"model", model.to_json()},
               {"policy", policies_j},
               {"sampling", sampling.to_json()},
               {"heads", heads.to_json()},
               {"prompts", prompts.to_json()},
               {"max_new_tokens", max_new_tokens}};
        if (preset) j["preset"] = *preset;
        if (!output_dir.empty()) j["output"] = output_dir.string();
        return j;
    }

    static RunConfig from_json(const json& j) {
        RunConfig rc;
        if (j.contains("preset")) {
            rc.preset = j.at("preset").get<std::string>();
            rc.model = preset_config(*rc.preset);
        }
        if (j.contains("model")) rc.model = ModelConfig::from_json(j.at("model"));
        if (!j.contains("preset") && !j.contains("model"))
            throw std::invalid_argument("run config needs a model or a preset");
        if (j.contains("policy")) {
            rc.policies.clear();
            const json& pj = j.at("policy");
            if (pj.is_array())
                for (const auto& p : pj) rc.policies.push_back(ExitPolicy::from_json(p));
            else
                rc.policies.push_back(ExitPolicy::from_json(pj));
        }
        if (j.contains("sampling")) rc.sampling = SamplingConfig::from_json(j.at("sampling"));
        if (j.contains("heads")) rc.heads = HeadsSpec::from_json(j.at("heads"));
        if (j.contains("prompts")) rc.prompts = PromptsSpec::from_json(j.at("prompts"));
        rc.max_new_tokens = j.value("max_new_tokens", rc.max_new_tokens);
        if (j.contains("output")) rc.output_dir = j.at("output").get<std::string>();
        for (const auto& p : rc.policies) p.validate(rc.model.num_layers);
        rc.source_digest = json_digest(j);
        return rc;
    }

    static RunConfig from_file(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw MissingArtifactError("missing run config: " + path.string());
        json j = json::parse(is);
        RunConfig rc = from_json(j);
        // Referenced artifacts must exist when the config is loaded.
        if (rc.heads.kind == HeadsSpec::Kind::Load &&
            !std::filesystem::exists(rc.heads.path))
            throw MissingArtifactError("missing heads artifact: " + rc.heads.path.string());
        if (rc.prompts.kind == PromptsSpec::Kind::File &&
            !std::filesystem::exists(rc.prompts.path))
            throw MissingArtifactError("missing prompts file: " + rc.prompts.path.string());
        return rc;
    }

    // Run header recorded at the top of JSONL outputs and report metadata.
    json header(const std::string& model_digest) const {
        json j{{"run_config", to_json()},
               {"config_digest", json_digest(to_json())},
               {"model_digest", model_digest},
               {"sampling_seed", sampling.rng_seed}};
        if (!source_digest.empty()) j["source_digest"] = source_digest;
        if (!overrides.empty()) j["overrides"] = overrides;
        return j;
    }
};

}  // namespace spark
