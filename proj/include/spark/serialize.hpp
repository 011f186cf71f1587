#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "spark/backbone.hpp"
#include "spark/errors.hpp"
#include "spark/heads.hpp"

namespace spark {

// Flat binary weight container: an 8-byte magic, a JSON manifest (model
// config plus per-parameter path/shape/offset/checksum), then one contiguous
// payload of raw doubles. Backbone and head parameters live in separate
// manifest sections of the same file.
namespace container {

inline constexpr char kMagic[8] = {'S', 'P', 'R', 'K', 'W', 'T', '0', '1'};

struct ParamEntry {
    std::string path;
    std::vector<long long> shape;
    uint64_t offset = 0;  // bytes, relative to payload start
    uint64_t bytes = 0;
    std::string checksum;
};

inline json entry_to_json(const ParamEntry& e) {
    return json{{"path", e.path},
                {"shape", e.shape},
                {"offset", e.offset},
                {"bytes", e.bytes},
                {"checksum", e.checksum}};
}

inline ParamEntry entry_from_json(const json& j) {
    ParamEntry e;
    e.path = j.at("path").get<std::string>();
    e.shape = j.at("shape").get<std::vector<long long>>();
    e.offset = j.at("offset").get<uint64_t>();
    e.bytes = j.at("bytes").get<uint64_t>();
    e.checksum = j.at("checksum").get<std::string>();
    return e;
}

}  // namespace container

inline void save_container(const std::filesystem::path& path, Backbone& backbone,
                           const HeadSet* heads = nullptr) {
    namespace fs = std::filesystem;
    if (fs::exists(path))
        throw std::runtime_error("refusing to overwrite existing artifact: " + path.string());

    std::vector<char> payload;
    auto append = [&](const double* data, size_t count) -> std::pair<uint64_t, uint64_t> {
        const uint64_t offset = payload.size();
        const uint64_t bytes = count * sizeof(double);
        payload.resize(offset + bytes);
        std::memcpy(payload.data() + offset, data, bytes);
        return {offset, bytes};
    };

    json backbone_params = json::array();
    for (const auto& p : backbone.params()) {
        auto [offset, bytes] = append(p.data, p.count());
        container::ParamEntry e{
            p.path, {p.rows, p.cols}, offset, bytes, Digest().bytes(p.data, bytes).hex()};
        backbone_params.push_back(container::entry_to_json(e));
    }
    json sections = json::array();
    sections.push_back(json{{"name", "backbone"},
                            {"digest", backbone.digest()},
                            {"params", backbone_params}});

    if (heads) {
        json head_params = json::array();
        json head_meta{{"train_steps", heads->train_steps},
                       {"corpus_digest", heads->corpus_digest},
                       {"trained_layers", json::object()}};
        if (std::isfinite(heads->final_loss)) head_meta["final_loss"] = heads->final_loss;
        for (const auto& [l, h] : heads->heads) {
            head_meta["trained_layers"][std::to_string(l)] = h.trained;
            auto [wo, wb] = append(h.w.data(), h.w.size());
            head_params.push_back(container::entry_to_json(
                {"heads." + std::to_string(l) + ".w",
                 {h.w.rows(), h.w.cols()},
                 wo,
                 wb,
                 Digest().bytes(h.w.data(), wb).hex()}));
            auto [bo, bb] = append(h.b.data(), h.b.size());
            head_params.push_back(container::entry_to_json(
                {"heads." + std::to_string(l) + ".b",
                 {h.b.size(), 1},
                 bo,
                 bb,
                 Digest().bytes(h.b.data(), bb).hex()}));
        }
        sections.push_back(json{{"name", "heads"},
                                {"metadata", head_meta},
                                {"params", head_params}});
    }

    const json manifest{{"artifact_version", kArtifactVersion},
                        {"model_config", backbone.config().to_json()},
                        {"sections", sections}};
    const std::string mstr = manifest.dump();

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write artifact: " + path.string());
    os.write(container::kMagic, sizeof(container::kMagic));
    const uint64_t mlen = mstr.size();
    os.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    os.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

namespace container {

struct Loaded {
    json manifest;
    std::vector<char> payload;
};

inline Loaded read_container(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifactError("missing artifact: " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("not a weight container: " + path.string());
    uint64_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string mstr(mlen, '\0');
    is.read(mstr.data(), static_cast<std::streamsize>(mlen));
    if (!is) throw std::runtime_error("truncated manifest: " + path.string());
    Loaded out;
    out.manifest = json::parse(mstr);
    std::vector<char> payload(std::istreambuf_iterator<char>(is), {});
    out.payload = std::move(payload);
    return out;
}

inline const json* find_section(const json& manifest, const std::string& name) {
    for (const auto& s : manifest.at("sections"))
        if (s.at("name").get<std::string>() == name) return &s;
    return nullptr;
}

inline void copy_param(const Loaded& c, const ParamEntry& e, double* dst, size_t expect_count) {
    if (e.bytes != expect_count * sizeof(double))
        throw std::runtime_error("parameter " + e.path + " has unexpected size");
    if (e.offset + e.bytes > c.payload.size())
        throw std::runtime_error("parameter " + e.path + " outside payload");
    const char* src = c.payload.data() + e.offset;
    if (Digest().bytes(src, e.bytes).hex() != e.checksum)
        throw std::runtime_error("checksum mismatch for parameter " + e.path);
    std::memcpy(dst, src, e.bytes);
}

}  // namespace container

inline Backbone load_backbone(const std::filesystem::path& path) {
    const auto c = container::read_container(path);
    const ModelConfig cfg = ModelConfig::from_json(c.manifest.at("model_config"));
    const json* section = container::find_section(c.manifest, "backbone");
    if (!section) throw std::runtime_error("container has no backbone section");

    std::map<std::string, container::ParamEntry> entries;
    for (const auto& pj : section->at("params")) {
        auto e = container::entry_from_json(pj);
        entries[e.path] = std::move(e);
    }
    Backbone m = Backbone::allocate(cfg);
    for (auto& p : m.params()) {
        auto it = entries.find(p.path);
        if (it == entries.end())
            throw std::runtime_error("container missing parameter " + p.path);
        container::copy_param(c, it->second, p.data, p.count());
    }
    m.set_digest(m.compute_digest());
    const std::string recorded = section->at("digest").get<std::string>();
    if (recorded != m.digest())
        throw std::runtime_error("backbone digest mismatch: recorded " + recorded + ", loaded " +
                                 m.digest());
    return m;
}

inline bool container_has_heads(const std::filesystem::path& path) {
    const auto c = container::read_container(path);
    return container::find_section(c.manifest, "heads") != nullptr;
}

inline HeadSet load_heads(const std::filesystem::path& path, const Backbone& backbone) {
    const auto c = container::read_container(path);
    const json* section = container::find_section(c.manifest, "heads");
    if (!section) throw std::runtime_error("container has no heads section: " + path.string());
    const ModelConfig cfg = ModelConfig::from_json(c.manifest.at("model_config"));
    if (!(cfg == backbone.config()))
        throw std::runtime_error("heads container was built for a different model config");

    HeadSet hs;
    hs.num_layers = cfg.num_layers;
    const json& meta = section->at("metadata");
    hs.train_steps = meta.at("train_steps").get<long long>();
    hs.corpus_digest = meta.at("corpus_digest").get<std::string>();
    if (meta.contains("final_loss")) hs.final_loss = meta.at("final_loss").get<double>();

    std::map<std::string, container::ParamEntry> entries;
    for (const auto& pj : section->at("params")) {
        auto e = container::entry_from_json(pj);
        entries[e.path] = std::move(e);
    }
    for (const auto& [key, trained] : meta.at("trained_layers").items()) {
        const int layer = std::stoi(key);
        const auto wi = entries.find("heads." + key + ".w");
        const auto bi = entries.find("heads." + key + ".b");
        if (wi == entries.end() || bi == entries.end())
            throw std::runtime_error("heads section missing tensors for layer " + key);
        LayerHead h;
        h.w.setZero(wi->second.shape.at(0), wi->second.shape.at(1));
        h.b.setZero(bi->second.shape.at(0));
        container::copy_param(c, wi->second, h.w.data(), h.w.size());
        container::copy_param(c, bi->second, h.b.data(), h.b.size());
        h.trained = trained.get<bool>();
        hs.heads[layer] = std::move(h);
    }
    if (!hs.has(cfg.num_layers))
        throw std::runtime_error("heads container lacks the top-layer head");
    return hs;
}

}  // namespace spark
