// On-disk tap cache: one backbone forward per sample, persisted so any number
// of side-networks can train against the same features concurrently.
//
// Layout:
//   manifest.json  - backbone checksum + config, gap, sample count, tap
//                    shapes, dtype tag, per-sample labels
//   records.bin    - magic "LASTC\0", then fixed-stride records; each record
//                    is (m+1) taps of [L, d] float32 little-endian
//
// The cache is extracted at its own gap (usually the finest planned); a run
// with a coarser gap reads every (g/g_cache)-th tap.

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "last/serialize.hpp"
#include "last/tensor.hpp"
#include "last/vit.hpp"

namespace last {

struct CacheManifest {
    std::string backbone_checksum;  // hex
    BackboneConfig backbone;
    std::size_t gap = 1;
    std::size_t sample_count = 0;
    std::size_t tap_count = 0;  // m+1
    Shape tap_shape;            // [L, d]
    std::string dtype = "f32";
    std::vector<std::size_t> labels;

    nlohmann::json to_json() const {
        return {
            {"backbone_checksum", backbone_checksum},
            {"backbone",
             {{"depth", backbone.depth},
              {"width", backbone.width},
              {"heads", backbone.heads},
              {"patch_size", backbone.patch_size},
              {"image_size", backbone.image_size},
              {"channels", backbone.channels},
              {"num_registers", backbone.num_registers}}},
            {"gap", gap},
            {"sample_count", sample_count},
            {"tap_count", tap_count},
            {"tap_shape", tap_shape},
            {"dtype", dtype},
            {"labels", labels},
        };
    }

    static CacheManifest from_json(const nlohmann::json& j) {
        CacheManifest m;
        m.backbone_checksum = j.at("backbone_checksum").get<std::string>();
        const auto& b = j.at("backbone");
        m.backbone.depth = b.at("depth").get<std::size_t>();
        m.backbone.width = b.at("width").get<std::size_t>();
        m.backbone.heads = b.at("heads").get<std::size_t>();
        m.backbone.patch_size = b.at("patch_size").get<std::size_t>();
        m.backbone.image_size = b.at("image_size").get<std::size_t>();
        m.backbone.channels = b.at("channels").get<std::size_t>();
        m.backbone.num_registers = b.at("num_registers").get<std::size_t>();
        m.gap = j.at("gap").get<std::size_t>();
        m.sample_count = j.at("sample_count").get<std::size_t>();
        m.tap_count = j.at("tap_count").get<std::size_t>();
        m.tap_shape = j.at("tap_shape").get<Shape>();
        m.dtype = j.at("dtype").get<std::string>();
        m.labels = j.at("labels").get<std::vector<std::size_t>>();
        return m;
    }
};

struct Sample {
    Tensor image;       // [C, H, W]
    std::size_t label;
};

inline std::string checksum_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// Writes manifest.json + records.bin under out_dir. Exactly one backbone
// forward per sample. Re-running with identical inputs reproduces identical
// bytes; an existing up-to-date cache is left untouched.
//
// Returns true if extraction ran, false if the existing cache was reused.
inline bool extract(const std::vector<Sample>& dataset, const ViTWeights& backbone,
                    std::size_t gap, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    TapSchedule sched(backbone.config.depth, gap);

    CacheManifest manifest;
    manifest.backbone_checksum = checksum_hex(weights_checksum(backbone));
    manifest.backbone = backbone.config;
    manifest.gap = gap;
    manifest.sample_count = dataset.size();
    manifest.tap_count = sched.groups + 1;
    manifest.tap_shape = {backbone.config.seq_len(), backbone.config.width};
    for (const auto& s : dataset) manifest.labels.push_back(s.label);

    fs::path manifest_path = out_dir / "manifest.json";
    fs::path records_path = out_dir / "records.bin";
    std::string manifest_str = manifest.to_json().dump(2);
    if (fs::exists(manifest_path) && fs::exists(records_path)) {
        try {
            auto existing = CacheManifest::from_json(nlohmann::json::parse(read_file(manifest_path)));
            if (existing.to_json() == manifest.to_json()) return false;  // up to date
            if (existing.backbone_checksum != manifest.backbone_checksum)
                throw IoError("cache at " + out_dir.string() +
                              " was extracted with a different backbone (checksum " +
                              existing.backbone_checksum + " vs " + manifest.backbone_checksum +
                              "); refusing to overwrite");
        } catch (const nlohmann::json::exception&) {
            // unreadable manifest: re-extract
        }
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    std::string records;
    records.append(kMagicCache, 6);
    for (std::size_t si = 0; si < dataset.size(); ++si) {
        try {
            auto taps = forward_with_taps(dataset[si].image, backbone, sched);
            for (const auto& tap : taps)
                for (double v : tap.data())
                    detail::append_f32le(records, static_cast<float>(v));
        } catch (const std::exception& e) {
            throw IoError("extraction failed at sample " + std::to_string(si) + ": " + e.what());
        }
    }
    atomic_write(manifest_path, manifest_str);
    atomic_write(records_path, records);
    return true;
}

// Read-only view over an extracted cache. Safe for concurrent readers.
class FeatureCache {
public:
    explicit FeatureCache(const std::filesystem::path& dir) : dir_(dir) {
        manifest_ = CacheManifest::from_json(nlohmann::json::parse(read_file(dir / "manifest.json")));
        records_ = read_file(dir / "records.bin");
        if (records_.size() < 6 || std::memcmp(records_.data(), kMagicCache, 6) != 0)
            throw IoError("bad magic in " + (dir / "records.bin").string());
        std::size_t expect = 6 + manifest_.sample_count * record_stride();
        if (records_.size() != expect)
            throw IoError("records.bin size mismatch: expected " + std::to_string(expect) +
                          " bytes, got " + std::to_string(records_.size()));
    }

    const CacheManifest& manifest() const { return manifest_; }
    std::size_t size() const { return manifest_.sample_count; }
    std::size_t label(std::size_t i) const { return manifest_.labels.at(i); }

    std::size_t tap_elems() const { return numel(manifest_.tap_shape); }
    std::size_t record_stride() const { return manifest_.tap_count * tap_elems() * 4; }

    // All taps of one sample, promoted to f64, no grad.
    std::vector<Tensor> taps(std::size_t index) const {
        check_index(index);
        std::vector<Tensor> out;
        for (std::size_t t = 0; t < manifest_.tap_count; ++t) out.push_back(tap(index, t));
        return out;
    }

    Tensor tap(std::size_t index, std::size_t tap_index) const {
        check_index(index);
        if (tap_index >= manifest_.tap_count)
            throw IoError("tap index " + std::to_string(tap_index) + " out of range");
        std::size_t n = tap_elems();
        const auto* base = reinterpret_cast<const unsigned char*>(records_.data()) + 6 +
                           index * record_stride() + tap_index * n * 4;
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i)
            data[i] = static_cast<double>(detail::read_f32le(base + 4 * i));
        return Tensor(manifest_.tap_shape, std::move(data));
    }

    // Tap indices for a run at gap `side_gap`: the cache gap must divide it.
    std::vector<std::size_t> tap_indices_for_gap(std::size_t side_gap) const {
        if (side_gap == 0 || side_gap % manifest_.gap != 0 ||
            manifest_.backbone.depth % side_gap != 0)
            throw ConfigError("cache extracted at gap " + std::to_string(manifest_.gap) +
                              " cannot serve a run at gap " + std::to_string(side_gap));
        std::size_t step = side_gap / manifest_.gap;
        std::vector<std::size_t> idx;
        for (std::size_t t = 0; t < manifest_.tap_count; t += step) idx.push_back(t);
        return idx;
    }

    // Stacked taps for a batch: vector of m+1 tensors shaped [B, L, d].
    std::vector<Tensor> batch_taps(const std::vector<std::size_t>& indices,
                                   std::size_t side_gap) const {
        auto tap_idx = tap_indices_for_gap(side_gap);
        std::size_t B = indices.size();
        std::size_t n = tap_elems();
        std::vector<Tensor> out;
        for (std::size_t t : tap_idx) {
            std::vector<double> data(B * n);
            for (std::size_t b = 0; b < B; ++b) {
                check_index(indices[b]);
                const auto* base = reinterpret_cast<const unsigned char*>(records_.data()) + 6 +
                                   indices[b] * record_stride() + t * n * 4;
                for (std::size_t i = 0; i < n; ++i)
                    data[b * n + i] = static_cast<double>(detail::read_f32le(base + 4 * i));
            }
            Shape s = {B};
            s.insert(s.end(), manifest_.tap_shape.begin(), manifest_.tap_shape.end());
            out.emplace_back(std::move(s), std::move(data));
        }
        return out;
    }

    std::vector<std::size_t> batch_labels(const std::vector<std::size_t>& indices) const {
        std::vector<std::size_t> out;
        for (std::size_t i : indices) out.push_back(label(i));
        return out;
    }

    const std::filesystem::path& dir() const { return dir_; }

private:
    void check_index(std::size_t i) const {
        if (i >= manifest_.sample_count)
            throw IoError("cache index " + std::to_string(i) + " out of range (sample count " +
                          std::to_string(manifest_.sample_count) + ")");
    }

    std::filesystem::path dir_;
    CacheManifest manifest_;
    std::string records_;
};

}  // namespace last
