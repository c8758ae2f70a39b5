// JSON run configuration. Every field has a default; unknown keys are
// rejected before any work starts.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "last/dataset.hpp"
#include "last/memory.hpp"
#include "last/side.hpp"
#include "last/vit.hpp"

namespace last {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    std::size_t train_count = 0;  // 0 = 80/20 split
};

struct CacheConfig {
    std::string dir = "cache";
    std::size_t gap = 1;  // extraction granularity (finest planned sweep gap)
};

struct SweepConfig {
    std::size_t concurrency = 1;
    std::vector<std::size_t> gaps = {1, 2};
    std::vector<std::size_t> stacks = {1, 2};
    std::vector<std::uint64_t> seeds = {0};
};

struct MemoryConfig {
    std::size_t batch = 32;
    std::size_t seq_len = 197;
    double dtype_bytes = 4.0;
    StrategyParams params;
};

struct RunConfig {
    BackboneConfig backbone;
    std::uint64_t backbone_seed = 0;
    SideConfig side;
    TrainConfig train;
    CacheConfig cache;
    SweepConfig sweep;
    MemoryConfig memory;
    SynthConfig dataset;
};

namespace cfgdetail {

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known,
                           const std::string& section) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const auto& k : known)
            if (k == key) ok = true;
        if (!ok) throw ConfigError("unknown key '" + key + "' in config section '" + section + "'");
    }
}

template <class T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace cfgdetail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using cfgdetail::get_if;
    using cfgdetail::reject_unknown;
    reject_unknown(j, {"backbone", "side", "train", "cache", "sweep", "memory", "dataset"},
                   "<root>");
    RunConfig c;
    // toy-friendly defaults; full scale is opted into explicitly
    c.backbone = {.depth = 4, .width = 16, .heads = 2, .patch_size = 4, .image_size = 16,
                  .channels = 3, .num_registers = 1};
    c.side = {.gap = 2, .stack = 2, .rank = 4, .n_head = 2, .bias_correction = true,
              .ffn_hidden = std::nullopt, .num_classes = 2, .skip_block_zero = true};

    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        reject_unknown(b, {"depth", "width", "heads", "patch_size", "image_size", "channels",
                           "num_registers", "seed"}, "backbone");
        get_if(b, "depth", c.backbone.depth);
        get_if(b, "width", c.backbone.width);
        get_if(b, "heads", c.backbone.heads);
        get_if(b, "patch_size", c.backbone.patch_size);
        get_if(b, "image_size", c.backbone.image_size);
        get_if(b, "channels", c.backbone.channels);
        get_if(b, "num_registers", c.backbone.num_registers);
        get_if(b, "seed", c.backbone_seed);
    }
    if (j.contains("side")) {
        const auto& s = j.at("side");
        reject_unknown(s, {"gap", "stack", "rank", "n_head", "bias_correction", "ffn_hidden",
                           "num_classes", "skip_block_zero"}, "side");
        get_if(s, "gap", c.side.gap);
        get_if(s, "stack", c.side.stack);
        get_if(s, "rank", c.side.rank);
        get_if(s, "n_head", c.side.n_head);
        get_if(s, "bias_correction", c.side.bias_correction);
        if (s.contains("ffn_hidden") && !s.at("ffn_hidden").is_null())
            c.side.ffn_hidden = s.at("ffn_hidden").get<std::size_t>();
        get_if(s, "num_classes", c.side.num_classes);
        get_if(s, "skip_block_zero", c.side.skip_block_zero);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        reject_unknown(t, {"lr", "epochs", "batch_size", "seed", "train_count"}, "train");
        get_if(t, "lr", c.train.lr);
        get_if(t, "epochs", c.train.epochs);
        get_if(t, "batch_size", c.train.batch_size);
        get_if(t, "seed", c.train.seed);
        get_if(t, "train_count", c.train.train_count);
    }
    if (j.contains("cache")) {
        const auto& k = j.at("cache");
        reject_unknown(k, {"dir", "gap"}, "cache");
        get_if(k, "dir", c.cache.dir);
        get_if(k, "gap", c.cache.gap);
    }
    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        reject_unknown(s, {"concurrency", "gaps", "stacks", "seeds"}, "sweep");
        get_if(s, "concurrency", c.sweep.concurrency);
        get_if(s, "gaps", c.sweep.gaps);
        get_if(s, "stacks", c.sweep.stacks);
        get_if(s, "seeds", c.sweep.seeds);
    }
    if (j.contains("memory")) {
        const auto& m = j.at("memory");
        reject_unknown(m, {"batch", "seq_len", "dtype_bytes", "lora_rank", "ladder_reduction",
                           "num_classes"}, "memory");
        get_if(m, "batch", c.memory.batch);
        get_if(m, "seq_len", c.memory.seq_len);
        get_if(m, "dtype_bytes", c.memory.dtype_bytes);
        get_if(m, "lora_rank", c.memory.params.lora_rank);
        get_if(m, "ladder_reduction", c.memory.params.ladder_reduction);
        get_if(m, "num_classes", c.memory.params.num_classes);
    }
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        reject_unknown(d, {"image_size", "patch_size", "channels", "num_classes",
                           "signal_patches", "train_count", "eval_count", "signal_amplitude",
                           "noise_std", "seed"}, "dataset");
        get_if(d, "image_size", c.dataset.image_size);
        get_if(d, "patch_size", c.dataset.patch_size);
        get_if(d, "channels", c.dataset.channels);
        get_if(d, "num_classes", c.dataset.num_classes);
        get_if(d, "signal_patches", c.dataset.signal_patches);
        get_if(d, "train_count", c.dataset.train_count);
        get_if(d, "eval_count", c.dataset.eval_count);
        get_if(d, "signal_amplitude", c.dataset.signal_amplitude);
        get_if(d, "noise_std", c.dataset.noise_std);
        get_if(d, "seed", c.dataset.seed);
    } else {
        c.dataset.image_size = c.backbone.image_size;
        c.dataset.patch_size = c.backbone.patch_size;
        c.dataset.channels = c.backbone.channels;
        c.dataset.num_classes = c.side.num_classes;
    }
    c.backbone.validate();
    c.side.validate(c.backbone.depth, c.backbone.width);
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

}  // namespace last
