#include <catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "last/cache.hpp"
#include "last/dataset.hpp"
#include "last/train.hpp"
#include "oracles.hpp"

using namespace last;
namespace fs = std::filesystem;

namespace {

BackboneConfig toy_backbone() {
    BackboneConfig cfg;
    cfg.depth = 4;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.patch_size = 4;
    cfg.image_size = 16;
    return cfg;
}

SynthConfig tiny_synth() {
    SynthConfig cfg;
    cfg.train_count = 6;
    cfg.eval_count = 2;
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("extraction round-trips taps at f32 precision") {
    TempDir dir("last_test_cache_rt");
    auto dataset = synth_dataset(tiny_synth());
    ViTWeights backbone = init_synthetic(toy_backbone(), 0);
    REQUIRE(extract(dataset, backbone, 1, dir.path));

    FeatureCache cache(dir.path);
    REQUIRE(cache.size() == dataset.size());
    REQUIRE(cache.manifest().tap_count == 5);
    REQUIRE(cache.manifest().tap_shape == Shape{17, 16});
    TapSchedule sched(4, 1);
    for (std::size_t i : {std::size_t{0}, dataset.size() - 1}) {
        auto live = forward_with_taps(dataset[i].image, backbone, sched);
        auto cached = cache.taps(i);
        REQUIRE(cached.size() == live.size());
        for (std::size_t t = 0; t < live.size(); ++t)
            REQUIRE(oracle::bitwise_equal(cached[t], quantize_f32(live[t])));
        REQUIRE(cache.label(i) == dataset[i].label);
    }
}

TEST_CASE("re-extraction is a no-op and a foreign backbone is refused") {
    TempDir dir("last_test_cache_noop");
    auto dataset = synth_dataset(tiny_synth());
    ViTWeights backbone = init_synthetic(toy_backbone(), 0);
    REQUIRE(extract(dataset, backbone, 1, dir.path));
    std::string bytes = read_file(dir.path / "records.bin");
    std::uint64_t forwards = backbone_forward_count().load();
    REQUIRE_FALSE(extract(dataset, backbone, 1, dir.path));
    REQUIRE(backbone_forward_count().load() == forwards);  // fast path: zero forwards
    REQUIRE(read_file(dir.path / "records.bin") == bytes);

    ViTWeights other = init_synthetic(toy_backbone(), 99);
    REQUIRE_THROWS_AS(extract(dataset, other, 1, dir.path), IoError);
}

TEST_CASE("coarse gaps are served from a fine cache") {
    TempDir dir("last_test_cache_gap");
    auto dataset = synth_dataset(tiny_synth());
    ViTWeights backbone = init_synthetic(toy_backbone(), 0);
    extract(dataset, backbone, 1, dir.path);
    FeatureCache cache(dir.path);

    REQUIRE(cache.tap_indices_for_gap(1) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    REQUIRE(cache.tap_indices_for_gap(2) == std::vector<std::size_t>{0, 2, 4});
    REQUIRE(cache.tap_indices_for_gap(4) == std::vector<std::size_t>{0, 4});
    REQUIRE_THROWS_AS(cache.tap_indices_for_gap(3), ConfigError);

    auto batch = cache.batch_taps({1, 3}, 2);
    REQUIRE(batch.size() == 3);
    REQUIRE(batch[0].shape() == Shape{2, 17, 16});
    Tensor single = cache.tap(3, 2);  // tap index 2 = second entry at gap 2
    for (std::size_t i = 0; i < single.size(); ++i)
        REQUIRE(batch[1].data()[single.size() + i] == single.data()[i]);

    // a cache extracted at gap 2 cannot serve gap 1
    TempDir coarse("last_test_cache_coarse");
    extract(dataset, backbone, 2, coarse.path);
    FeatureCache c2(coarse.path);
    REQUIRE_THROWS_AS(c2.tap_indices_for_gap(1), ConfigError);
}

TEST_CASE("corrupt caches are rejected") {
    TempDir dir("last_test_cache_bad");
    auto dataset = synth_dataset(tiny_synth());
    ViTWeights backbone = init_synthetic(toy_backbone(), 0);
    extract(dataset, backbone, 2, dir.path);

    std::string bytes = read_file(dir.path / "records.bin");
    atomic_write(dir.path / "records.bin", bytes.substr(0, bytes.size() - 8));
    REQUIRE_THROWS_AS(FeatureCache(dir.path), IoError);
    atomic_write(dir.path / "records.bin", "XXXXXX" + bytes.substr(6));
    REQUIRE_THROWS_AS(FeatureCache(dir.path), IoError);
    fs::remove(dir.path / "manifest.json");
    REQUIRE_THROWS_AS(FeatureCache(dir.path), IoError);
}

TEST_CASE("dataset directory round-trips") {
    TempDir dir("last_test_dataset");
    SynthConfig cfg = tiny_synth();
    auto samples = synth_dataset(cfg);
    save_dataset(dir.path, samples);
    auto loaded = load_dataset(dir.path);
    REQUIRE(loaded.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        REQUIRE(loaded[i].label == samples[i].label);
        REQUIRE(oracle::bitwise_equal(loaded[i].image, quantize_f32(samples[i].image)));
    }
    // sample i depends only on (seed, i)
    REQUIRE(oracle::bitwise_equal(synth_sample(cfg, 3).image, samples[3].image));
    SynthConfig reseeded = cfg;
    reseeded.seed = 17;
    REQUIRE_FALSE(oracle::bitwise_equal(synth_sample(reseeded, 3).image, samples[3].image));
}

TEST_CASE("synth labels are balanced parity of signal patches") {
    SynthConfig cfg;
    cfg.train_count = 400;
    cfg.eval_count = 0;
    auto samples = synth_dataset(cfg);
    std::size_t ones = 0;
    for (const auto& s : samples) {
        REQUIRE(s.label < cfg.num_classes);
        ones += s.label;
    }
    REQUIRE(ones > 120);
    REQUIRE(ones < 280);
}
