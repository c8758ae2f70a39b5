// Synthetic classification task ("synth-cls") and the raw-tensor dataset
// directory format.
//
// synth-cls: seeded images where a few designated signal patches are filled
// bright or dark, and the label is the parity (mod num_classes) of the count
// of bright signal patches. Patch brightness is a nonlinear function of the
// pixels, so a linear head on frozen features cannot solve it, while an
// attention side-network can.
//
// Dataset directory format: images/NNNNN.bin (one "image" tensor per file in
// the flat-binary weight format) plus labels.csv with "id,label" lines.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "last/cache.hpp"
#include "last/rng.hpp"
#include "last/serialize.hpp"
#include "last/tensor.hpp"

namespace last {

struct SynthConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t num_classes = 2;
    std::size_t signal_patches = 2;  // parity is over these patches
    std::size_t train_count = 800;   // VTAB-style split
    std::size_t eval_count = 200;
    double signal_amplitude = 1.0;
    double noise_std = 0.15;
    std::uint64_t seed = 0;

    std::size_t total() const { return train_count + eval_count; }
    std::size_t patches() const {
        std::size_t side = image_size / patch_size;
        return side * side;
    }
};

// Deterministic under seed; sample i depends only on (seed, i).
inline Sample synth_sample(const SynthConfig& cfg, std::size_t index) {
    Rng rng(fnv1a(&index, sizeof(index), cfg.seed * 0x9e3779b97f4a7c15ull + 0x12345));
    std::size_t S = cfg.image_size, p = cfg.patch_size, C = cfg.channels;
    std::size_t side = S / p;
    std::vector<double> img(C * S * S);
    for (auto& v : img) v = rng.normal() * cfg.noise_std;

    // signal patches sit on the main diagonal
    std::size_t bright = 0;
    for (std::size_t k = 0; k < cfg.signal_patches; ++k) {
        bool on = rng.uniform() < 0.5;
        bright += on ? 1 : 0;
        std::size_t py = k % side, px = k % side;
        double amp = on ? cfg.signal_amplitude : -cfg.signal_amplitude;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    img[(c * S + py * p + y) * S + px * p + x] += amp;
        (void)px;
    }
    Sample s;
    s.image = Tensor({C, S, S}, std::move(img));
    s.label = bright % cfg.num_classes;
    return s;
}

inline std::vector<Sample> synth_dataset(const SynthConfig& cfg) {
    std::vector<Sample> out;
    out.reserve(cfg.total());
    for (std::size_t i = 0; i < cfg.total(); ++i) out.push_back(synth_sample(cfg, i));
    return out;
}

inline void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    std::ostringstream labels;
    labels << "id,label\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%05zu.bin", i);
        write_tensor_file(dir / "images" / name, kMagicBackbone,
                          {{"image", samples[i].image.shape(), samples[i].image.data()}});
        labels << i << ',' << samples[i].label << '\n';
    }
    atomic_write(dir / "labels.csv", labels.str());
}

inline std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::path labels_path = dir / "labels.csv";
    if (!fs::exists(labels_path)) throw IoError("dataset labels file not found: " + labels_path.string());
    std::ifstream f(labels_path);
    std::string line;
    std::getline(f, line);  // header
    std::vector<Sample> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) throw IoError("malformed labels.csv line: " + line);
        std::string id = line.substr(0, comma);
        std::size_t label = std::stoull(line.substr(comma + 1));
        char name[32];
        std::snprintf(name, sizeof(name), "%05zu.bin", static_cast<std::size_t>(std::stoull(id)));
        auto tensors = read_tensor_file(dir / "images" / name, kMagicBackbone);
        if (tensors.empty()) throw IoError("empty image file for sample " + id);
        Sample s;
        s.image = Tensor(tensors[0].shape, std::move(tensors[0].data));
        s.label = label;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace last
