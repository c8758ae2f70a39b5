#include <catch_amalgamated.hpp>
#include <filesystem>

#include "last/side.hpp"
#include "oracles.hpp"

using namespace last;

namespace {

SideConfig toy_side() {
    SideConfig cfg;
    cfg.gap = 2;
    cfg.stack = 2;
    cfg.rank = 4;
    cfg.n_head = 2;
    cfg.num_classes = 3;
    return cfg;
}

std::vector<Tensor> random_taps(std::size_t count, std::size_t L, std::size_t d, Rng& rng) {
    std::vector<Tensor> taps;
    for (std::size_t i = 0; i < count; ++i) taps.push_back(oracle::random_tensor({L, d}, rng));
    return taps;
}

}  // namespace

TEST_CASE("side config validation") {
    SideConfig cfg = toy_side();
    cfg.validate(4, 16);
    REQUIRE(cfg.groups(4) == 2);
    REQUIRE(cfg.num_blocks(4) == 2);
    cfg.skip_block_zero = false;
    REQUIRE(cfg.num_blocks(4) == 3);

    cfg = toy_side();
    cfg.rank = 3;
    REQUIRE_THROWS_AS(cfg.validate(4, 16), ConfigError);  // not divisible by heads
    cfg = toy_side();
    cfg.rank = 16;
    REQUIRE_THROWS_AS(cfg.validate(4, 16), ConfigError);  // not < width
    cfg = toy_side();
    cfg.gap = 3;
    REQUIRE_THROWS_AS(cfg.validate(4, 16), ConfigError);  // depth % gap != 0
}

TEST_CASE("trainable parameter closed form") {
    SideConfig cfg = toy_side();
    std::size_t d = 16, r = 4;
    SideState s = init_side(cfg, 4, d, 0);
    std::size_t per_module = 3 * (d * r + r) + (r * d + d) + 2 * d;
    std::size_t head = 2 * d + d * cfg.num_classes + cfg.num_classes;
    REQUIRE(count_trainable_params(s, false) == 2 * cfg.stack * per_module);
    REQUIRE(count_trainable_params(s, true) == 2 * cfg.stack * per_module + head);

    cfg.ffn_hidden = 8;
    SideState sf = init_side(cfg, 4, d, 0);
    std::size_t ffn = 2 * d + (d * 8 + 8) + (8 * d + d);
    REQUIRE(count_trainable_params(sf, false) == 2 * cfg.stack * (per_module + ffn));
}

TEST_CASE("side init is deterministic") {
    SideConfig cfg = toy_side();
    SideState a = init_side(cfg, 4, 16, 5);
    SideState b = init_side(cfg, 4, 16, 5);
    SideState c = init_side(cfg, 4, 16, 6);
    auto pa = a.parameters(true), pb = b.parameters(true), pc = c.parameters(true);
    for (std::size_t i = 0; i < pa.size(); ++i)
        REQUIRE(pa[i]->tensor.data() == pb[i]->tensor.data());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i]->tensor.data() != pc[i]->tensor.data()) any_diff = true;
    REQUIRE(any_diff);
}

TEST_CASE("lsa module keeps the residual and the up path is low-rank") {
    SideConfig cfg = toy_side();
    SideState s = init_side(cfg, 4, 16, 1);
    Rng rng(2);
    Tensor x = oracle::random_tensor({6, 16}, rng);
    Tensor y = lsa_module(x, s.blocks[0].modules[0], cfg);
    REQUIRE(y.shape() == x.shape());
    // zeroed up projection turns the module into an exact identity
    LsaModuleWeights& m = s.blocks[0].modules[1];
    std::fill(m.up_w.tensor.mutable_data().begin(), m.up_w.tensor.mutable_data().end(), 0.0);
    std::fill(m.up_b.tensor.mutable_data().begin(), m.up_b.tensor.mutable_data().end(), 0.0);
    REQUIRE(oracle::bitwise_equal(lsa_module(x, m, cfg), x));
}

TEST_CASE("side_forward checks the tap count and runs the expected blocks") {
    SideConfig cfg = toy_side();
    SideState s = init_side(cfg, 4, 16, 3);
    Rng rng(4);
    auto taps = random_taps(3, 6, 16, rng);
    Tensor out = side_forward(taps, s);
    REQUIRE(out.shape() == Shape{6, 16});
    auto short_taps = random_taps(2, 6, 16, rng);
    REQUIRE_THROWS_AS(side_forward(short_taps, s), ConfigError);

    // m+1 block form consumes one more block
    SideConfig cfg0 = toy_side();
    cfg0.skip_block_zero = false;
    SideState s0 = init_side(cfg0, 4, 16, 3);
    REQUIRE(s0.blocks.size() == 3);
    Tensor out0 = side_forward(taps, s0);
    REQUIRE(out0.shape() == Shape{6, 16});
}

TEST_CASE("bias correction subtracts exactly the lower taps") {
    SideConfig cfg = toy_side();
    SideState corrected_state = init_side(cfg, 4, 16, 7);
    SideConfig cfg_nc = cfg;
    cfg_nc.bias_correction = false;
    SideState plain_state = init_side(cfg_nc, 4, 16, 7);
    Rng rng(8);
    auto taps = random_taps(3, 6, 16, rng);

    Tensor corrected = side_forward(taps, corrected_state);
    Tensor uncorrected = side_forward(taps, plain_state);
    Tensor expected = sub(sub(uncorrected, taps[0]), taps[1]);
    REQUIRE(oracle::bitwise_equal(corrected, expected));
}

TEST_CASE("classifier head handles single samples and batches") {
    SideConfig cfg = toy_side();
    SideState s = init_side(cfg, 4, 16, 9);
    Rng rng(10);
    Tensor rep1 = oracle::random_tensor({6, 16}, rng);
    Tensor l1 = classify(rep1, s.head);
    REQUIRE(l1.shape() == Shape{3});
    std::vector<double> batch = rep1.data();
    batch.insert(batch.end(), rep1.data().begin(), rep1.data().end());
    Tensor l2 = classify(Tensor({2, 6, 16}, batch), s.head);
    REQUIRE(l2.shape() == Shape{2, 3});
    for (std::size_t j = 0; j < 3; ++j) {
        REQUIRE(l2.data()[j] == l1.data()[j]);
        REQUIRE(l2.data()[3 + j] == l1.data()[j]);
    }
}

TEST_CASE("side weights round-trip through disk") {
    namespace fs = std::filesystem;
    SideConfig cfg = toy_side();
    SideState s = init_side(cfg, 4, 16, 11);
    fs::path dir = fs::temp_directory_path() / "last_test_side";
    fs::create_directories(dir);
    save_side(dir / "s.bin", s);
    SideState loaded = init_side(cfg, 4, 16, 0);
    load_side(dir / "s.bin", loaded);
    save_side(dir / "s2.bin", loaded);
    REQUIRE(read_file(dir / "s.bin") == read_file(dir / "s2.bin"));

    // mismatched layout is rejected
    SideConfig other = cfg;
    other.stack = 1;
    SideState wrong = init_side(other, 4, 16, 0);
    REQUIRE_THROWS_AS(load_side(dir / "s.bin", wrong), IoError);
    fs::remove_all(dir);
}
