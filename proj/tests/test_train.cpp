#include <catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>

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

SideConfig toy_side() {
    SideConfig cfg;
    cfg.gap = 2;
    cfg.stack = 1;
    cfg.rank = 4;
    cfg.n_head = 2;
    cfg.num_classes = 2;
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

void make_cache(const fs::path& dir, std::size_t count, std::size_t gap = 1) {
    SynthConfig sc;
    sc.train_count = count;
    sc.eval_count = 0;
    auto dataset = synth_dataset(sc);
    ViTWeights backbone = init_synthetic(toy_backbone(), 0);
    extract(dataset, backbone, gap, dir);
}

TrainRun toy_run(std::uint64_t seed, std::size_t epochs = 2) {
    TrainRun run;
    run.run_id = "toy_s" + std::to_string(seed);
    run.side = toy_side();
    run.seed = seed;
    run.lr = 1e-3;
    run.epochs = epochs;
    run.batch_size = 4;
    return run;
}

// Serves deliberately poisoned taps so the NaN guard can be exercised.
class NanTapSource : public TapSource {
public:
    std::size_t size() const override { return 8; }
    std::size_t width() const override { return 16; }
    std::size_t depth() const override { return 4; }
    std::vector<Tensor> batch_taps(const std::vector<std::size_t>& indices,
                                   std::size_t gap) const override {
        std::vector<Tensor> taps;
        for (std::size_t t = 0; t <= 4 / gap; ++t) {
            Tensor z = Tensor::full({indices.size(), 17, 16}, 0.1);
            z.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
            taps.push_back(z);
        }
        return taps;
    }
    std::vector<std::size_t> batch_labels(const std::vector<std::size_t>& indices) const override {
        return std::vector<std::size_t>(indices.size(), 0);
    }
};

}  // namespace

TEST_CASE("cross entropy matches log-softmax and rejects bad labels") {
    Tensor logits({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
    Tensor loss = cross_entropy(logits, std::vector<std::size_t>{1, 2});
    double expect = 0.0;
    for (std::size_t b = 0; b < 2; ++b) {
        const double* l = logits.data().data() + b * 3;
        double denom = std::exp(l[0]) + std::exp(l[1]) + std::exp(l[2]);
        expect += -std::log(std::exp(l[b == 0 ? 1 : 2]) / denom);
    }
    REQUIRE_THAT(loss.item(), Catch::Matchers::WithinRel(expect / 2.0, 1e-12));
    REQUIRE_THROWS_AS(cross_entropy(logits, std::vector<std::size_t>{1, 3}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(cross_entropy(logits, std::vector<std::size_t>{1}), ShapeError);
}

TEST_CASE("cross entropy gradient matches finite differences") {
    Rng rng(3);
    Parameter p(oracle::random_tensor({2, 4}, rng), "logits");
    std::vector<std::size_t> labels{1, 3};
    auto loss_fn = [&]() { return cross_entropy(p.tensor, labels); };
    auto res = oracle::grad_check(loss_fn, {&p}, 1e-6);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-5);
}

TEST_CASE("adam requires gradients and skips frozen parameters") {
    Parameter w(Tensor({2}, {1.0, 2.0}), "w");
    Parameter f(Tensor({2}, {5.0, 6.0}), "f", true);
    Adam opt({&w, &f}, {.lr = 0.1});
    REQUIRE_THROWS(opt.step());
    backward(sum(mul(w.tensor, w.tensor)));
    opt.step();
    REQUIRE(w.tensor.data()[0] < 1.0);
    REQUIRE(f.tensor.data() == std::vector<double>{5.0, 6.0});
    REQUIRE_FALSE(w.tensor.has_grad());  // gradients cleared after the step
}

TEST_CASE("training is bitwise deterministic under the run seed") {
    TempDir dir("last_test_train_det");
    make_cache(dir.path, 20);
    FeatureCache cache(dir.path);
    TrainRun a = toy_run(1), b = toy_run(1), c = toy_run(2);
    train(a, cache);
    train(b, cache);
    train(c, cache);
    REQUIRE(a.metrics.size() == 2);
    REQUIRE(metrics_jsonl(a) == metrics_jsonl(b));
    for (std::size_t e = 0; e < a.metrics.size(); ++e) {
        REQUIRE(a.metrics[e].train_loss == b.metrics[e].train_loss);
        REQUIRE(a.metrics[e].eval_acc == b.metrics[e].eval_acc);
    }
    bool differs = false;
    for (std::size_t e = 0; e < a.metrics.size(); ++e)
        if (a.metrics[e].train_loss != c.metrics[e].train_loss) differs = true;
    REQUIRE(differs);
    REQUIRE(a.state != nullptr);
    REQUIRE(a.retained_elements_first_step > 0);
}

TEST_CASE("cached and live taps produce identical loss curves") {
    TempDir dir("last_test_train_live");
    SynthConfig sc;
    sc.train_count = 12;
    sc.eval_count = 4;
    auto dataset = synth_dataset(sc);
    ViTWeights backbone = init_synthetic(toy_backbone(), 0);
    extract(dataset, backbone, 1, dir.path);
    FeatureCache cache(dir.path);

    TrainRun cached = toy_run(5), live = toy_run(5);
    CacheTapSource cache_src(cache);
    LiveTapSource live_src(dataset, backbone);
    train(cached, cache_src);
    train(live, live_src);
    for (std::size_t e = 0; e < cached.metrics.size(); ++e) {
        REQUIRE(cached.metrics[e].train_loss == live.metrics[e].train_loss);
        REQUIRE(cached.metrics[e].eval_acc == live.metrics[e].eval_acc);
    }
}

TEST_CASE("non-finite loss raises a numeric error with context") {
    NanTapSource src;
    TrainRun run = toy_run(0);
    REQUIRE_THROWS_AS(train(run, src), NumericError);
    try {
        TrainRun again = toy_run(0);
        train(again, src);
    } catch (const NumericError& e) {
        std::string msg = e.what();
        REQUIRE(msg.find("epoch 0") != std::string::npos);
        REQUIRE(msg.find("toy_s0") != std::string::npos);
    }
}

TEST_CASE("sweep isolates per-run failures and sorts the summary") {
    TempDir dir("last_test_sweep_fail");
    make_cache(dir.path, 16);
    FeatureCache cache(dir.path);
    SweepPlan plan;
    plan.max_concurrency = 2;
    TrainRun good = toy_run(1);
    good.run_id = "good";
    TrainRun bad = toy_run(1);
    bad.run_id = "bad";
    bad.side.gap = 3;  // depth 4 % 3 != 0: init_side throws
    plan.runs = {bad, good};
    auto runs = sweep(std::move(plan), cache);
    REQUIRE(runs[0].failed);
    REQUIRE_FALSE(runs[1].failed);
    std::string csv = sweep_summary_csv(runs);
    REQUIRE(csv.find("good") < csv.find("bad"));  // failures sort last
    REQUIRE(csv.find("failed") != std::string::npos);
}

TEST_CASE("sweep results are independent of concurrency") {
    TempDir dir("last_test_sweep_conc");
    make_cache(dir.path, 16);
    FeatureCache cache(dir.path);
    auto build_plan = [&](std::size_t conc) {
        SweepPlan plan;
        plan.max_concurrency = conc;
        for (std::uint64_t s : {0, 1, 2, 3}) plan.runs.push_back(toy_run(s, 1));
        return plan;
    };
    auto serial = sweep(build_plan(1), cache);
    auto parallel = sweep(build_plan(4), cache);
    REQUIRE(sweep_summary_csv(serial) == sweep_summary_csv(parallel));
}

TEST_CASE("linear probe trains only the head") {
    TempDir dir("last_test_probe");
    make_cache(dir.path, 20);
    FeatureCache cache(dir.path);
    CacheTapSource src(cache);
    auto res = linear_probe(src, 2, 0, 1e-3, 1, 4);
    REQUIRE(res.trainable_params == 2 * 16 + 16 * 2 + 2);
    REQUIRE(res.metrics.size() == 1);
    // retained: head LN input + output on the class token, plus the logits
    std::size_t B = 4, d = 16, C = 2;
    REQUIRE(res.retained_elements_first_step == B * (2 * d + C));
}
