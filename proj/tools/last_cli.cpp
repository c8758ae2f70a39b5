// Command-line entry point: dataset synthesis, feature extraction, training,
// sweeps, ablations and memory estimates.
//
// Exit codes: 0 ok, 2 configuration error, 3 IO error, 4 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "last/ablate.hpp"
#include "last/cache.hpp"
#include "last/config.hpp"
#include "last/dataset.hpp"
#include "last/memory.hpp"
#include "last/train.hpp"

namespace fs = std::filesystem;
using namespace last;

namespace {

RunConfig load_config(const std::string& path) {
    if (path.empty()) return parse_run_config(nlohmann::json::object());
    return load_run_config(path);
}

std::size_t env_threads(std::size_t flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("LAST_THREADS")) {
        long v = std::atol(env);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return 1;
}

int cmd_synth(const RunConfig& cfg, const std::string& out_dir, std::uint64_t seed) {
    SynthConfig sc = cfg.dataset;
    sc.seed = seed;
    auto samples = synth_dataset(sc);
    save_dataset(out_dir, samples);
    std::cout << "wrote " << samples.size() << " samples (" << sc.train_count << " train, "
              << sc.eval_count << " eval) to " << out_dir << "\n";
    return 0;
}

int cmd_extract(const RunConfig& cfg, const std::string& dataset_path,
                const std::string& out_dir) {
    if (!fs::exists(dataset_path))
        throw IoError("dataset path does not exist: " + dataset_path);
    auto dataset = load_dataset(dataset_path);
    ViTWeights backbone = init_synthetic(cfg.backbone, cfg.backbone_seed);
    bool ran = extract(dataset, backbone, cfg.cache.gap, out_dir);
    FeatureCache cache(out_dir);
    std::size_t bytes = cache.size() * cache.record_stride() + 6;
    if (!ran) std::cout << "cache up-to-date\n";
    std::cout << "cache: " << cache.size() << " samples, " << cache.manifest().tap_count
              << " taps each, " << bytes << " bytes\n";
    return 0;
}

void write_run_artifacts(const TrainRun& run, const fs::path& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    atomic_write(out_dir / (run.run_id + ".metrics.jsonl"), metrics_jsonl(run));
    if (run.state) save_side(out_dir / (run.run_id + ".weights.bin"), *run.state);
}

int cmd_train(const RunConfig& cfg, const std::string& cache_dir, const std::string& dataset_path,
              const std::string& out_dir, const std::string& strategy, bool live,
              std::uint64_t seed) {
    TrainOptions opts{.train_count = cfg.train.train_count};
    if (strategy == "last") {
        TrainRun run;
        run.run_id = "last";
        run.side = cfg.side;
        run.seed = seed;
        run.lr = cfg.train.lr;
        run.epochs = cfg.train.epochs;
        run.batch_size = cfg.train.batch_size;
        if (live) {
            if (dataset_path.empty()) throw ConfigError("--live requires --dataset");
            auto dataset = load_dataset(dataset_path);
            ViTWeights backbone = init_synthetic(cfg.backbone, cfg.backbone_seed);
            LiveTapSource src(dataset, backbone);
            train(run, src, opts);
        } else {
            FeatureCache cache(cache_dir);
            CacheTapSource src(cache);
            train(run, src, opts);
        }
        std::cout << "final train loss " << run.final_train_loss << ", eval acc "
                  << run.final_eval_acc << "\n";
        if (!out_dir.empty()) write_run_artifacts(run, out_dir);
    } else if (strategy == "linear_probe") {
        FeatureCache cache(cache_dir);
        CacheTapSource src(cache);
        auto res = linear_probe(src, cfg.side.num_classes, seed, cfg.train.lr, cfg.train.epochs,
                                cfg.train.batch_size, opts);
        std::cout << "linear probe: eval acc " << res.final_eval_acc << ", trainable params "
                  << res.trainable_params << ", retained elements "
                  << res.retained_elements_first_step << "\n";
    } else if (strategy == "full") {
        if (dataset_path.empty()) throw ConfigError("--strategy full requires --dataset");
        auto dataset = load_dataset(dataset_path);
        std::size_t train_count =
            cfg.train.train_count ? cfg.train.train_count : dataset.size() - dataset.size() / 5;
        auto res = full_finetune(dataset, cfg.backbone, cfg.side.num_classes, seed, cfg.train.lr,
                                 cfg.train.epochs, cfg.train.batch_size, train_count);
        std::cout << "full finetune: eval acc " << res.final_eval_acc << ", trainable params "
                  << res.trainable_params << ", retained elements "
                  << res.retained_elements_first_step << "\n";
    } else {
        throw ConfigError("unknown train strategy '" + strategy +
                          "' (expected last, linear_probe or full)");
    }
    return 0;
}

int cmd_sweep(const RunConfig& cfg, const std::string& cache_dir, const std::string& out_dir,
              std::size_t concurrency) {
    FeatureCache cache(cache_dir);
    SweepPlan plan;
    plan.max_concurrency = env_threads(concurrency);
    plan.options.train_count = cfg.train.train_count;
    for (std::size_t g : cfg.sweep.gaps)
        for (std::size_t T : cfg.sweep.stacks)
            for (std::uint64_t seed : cfg.sweep.seeds) {
                SideConfig s = cfg.side;
                s.gap = g;
                s.stack = T;
                TrainRun run;
                run.run_id = "g" + std::to_string(g) + "_T" + std::to_string(T) + "_s" +
                             std::to_string(seed);
                run.side = s;
                run.seed = seed;
                run.lr = cfg.train.lr;
                run.epochs = cfg.train.epochs;
                run.batch_size = cfg.train.batch_size;
                plan.runs.push_back(run);
            }
    auto runs = sweep(std::move(plan), cache);
    std::string csv = sweep_summary_csv(runs);
    std::cout << csv;
    if (!out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        atomic_write(fs::path(out_dir) / "summary.csv", csv);
        for (const auto& r : runs)
            if (!r.failed) write_run_artifacts(r, out_dir);
    }
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& cache_dir, const std::string& out_dir,
               const std::string& preset, bool plot, std::size_t concurrency) {
    FeatureCache cache(cache_dir);
    auto res = run_ablation(preset, cfg, cache, env_threads(concurrency));
    std::cout << res.csv;
    if (!out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        atomic_write(fs::path(out_dir) / (preset + ".csv"), res.csv);
        if (plot) {
            // one series per row key, eval accuracy over the column index
            std::vector<SvgSeries> series;
            for (const auto& cell : res.cells) {
                SvgSeries* s = nullptr;
                for (auto& existing : series)
                    if (existing.label == cell.row_key) s = &existing;
                if (!s) {
                    series.push_back({cell.row_key, {}});
                    s = &series.back();
                }
                s->points.emplace_back(static_cast<double>(s->points.size()),
                                       cell.run.final_eval_acc);
            }
            atomic_write(fs::path(out_dir) / (preset + ".svg"),
                         render_svg_chart("ablation: " + preset, series));
        }
    }
    return 0;
}

int cmd_estimate_mem(RunConfig cfg, const std::string& strategy, std::size_t depth_override,
                     bool as_json, const std::string& out_path) {
    if (depth_override) {
        // keep the number of side groups fixed when the depth changes
        std::size_t m = cfg.backbone.depth / cfg.side.gap;
        if (depth_override % m != 0)
            throw ConfigError("depth " + std::to_string(depth_override) +
                              " incompatible with fixed group count " + std::to_string(m));
        cfg.backbone.depth = depth_override;
        cfg.side.gap = depth_override / m;
    }
    std::vector<Strategy> strategies;
    if (strategy.empty())
        strategies = {Strategy::full, Strategy::bias_only, Strategy::entangled_lowrank,
                      Strategy::ladder_side, Strategy::last, Strategy::linear_probe};
    else
        strategies = {strategy_from_name(strategy)};
    std::vector<FootprintReport> reports;
    for (Strategy s : strategies)
        reports.push_back(estimate(cfg.backbone, cfg.side, s, cfg.memory.params, cfg.memory.batch,
                                   cfg.memory.seq_len, cfg.memory.dtype_bytes));
    std::string text;
    if (as_json) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : reports) j.push_back(r.to_json());
        text = j.dump(2) + "\n";
    } else if (reports.size() >= 2) {
        text = compare(reports);
    } else {
        text = reports[0].to_json().dump(2) + "\n";
    }
    std::cout << text;
    if (!out_path.empty()) atomic_write(out_path, text);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"low-rank attention side-tuning toolkit"};
    app.require_subcommand(1);

    std::string config_path, dataset_path, cache_dir, out_dir, preset;
    std::string train_strategy = "last", mem_strategy;
    std::uint64_t seed = 0;
    std::size_t concurrency = 0, depth_override = 0;
    bool live = false, plot = false, as_json = false;

    auto* synth = app.add_subcommand("synth", "generate a synthetic classification dataset");
    synth->add_option("--config", config_path);
    synth->add_option("--out", out_dir)->required();
    synth->add_option("--seed", seed);

    auto* extract = app.add_subcommand("extract", "extract backbone taps into a feature cache");
    extract->add_option("--config", config_path);
    extract->add_option("--dataset", dataset_path)->required();
    extract->add_option("--out", out_dir)->required();

    auto* train = app.add_subcommand("train", "train one configuration");
    train->add_option("--config", config_path);
    train->add_option("--cache", cache_dir);
    train->add_option("--dataset", dataset_path);
    train->add_option("--out", out_dir);
    train->add_option("--seed", seed);
    train->add_option("--strategy", train_strategy);
    train->add_flag("--live", live, "bypass the cache; run live backbone forwards");

    auto* sweep_cmd = app.add_subcommand("sweep", "train many configurations against one cache");
    sweep_cmd->add_option("--config", config_path);
    sweep_cmd->add_option("--cache", cache_dir)->required();
    sweep_cmd->add_option("--out", out_dir);
    sweep_cmd->add_option("--concurrency", concurrency);

    auto* ablate = app.add_subcommand("ablate", "run a preset ablation grid");
    ablate->add_option("--config", config_path);
    ablate->add_option("--cache", cache_dir)->required();
    ablate->add_option("--out", out_dir);
    ablate->add_option("--preset", preset)->required();
    ablate->add_option("--concurrency", concurrency);
    ablate->add_flag("--plot", plot, "also emit an SVG chart");

    auto* mem = app.add_subcommand("estimate-mem", "analytic training-memory footprint");
    mem->add_option("--config", config_path);
    mem->add_option("--strategy", mem_strategy);
    mem->add_option("--depth", depth_override, "override backbone depth (group count kept fixed)");
    mem->add_option("--out", out_dir);
    mem->add_flag("--json", as_json);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = load_config(config_path);
        if (synth->parsed()) return cmd_synth(cfg, out_dir, seed);
        if (extract->parsed()) return cmd_extract(cfg, dataset_path, out_dir);
        if (train->parsed())
            return cmd_train(cfg, cache_dir, dataset_path, out_dir, train_strategy, live, seed);
        if (sweep_cmd->parsed()) return cmd_sweep(cfg, cache_dir, out_dir, concurrency);
        if (ablate->parsed())
            return cmd_ablate(cfg, cache_dir, out_dir, preset, plot, concurrency);
        if (mem->parsed())
            return cmd_estimate_mem(cfg, mem_strategy, depth_override, as_json, out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
