// Ablation presets: small training grids over the side-network
// hyperparameters, emitted as CSV (and optional SVG line charts).

#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "last/cache.hpp"
#include "last/config.hpp"
#include "last/train.hpp"

namespace last {

inline const std::vector<std::string>& ablation_presets() {
    static const std::vector<std::string> presets = {"gap-stack", "heads", "bias", "ffn", "stack"};
    return presets;
}

struct AblationCell {
    TrainRun run;
    std::string row_key;
    std::string col_key;
};

struct AblationResult {
    std::string preset;
    std::string csv;
    std::vector<AblationCell> cells;
};

namespace abdetail {

inline std::vector<std::size_t> valid_gaps(const std::vector<std::size_t>& wanted,
                                           std::size_t depth, std::size_t cache_gap) {
    std::vector<std::size_t> out;
    for (std::size_t g : wanted)
        if (g != 0 && depth % g == 0 && g % cache_gap == 0) out.push_back(g);
    if (out.empty()) throw ConfigError("no usable gap values for depth " + std::to_string(depth));
    return out;
}

inline TrainRun make_run(const RunConfig& cfg, const SideConfig& side, std::string id) {
    TrainRun run;
    run.run_id = std::move(id);
    run.side = side;
    run.seed = cfg.train.seed;
    run.lr = cfg.train.lr;
    run.epochs = cfg.train.epochs;
    run.batch_size = cfg.train.batch_size;
    return run;
}

}  // namespace abdetail

inline AblationResult run_ablation(const std::string& preset, const RunConfig& cfg,
                                   const FeatureCache& cache, std::size_t concurrency = 1) {
    std::size_t depth = cache.manifest().backbone.depth;
    std::size_t cache_gap = cache.manifest().gap;
    AblationResult res;
    res.preset = preset;
    SweepPlan plan;
    plan.max_concurrency = concurrency ? concurrency : 1;
    plan.options.train_count = cfg.train.train_count;
    std::vector<std::pair<std::string, std::string>> keys;  // row, col per run

    if (preset == "gap-stack") {
        for (std::size_t g : abdetail::valid_gaps(cfg.sweep.gaps, depth, cache_gap))
            for (std::size_t T : cfg.sweep.stacks) {
                SideConfig s = cfg.side;
                s.gap = g;
                s.stack = T;
                plan.runs.push_back(abdetail::make_run(
                    cfg, s, "g" + std::to_string(g) + "_T" + std::to_string(T)));
                keys.emplace_back("g=" + std::to_string(g), "T=" + std::to_string(T));
            }
    } else if (preset == "heads") {
        std::vector<std::size_t> head_widths = {1, 2};
        std::vector<std::size_t> head_counts = {2, 4};
        for (std::size_t rh : head_widths)
            for (std::size_t nh : head_counts) {
                SideConfig s = cfg.side;
                s.rank = rh * nh;
                s.n_head = nh;
                if (s.rank >= cache.manifest().backbone.width) continue;
                plan.runs.push_back(abdetail::make_run(
                    cfg, s, "rh" + std::to_string(rh) + "_nh" + std::to_string(nh)));
                keys.emplace_back("r_head=" + std::to_string(rh),
                                  "n_head=" + std::to_string(nh));
            }
    } else if (preset == "bias") {
        for (bool corr : {true, false})
            for (std::size_t g : abdetail::valid_gaps(cfg.sweep.gaps, depth, cache_gap)) {
                SideConfig s = cfg.side;
                s.bias_correction = corr;
                s.gap = g;
                plan.runs.push_back(abdetail::make_run(
                    cfg, s, std::string(corr ? "corr" : "nocorr") + "_g" + std::to_string(g)));
                keys.emplace_back(corr ? "correction=on" : "correction=off",
                                  "g=" + std::to_string(g));
            }
    } else if (preset == "ffn") {
        std::vector<std::optional<std::size_t>> hiddens = {std::nullopt, 8, 16};
        for (const auto& h : hiddens) {
            SideConfig s = cfg.side;
            s.ffn_hidden = h;
            plan.runs.push_back(abdetail::make_run(
                cfg, s, h ? "ffn_h" + std::to_string(*h) : "ffn_off"));
            keys.emplace_back(h ? "ffn=on" : "ffn=off", h ? "h=" + std::to_string(*h) : "h=-");
        }
    } else if (preset == "stack") {
        for (std::size_t T = 1; T <= 5; ++T) {
            SideConfig s = cfg.side;
            s.stack = T;
            plan.runs.push_back(abdetail::make_run(cfg, s, "T" + std::to_string(T)));
            keys.emplace_back("T=" + std::to_string(T), "");
        }
    } else {
        std::string valid;
        for (const auto& p : ablation_presets()) valid += (valid.empty() ? "" : ", ") + p;
        throw ConfigError("invalid preset '" + preset + "'; valid presets: " + valid);
    }

    auto runs = sweep(std::move(plan), cache);

    std::ostringstream csv;
    csv << "row,col,run_id,g,T,r,n_head,bias_correction,ffn_hidden,final_eval_acc,"
           "final_train_loss,trainable_params,status\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const TrainRun& r = runs[i];
        std::size_t params = 0;
        if (r.state) params = count_trainable_params(*r.state, true);
        char acc[64];
        std::snprintf(acc, sizeof(acc), "%.6f,%.6f", r.final_eval_acc, r.final_train_loss);
        csv << keys[i].first << ',' << keys[i].second << ',' << r.run_id << ',' << r.side.gap
            << ',' << r.side.stack << ',' << r.side.rank << ',' << r.side.n_head << ','
            << (r.side.bias_correction ? 1 : 0) << ','
            << (r.side.ffn_hidden ? std::to_string(*r.side.ffn_hidden) : std::string("-")) << ','
            << acc << ',' << params << ',' << (r.failed ? "failed" : "ok") << '\n';
        res.cells.push_back({r, keys[i].first, keys[i].second});
    }
    res.csv = csv.str();
    return res;
}

// Minimal SVG line chart: one polyline per series of (x, y) points.
struct SvgSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

inline std::string render_svg_chart(const std::string& title,
                                    const std::vector<SvgSeries>& series) {
    const double W = 640, H = 420, ml = 60, mr = 20, mt = 40, mb = 40;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmin > xmax) { xmin = 0; xmax = 1; }
    if (ymin >= ymax) { ymin -= 0.5; ymax += 0.5; }
    auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto sy = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                   "#8c564b"};
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title
        << "</text>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
        << H - mb << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
        << "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = colors[i % 6];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (auto [x, y] : series[i].points) svg << sx(x) << ',' << sy(y) << ' ';
        svg << "\"/>\n";
        svg << "<text x=\"" << W - mr - 150 << "\" y=\"" << mt + 18 * (i + 1) << "\" fill=\""
            << color << "\" font-size=\"12\">" << series[i].label << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace last
