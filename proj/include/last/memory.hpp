// Analytic training-memory accounting.
//
// The unit is scalar elements; bytes appear only at the report edge. Per
// finetuning strategy the model counts, layer class by layer class, which
// activations must be kept for the backward pass:
//   - an activation feeding a *trainable* weight is kept (weight-gradient
//     dependency),
//   - nonlinearities crossed by the gradient flow keep their own dependency
//     (layer-norm input, GELU input, softmax output) regardless of which
//     weights are trainable,
//   - an input to a *frozen* linear layer is not kept: the input gradient
//     needs only the weight.
// This mirrors the retention convention of the autodiff tape, so the toy
// LAST prediction can be checked against instrumented counts. Framework and
// allocator overheads are not modeled; only orderings and ratios are claimed.

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "last/side.hpp"
#include "last/vit.hpp"

namespace last {

enum class Strategy {
    full,
    bias_only,
    entangled_lowrank,  // LoRA-style adapters inside the backbone graph
    ladder_side,        // LST-style reduced transformer side network
    last,               // low-rank attention side-tuning
    linear_probe,
};

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::full: return "full";
        case Strategy::bias_only: return "bias_only";
        case Strategy::entangled_lowrank: return "entangled_lowrank";
        case Strategy::ladder_side: return "ladder_side";
        case Strategy::last: return "last";
        case Strategy::linear_probe: return "linear_probe";
    }
    return "?";
}

inline Strategy strategy_from_name(const std::string& name) {
    for (Strategy s : {Strategy::full, Strategy::bias_only, Strategy::entangled_lowrank,
                       Strategy::ladder_side, Strategy::last, Strategy::linear_probe})
        if (name == strategy_name(s)) return s;
    throw ConfigError("unknown strategy '" + name + "'");
}

struct StrategyParams {
    std::size_t lora_rank = 8;          // entangled_lowrank
    std::size_t ladder_reduction = 8;   // ladder_side: side width = d / reduction
    std::size_t num_classes = 100;
};

struct FootprintReport {
    std::string strategy;
    std::size_t trainable_param_count = 0;
    std::size_t frozen_param_count = 0;
    std::size_t activation_elements = 0;   // scaled by batch
    std::size_t optimizer_state_elements = 0;  // 2x trainable (Adam moments)
    std::size_t gradient_elements = 0;         // 1x trainable
    std::size_t total_elements = 0;
    double total_bytes = 0.0;

    nlohmann::json to_json() const {
        return {{"strategy", strategy},
                {"trainable_param_count", trainable_param_count},
                {"frozen_param_count", frozen_param_count},
                {"activation_elements", activation_elements},
                {"optimizer_state_elements", optimizer_state_elements},
                {"gradient_elements", gradient_elements},
                {"total_elements", total_elements},
                {"total_bytes", total_bytes}};
    }
};

namespace memdetail {

// Parameter counts of one standard ViT block.
inline std::size_t vit_block_params(std::size_t d) {
    std::size_t h = 4 * d;
    return 4 * (d * d + d)        // q, k, v, o with biases
           + 2 * 2 * d            // two LN affine pairs
           + (d * h + h) + (h * d + d);
}

inline std::size_t backbone_params(const BackboneConfig& cfg) {
    std::size_t d = cfg.width;
    std::size_t pd = cfg.channels * cfg.patch_size * cfg.patch_size;
    return pd * d + d                      // patch embedding
           + cfg.seq_len() * d + d         // positional embedding + class token
           + cfg.depth * vit_block_params(d);
}

inline std::size_t lsa_module_params(std::size_t d, std::size_t r,
                                     std::size_t ffn_hidden /* 0 = none */) {
    std::size_t n = 3 * (d * r + r) + (r * d + d) + 2 * d;
    if (ffn_hidden) n += 2 * d + (d * ffn_hidden + ffn_hidden) + (ffn_hidden * d + d);
    return n;
}

inline std::size_t head_params(std::size_t d, std::size_t classes) {
    return 2 * d + d * classes + classes;
}

// Activations one ViT block keeps per sample when every weight is trainable.
inline std::size_t vit_block_acts_full(std::size_t L, std::size_t d, std::size_t n) {
    // LN1 in + LN1 out + qh + kh + vh + merged heads + softmax
    std::size_t attn = 6 * L * d + n * L * L;
    // LN2 in + LN2 out + gelu in + gelu out
    std::size_t ffn = 2 * L * d + 2 * L * 4 * d;
    return attn + ffn;
}

// Activations one frozen ViT block keeps per sample when gradient merely
// flows through it (entangled strategies): nonlinearity dependencies plus
// the Q/K/V operands of the attention matmuls, minus inputs kept only for
// frozen weight gradients.
inline std::size_t vit_block_acts_flowthrough(std::size_t L, std::size_t d, std::size_t n) {
    // LN1 in + qh + kh + vh + softmax; merged-heads input to frozen W_O not kept
    std::size_t attn = 4 * L * d + n * L * L;
    // LN2 in + gelu in; frozen fc inputs not kept
    std::size_t ffn = L * d + L * 4 * d;
    return attn + ffn;
}

// Activations one LSA module keeps per sample (matches the tape).
inline std::size_t lsa_module_acts(std::size_t L, std::size_t d, std::size_t r, std::size_t n,
                                   std::size_t ffn_hidden) {
    // LN in + LN out + qh + kh + vh + merged + softmax
    std::size_t a = 2 * L * d + 4 * L * r + n * L * L;
    if (ffn_hidden) a += 2 * L * d + 2 * L * ffn_hidden;
    return a;
}

inline std::size_t head_acts(std::size_t d, std::size_t classes) {
    // LN in + LN out + logits, on the class token
    return 2 * d + classes;
}

}  // namespace memdetail

// Closed-form footprint for one strategy at a given batch size and sequence
// length. `side` is consulted for the `last` strategy only.
inline FootprintReport estimate(const BackboneConfig& arch, const SideConfig& side,
                                Strategy strategy, const StrategyParams& sp, std::size_t batch,
                                std::size_t seq_len, double dtype_bytes) {
    arch.validate();
    std::size_t d = arch.width, N = arch.depth, n = arch.heads, L = seq_len;
    std::size_t backbone = memdetail::backbone_params(arch);
    std::size_t head = memdetail::head_params(d, sp.num_classes);

    FootprintReport rep;
    rep.strategy = strategy_name(strategy);
    switch (strategy) {
        case Strategy::full: {
            rep.trainable_param_count = backbone + head;
            rep.frozen_param_count = 0;
            std::size_t per_sample = arch.channels * arch.patch_size * arch.patch_size *
                                     (L - arch.num_registers)            // patch matmul input
                                     + N * memdetail::vit_block_acts_full(L, d, n) +
                                     memdetail::head_acts(d, sp.num_classes);
            rep.activation_elements = batch * per_sample;
            break;
        }
        case Strategy::bias_only: {
            std::size_t biases = N * (4 * d + 4 * d + 4 * d + d) + d;  // rough: every bias + LN
            rep.trainable_param_count = biases + head;
            rep.frozen_param_count = backbone - biases;
            std::size_t per_sample = N * memdetail::vit_block_acts_flowthrough(L, d, n) +
                                     memdetail::head_acts(d, sp.num_classes);
            rep.activation_elements = batch * per_sample;
            break;
        }
        case Strategy::entangled_lowrank: {
            std::size_t r = sp.lora_rank;
            std::size_t lora = N * 2 * (d * r + r * d);  // adapters on q and v
            rep.trainable_param_count = lora + head;
            rep.frozen_param_count = backbone;
            // flow-through plus adapter internals: the shared LN output feeds
            // trainable down projections, and each down output feeds its up
            std::size_t per_block = memdetail::vit_block_acts_flowthrough(L, d, n) + L * d +
                                    2 * L * r;
            std::size_t per_sample =
                N * per_block + memdetail::head_acts(d, sp.num_classes);
            rep.activation_elements = batch * per_sample;
            break;
        }
        case Strategy::ladder_side: {
            std::size_t ds = std::max<std::size_t>(1, d / sp.ladder_reduction);
            std::size_t ns = std::max<std::size_t>(1, n * ds / d);
            std::size_t downsamplers = N * (d * ds + ds);
            std::size_t side_params = N * memdetail::vit_block_params(ds) + downsamplers +
                                      memdetail::head_params(ds, sp.num_classes);
            rep.trainable_param_count = side_params;
            rep.frozen_param_count = backbone;
            // per block: a full (small-width) transformer block plus the tap
            // feeding its trainable downsampler
            std::size_t per_sample =
                N * (memdetail::vit_block_acts_full(L, ds, ns) + L * d) +
                memdetail::head_acts(ds, sp.num_classes);
            rep.activation_elements = batch * per_sample;
            break;
        }
        case Strategy::last: {
            side.validate(N, d);
            std::size_t m = side.groups(N);
            std::size_t blocks = side.num_blocks(N);
            std::size_t ffn_h = side.ffn_hidden.value_or(0);
            rep.trainable_param_count =
                blocks * side.stack * memdetail::lsa_module_params(d, side.rank, ffn_h) +
                memdetail::head_params(d, sp.num_classes);
            rep.frozen_param_count = backbone;
            std::size_t per_sample =
                blocks * side.stack *
                    memdetail::lsa_module_acts(L, d, side.rank, side.n_head, ffn_h) +
                memdetail::head_acts(d, sp.num_classes);
            rep.activation_elements = batch * per_sample;
            (void)m;
            break;
        }
        case Strategy::linear_probe: {
            rep.trainable_param_count = head;
            rep.frozen_param_count = backbone;
            rep.activation_elements = batch * memdetail::head_acts(d, sp.num_classes);
            break;
        }
    }
    rep.gradient_elements = rep.trainable_param_count;
    rep.optimizer_state_elements = 2 * rep.trainable_param_count;
    rep.total_elements = rep.trainable_param_count + rep.frozen_param_count +
                         rep.activation_elements + rep.optimizer_state_elements +
                         rep.gradient_elements;
    rep.total_bytes = static_cast<double>(rep.total_elements) * dtype_bytes;
    return rep;
}

// Comparison table with ratios against the first `full` report (or the
// largest, if none is tagged full).
inline std::string compare(const std::vector<FootprintReport>& reports) {
    if (reports.size() < 2) throw ConfigError("compare needs at least two reports");
    const FootprintReport* base = nullptr;
    for (const auto& r : reports)
        if (r.strategy == "full") base = &r;
    if (!base)
        for (const auto& r : reports)
            if (!base || r.total_elements > base->total_elements) base = &r;
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof(line), "%-18s %14s %14s %14s %14s %10s\n", "strategy", "trainable",
                  "activations", "total_elems", "total_bytes", "vs_full");
    out << line;
    for (const auto& r : reports) {
        double ratio = static_cast<double>(r.total_elements) /
                       static_cast<double>(base->total_elements);
        std::snprintf(line, sizeof(line), "%-18s %14zu %14zu %14zu %14.3e %10.4f\n",
                      r.strategy.c_str(), r.trainable_param_count, r.activation_elements,
                      r.total_elements, r.total_bytes, ratio);
        out << line;
    }
    return out.str();
}

}  // namespace last
