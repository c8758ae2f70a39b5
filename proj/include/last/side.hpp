// Trainable side-network: ladder of low-rank self-attention blocks fed by
// backbone taps, residual bias correction, optional FFN ablation, and the
// classification head.

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "last/optim.hpp"
#include "last/rng.hpp"
#include "last/serialize.hpp"
#include "last/tensor.hpp"
#include "last/vit.hpp"

namespace last {

struct SideConfig {
    std::size_t gap = 2;      // g
    std::size_t stack = 2;    // T: LSA modules per block
    std::size_t rank = 16;    // r
    std::size_t n_head = 4;
    bool bias_correction = true;
    std::optional<std::size_t> ffn_hidden;  // h; absent = attention-only
    std::size_t num_classes = 2;
    // The ladder can be read as m blocks (F_1..F_m, u_0 = z_0) or as m+1
    // blocks with an extra F_0 applied to z_0. Default is the m-block form.
    bool skip_block_zero = true;

    std::size_t head_width() const { return rank / n_head; }

    void validate(std::size_t backbone_depth, std::size_t backbone_width) const {
        if (gap == 0 || stack == 0 || rank == 0 || n_head == 0 || num_classes == 0)
            throw ConfigError("side config fields must be positive");
        if (rank % n_head != 0)
            throw ConfigError("side rank " + std::to_string(rank) + " not divisible by n_head " +
                              std::to_string(n_head));
        if (rank >= backbone_width)
            throw ConfigError("side rank " + std::to_string(rank) +
                              " must be smaller than backbone width " +
                              std::to_string(backbone_width));
        if (backbone_depth % gap != 0)
            throw ConfigError("backbone depth " + std::to_string(backbone_depth) +
                              " not divisible by gap " + std::to_string(gap));
        if (ffn_hidden && *ffn_hidden == 0) throw ConfigError("ffn_hidden must be positive");
    }

    std::size_t groups(std::size_t backbone_depth) const { return backbone_depth / gap; }
    std::size_t num_blocks(std::size_t backbone_depth) const {
        return groups(backbone_depth) + (skip_block_zero ? 0 : 1);
    }
};

struct FfnWeights {
    Parameter ln_gamma, ln_beta;
    Parameter fc1_w, fc1_b, fc2_w, fc2_b;
};

struct LsaModuleWeights {
    Parameter ln_gamma, ln_beta;
    Parameter aq_w, aq_b, ak_w, ak_b, av_w, av_b;  // down projections d -> r
    Parameter up_w, up_b;                          // up projection r -> d
    std::optional<FfnWeights> ffn;
};

struct LsaBlockWeights {
    std::vector<LsaModuleWeights> modules;  // T of them
};

struct ClassifierHead {
    Parameter ln_gamma, ln_beta;
    Parameter w, b;  // d -> num_classes
};

struct SideState {
    SideConfig config;
    std::size_t width = 0;           // backbone d
    std::size_t backbone_depth = 0;  // N
    std::vector<LsaBlockWeights> blocks;
    ClassifierHead head;

    std::vector<Parameter*> parameters(bool include_head = true) {
        std::vector<Parameter*> out;
        for (auto& blk : blocks)
            for (auto& m : blk.modules) {
                for (Parameter* p : {&m.ln_gamma, &m.ln_beta, &m.aq_w, &m.aq_b, &m.ak_w, &m.ak_b,
                                     &m.av_w, &m.av_b, &m.up_w, &m.up_b})
                    out.push_back(p);
                if (m.ffn)
                    for (Parameter* p : {&m.ffn->ln_gamma, &m.ffn->ln_beta, &m.ffn->fc1_w,
                                         &m.ffn->fc1_b, &m.ffn->fc2_w, &m.ffn->fc2_b})
                        out.push_back(p);
            }
        if (include_head)
            for (Parameter* p : {&head.ln_gamma, &head.ln_beta, &head.w, &head.b})
                out.push_back(p);
        return out;
    }
};

// Both down and up projections are randomly initialized; the side-network
// does not need the zero-init trick used when adapters live inside the
// backbone's graph.
inline SideState init_side(const SideConfig& cfg, std::size_t backbone_depth,
                           std::size_t backbone_width, std::uint64_t seed) {
    cfg.validate(backbone_depth, backbone_width);
    Rng rng(seed);
    std::size_t d = backbone_width, r = cfg.rank;
    SideState s;
    s.config = cfg;
    s.width = d;
    s.backbone_depth = backbone_depth;
    std::size_t nblocks = cfg.num_blocks(backbone_depth);
    for (std::size_t bi = 0; bi < nblocks; ++bi) {
        LsaBlockWeights blk;
        for (std::size_t mi = 0; mi < cfg.stack; ++mi) {
            std::string pre = "side.block" + std::to_string(bi) + ".mod" + std::to_string(mi) + ".";
            LsaModuleWeights m;
            m.ln_gamma = make_const_param(pre + "ln.gamma", {d}, 1.0);
            m.ln_beta = make_zeros_param(pre + "ln.beta", {d});
            m.aq_w = make_param(pre + "aq.w", {d, r}, rng, kInitStd);
            m.aq_b = make_zeros_param(pre + "aq.b", {r});
            m.ak_w = make_param(pre + "ak.w", {d, r}, rng, kInitStd);
            m.ak_b = make_zeros_param(pre + "ak.b", {r});
            m.av_w = make_param(pre + "av.w", {d, r}, rng, kInitStd);
            m.av_b = make_zeros_param(pre + "av.b", {r});
            m.up_w = make_param(pre + "up.w", {r, d}, rng, kInitStd);
            m.up_b = make_zeros_param(pre + "up.b", {d});
            if (cfg.ffn_hidden) {
                std::size_t h = *cfg.ffn_hidden;
                FfnWeights f;
                f.ln_gamma = make_const_param(pre + "ffn.ln.gamma", {d}, 1.0);
                f.ln_beta = make_zeros_param(pre + "ffn.ln.beta", {d});
                f.fc1_w = make_param(pre + "ffn.fc1.w", {d, h}, rng, kInitStd);
                f.fc1_b = make_zeros_param(pre + "ffn.fc1.b", {h});
                f.fc2_w = make_param(pre + "ffn.fc2.w", {h, d}, rng, kInitStd);
                f.fc2_b = make_zeros_param(pre + "ffn.fc2.b", {d});
                m.ffn = std::move(f);
            }
            blk.modules.push_back(std::move(m));
        }
        s.blocks.push_back(std::move(blk));
    }
    s.head.ln_gamma = make_const_param("side.head.ln.gamma", {d}, 1.0);
    s.head.ln_beta = make_zeros_param("side.head.ln.beta", {d});
    s.head.w = make_param("side.head.w", {d, cfg.num_classes}, rng, kInitStd);
    s.head.b = make_zeros_param("side.head.b", {cfg.num_classes});
    return s;
}

// x + Up(MHSA(Down_Q(LN x), Down_K(LN x), Down_V(LN x))). No W_O; the Up
// projection plays that role.
inline Tensor ffn_module(const Tensor& x, const FfnWeights& f);

inline Tensor lsa_module(const Tensor& x, const LsaModuleWeights& m, const SideConfig& cfg) {
    Tensor ln = layer_norm(x, m.ln_gamma.tensor, m.ln_beta.tensor, kLayerNormEps);
    Tensor q = linear(ln, m.aq_w, m.aq_b);
    Tensor k = linear(ln, m.ak_w, m.ak_b);
    Tensor v = linear(ln, m.av_w, m.av_b);
    Tensor up = linear(attention(q, k, v, cfg.n_head), m.up_w, m.up_b);
    Tensor out = add(x, up);
    if (m.ffn) out = ffn_module(out, *m.ffn);
    return out;
}

// Ablation-only FFN: x + fc2(GELU(fc1(LN x))).
inline Tensor ffn_module(const Tensor& x, const FfnWeights& f) {
    Tensor ln = layer_norm(x, f.ln_gamma.tensor, f.ln_beta.tensor, kLayerNormEps);
    return add(x, linear(gelu(linear(ln, f.fc1_w, f.fc1_b)), f.fc2_w, f.fc2_b));
}

// Sequential composition of the block's T modules.
inline Tensor lsa_block(const Tensor& x, const LsaBlockWeights& blk, const SideConfig& cfg) {
    Tensor out = x;
    for (const auto& m : blk.modules) out = lsa_module(out, m, cfg);
    return out;
}

// u_m - sum(z_0 .. z_{m-1})
inline Tensor correct_bias(const Tensor& u_m, const std::vector<Tensor>& lower_taps) {
    Tensor out = u_m;
    for (const auto& z : lower_taps) out = sub(out, z);
    return out;
}

// Ladder forward over taps z_0..z_m. Returns the final representation,
// bias-corrected when enabled.
inline Tensor side_forward(const std::vector<Tensor>& taps, SideState& state) {
    const SideConfig& cfg = state.config;
    std::size_t m = cfg.groups(state.backbone_depth);
    if (taps.size() != m + 1)
        throw ConfigError("side_forward: expected " + std::to_string(m + 1) + " taps, got " +
                          std::to_string(taps.size()));
    std::size_t bi = 0;
    Tensor u = cfg.skip_block_zero ? taps[0] : lsa_block(taps[0], state.blocks[bi++], cfg);
    for (std::size_t i = 1; i <= m; ++i) {
        Tensor h = add(u, taps[i]);
        u = lsa_block(h, state.blocks[bi++], cfg);
    }
    if (cfg.bias_correction)
        u = correct_bias(u, std::vector<Tensor>(taps.begin(), taps.end() - 1));
    return u;
}

// LN + linear on the class token (position 0).
inline Tensor classify(const Tensor& rep, const ClassifierHead& head) {
    Tensor cls = select(rep, rep.rank() - 2, 0);  // [.., d]
    Tensor x = cls.rank() == 1 ? reshape(cls, {1, cls.dim(0)}) : cls;
    Tensor ln = layer_norm(x, head.ln_gamma.tensor, head.ln_beta.tensor, kLayerNormEps);
    Tensor logits = linear(ln, head.w, head.b);
    return cls.rank() == 1 ? reshape(logits, {logits.dim(1)}) : logits;
}

inline Tensor side_logits(const std::vector<Tensor>& taps, SideState& state) {
    return classify(side_forward(taps, state), state.head);
}

inline std::size_t count_trainable_params(SideState& state, bool include_head) {
    std::size_t n = 0;
    for (const Parameter* p : state.parameters(include_head))
        if (!p->frozen) n += p->size();
    return n;
}

inline std::vector<NamedTensor> to_named_tensors(SideState& s) {
    std::vector<NamedTensor> out;
    for (const Parameter* p : s.parameters(true))
        out.push_back({p->name, p->tensor.shape(), p->tensor.data()});
    return out;
}

inline void save_side(const std::filesystem::path& path, SideState& s) {
    write_tensor_file(path, kMagicSide, to_named_tensors(s));
}

inline void load_side(const std::filesystem::path& path, SideState& s) {
    auto tensors = read_tensor_file(path, kMagicSide);
    auto params = s.parameters(true);
    if (tensors.size() != params.size())
        throw IoError("side file tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (tensors[i].name != params[i]->name || tensors[i].shape != params[i]->tensor.shape())
            throw IoError("side file layout mismatch at " + tensors[i].name);
        params[i]->tensor.mutable_data() = std::move(tensors[i].data);
    }
}

}  // namespace last
