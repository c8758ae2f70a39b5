// Frozen Vision Transformer used forward-only as a feature extractor.
// Pre-LN blocks (LN -> MHSA -> residual, LN -> 4d FFN with GELU -> residual),
// class token, learned positional embedding. Taps are the raw token tensors
// at group boundaries: z_0 after patch embedding, z_i after block i*g.

#pragma once

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "last/optim.hpp"
#include "last/rng.hpp"
#include "last/serialize.hpp"
#include "last/tensor.hpp"

namespace last {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BackboneConfig {
    std::size_t depth = 12;       // N
    std::size_t width = 768;      // d
    std::size_t heads = 12;       // n
    std::size_t patch_size = 16;
    std::size_t image_size = 224;
    std::size_t channels = 3;
    std::size_t num_registers = 1;  // class token present

    void validate() const {
        if (depth == 0 || width == 0 || heads == 0 || patch_size == 0 || image_size == 0)
            throw ConfigError("backbone config fields must be positive");
        if (width % heads != 0)
            throw ConfigError("backbone width " + std::to_string(width) +
                              " not divisible by heads " + std::to_string(heads));
        if (image_size % patch_size != 0)
            throw ConfigError("image size " + std::to_string(image_size) +
                              " not divisible by patch size " + std::to_string(patch_size));
        if (num_registers > 1) throw ConfigError("num_registers must be 0 or 1");
    }

    std::size_t patches_per_side() const { return image_size / patch_size; }
    std::size_t seq_len() const { return patches_per_side() * patches_per_side() + num_registers; }
    std::size_t head_width() const { return width / heads; }
    std::size_t ffn_hidden() const { return 4 * width; }
};

struct BlockWeights {
    Parameter ln1_gamma, ln1_beta;
    Parameter wq, bq, wk, bk, wv, bv, wo, bo;
    Parameter ln2_gamma, ln2_beta;
    Parameter fc1_w, fc1_b, fc2_w, fc2_b;
};

struct ViTWeights {
    BackboneConfig config;
    Parameter patch_w, patch_b;  // [C*p*p, d], [d]
    Parameter pos_embed;         // [L, d]
    Parameter cls_token;         // [d]
    std::vector<BlockWeights> blocks;

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out = {&patch_w, &patch_b, &pos_embed, &cls_token};
        for (auto& b : blocks)
            for (Parameter* p : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv,
                                 &b.bv, &b.wo, &b.bo, &b.ln2_gamma, &b.ln2_beta, &b.fc1_w,
                                 &b.fc1_b, &b.fc2_w, &b.fc2_b})
                out.push_back(p);
        return out;
    }
    std::vector<const Parameter*> parameters() const {
        auto* self = const_cast<ViTWeights*>(this);
        auto ps = self->parameters();
        return {ps.begin(), ps.end()};
    }

    void set_frozen(bool frozen) {
        for (Parameter* p : parameters()) {
            p->frozen = frozen;
            p->tensor.set_requires_grad(!frozen);
        }
    }
};

struct TapSchedule {
    std::size_t gap;  // g
    std::size_t groups;  // m = N/g

    TapSchedule(std::size_t depth, std::size_t g) : gap(g) {
        if (g == 0 || depth % g != 0)
            throw ConfigError("backbone depth " + std::to_string(depth) +
                              " not divisible by gap " + std::to_string(g));
        groups = depth / g;
    }
};

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-6;

// Deterministic stand-in for a pretrained checkpoint: truncated normal
// (std 0.02) projections, zero biases, ones/zeros LN affines, all frozen.
inline ViTWeights init_synthetic(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    std::size_t d = cfg.width;
    std::size_t pd = cfg.channels * cfg.patch_size * cfg.patch_size;
    ViTWeights w;
    w.config = cfg;
    w.patch_w = make_param("backbone.patch.w", {pd, d}, rng, kInitStd, true);
    w.patch_b = make_zeros_param("backbone.patch.b", {d}, true);
    w.pos_embed = make_param("backbone.pos_embed", {cfg.seq_len(), d}, rng, kInitStd, true);
    w.cls_token = make_param("backbone.cls_token", {d}, rng, kInitStd, true);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        std::string pre = "backbone.block" + std::to_string(i) + ".";
        BlockWeights b;
        b.ln1_gamma = make_const_param(pre + "ln1.gamma", {d}, 1.0, true);
        b.ln1_beta = make_zeros_param(pre + "ln1.beta", {d}, true);
        b.wq = make_param(pre + "wq", {d, d}, rng, kInitStd, true);
        b.bq = make_zeros_param(pre + "bq", {d}, true);
        b.wk = make_param(pre + "wk", {d, d}, rng, kInitStd, true);
        b.bk = make_zeros_param(pre + "bk", {d}, true);
        b.wv = make_param(pre + "wv", {d, d}, rng, kInitStd, true);
        b.bv = make_zeros_param(pre + "bv", {d}, true);
        b.wo = make_param(pre + "wo", {d, d}, rng, kInitStd, true);
        b.bo = make_zeros_param(pre + "bo", {d}, true);
        b.ln2_gamma = make_const_param(pre + "ln2.gamma", {d}, 1.0, true);
        b.ln2_beta = make_zeros_param(pre + "ln2.beta", {d}, true);
        b.fc1_w = make_param(pre + "fc1.w", {d, cfg.ffn_hidden()}, rng, kInitStd, true);
        b.fc1_b = make_zeros_param(pre + "fc1.b", {cfg.ffn_hidden()}, true);
        b.fc2_w = make_param(pre + "fc2.w", {cfg.ffn_hidden(), d}, rng, kInitStd, true);
        b.fc2_b = make_zeros_param(pre + "fc2.b", {d}, true);
        w.blocks.push_back(std::move(b));
    }
    return w;
}

// Tokens [.., L, r] -> [.., n, L, r/n]
inline Tensor split_heads(const Tensor& x, std::size_t n_heads) {
    std::size_t L = x.dim(x.rank() - 2), r = x.dim(x.rank() - 1);
    Shape s(x.shape().begin(), x.shape().end() - 1);
    s.push_back(n_heads);
    s.push_back(r / n_heads);
    Tensor t = reshape(x, s);  // [.., L, n, rh]
    std::vector<std::size_t> perm(t.rank());
    for (std::size_t i = 0; i < t.rank(); ++i) perm[i] = i;
    std::swap(perm[t.rank() - 3], perm[t.rank() - 2]);  // -> [.., n, L, rh]
    (void)L;
    return permute(t, perm);
}

// [.., n, L, rh] -> [.., L, n*rh]
inline Tensor merge_heads(const Tensor& x) {
    std::vector<std::size_t> perm(x.rank());
    for (std::size_t i = 0; i < x.rank(); ++i) perm[i] = i;
    std::swap(perm[x.rank() - 3], perm[x.rank() - 2]);
    Tensor t = permute(x, perm);  // [.., L, n, rh]
    Shape s(t.shape().begin(), t.shape().end() - 2);
    s.push_back(t.dim(t.rank() - 2) * t.dim(t.rank() - 1));
    return reshape(t, s);
}

// Multi-head attention over already-projected q/k/v token tensors [.., L, r].
// Scale is 1/sqrt(per-head width).
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads) {
    std::size_t r = q.dim(q.rank() - 1);
    if (r % n_heads != 0)
        throw ConfigError("attention width " + std::to_string(r) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    double scl = 1.0 / std::sqrt(static_cast<double>(r / n_heads));
    Tensor qh = split_heads(q, n_heads);
    Tensor kh = split_heads(k, n_heads);
    Tensor vh = split_heads(v, n_heads);
    std::vector<std::size_t> tperm(kh.rank());
    for (std::size_t i = 0; i < kh.rank(); ++i) tperm[i] = i;
    std::swap(tperm[kh.rank() - 2], tperm[kh.rank() - 1]);
    Tensor scores = scale(matmul(qh, permute(kh, tperm)), scl);
    Tensor attn = softmax_lastdim(scores);
    return merge_heads(matmul(attn, vh));
}

inline Tensor linear(const Tensor& x, const Parameter& w, const Parameter& b) {
    return add(matmul(x, w.tensor), b.tensor);
}

// Standard ViT MHSA: QKV projections, per-head attention, output projection.
inline Tensor mhsa(const Tensor& x, const BlockWeights& b, std::size_t n_heads) {
    Tensor q = linear(x, b.wq, b.bq);
    Tensor k = linear(x, b.wk, b.bk);
    Tensor v = linear(x, b.wv, b.bv);
    return linear(attention(q, k, v, n_heads), b.wo, b.bo);
}

inline Tensor block_forward(const Tensor& x, const BlockWeights& b, const BackboneConfig& cfg) {
    Tensor h = add(x, mhsa(layer_norm(x, b.ln1_gamma.tensor, b.ln1_beta.tensor, kLayerNormEps), b,
                           cfg.heads));
    Tensor f = linear(gelu(linear(layer_norm(h, b.ln2_gamma.tensor, b.ln2_beta.tensor,
                                             kLayerNormEps),
                                  b.fc1_w, b.fc1_b)),
                      b.fc2_w, b.fc2_b);
    return add(h, f);
}

// Count of whole-backbone forward passes, for the one-extraction property.
inline std::atomic<std::uint64_t>& backbone_forward_count() {
    static std::atomic<std::uint64_t> count{0};
    return count;
}

// image [C, H, W] (or [B, C, H, W]) -> tokens [.., L, d]; this output is z_0.
inline Tensor patch_embed(const Tensor& image, const ViTWeights& w) {
    const BackboneConfig& cfg = w.config;
    bool batched = image.rank() == 4;
    if (image.rank() != 3 && image.rank() != 4)
        throw ShapeError("patch_embed expects [C,H,W] or [B,C,H,W], got " +
                         shape_str(image.shape()));
    std::size_t B = batched ? image.dim(0) : 1;
    std::size_t C = image.dim(batched ? 1 : 0);
    std::size_t H = image.dim(batched ? 2 : 1);
    std::size_t W = image.dim(batched ? 3 : 2);
    if (C != cfg.channels || H != cfg.image_size || W != cfg.image_size)
        throw ShapeError("patch_embed: image " + shape_str(image.shape()) +
                         " does not match configured [" + std::to_string(cfg.channels) + "," +
                         std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                         "]");
    std::size_t p = cfg.patch_size;
    std::size_t side = cfg.patches_per_side();
    std::size_t npatch = side * side;
    std::size_t pd = C * p * p;

    // unfold into [B, npatch, C*p*p]; raw pixel rearrangement, not differentiable
    // through the image (the backbone consumes data, never gradients)
    std::vector<double> patches(B * npatch * pd);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t py = 0; py < side; ++py)
            for (std::size_t px = 0; px < side; ++px) {
                std::size_t patch_idx = py * side + px;
                double* dst = patches.data() + (b * npatch + patch_idx) * pd;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t y = 0; y < p; ++y)
                        for (std::size_t x = 0; x < p; ++x)
                            dst[c * p * p + y * p + x] =
                                image.data()[((b * C + c) * H + py * p + y) * W + px * p + x];
            }
    Shape pshape = batched ? Shape{B, npatch, pd} : Shape{npatch, pd};
    Tensor patch_tokens(std::move(pshape), std::move(patches));
    Tensor projected = linear(patch_tokens, w.patch_w, w.patch_b);  // [.., npatch, d]

    Tensor tokens = projected;
    if (cfg.num_registers == 1) {
        // prepend the class token
        std::size_t d = cfg.width;
        std::size_t L = npatch + 1;
        std::vector<double> out(B * L * d);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t j = 0; j < d; ++j) out[(b * L) * d + j] = w.cls_token.tensor.at(j);
            for (std::size_t t = 0; t < npatch; ++t)
                for (std::size_t j = 0; j < d; ++j)
                    out[(b * L + t + 1) * d + j] = projected.data()[(b * npatch + t) * d + j];
        }
        Shape tshape = batched ? Shape{B, L, d} : Shape{L, d};
        tokens = Tensor(std::move(tshape), std::move(out),
                        tape().recording() && projected.requires_grad());
        if (tokens.requires_grad()) {
            auto pi = projected.impl();
            auto ci = w.cls_token.tensor.impl();
            tokens.impl()->parents = {pi, ci};
            std::size_t d_ = d, L_ = L, np_ = npatch, B_ = B;
            tokens.impl()->backward_fn = [pi, ci, d_, L_, np_, B_](TensorImpl& self) {
                if (pi->requires_grad) {
                    pi->ensure_grad();
                    for (std::size_t b = 0; b < B_; ++b)
                        for (std::size_t t = 0; t < np_; ++t)
                            for (std::size_t j = 0; j < d_; ++j)
                                pi->grad[(b * np_ + t) * d_ + j] +=
                                    self.grad[(b * L_ + t + 1) * d_ + j];
                }
                if (ci->requires_grad) {
                    ci->ensure_grad();
                    for (std::size_t b = 0; b < B_; ++b)
                        for (std::size_t j = 0; j < d_; ++j)
                            ci->grad[j] += self.grad[(b * L_) * d_ + j];
                }
            };
        }
    }
    return add(tokens, w.pos_embed.tensor);
}

// Runs all N blocks and collects the m+1 taps z_0..z_m. No autodiff history
// is recorded; the returned taps are plain value tensors.
inline std::vector<Tensor> forward_with_taps(const Tensor& image, const ViTWeights& w,
                                             const TapSchedule& sched) {
    NoGradGuard no_grad;
    backbone_forward_count().fetch_add(1, std::memory_order_relaxed);
    std::vector<Tensor> taps;
    Tensor x = patch_embed(image, w);
    taps.push_back(x);
    for (std::size_t i = 0; i < w.config.depth; ++i) {
        x = block_forward(x, w.blocks[i], w.config);
        if ((i + 1) % sched.gap == 0) taps.push_back(x);
    }
    return taps;
}

// Grad-recording forward to the final token tensor; used by the full
// finetuning baseline only.
inline Tensor forward_recorded(const Tensor& image, const ViTWeights& w) {
    backbone_forward_count().fetch_add(1, std::memory_order_relaxed);
    Tensor x = patch_embed(image, w);
    for (std::size_t i = 0; i < w.config.depth; ++i) x = block_forward(x, w.blocks[i], w.config);
    return x;
}

inline std::vector<NamedTensor> to_named_tensors(const ViTWeights& w) {
    std::vector<NamedTensor> out;
    for (const Parameter* p : w.parameters())
        out.push_back({p->name, p->tensor.shape(), p->tensor.data()});
    return out;
}

inline std::uint64_t weights_checksum(const ViTWeights& w) {
    return fnv1a(serialize_tensors(kMagicBackbone, to_named_tensors(w)));
}

inline void save_backbone(const std::filesystem::path& path, const ViTWeights& w) {
    write_tensor_file(path, kMagicBackbone, to_named_tensors(w));
}

inline ViTWeights load_backbone(const std::filesystem::path& path, const BackboneConfig& cfg) {
    auto tensors = read_tensor_file(path, kMagicBackbone);
    ViTWeights w = init_synthetic(cfg, 0);
    auto params = w.parameters();
    if (tensors.size() != params.size())
        throw IoError("backbone file tensor count mismatch: expected " +
                      std::to_string(params.size()) + ", got " + std::to_string(tensors.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (tensors[i].name != params[i]->name || tensors[i].shape != params[i]->tensor.shape())
            throw IoError("backbone file layout mismatch at " + tensors[i].name);
        params[i]->tensor.mutable_data() = std::move(tensors[i].data);
    }
    return w;
}

}  // namespace last
