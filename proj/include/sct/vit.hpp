#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sct/container.hpp"
#include "sct/rng.hpp"
#include "sct/tape.hpp"
#include "sct/tensor.hpp"

namespace sct {

// Pre-norm ViT: per layer x += MHSA(LN(x)); x += MLP(LN(x)).
// Layer indices are 1-based in every public surface (names, taps, files).

struct VitConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels_in = 3;
    std::size_t embed_dim = 128;
    std::size_t num_layers = 12;
    std::size_t num_heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 8;

    void validate() const {
        if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
            throw ConfigError("vit config: image_size must be a positive multiple of patch_size");
        if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
            throw ConfigError("vit config: embed_dim must be a positive multiple of num_heads");
        if (num_layers < 1) throw ConfigError("vit config: num_layers must be >= 1");
        if (channels_in < 1 || mlp_ratio < 1 || num_classes < 1)
            throw ConfigError("vit config: channels_in, mlp_ratio, num_classes must be >= 1");
    }

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_tokens() const { return grid() * grid() + 1; } // class token included
    std::size_t patch_dim() const { return channels_in * patch_size * patch_size; }
    std::size_t head_dim() const { return embed_dim / num_heads; }
    std::size_t mlp_dim() const { return embed_dim * mlp_ratio; }

    std::vector<std::uint32_t> to_u32() const {
        return {static_cast<std::uint32_t>(image_size),  static_cast<std::uint32_t>(patch_size),
                static_cast<std::uint32_t>(channels_in), static_cast<std::uint32_t>(embed_dim),
                static_cast<std::uint32_t>(num_layers),  static_cast<std::uint32_t>(num_heads),
                static_cast<std::uint32_t>(mlp_ratio),   static_cast<std::uint32_t>(num_classes)};
    }
    static VitConfig from_u32(const std::vector<std::uint32_t>& v) {
        if (v.size() != 8) throw FormatError("vit config record must have 8 entries");
        VitConfig c;
        c.image_size = v[0];
        c.patch_size = v[1];
        c.channels_in = v[2];
        c.embed_dim = v[3];
        c.num_layers = v[4];
        c.num_heads = v[5];
        c.mlp_ratio = v[6];
        c.num_classes = v[7];
        c.validate();
        return c;
    }
};

enum class TapPoint { AfterAttnResidual, AfterMlpResidual };

struct FeatureTap {
    std::size_t layer; // 1-based
    TapPoint point;
    bool operator<(const FeatureTap& o) const {
        return layer != o.layer ? layer < o.layer : point < o.point;
    }
    bool operator==(const FeatureTap& o) const { return layer == o.layer && point == o.point; }
};

// Checkpoint tensor naming schema (per-layer index l is 1-based):
//   patch_embed.weight [Cp^2,D]  patch_embed.bias [D]
//   pos_embed [1,N,D]  cls_token [1,1,D]
//   layers.{l}.ln1.weight/.bias [D]
//   layers.{l}.attn.qkv.weight [D,3D] /.bias [3D]
//   layers.{l}.attn.proj.weight [D,D] /.bias [D]
//   layers.{l}.ln2.weight/.bias [D]
//   layers.{l}.mlp.fc1.weight [D,rD] /.bias [rD]
//   layers.{l}.mlp.fc2.weight [rD,D] /.bias [D]
//   norm.weight/.bias [D]  head.weight [D,M]  head.bias [M]
// plus one u32 "config" record; 9 + 12L tensors in total.
inline std::vector<std::pair<std::string, Shape>> checkpoint_schema(const VitConfig& c) {
    const std::size_t D = c.embed_dim, R = c.mlp_dim(), N = c.num_tokens();
    std::vector<std::pair<std::string, Shape>> s;
    s.emplace_back("patch_embed.weight", Shape{c.patch_dim(), D});
    s.emplace_back("patch_embed.bias", Shape{D});
    s.emplace_back("pos_embed", Shape{1, N, D});
    s.emplace_back("cls_token", Shape{1, 1, D});
    for (std::size_t l = 1; l <= c.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        s.emplace_back(p + "ln1.weight", Shape{D});
        s.emplace_back(p + "ln1.bias", Shape{D});
        s.emplace_back(p + "attn.qkv.weight", Shape{D, 3 * D});
        s.emplace_back(p + "attn.qkv.bias", Shape{3 * D});
        s.emplace_back(p + "attn.proj.weight", Shape{D, D});
        s.emplace_back(p + "attn.proj.bias", Shape{D});
        s.emplace_back(p + "ln2.weight", Shape{D});
        s.emplace_back(p + "ln2.bias", Shape{D});
        s.emplace_back(p + "mlp.fc1.weight", Shape{D, R});
        s.emplace_back(p + "mlp.fc1.bias", Shape{R});
        s.emplace_back(p + "mlp.fc2.weight", Shape{R, D});
        s.emplace_back(p + "mlp.fc2.bias", Shape{D});
    }
    s.emplace_back("norm.weight", Shape{D});
    s.emplace_back("norm.bias", Shape{D});
    s.emplace_back("head.weight", Shape{D, c.num_classes});
    s.emplace_back("head.bias", Shape{c.num_classes});
    return s;
}

struct VitCheckpoint {
    VitConfig cfg;
    Container weights;

    static VitCheckpoint from_container(Container c) {
        VitCheckpoint ck;
        ck.cfg = VitConfig::from_u32(c.get_u32("config"));
        for (const auto& [name, shape] : checkpoint_schema(ck.cfg)) {
            if (!c.has(name)) throw FormatError("checkpoint missing tensor '" + name + "'");
            if (c.shape_of(name) != shape)
                throw FormatError("checkpoint tensor '" + name + "' has shape " +
                                  shape_str(c.shape_of(name)) + ", expected " + shape_str(shape));
        }
        ck.weights = std::move(c);
        return ck;
    }

    static VitCheckpoint load(const std::string& path) {
        return from_container(Container::load(path));
    }
    void save(const std::string& path) const { weights.save(path); }
};

// Weights drawn in schema order: linear weights, pos_embed and cls_token
// from a truncated normal (std 0.02, clipped at 2 std); biases zero;
// layernorm affine identity.
inline VitCheckpoint init_toy_checkpoint(const VitConfig& cfg, Rng& rng) {
    cfg.validate();
    Container c;
    c.put_u32("config", {8}, cfg.to_u32());
    for (const auto& [name, shape] : checkpoint_schema(cfg)) {
        Tensor t(shape);
        const bool is_ln_weight = name.find("ln") != std::string::npos &&
                                  name.size() >= 6 && name.ends_with("weight");
        const bool is_norm_weight = name == "norm.weight";
        const bool is_bias = name.ends_with("bias");
        if (is_ln_weight || is_norm_weight) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else if (!is_bias) {
            for (float& v : t.data) v = static_cast<float>(rng.next_trunc_normal(0.02));
        }
        c.put(name, std::move(t));
    }
    VitCheckpoint ck;
    ck.cfg = cfg;
    ck.weights = std::move(c);
    return ck;
}

// Variable ids of every checkpoint tensor on a tape.
struct VitVars {
    std::map<std::string, int> ids;
    int operator[](const std::string& name) const { return ids.at(name); }
};

// Register checkpoint tensors as tape leaves. `trainable` decides per
// name; frozen leaves get no gradient storage at all.
inline VitVars bind_checkpoint(Tape& t, const VitCheckpoint& ck,
                               const std::function<bool(const std::string&)>& trainable) {
    VitVars v;
    for (const auto& [name, shape] : checkpoint_schema(ck.cfg))
        v.ids[name] = t.leaf(ck.weights.get(name), name, trainable ? trainable(name) : false);
    return v;
}

// Hook invoked at each layer boundary; may return a replacement variable
// (SCTM injection, channel erasing) or `var` unchanged.
using LayerHook = std::function<int(Tape&, int var, std::size_t layer, TapPoint point)>;

struct VitForwardOut {
    int logits;                      // [B, M]
    int pre_head;                    // [B, D] normalised class-token state
    std::map<FeatureTap, int> taps;  // requested feature taps
};

inline VitForwardOut vit_forward_tape(Tape& t, const VitVars& w, const VitConfig& cfg,
                                      int images, const std::vector<FeatureTap>& taps,
                                      const LayerHook& hook = nullptr) {
    const Tensor& im = t.val(images);
    if (im.shape != Shape{im.shape[0], cfg.channels_in, cfg.image_size, cfg.image_size})
        throw ShapeError("vit forward: images " + shape_str(im.shape) + " do not match config [B," +
                         std::to_string(cfg.channels_in) + "," + std::to_string(cfg.image_size) +
                         "," + std::to_string(cfg.image_size) + "]");
    for (const FeatureTap& tap : taps)
        if (tap.layer < 1 || tap.layer > cfg.num_layers)
            throw IndexError("vit forward: tap layer " + std::to_string(tap.layer) +
                             " out of range [1," + std::to_string(cfg.num_layers) + "]");
    const std::size_t B = im.shape[0];
    const std::size_t D = cfg.embed_dim, H = cfg.num_heads, dh = cfg.head_dim();
    const std::size_t N = cfg.num_tokens();

    // Patch embedding: unfold + linear.
    int x = t.extract_patches(images, cfg.patch_size);               // [B,Np,Cp^2]
    x = linear(t, x, w["patch_embed.weight"], w["patch_embed.bias"]); // [B,Np,D]
    int cls = t.broadcast_to(w["cls_token"], {B, 1, D});
    x = t.concat(cls, x, 1);                                          // [B,N,D]
    x = t.add(x, w["pos_embed"]);

    VitForwardOut out;
    const float attn_scale = 1.0f / std::sqrt(static_cast<float>(dh));
    for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        // MHSA sub-block
        int h = t.layernorm(x, w[p + "ln1.weight"], w[p + "ln1.bias"], 1e-6f);
        int qkv = linear(t, h, w[p + "attn.qkv.weight"], w[p + "attn.qkv.bias"]); // [B,N,3D]
        auto heads = [&](std::size_t part) {
            int s = t.slice_last(qkv, part * D, D);              // [B,N,D]
            s = t.reshape(s, {B, N, H, dh});
            return t.transpose(s, {0, 2, 1, 3});                 // [B,H,N,dh]
        };
        int q = heads(0), k = heads(1), v = heads(2);
        int scores = t.matmul(q, t.transpose(k, {0, 1, 3, 2}));  // [B,H,N,N]
        scores = t.scale_by_scalar(scores, attn_scale);
        int attn = t.softmax(scores);
        int ctx = t.matmul(attn, v);                             // [B,H,N,dh]
        ctx = t.reshape(t.transpose(ctx, {0, 2, 1, 3}), {B, N, D});
        int proj = linear(t, ctx, w[p + "attn.proj.weight"], w[p + "attn.proj.bias"]);
        x = t.add(x, proj);
        if (hook) x = hook(t, x, l, TapPoint::AfterAttnResidual);
        for (const FeatureTap& tap : taps)
            if (tap.layer == l && tap.point == TapPoint::AfterAttnResidual) out.taps[tap] = x;

        // MLP sub-block
        int m = t.layernorm(x, w[p + "ln2.weight"], w[p + "ln2.bias"], 1e-6f);
        m = linear(t, m, w[p + "mlp.fc1.weight"], w[p + "mlp.fc1.bias"]);
        m = t.gelu(m);
        m = linear(t, m, w[p + "mlp.fc2.weight"], w[p + "mlp.fc2.bias"]);
        x = t.add(x, m);
        if (hook) x = hook(t, x, l, TapPoint::AfterMlpResidual);
        for (const FeatureTap& tap : taps)
            if (tap.layer == l && tap.point == TapPoint::AfterMlpResidual) out.taps[tap] = x;
    }

    int cls_state = t.slice_last(t.transpose(x, {0, 2, 1}), 0, 1);   // [B,D,1] token 0
    cls_state = t.reshape(cls_state, {B, D});
    cls_state = t.layernorm(cls_state, w["norm.weight"], w["norm.bias"], 1e-6f);
    out.pre_head = cls_state;
    out.logits = linear(t, cls_state, w["head.weight"], w["head.bias"]);
    return out;
}

// Convenience forward without gradient tracking.
struct ForwardResult {
    Tensor logits;
    std::map<FeatureTap, Tensor> taps;
};

inline ForwardResult vit_forward(const VitCheckpoint& ck, const Tensor& images,
                                 const std::vector<FeatureTap>& taps = {},
                                 const LayerHook& hook = nullptr) {
    Tape t;
    VitVars w = bind_checkpoint(t, ck, nullptr);
    int iv = t.constant(images);
    VitForwardOut o = vit_forward_tape(t, w, ck.cfg, iv, taps, hook);
    ForwardResult r;
    r.logits = t.val(o.logits);
    for (const auto& [tap, var] : o.taps) r.taps[tap] = t.val(var);
    return r;
}

inline std::vector<std::uint32_t> argmax_rows(const Tensor& logits) {
    const std::size_t B = logits.shape[0], M = logits.shape[1];
    std::vector<std::uint32_t> out(B);
    for (std::size_t r = 0; r < B; ++r) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < M; ++i)
            if (logits.data[r * M + i] > logits.data[r * M + best]) best = i; // tie -> lower index
        out[r] = static_cast<std::uint32_t>(best);
    }
    return out;
}

} // namespace sct
