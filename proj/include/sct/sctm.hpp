#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sct/select.hpp"
#include "sct/vit.hpp"

namespace sct {

enum class InsertPosition { Attn, Mlp, Both };

inline std::string to_string(InsertPosition p) {
    switch (p) {
        case InsertPosition::Attn: return "attn";
        case InsertPosition::Mlp: return "mlp";
        default: return "both";
    }
}
inline InsertPosition insert_position_from(const std::string& s) {
    if (s == "attn") return InsertPosition::Attn;
    if (s == "mlp") return InsertPosition::Mlp;
    if (s == "both") return InsertPosition::Both;
    throw ConfigError("unknown insert position '" + s + "' (attn | mlp | both)");
}

struct InjectionPlan {
    InsertPosition position = InsertPosition::Attn;
    std::vector<std::size_t> layers; // 1-based, sorted ascending

    static InjectionPlan all_layers(std::size_t L, InsertPosition pos = InsertPosition::Attn) {
        InjectionPlan p;
        p.position = pos;
        for (std::size_t l = 1; l <= L; ++l) p.layers.push_back(l);
        return p;
    }
    static InjectionPlan last_layers(std::size_t L, std::size_t count,
                                     InsertPosition pos = InsertPosition::Attn) {
        InjectionPlan p;
        p.position = pos;
        for (std::size_t l = L >= count ? L - count + 1 : 1; l <= L; ++l) p.layers.push_back(l);
        return p;
    }

    bool uses_attn() const { return position != InsertPosition::Mlp; }
    bool uses_mlp() const { return position != InsertPosition::Attn; }
    std::size_t positions_per_layer() const { return position == InsertPosition::Both ? 2 : 1; }
};

// One channel-tuning module: out = g + s * (g W + b) on gathered channels,
// scattered back in place. W and b start at zero so the tuned model is
// exactly the frozen model at initialisation.
struct SctmLayerParams {
    Tensor W; // [K,K]
    Tensor b; // [K]
};

// Applies the module to x:[..,D] on a tape. Channels outside idx pass
// through bitwise untouched.
inline int sctm_apply(Tape& t, int x, int W, int b, const std::vector<std::size_t>& idx,
                      float scale) {
    int g = t.gather_channels(x, idx);
    int h = linear(t, g, W, b);
    h = t.scale_by_scalar(h, scale);
    int fused = t.add(g, h);
    return t.scatter_channels(fused, idx, x);
}

inline const char* position_tag(TapPoint p) {
    return p == TapPoint::AfterAttnResidual ? "attn" : "mlp";
}

// Frozen backbone + selection + injected modules + trainable head.
struct TunedModel {
    VitCheckpoint base;
    ChannelSelection selection;
    InjectionPlan plan;
    float scale = 0.1f;
    // keyed by "sctm.{layer}.{attn|mlp}"
    std::map<std::string, SctmLayerParams> modules;
    Tensor head_w; // [D,M]
    Tensor head_b; // [M]
    std::uint64_t base_fingerprint = 0;
    std::uint64_t selection_fingerprint = 0;

    static std::string module_key(std::size_t layer, TapPoint point) {
        return "sctm." + std::to_string(layer) + "." + position_tag(point);
    }
};

inline TunedModel inject(VitCheckpoint base, const ChannelSelection& selection,
                         const InjectionPlan& plan, float scale) {
    TunedModel m;
    m.base = std::move(base);
    m.selection = selection;
    m.plan = plan;
    m.scale = scale;
    const std::size_t L = m.base.cfg.num_layers;
    for (std::size_t l : plan.layers) {
        if (l < 1 || l > L)
            throw ConfigError("inject: plan layer " + std::to_string(l) + " out of range [1," +
                              std::to_string(L) + "]");
        if (l > selection.num_layers() || selection.indices[l - 1].empty())
            throw ConfigError("inject: plan layer " + std::to_string(l) +
                              " has no channel selection");
        const std::size_t K = selection.indices[l - 1].size();
        Tape::validate_channel_indices(selection.indices[l - 1], m.base.cfg.embed_dim, "inject");
        if (plan.uses_attn())
            m.modules[TunedModel::module_key(l, TapPoint::AfterAttnResidual)] =
                SctmLayerParams{Tensor::zeros({K, K}), Tensor::zeros({K})};
        if (plan.uses_mlp())
            m.modules[TunedModel::module_key(l, TapPoint::AfterMlpResidual)] =
                SctmLayerParams{Tensor::zeros({K, K}), Tensor::zeros({K})};
    }
    m.head_w = m.base.weights.get("head.weight");
    m.head_b = m.base.weights.get("head.bias");
    return m;
}

// Tape-level wiring of a tuned model: binds every leaf, builds the
// injection hook, and runs the forward pass.
struct TunedForward {
    VitVars backbone;
    std::map<std::string, std::pair<int, int>> module_vars; // key -> (W id, b id)
    int head_w = -1, head_b = -1;
    VitForwardOut out;
};

enum class TuneMode { Sct, LinearProbe, FullFt };

inline TunedForward tuned_forward_tape(Tape& t, const TunedModel& m, int images,
                                       TuneMode mode = TuneMode::Sct,
                                       const std::vector<FeatureTap>& taps = {},
                                       const LayerHook& extra_hook = nullptr) {
    TunedForward f;
    const bool backbone_trainable = (mode == TuneMode::FullFt);
    const bool sctm_trainable = (mode == TuneMode::Sct);
    f.backbone = bind_checkpoint(t, m.base, [&](const std::string& name) {
        // The tuned head shadows the checkpoint head; never train the copy.
        if (name == "head.weight" || name == "head.bias") return false;
        return backbone_trainable;
    });
    for (const auto& [key, params] : m.modules) {
        f.module_vars[key] = {t.leaf(params.W, key + ".W", sctm_trainable),
                              t.leaf(params.b, key + ".b", sctm_trainable)};
    }
    f.head_w = t.leaf(m.head_w, "head.W", true);
    f.head_b = t.leaf(m.head_b, "head.b", true);

    LayerHook hook = [&f, &m, extra_hook](Tape& tp, int var, std::size_t layer,
                                          TapPoint point) -> int {
        auto it = f.module_vars.find(TunedModel::module_key(layer, point));
        if (it != f.module_vars.end())
            var = sctm_apply(tp, var, it->second.first, it->second.second,
                             m.selection.indices[layer - 1], m.scale);
        if (extra_hook) var = extra_hook(tp, var, layer, point);
        return var;
    };

    // Route logits through the tuned head instead of the checkpoint head.
    VitVars w = f.backbone;
    w.ids["head.weight"] = f.head_w;
    w.ids["head.bias"] = f.head_b;
    f.out = vit_forward_tape(t, w, m.base.cfg, images, taps, hook);
    return f;
}

inline Tensor tuned_logits(const TunedModel& m, const Tensor& images,
                           const LayerHook& extra_hook = nullptr) {
    Tape t;
    int iv = t.constant(images);
    TunedForward f = tuned_forward_tape(t, m, iv, TuneMode::Sct, {}, extra_hook);
    return t.val(f.out.logits);
}

// ---- accounting (closed forms) -----------------------------------------

// Extra trainable parameters from the injected modules: sum over injected
// positions of K^2 (+K with bias). The head is reported separately.
inline std::uint64_t count_extra_params(const InjectionPlan& plan,
                                        const std::vector<std::size_t>& k_per_layer,
                                        bool with_bias) {
    std::uint64_t total = 0;
    for (std::size_t l : plan.layers) {
        if (l < 1 || l > k_per_layer.size())
            throw ConfigError("count_extra_params: layer " + std::to_string(l) +
                              " has no K entry");
        const std::uint64_t K = k_per_layer[l - 1];
        total += plan.positions_per_layer() * (K * K + (with_bias ? K : 0));
    }
    return total;
}

// Extra FLOPs per image: sum over injected positions of N*K*K.
inline std::uint64_t count_extra_flops(const VitConfig& cfg, const InjectionPlan& plan,
                                       const std::vector<std::size_t>& k_per_layer) {
    const std::uint64_t N = cfg.num_tokens();
    std::uint64_t total = 0;
    for (std::size_t l : plan.layers) {
        if (l < 1 || l > k_per_layer.size())
            throw ConfigError("count_extra_flops: layer " + std::to_string(l) +
                              " has no K entry");
        const std::uint64_t K = k_per_layer[l - 1];
        total += plan.positions_per_layer() * N * K * K;
    }
    return total;
}

// Closed-form comparator costs for the common adapter families.
struct ComparatorRow {
    std::string method;
    std::uint64_t params;
    std::uint64_t flops;
};

struct ComparatorSpec {
    std::uint64_t adapter_hidden = 0; // D' ; 0 disables the row
    std::uint64_t prompt_len = 0;     // n  ; VPT
    std::uint64_t ssf_inserts = 0;    // m  ; SSF
};

inline std::vector<ComparatorRow> comparator_costs(std::uint64_t L, std::uint64_t D,
                                                   std::uint64_t N,
                                                   const std::vector<std::size_t>& k_per_layer,
                                                   const ComparatorSpec& spec) {
    std::vector<ComparatorRow> rows;
    if (spec.adapter_hidden)
        rows.push_back({"adapter", 2 * L * D * spec.adapter_hidden,
                        2 * N * L * D * spec.adapter_hidden});
    if (spec.prompt_len) {
        const std::uint64_t n = spec.prompt_len;
        rows.push_back({"vpt", n * L * D, 2 * n * (2 * N + n) * L * D});
    }
    if (spec.ssf_inserts)
        rows.push_back({"ssf", spec.ssf_inserts * L * D, spec.ssf_inserts * N * L * D});
    std::uint64_t sp = 0, sf = 0;
    for (std::size_t K : k_per_layer) {
        sp += static_cast<std::uint64_t>(K) * K;
        sf += N * static_cast<std::uint64_t>(K) * K;
    }
    rows.push_back({"sct", sp, sf});
    return rows;
}

// ---- trained artifact I/O ------------------------------------------------

// Container layout: "config" u32[8], "scale" f32[1], "meta.position"
// u32[1], "meta.layers" u32[n], "meta.base_fingerprint" /
// "meta.selection_fingerprint" u32[2] (lo,hi), per-layer
// "selection.{l}.indices" u32[K], "sctm.{l}.{attn|mlp}.W|b",
// "head.W", "head.b".
inline void save_artifact(const TunedModel& m, const std::string& path) {
    Container c;
    c.put_u32("config", {8}, m.base.cfg.to_u32());
    c.put("scale", Tensor({1}, {m.scale}));
    c.put_u32("meta.position", {1}, {static_cast<std::uint32_t>(m.plan.position)});
    std::vector<std::uint32_t> layers(m.plan.layers.begin(), m.plan.layers.end());
    c.put_u32("meta.layers", {layers.size()}, layers);
    auto split64 = [](std::uint64_t v) {
        return std::vector<std::uint32_t>{static_cast<std::uint32_t>(v & 0xffffffffu),
                                          static_cast<std::uint32_t>(v >> 32)};
    };
    c.put_u32("meta.base_fingerprint", {2}, split64(m.base_fingerprint));
    c.put_u32("meta.selection_fingerprint", {2}, split64(m.selection_fingerprint));
    for (std::size_t l = 1; l <= m.selection.num_layers(); ++l) {
        std::vector<std::uint32_t> idx(m.selection.indices[l - 1].begin(),
                                       m.selection.indices[l - 1].end());
        c.put_u32("selection." + std::to_string(l) + ".indices", {idx.size()}, idx);
    }
    for (const auto& [key, params] : m.modules) {
        c.put(key + ".W", params.W);
        c.put(key + ".b", params.b);
    }
    c.put("head.W", m.head_w);
    c.put("head.b", m.head_b);
    c.save(path);
}

// Rebuilds a tuned model from an artifact plus its base checkpoint.
inline TunedModel load_artifact(const std::string& path, VitCheckpoint base) {
    Container c = Container::load(path);
    const VitConfig cfg = VitConfig::from_u32(c.get_u32("config"));
    if (cfg.to_u32() != base.cfg.to_u32())
        throw FormatError(path + ": artifact config does not match base checkpoint");
    TunedModel m;
    m.base = std::move(base);
    m.scale = c.get("scale").data[0];
    auto join64 = [](const std::vector<std::uint32_t>& v) {
        return static_cast<std::uint64_t>(v[0]) | (static_cast<std::uint64_t>(v[1]) << 32);
    };
    m.base_fingerprint = join64(c.get_u32("meta.base_fingerprint"));
    m.selection_fingerprint = join64(c.get_u32("meta.selection_fingerprint"));
    m.plan.position = static_cast<InsertPosition>(c.get_u32("meta.position")[0]);
    for (std::uint32_t l : c.get_u32("meta.layers")) m.plan.layers.push_back(l);
    m.selection.mode = ScoringMode::ClassAware;
    m.selection.strategy = SelectStrategy::Salient;
    for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
        const std::string name = "selection." + std::to_string(l) + ".indices";
        if (!c.has(name)) break;
        const auto& v = c.get_u32(name);
        m.selection.indices.emplace_back(v.begin(), v.end());
        m.selection.k_per_layer.push_back(v.size());
        m.selection.selected_scores.emplace_back(v.size(), 0.0);
    }
    for (std::size_t l : m.plan.layers) {
        auto read = [&](TapPoint p) {
            const std::string key = TunedModel::module_key(l, p);
            m.modules[key] = SctmLayerParams{c.get(key + ".W"), c.get(key + ".b")};
        };
        if (m.plan.uses_attn()) read(TapPoint::AfterAttnResidual);
        if (m.plan.uses_mlp()) read(TapPoint::AfterMlpResidual);
    }
    m.head_w = c.get("head.W");
    m.head_b = c.get("head.b");
    return m;
}

} // namespace sct
