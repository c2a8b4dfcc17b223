#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "sct/rng.hpp"
#include "sct/tensor.hpp"
#include "sct/vit.hpp"

namespace sct {

enum class ScoringMode { ClassAware, Global };
enum class SelectStrategy { Salient, Inconspicuous, Random };

inline std::string to_string(ScoringMode m) {
    return m == ScoringMode::ClassAware ? "class-aware" : "global";
}
inline std::string to_string(SelectStrategy s) {
    switch (s) {
        case SelectStrategy::Salient: return "salient";
        case SelectStrategy::Inconspicuous: return "inconspicuous";
        default: return "random";
    }
}
inline ScoringMode scoring_mode_from(const std::string& s) {
    if (s == "class-aware") return ScoringMode::ClassAware;
    if (s == "global") return ScoringMode::Global;
    throw ConfigError("unknown scoring mode '" + s + "' (class-aware | global)");
}
inline SelectStrategy strategy_from(const std::string& s) {
    if (s == "salient") return SelectStrategy::Salient;
    if (s == "inconspicuous") return SelectStrategy::Inconspicuous;
    if (s == "random") return SelectStrategy::Random;
    throw ConfigError("unknown strategy '" + s + "' (salient | inconspicuous | random)");
}

// Per-class sample index lists over a dataset.
struct ClassPartition {
    std::size_t num_classes = 0;
    std::vector<std::vector<std::size_t>> members; // indexed by class

    static ClassPartition from_labels(const std::vector<std::uint32_t>& labels,
                                      std::size_t num_classes) {
        ClassPartition p;
        p.num_classes = num_classes;
        p.members.resize(num_classes);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] >= num_classes)
                throw ValidationError("label " + std::to_string(labels[i]) +
                                      " out of range for " + std::to_string(num_classes) +
                                      " classes");
            p.members[labels[i]].push_back(i);
        }
        for (std::size_t m = 0; m < num_classes; ++m)
            if (p.members[m].empty())
                throw ValidationError("class " + std::to_string(m) +
                                      " has no samples; class-aware scoring needs every class");
        return p;
    }

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& v : members) n += v.size();
        return n;
    }
};

struct ImportanceScores {
    // scores[l-1] is the length-D score vector for layer l.
    std::vector<std::vector<double>> scores;
    ScoringMode mode = ScoringMode::ClassAware;
    // per_class[l-1][m] is the class-m score vector, kept for reports.
    std::vector<std::vector<std::vector<double>>> per_class;
};

// Per-class channel score: entry i is the L2 norm of channel i over all
// samples and tokens of the class. Accumulates in double, rounds once.
inline std::vector<double> class_score(const Tensor& features) {
    if (features.rank() < 1) throw ShapeError("class_score: rank must be >= 1");
    if (features.size() == 0) throw ValidationError("class_score: empty class");
    const std::size_t D = features.shape.back();
    const std::size_t rows = features.size() / D;
    std::vector<double> acc(D, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < D; ++i) {
            const double v = features.data[r * D + i];
            acc[i] += v * v;
        }
    for (double& v : acc) v = std::sqrt(v);
    return acc;
}

// Incremental variant used when features are produced batch by batch:
// accumulate sums of squares per (class, channel) and take sqrt at the
// end. Batch boundaries are irrelevant to the result.
struct ScoreAccumulator {
    std::size_t num_layers, num_classes, dim;
    // sumsq[l][m][d]
    std::vector<std::vector<std::vector<double>>> sumsq;

    ScoreAccumulator(std::size_t L, std::size_t M, std::size_t D)
        : num_layers(L), num_classes(M), dim(D),
          sumsq(L, std::vector<std::vector<double>>(M, std::vector<double>(D, 0.0))) {}

    // features: [B,N,D] tap at layer l (1-based); labels parallel to batch.
    void add(std::size_t layer, const Tensor& features,
             const std::vector<std::uint32_t>& labels) {
        const std::size_t D = features.shape.back();
        const std::size_t B = features.shape[0];
        const std::size_t N = features.size() / (B * D);
        auto& per_class = sumsq[layer - 1];
        for (std::size_t b = 0; b < B; ++b) {
            auto& acc = per_class[labels[b]];
            const float* base = features.data.data() + b * N * D;
            for (std::size_t r = 0; r < N; ++r)
                for (std::size_t i = 0; i < D; ++i) {
                    const double v = base[r * D + i];
                    acc[i] += v * v;
                }
        }
    }

    ImportanceScores finish(ScoringMode mode) const {
        ImportanceScores out;
        out.mode = mode;
        out.scores.resize(num_layers);
        out.per_class.resize(num_layers);
        for (std::size_t l = 0; l < num_layers; ++l) {
            out.per_class[l].resize(num_classes, std::vector<double>(dim, 0.0));
            std::vector<double> z(dim, 0.0);
            if (mode == ScoringMode::ClassAware) {
                for (std::size_t m = 0; m < num_classes; ++m)
                    for (std::size_t i = 0; i < dim; ++i) {
                        const double s = std::sqrt(sumsq[l][m][i]);
                        out.per_class[l][m][i] = s;
                        z[i] += s;
                    }
                for (double& v : z) v /= static_cast<double>(num_classes);
            } else {
                // Whole dataset treated as one class.
                for (std::size_t i = 0; i < dim; ++i) {
                    double total = 0.0;
                    for (std::size_t m = 0; m < num_classes; ++m) total += sumsq[l][m][i];
                    z[i] = std::sqrt(total);
                }
                for (std::size_t m = 0; m < num_classes; ++m)
                    for (std::size_t i = 0; i < dim; ++i)
                        out.per_class[l][m][i] = std::sqrt(sumsq[l][m][i]);
            }
            out.scores[l] = std::move(z);
        }
        return out;
    }
};

// One-shot scoring from fully materialised per-layer taps.
inline ImportanceScores importance_scores(const std::vector<Tensor>& taps_per_layer,
                                          const ClassPartition& part, ScoringMode mode) {
    if (taps_per_layer.empty()) throw ValidationError("importance_scores: no tapped layers");
    const std::size_t D = taps_per_layer[0].shape.back();
    ScoreAccumulator acc(taps_per_layer.size(), part.num_classes, D);
    for (std::size_t l = 1; l <= taps_per_layer.size(); ++l) {
        const Tensor& f = taps_per_layer[l - 1];
        const std::size_t S = f.shape[0];
        if (part.total() != S)
            throw ValidationError("importance_scores: partition covers " +
                                  std::to_string(part.total()) + " samples, features have " +
                                  std::to_string(S));
        std::vector<std::uint32_t> labels(S, 0);
        for (std::size_t m = 0; m < part.num_classes; ++m)
            for (std::size_t s : part.members[m]) labels[s] = static_cast<std::uint32_t>(m);
        acc.add(l, f, labels);
    }
    return acc.finish(mode);
}

struct ChannelSelection {
    std::vector<std::vector<std::size_t>> indices; // per layer, sorted ascending
    std::vector<std::size_t> k_per_layer;
    SelectStrategy strategy = SelectStrategy::Salient;
    ScoringMode mode = ScoringMode::ClassAware;
    std::uint64_t seed = 0; // meaningful for Random
    std::uint64_t model_fingerprint = 0;
    std::vector<std::vector<double>> selected_scores; // scores of selected indices

    std::size_t num_layers() const { return indices.size(); }
};

// Top-K (or bottom-K / random-K) channel pick per layer. Ties at the
// boundary break toward the lower channel index; output always sorted
// ascending.
inline ChannelSelection select_channels(const ImportanceScores& scores,
                                        const std::vector<std::size_t>& k_per_layer,
                                        SelectStrategy strategy, std::uint64_t seed = 0) {
    if (k_per_layer.size() != scores.scores.size())
        throw ConfigError("select_channels: K list length " + std::to_string(k_per_layer.size()) +
                          " != number of scored layers " + std::to_string(scores.scores.size()));
    ChannelSelection sel;
    sel.strategy = strategy;
    sel.mode = scores.mode;
    sel.seed = seed;
    sel.k_per_layer = k_per_layer;
    Rng rng(seed);
    for (std::size_t l = 0; l < scores.scores.size(); ++l) {
        const std::vector<double>& z = scores.scores[l];
        const std::size_t D = z.size();
        const std::size_t K = k_per_layer[l];
        if (K < 1 || K > D)
            throw ConfigError("select_channels: K=" + std::to_string(K) +
                              " out of range [1," + std::to_string(D) + "] at layer " +
                              std::to_string(l + 1));
        std::vector<std::size_t> idx(D);
        std::iota(idx.begin(), idx.end(), 0);
        if (strategy == SelectStrategy::Salient) {
            std::stable_sort(idx.begin(), idx.end(),
                             [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
        } else if (strategy == SelectStrategy::Inconspicuous) {
            std::stable_sort(idx.begin(), idx.end(),
                             [&](std::size_t a, std::size_t b) { return z[a] < z[b]; });
        } else {
            // Fisher-Yates prefix of length K.
            for (std::size_t i = 0; i < K; ++i) {
                const std::size_t j = i + static_cast<std::size_t>(rng.next_below(D - i));
                std::swap(idx[i], idx[j]);
            }
        }
        std::vector<std::size_t> chosen(idx.begin(), idx.begin() + static_cast<long>(K));
        std::sort(chosen.begin(), chosen.end());
        std::vector<double> sc(K);
        for (std::size_t i = 0; i < K; ++i) sc[i] = z[chosen[i]];
        sel.indices.push_back(std::move(chosen));
        sel.selected_scores.push_back(std::move(sc));
    }
    return sel;
}

// ---- selection file (JSON) --------------------------------------------

inline void save_selection(const ChannelSelection& sel, const std::string& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["model_fingerprint"] = sel.model_fingerprint;
    j["mode"] = to_string(sel.mode);
    j["strategy"] = to_string(sel.strategy);
    if (sel.strategy == SelectStrategy::Random) j["seed"] = sel.seed;
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < sel.indices.size(); ++l) {
        nlohmann::json e;
        e["layer"] = l + 1;
        e["k"] = sel.k_per_layer[l];
        e["indices"] = sel.indices[l];
        e["scores"] = sel.selected_scores[l];
        layers.push_back(std::move(e));
    }
    j["layers"] = std::move(layers);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << j.dump(2) << '\n';
    if (!os) throw IoError("write failed: " + path);
}

inline ChannelSelection load_selection(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": invalid selection file: " + e.what());
    }
    try {
        if (j.at("version").get<int>() != 1)
            throw FormatError(path + ": unsupported selection file version");
        ChannelSelection sel;
        sel.model_fingerprint = j.at("model_fingerprint").get<std::uint64_t>();
        sel.mode = scoring_mode_from(j.at("mode").get<std::string>());
        sel.strategy = strategy_from(j.at("strategy").get<std::string>());
        if (j.contains("seed")) sel.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& e : j.at("layers")) {
            std::vector<std::size_t> idx = e.at("indices").get<std::vector<std::size_t>>();
            Tape::validate_channel_indices(idx, SIZE_MAX, "selection file");
            sel.k_per_layer.push_back(e.at("k").get<std::size_t>());
            if (sel.k_per_layer.back() != idx.size())
                throw FormatError(path + ": k does not match index count");
            sel.selected_scores.push_back(e.at("scores").get<std::vector<double>>());
            sel.indices.push_back(std::move(idx));
        }
        return sel;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": invalid selection file: " + e.what());
    }
}

// ---- channel erasing --------------------------------------------------

// Zero the given channels at the tapped position (after the attention
// residual) of each listed layer. Implemented as a forward hook.
inline LayerHook make_erase_hook(const std::vector<std::vector<std::size_t>>& idx_per_layer,
                                 const std::vector<std::size_t>& layers_to_erase) {
    return [=](Tape& t, int var, std::size_t layer, TapPoint point) -> int {
        if (point != TapPoint::AfterAttnResidual) return var;
        if (std::find(layers_to_erase.begin(), layers_to_erase.end(), layer) ==
            layers_to_erase.end())
            return var;
        if (layer < 1 || layer > idx_per_layer.size())
            throw IndexError("erase: layer " + std::to_string(layer) + " has no index set");
        const auto& idx = idx_per_layer[layer - 1];
        if (idx.empty()) return var;
        const std::size_t D = t.val(var).shape.back();
        const std::size_t K = idx.size();
        Tape::validate_channel_indices(idx, D, "erase");
        Shape zshape = t.val(var).shape;
        zshape.back() = K;
        int zeros = t.constant(Tensor::zeros(zshape));
        return t.scatter_channels(zeros, idx, var);
    };
}

} // namespace sct
