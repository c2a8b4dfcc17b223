#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "sct/sctm.hpp"
#include "sct/select.hpp"
#include "sct/vit.hpp"

namespace sct {

// ---- dataset -------------------------------------------------------------

struct Dataset {
    Tensor images; // [S,C,H,W] in [0,1]
    std::vector<std::uint32_t> labels;
    std::size_t num_classes = 0;
    std::vector<std::size_t> train_idx, val_idx;

    std::size_t size() const { return labels.size(); }

    void save(const std::string& path) const {
        Container c;
        c.put("images", images);
        c.put_u32("labels", {labels.size()}, labels);
        c.put_u32("num_classes", {1}, {static_cast<std::uint32_t>(num_classes)});
        auto idx32 = [](const std::vector<std::size_t>& v) {
            return std::vector<std::uint32_t>(v.begin(), v.end());
        };
        c.put_u32("train_idx", {train_idx.size()}, idx32(train_idx));
        c.put_u32("val_idx", {val_idx.size()}, idx32(val_idx));
        c.save(path);
    }

    static Dataset load(const std::string& path) {
        Container c = Container::load(path);
        Dataset d;
        d.images = c.get("images");
        d.labels = c.get_u32("labels");
        d.num_classes = c.get_u32("num_classes")[0];
        for (std::uint32_t v : c.get_u32("train_idx")) d.train_idx.push_back(v);
        for (std::uint32_t v : c.get_u32("val_idx")) d.val_idx.push_back(v);
        if (d.images.shape.empty() || d.images.shape[0] != d.labels.size())
            throw FormatError(path + ": images/labels count mismatch");
        return d;
    }

    Tensor gather_images(const std::vector<std::size_t>& idx, std::size_t from,
                         std::size_t count) const {
        const std::size_t per = images.size() / images.shape[0];
        Shape s = images.shape;
        s[0] = count;
        Tensor out(s);
        for (std::size_t i = 0; i < count; ++i)
            std::copy_n(images.data.data() + idx[from + i] * per, per, out.data.data() + i * per);
        return out;
    }
    std::vector<std::uint32_t> gather_labels(const std::vector<std::size_t>& idx,
                                             std::size_t from, std::size_t count) const {
        std::vector<std::uint32_t> out(count);
        for (std::size_t i = 0; i < count; ++i) out[i] = labels[idx[from + i]];
        return out;
    }
};

// Class-conditional synthetic images: a fixed per-class blob with a
// per-class colour tint (linearly detectable, gives nearest-centroid
// signal) plus a per-class grating with random phase per sample (energy
// detectable only nonlinearly) plus pixel noise. Sample order interleaves
// classes; split is the first train_frac of each class.
inline Dataset make_synthetic_dataset(std::size_t num_classes, std::size_t per_class,
                                      const VitConfig& cfg, Rng& rng, double train_frac = 0.8) {
    if (num_classes < 2) throw ConfigError("synthetic dataset: need at least 2 classes");
    if (per_class < 2) throw ConfigError("synthetic dataset: need at least 2 samples per class");
    const std::size_t C = cfg.channels_in, H = cfg.image_size, W = cfg.image_size;
    const std::size_t S = num_classes * per_class;
    Dataset d;
    d.num_classes = num_classes;
    d.images = Tensor({S, C, H, W});
    d.labels.resize(S);
    const double two_pi = 6.283185307179586;
    const std::size_t n_train = static_cast<std::size_t>(std::floor(train_frac * per_class));
    for (std::size_t s = 0; s < per_class; ++s) {
        for (std::size_t m = 0; m < num_classes; ++m) {
            const std::size_t i = s * num_classes + m;
            d.labels[i] = static_cast<std::uint32_t>(m);
            if (s < n_train)
                d.train_idx.push_back(i);
            else
                d.val_idx.push_back(i);
            // class-fixed structure
            const double theta = two_pi * 0.5 * m / num_classes;
            const double freq = 2.0 + static_cast<double>(m % 4);
            const double fx = freq * std::cos(theta), fy = freq * std::sin(theta);
            const double cx = 0.5 + 0.30 * std::cos(two_pi * m / num_classes);
            const double cy = 0.5 + 0.30 * std::sin(two_pi * m / num_classes);
            // per-sample variation
            const double phase = two_pi * rng.next_double();
            const double amp = 0.8 + 0.4 * rng.next_double();
            for (std::size_t c = 0; c < C; ++c) {
                const double tint = (m % C == c) ? 1.0 : 0.3;
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x) {
                        const double u = (x + 0.5) / W, v = (y + 0.5) / H;
                        const double blob =
                            std::exp(-((u - cx) * (u - cx) + (v - cy) * (v - cy)) / (2 * 0.02));
                        const double grating = std::sin(two_pi * (fx * u + fy * v) + phase);
                        double px = 0.45 + 0.20 * tint * blob + 0.22 * amp * grating +
                                    0.08 * rng.next_gaussian();
                        px = std::min(1.0, std::max(0.0, px));
                        d.images.data[((i * C + c) * H + y) * W + x] = static_cast<float>(px);
                    }
            }
        }
    }
    return d;
}

// ---- optimiser and schedule -----------------------------------------------

// AdamW, decoupled form:
//   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
//   p -= lr * ( mhat / (sqrt(vhat) + eps) + wd * p )
// State kept in double; parameters stay float32.
class AdamW {
  public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : b1_(beta1), b2_(beta2), eps_(eps) {}

    void step_begin() { ++t_; }

    void update(const std::string& name, Tensor& param, const Tensor& grad, double lr, double wd) {
        State& st = state_[name];
        if (st.m.empty()) {
            st.m.assign(param.size(), 0.0);
            st.v.assign(param.size(), 0.0);
        }
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double g = grad.data[i];
            st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * g;
            st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * g * g;
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            const double p = param.data[i];
            param.data[i] =
                static_cast<float>(p - lr * (mhat / (std::sqrt(vhat) + eps_) + wd * p));
        }
    }

  private:
    struct State {
        std::vector<double> m, v;
    };
    double b1_, b2_, eps_;
    int t_ = 0;
    std::map<std::string, State> state_;
};

// Linear warmup to base lr over the first warmup_steps, then cosine decay
// to zero. step is 0-based; lr(0) = base / warmup_steps.
inline double lr_at_step(double base, std::size_t step, std::size_t warmup_steps,
                         std::size_t total_steps) {
    if (warmup_steps > 0 && step < warmup_steps)
        return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return base;
    const double prog = static_cast<double>(step - warmup_steps) /
                        static_cast<double>(total_steps - warmup_steps);
    return base * 0.5 * (1.0 + std::cos(3.141592653589793 * prog));
}

// ---- training -------------------------------------------------------------

struct TrainConfig {
    double lr = 0.01;
    double wd = 0.0001;
    std::size_t epochs = 100;
    std::size_t warmup_epochs = 10;
    std::size_t batch_size = 64;
    std::uint64_t seed = 42;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("train config: lr must be > 0");
        if (wd < 0.0) throw ConfigError("train config: wd must be >= 0");
        if (batch_size < 1) throw ConfigError("train config: batch size must be >= 1");
        if (warmup_epochs >= epochs)
            throw ConfigError("train config: warmup epochs must be < total epochs");
    }
};

struct EpochMetrics {
    std::size_t epoch;
    double lr;
    double train_loss;
    double train_acc;
    double val_acc;
};

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    double final_train_acc = 0.0;
    double final_val_acc = 0.0;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Top-1 accuracy of a tuned model over a dataset split.
inline double evaluate(const TunedModel& m, const Dataset& d,
                       const std::vector<std::size_t>& split, std::size_t batch = 64,
                       const LayerHook& extra_hook = nullptr) {
    if (split.empty()) throw ValidationError("evaluate: empty split");
    std::size_t correct = 0;
    for (std::size_t at = 0; at < split.size(); at += batch) {
        const std::size_t n = std::min(batch, split.size() - at);
        const Tensor images = d.gather_images(split, at, n);
        const auto labels = d.gather_labels(split, at, n);
        const Tensor logits = tuned_logits(m, images, extra_hook);
        const auto pred = argmax_rows(logits);
        for (std::size_t i = 0; i < n; ++i)
            if (pred[i] == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

namespace detail {

inline void write_epoch_record(std::ostream* log, const EpochMetrics& e) {
    if (!log) return;
    (*log) << "{\"epoch\":" << e.epoch << ",\"lr\":" << e.lr << ",\"train_loss\":" << e.train_loss
           << ",\"train_acc\":" << e.train_acc << ",\"val_acc\":" << e.val_acc << "}\n";
    log->flush();
}

// Head-only training on cached pre-head features; exactly the generic
// path restricted to the head because the backbone is frozen and
// deterministic.
inline TrainResult train_linear_probe(TunedModel& model, const Dataset& d,
                                      const TrainConfig& cfg, std::ostream* log) {
    const std::size_t Dd = model.base.cfg.embed_dim;
    auto features_of = [&](const std::vector<std::size_t>& split) {
        Tensor out({split.size(), Dd});
        for (std::size_t at = 0; at < split.size(); at += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, split.size() - at);
            Tape t;
            VitVars w = bind_checkpoint(t, model.base, nullptr);
            int iv = t.constant(d.gather_images(split, at, n));
            VitForwardOut o = vit_forward_tape(t, w, model.base.cfg, iv, {});
            const Tensor& f = t.val(o.pre_head);
            std::copy(f.data.begin(), f.data.end(), out.data.begin() + at * Dd);
        }
        return out;
    };
    const Tensor train_feats = features_of(d.train_idx);
    const Tensor val_feats = features_of(d.val_idx);
    const auto val_labels_all = d.gather_labels(d.val_idx, 0, d.val_idx.size());

    const std::size_t n_train = d.train_idx.size();
    const std::size_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    const std::size_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    AdamW opt;
    Rng shuffle_rng(derive_seed(cfg.seed, 0xe9));
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;

    TrainResult res;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n_train; i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.next_below(i))]);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        double lr = 0.0;
        for (std::size_t at = 0; at < n_train; at += cfg.batch_size, ++step) {
            const std::size_t n = std::min(cfg.batch_size, n_train - at);
            Tensor fb({n, Dd});
            std::vector<std::uint32_t> lb(n);
            for (std::size_t i = 0; i < n; ++i) {
                std::copy_n(train_feats.data.data() + order[at + i] * Dd, Dd,
                            fb.data.data() + i * Dd);
                lb[i] = d.labels[d.train_idx[order[at + i]]];
            }
            lr = lr_at_step(cfg.lr, step, warmup_steps, total_steps);
            Tape t;
            int fv = t.constant(std::move(fb));
            int hw = t.leaf(model.head_w, "head.W", true);
            int hb = t.leaf(model.head_b, "head.b", true);
            int logits = linear(t, fv, hw, hb);
            int loss = t.cross_entropy_mean(logits, lb);
            loss_sum += t.val(loss).data[0] * n;
            const auto pred = argmax_rows(t.val(logits));
            for (std::size_t i = 0; i < n; ++i)
                if (pred[i] == lb[i]) ++correct;
            auto grads = t.grad_of(loss);
            opt.step_begin();
            opt.update("head.W", model.head_w, grads.at("head.W"), lr, cfg.wd);
            opt.update("head.b", model.head_b, grads.at("head.b"), lr, cfg.wd);
        }
        // val accuracy from cached features
        std::size_t vc = 0;
        {
            Tape t;
            int fv = t.constant(val_feats);
            int hw = t.leaf(model.head_w, "head.W", false);
            int hb = t.leaf(model.head_b, "head.b", false);
            const auto pred = argmax_rows(t.val(linear(t, fv, hw, hb)));
            for (std::size_t i = 0; i < pred.size(); ++i)
                if (pred[i] == val_labels_all[i]) ++vc;
        }
        EpochMetrics em{epoch + 1, lr, loss_sum / n_train,
                        static_cast<double>(correct) / n_train,
                        static_cast<double>(vc) / d.val_idx.size()};
        write_epoch_record(log, em);
        res.epochs.push_back(em);
    }
    res.final_train_acc = res.epochs.back().train_acc;
    res.final_val_acc = res.epochs.back().val_acc;
    return res;
}

} // namespace detail

// Trains the tuned model in place. Only the leaves that the mode marks
// trainable receive optimizer updates; everything else is bitwise
// untouched at completion.
using StepObserver = std::function<void(std::size_t step, const std::map<std::string, Tensor>&)>;

inline TrainResult train(TunedModel& model, const Dataset& d, const TrainConfig& cfg,
                         TuneMode mode = TuneMode::Sct, std::ostream* log = nullptr,
                         const StepObserver& observer = nullptr) {
    cfg.validate();
    if (d.train_idx.empty() || d.val_idx.empty())
        throw ConfigError("train: dataset must have non-empty train and val splits");
    if (mode == TuneMode::LinearProbe) return detail::train_linear_probe(model, d, cfg, log);

    const std::size_t n_train = d.train_idx.size();
    const std::size_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    const std::size_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    AdamW opt;
    Rng shuffle_rng(derive_seed(cfg.seed, 0xe9));
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = d.train_idx[i];

    TrainResult res;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n_train; i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.next_below(i))]);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        double lr = 0.0;
        for (std::size_t at = 0; at < n_train; at += cfg.batch_size, ++step) {
            const std::size_t n = std::min(cfg.batch_size, n_train - at);
            Tensor images({n, model.base.cfg.channels_in, model.base.cfg.image_size,
                           model.base.cfg.image_size});
            const std::size_t per = images.size() / n;
            std::vector<std::uint32_t> lb(n);
            for (std::size_t i = 0; i < n; ++i) {
                std::copy_n(d.images.data.data() + order[at + i] * per, per,
                            images.data.data() + i * per);
                lb[i] = d.labels[order[at + i]];
            }
            lr = lr_at_step(cfg.lr, step, warmup_steps, total_steps);
            try {
                Tape t;
                int iv = t.constant(std::move(images));
                TunedForward f = tuned_forward_tape(t, model, iv, mode);
                int loss = t.cross_entropy_mean(f.out.logits, lb);
                loss_sum += t.val(loss).data[0] * n;
                const auto pred = argmax_rows(t.val(f.out.logits));
                for (std::size_t i = 0; i < n; ++i)
                    if (pred[i] == lb[i]) ++correct;
                auto grads = t.grad_of(loss);
                if (observer) observer(step, grads);
                opt.step_begin();
                for (auto& [name, g] : grads) {
                    if (name == "head.W")
                        opt.update(name, model.head_w, g, lr, cfg.wd);
                    else if (name == "head.b")
                        opt.update(name, model.head_b, g, lr, cfg.wd);
                    else if (name.rfind("sctm.", 0) == 0) {
                        const bool is_w = name.ends_with(".W");
                        const std::string key = name.substr(0, name.size() - 2);
                        opt.update(name, is_w ? model.modules.at(key).W : model.modules.at(key).b,
                                   g, lr, cfg.wd);
                    } else {
                        opt.update(name, model.base.weights.at(name), g, lr, cfg.wd);
                    }
                }
            } catch (const NumericError& e) {
                throw NumericError("train: aborted at step " + std::to_string(step) + " (epoch " +
                                   std::to_string(epoch + 1) + "): " + e.what());
            }
        }
        EpochMetrics em{epoch + 1, lr, loss_sum / n_train,
                        static_cast<double>(correct) / n_train,
                        evaluate(model, d, d.val_idx, cfg.batch_size)};
        detail::write_epoch_record(log, em);
        res.epochs.push_back(em);
    }
    res.final_train_acc = res.epochs.back().train_acc;
    res.final_val_acc = res.epochs.back().val_acc;
    return res;
}

// Linear-probe / full fine-tuning baselines share the trainer; the mode
// picks the trainable leaf set.
inline TrainResult baseline(TuneMode mode, TunedModel& model, const Dataset& d,
                            const TrainConfig& cfg, std::ostream* log = nullptr) {
    if (mode == TuneMode::Sct) throw ConfigError("baseline: mode must be linear-probe or full-ft");
    return train(model, d, cfg, mode, log);
}

// ---- grid search ------------------------------------------------------------

struct GridSpec {
    std::vector<double> lrs = {0.1, 0.5, 0.01, 0.05, 0.001, 0.005, 0.0001, 0.0005};
    std::vector<double> wds = {0.1, 0.01, 0.05, 0.001, 0.005, 0.0005, 0.0001};
    std::vector<float> scales = {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f, 0.9f, 1.0f};

    void validate() const {
        if (lrs.empty() || wds.empty() || scales.empty())
            throw ConfigError("grid spec: candidate sets must be non-empty");
    }
};

struct GridCell {
    double lr;
    double wd;
    float scale;
    double val_acc = -1.0;
    double train_acc = -1.0;
    std::string status = "ok";
};

struct GridResult {
    std::vector<GridCell> cells;
    std::size_t best = 0;
};

// One full training run per (lr, wd, scale) cell. Cell seeds derive from
// the base seed and the cell index, so serial and parallel sweeps emit
// identical tables. Failed cells are recorded, not fatal.
inline GridResult grid_search(const VitCheckpoint& ck, const ChannelSelection& sel,
                              const InjectionPlan& plan, const Dataset& d, const GridSpec& grid,
                              const TrainConfig& base_cfg, std::size_t workers = 1) {
    grid.validate();
    GridResult res;
    for (double lr : grid.lrs)
        for (double wd : grid.wds)
            for (float s : grid.scales) res.cells.push_back(GridCell{lr, wd, s});

    auto run_cell = [&](std::size_t ci) {
        GridCell& cell = res.cells[ci];
        try {
            TunedModel m = inject(ck, sel, plan, cell.scale);
            TrainConfig cfg = base_cfg;
            cfg.lr = cell.lr;
            cfg.wd = cell.wd;
            cfg.seed = derive_seed(base_cfg.seed, ci);
            TrainResult r = train(m, d, cfg, TuneMode::Sct);
            cell.val_acc = r.final_val_acc;
            cell.train_acc = r.final_train_acc;
        } catch (const std::exception& e) {
            cell.status = std::string("failed: ") + e.what();
        }
    };

    if (workers <= 1) {
        for (std::size_t ci = 0; ci < res.cells.size(); ++ci) run_cell(ci);
    } else {
        std::vector<std::thread> pool;
        std::size_t n = res.cells.size();
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t ci = w; ci < n; ci += workers) run_cell(ci);
            });
        for (auto& th : pool) th.join();
    }

    // Rank by val accuracy; ties break toward smaller lr, then wd, then scale.
    std::size_t best = 0;
    bool found = false;
    for (std::size_t ci = 0; ci < res.cells.size(); ++ci) {
        const GridCell& c = res.cells[ci];
        if (c.status != "ok") continue;
        if (!found) {
            best = ci;
            found = true;
            continue;
        }
        const GridCell& b = res.cells[best];
        if (c.val_acc > b.val_acc ||
            (c.val_acc == b.val_acc &&
             std::tie(c.lr, c.wd, c.scale) < std::tie(b.lr, b.wd, b.scale)))
            best = ci;
    }
    if (!found) throw NumericError("grid_search: every cell failed");
    res.best = best;
    return res;
}

} // namespace sct
