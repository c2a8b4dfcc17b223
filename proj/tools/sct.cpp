// Salient-channel tuning workbench CLI.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sct/manifest.hpp"
#include "sct/sctm.hpp"
#include "sct/select.hpp"
#include "sct/train.hpp"
#include "sct/vit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t default_seed() {
    if (const char* env = std::getenv("SCT_SEED")) return std::strtoull(env, nullptr, 10);
    return 42;
}

std::vector<std::size_t> parse_k_list(const std::string& k_csv, std::size_t num_layers) {
    std::vector<std::size_t> ks;
    std::stringstream ss(k_csv);
    std::string item;
    while (std::getline(ss, item, ',')) ks.push_back(std::stoul(item));
    if (ks.size() == 1) ks.assign(num_layers, ks[0]);
    if (ks.size() != num_layers)
        throw sct::ConfigError("--k list has " + std::to_string(ks.size()) + " entries, model has " +
                               std::to_string(num_layers) + " layers");
    return ks;
}

std::vector<std::size_t> parse_layers(const std::string& spec, std::size_t L) {
    if (spec == "all") {
        std::vector<std::size_t> out(L);
        for (std::size_t l = 1; l <= L; ++l) out[l - 1] = l;
        return out;
    }
    if (spec.rfind("last-", 0) == 0) {
        const std::size_t n = std::stoul(spec.substr(5));
        if (n < 1 || n > L) throw sct::ConfigError("--layers " + spec + ": count out of range");
        std::vector<std::size_t> out;
        for (std::size_t l = L - n + 1; l <= L; ++l) out.push_back(l);
        return out;
    }
    std::vector<std::size_t> out;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
    for (std::size_t l : out)
        if (l < 1 || l > L) throw sct::ConfigError("--layers: layer " + std::to_string(l) +
                                                   " out of range [1," + std::to_string(L) + "]");
    return out;
}

// Tapped-forward CAIS scoring over a dataset split, batched.
sct::ImportanceScores score_dataset(const sct::VitCheckpoint& ck, const sct::Dataset& d,
                                    const std::vector<std::size_t>& split, sct::ScoringMode mode,
                                    std::size_t batch = 64) {
    const std::size_t L = ck.cfg.num_layers;
    std::vector<sct::FeatureTap> taps;
    for (std::size_t l = 1; l <= L; ++l)
        taps.push_back({l, sct::TapPoint::AfterAttnResidual});
    // verify every class appears in the split
    std::vector<std::uint32_t> split_labels;
    for (std::size_t i : split) split_labels.push_back(d.labels[i]);
    sct::ClassPartition::from_labels(split_labels, d.num_classes);
    sct::ScoreAccumulator acc(L, d.num_classes, ck.cfg.embed_dim);
    for (std::size_t at = 0; at < split.size(); at += batch) {
        const std::size_t n = std::min(batch, split.size() - at);
        const sct::Tensor images = d.gather_images(split, at, n);
        const auto labels = d.gather_labels(split, at, n);
        sct::ForwardResult r = sct::vit_forward(ck, images, taps);
        for (std::size_t l = 1; l <= L; ++l)
            acc.add(l, r.taps.at({l, sct::TapPoint::AfterAttnResidual}), labels);
    }
    return acc.finish(mode);
}

void write_importance_report(const sct::ImportanceScores& sc, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw sct::IoError("cannot open for writing: " + path);
    const std::size_t M = sc.per_class.empty() ? 0 : sc.per_class[0].size();
    os << "layer,channel,z";
    for (std::size_t m = 0; m < M; ++m) os << ",class" << m;
    os << "\n";
    for (std::size_t l = 0; l < sc.scores.size(); ++l)
        for (std::size_t i = 0; i < sc.scores[l].size(); ++i) {
            os << (l + 1) << ',' << i << ',' << sc.scores[l][i];
            for (std::size_t m = 0; m < M; ++m) os << ',' << sc.per_class[l][m][i];
            os << "\n";
        }
}

const std::vector<std::size_t>& split_of(const sct::Dataset& d, const std::string& name,
                                         std::vector<std::size_t>& all_storage) {
    if (name == "train") return d.train_idx;
    if (name == "val") return d.val_idx;
    if (name == "all") {
        all_storage.resize(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) all_storage[i] = i;
        return all_storage;
    }
    throw sct::ConfigError("unknown split '" + name + "' (train | val | all)");
}

int run(int argc, char** argv) {
    CLI::App app{"Salient channel tuning workbench"};
    app.require_subcommand(1);
    std::uint64_t seed = default_seed();

    // ---- init-toy ----
    auto* c_init = app.add_subcommand("init-toy", "create toy checkpoint + synthetic dataset");
    std::string init_out = "toy";
    bool init_force = false;
    sct::VitConfig init_cfg;
    std::size_t init_per_class = 125;
    c_init->add_option("--out-dir", init_out);
    c_init->add_flag("--force", init_force);
    c_init->add_option("--seed", seed);
    c_init->add_option("--image", init_cfg.image_size);
    c_init->add_option("--patch", init_cfg.patch_size);
    c_init->add_option("--channels", init_cfg.channels_in);
    c_init->add_option("--dim", init_cfg.embed_dim);
    c_init->add_option("--layers", init_cfg.num_layers);
    c_init->add_option("--heads", init_cfg.num_heads);
    c_init->add_option("--mlp-ratio", init_cfg.mlp_ratio);
    c_init->add_option("--classes", init_cfg.num_classes);
    c_init->add_option("--samples-per-class", init_per_class);

    // ---- select ----
    auto* c_sel = app.add_subcommand("select", "compute importance scores and pick channels");
    std::string sel_ckpt, sel_data, sel_out = "selection.json", sel_report;
    std::string sel_strategy = "salient", sel_mode = "class-aware", sel_k = "16";
    std::string sel_split = "train";
    c_sel->add_option("--checkpoint", sel_ckpt)->required();
    c_sel->add_option("--dataset", sel_data)->required();
    c_sel->add_option("--k,--k-per-layer", sel_k);
    c_sel->add_option("--strategy", sel_strategy);
    c_sel->add_option("--mode", sel_mode);
    c_sel->add_option("--split", sel_split);
    c_sel->add_option("--seed", seed);
    c_sel->add_option("--out", sel_out);
    c_sel->add_option("--report", sel_report);

    // ---- train ----
    auto* c_tr = app.add_subcommand("train", "fine-tune SCTM + head (or a baseline)");
    std::string tr_ckpt, tr_data, tr_sel, tr_out = "artifact.sctw", tr_metrics, tr_grid_out;
    std::string tr_position = "attn", tr_layers = "all", tr_baseline;
    double tr_lr = 0.01, tr_wd = 0.0001, tr_scale = -1.0;
    std::size_t tr_epochs = 100, tr_warmup = 10, tr_batch = 64, tr_workers = 1;
    bool tr_grid = false;
    std::string tr_grid_lrs, tr_grid_wds, tr_grid_scales;
    c_tr->add_option("--checkpoint", tr_ckpt)->required();
    c_tr->add_option("--dataset", tr_data)->required();
    c_tr->add_option("--selection", tr_sel);
    c_tr->add_option("--position", tr_position);
    c_tr->add_option("--layers", tr_layers);
    c_tr->add_option("--scale", tr_scale);
    c_tr->add_option("--lr", tr_lr);
    c_tr->add_option("--wd", tr_wd);
    c_tr->add_option("--epochs", tr_epochs);
    c_tr->add_option("--warmup", tr_warmup);
    c_tr->add_option("--batch", tr_batch);
    c_tr->add_option("--seed", seed);
    c_tr->add_option("--out", tr_out);
    c_tr->add_option("--metrics", tr_metrics);
    c_tr->add_flag("--grid", tr_grid);
    c_tr->add_option("--grid-lrs", tr_grid_lrs);
    c_tr->add_option("--grid-wds", tr_grid_wds);
    c_tr->add_option("--grid-scales", tr_grid_scales);
    c_tr->add_option("--grid-out", tr_grid_out);
    c_tr->add_option("--workers", tr_workers);
    c_tr->add_option("--baseline", tr_baseline)->description("linear-probe | full-ft");

    // ---- eval ----
    auto* c_ev = app.add_subcommand("eval", "top-1 accuracy of a model on a split");
    std::string ev_ckpt, ev_art, ev_data, ev_split = "val";
    c_ev->add_option("--checkpoint", ev_ckpt)->required();
    c_ev->add_option("--artifact", ev_art);
    c_ev->add_option("--dataset", ev_data)->required();
    c_ev->add_option("--split", ev_split);

    // ---- erase ----
    auto* c_er = app.add_subcommand("erase", "channel erasing diagnostics");
    std::string er_ckpt, er_art, er_data, er_sel, er_mode = "all", er_out = "erase.csv";
    std::string er_split = "val";
    std::size_t er_trials = 10;
    c_er->add_option("--checkpoint", er_ckpt)->required();
    c_er->add_option("--artifact", er_art);
    c_er->add_option("--dataset", er_data)->required();
    c_er->add_option("--selection", er_sel)->required();
    c_er->add_option("--mode", er_mode)->description("all | per-layer");
    c_er->add_option("--random-trials", er_trials);
    c_er->add_option("--split", er_split);
    c_er->add_option("--seed", seed);
    c_er->add_option("--out", er_out);

    // ---- params / flops ----
    auto* c_pa = app.add_subcommand("params", "closed-form extra-parameter accounting");
    auto* c_fl = app.add_subcommand("flops", "closed-form extra-FLOP accounting");
    std::size_t ac_dim = 768, ac_layers = 12, ac_tokens = 197;
    std::string ac_k = "96", ac_position = "attn";
    double ac_full_m = 85.8;
    std::vector<std::string> ac_compare;
    for (auto* c : {c_pa, c_fl}) {
        c->add_option("--dim", ac_dim);
        c->add_option("--layers", ac_layers);
        c->add_option("--tokens", ac_tokens);
        c->add_option("--k,--k-per-layer", ac_k);
        c->add_option("--position", ac_position);
        c->add_option("--full-params-m", ac_full_m);
        c->add_option("--compare", ac_compare)
            ->description("adapter:D' vpt:n ssf:m (repeatable)");
    }

    // ---- report ----
    auto* c_rp = app.add_subcommand("report", "summarize a selection file as CSV");
    std::string rp_sel, rp_out = "selection_report.csv";
    c_rp->add_option("--selection", rp_sel)->required();
    c_rp->add_option("--out", rp_out);

    CLI11_PARSE(app, argc, argv);

    if (*c_init) {
        init_cfg.validate();
        if (fs::exists(init_out) && !init_force)
            throw sct::ConfigError("out-dir '" + init_out + "' exists; pass --force to overwrite");
        fs::create_directories(init_out);
        sct::RunManifest man("init-toy", seed);
        sct::Rng rng(seed);
        sct::VitCheckpoint ck = sct::init_toy_checkpoint(init_cfg, rng);
        sct::Rng data_rng(sct::derive_seed(seed, 1));
        sct::Dataset d = sct::make_synthetic_dataset(init_cfg.num_classes, init_per_class,
                                                     init_cfg, data_rng);
        const std::string ck_path = init_out + "/checkpoint.sctw";
        const std::string ds_path = init_out + "/dataset.sctw";
        ck.save(ck_path);
        d.save(ds_path);
        json cfgj = {{"image", init_cfg.image_size},   {"patch", init_cfg.patch_size},
                     {"channels", init_cfg.channels_in}, {"dim", init_cfg.embed_dim},
                     {"layers", init_cfg.num_layers},  {"heads", init_cfg.num_heads},
                     {"mlp_ratio", init_cfg.mlp_ratio}, {"classes", init_cfg.num_classes},
                     {"samples_per_class", init_per_class}};
        std::ofstream(init_out + "/config.json") << cfgj.dump(2) << '\n';
        man.config("config", cfgj);
        man.output(ck_path);
        man.output(ds_path);
        man.output(init_out + "/config.json");
        man.write(init_out + "/manifest.json");
        std::cout << "wrote " << ck_path << " and " << ds_path << "\n";
        return 0;
    }

    if (*c_sel) {
        sct::RunManifest man("select", seed);
        man.input(sel_ckpt);
        man.input(sel_data);
        sct::VitCheckpoint ck = sct::VitCheckpoint::load(sel_ckpt);
        sct::Dataset d = sct::Dataset::load(sel_data);
        std::vector<std::size_t> all;
        const auto& split = split_of(d, sel_split, all);
        const auto ks = parse_k_list(sel_k, ck.cfg.num_layers);
        for (std::size_t K : ks)
            if (K > ck.cfg.embed_dim)
                throw sct::ConfigError("K=" + std::to_string(K) + " exceeds embed dim " +
                                       std::to_string(ck.cfg.embed_dim));
        sct::ImportanceScores sc =
            score_dataset(ck, d, split, sct::scoring_mode_from(sel_mode));
        sct::ChannelSelection sel =
            sct::select_channels(sc, ks, sct::strategy_from(sel_strategy), seed);
        sel.model_fingerprint = sct::fnv1a64_file(sel_ckpt);
        sct::save_selection(sel, sel_out);
        man.config("k", sel_k);
        man.config("strategy", sel_strategy);
        man.config("mode", sel_mode);
        man.output(sel_out);
        if (!sel_report.empty()) {
            write_importance_report(sc, sel_report);
            man.output(sel_report);
        }
        man.write(sel_out + ".manifest.json");
        std::cout << "wrote " << sel_out << "\n";
        return 0;
    }

    if (*c_tr) {
        sct::RunManifest man("train", seed);
        man.input(tr_ckpt);
        man.input(tr_data);
        sct::VitCheckpoint ck = sct::VitCheckpoint::load(tr_ckpt);
        sct::Dataset d = sct::Dataset::load(tr_data);
        sct::TrainConfig cfg;
        cfg.lr = tr_lr;
        cfg.wd = tr_wd;
        cfg.epochs = tr_epochs;
        cfg.warmup_epochs = tr_warmup;
        cfg.batch_size = tr_batch;
        cfg.seed = seed;
        man.config("lr", tr_lr);
        man.config("wd", tr_wd);
        man.config("epochs", tr_epochs);
        man.config("position", tr_position);

        if (!tr_baseline.empty()) {
            sct::TuneMode mode;
            if (tr_baseline == "linear-probe")
                mode = sct::TuneMode::LinearProbe;
            else if (tr_baseline == "full-ft")
                mode = sct::TuneMode::FullFt;
            else
                throw sct::ConfigError("--baseline must be linear-probe or full-ft");
            sct::TunedModel m;
            m.base = std::move(ck);
            m.head_w = m.base.weights.get("head.weight");
            m.head_b = m.base.weights.get("head.bias");
            m.base_fingerprint = sct::fnv1a64_file(tr_ckpt);
            std::ofstream mlog;
            if (!tr_metrics.empty()) mlog.open(tr_metrics, std::ios::app);
            sct::TrainResult r =
                sct::baseline(mode, m, d, cfg, tr_metrics.empty() ? nullptr : &mlog);
            sct::save_artifact(m, tr_out);
            man.output(tr_out);
            if (!tr_metrics.empty()) man.output(tr_metrics);
            man.write(tr_out + ".manifest.json");
            std::cout << "baseline " << tr_baseline << " final val_acc=" << r.final_val_acc
                      << "\n";
            return 0;
        }

        if (tr_sel.empty()) throw sct::ConfigError("--selection is required for SCT training");
        man.input(tr_sel);
        sct::ChannelSelection sel = sct::load_selection(tr_sel);
        sct::InjectionPlan plan;
        plan.position = sct::insert_position_from(tr_position);
        plan.layers = parse_layers(tr_layers, ck.cfg.num_layers);

        sct::GridSpec grid;
        auto parse_d = [](const std::string& csv, std::vector<double>& out) {
            if (csv.empty()) return;
            out.clear();
            std::stringstream ss(csv);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
        };
        parse_d(tr_grid_lrs, grid.lrs);
        parse_d(tr_grid_wds, grid.wds);
        if (!tr_grid_scales.empty()) {
            grid.scales.clear();
            std::stringstream ss(tr_grid_scales);
            std::string item;
            while (std::getline(ss, item, ',')) grid.scales.push_back(std::stof(item));
        }

        const bool scale_search = tr_scale < 0.0 && !tr_grid;
        if (tr_grid || scale_search) {
            if (!tr_grid) {
                // omitted --scale: search the Scale grid at fixed lr/wd
                grid.lrs = {tr_lr};
                grid.wds = {tr_wd};
            }
            sct::GridResult gr =
                sct::grid_search(ck, sel, plan, d, grid, cfg, tr_workers);
            const std::string table = tr_grid_out.empty() ? tr_out + ".grid.csv" : tr_grid_out;
            std::ofstream os(table, std::ios::trunc);
            os << "lr,wd,scale,val_acc,train_acc,status\n";
            for (const auto& cell : gr.cells)
                os << cell.lr << ',' << cell.wd << ',' << cell.scale << ',' << cell.val_acc << ','
                   << cell.train_acc << ",\"" << cell.status << "\"\n";
            man.output(table);
            const auto& best = gr.cells[gr.best];
            std::cout << "best: lr=" << best.lr << " wd=" << best.wd << " scale=" << best.scale
                      << " val_acc=" << best.val_acc << "\n";
            // retrain the winning cell and persist it
            cfg.lr = best.lr;
            cfg.wd = best.wd;
            cfg.seed = sct::derive_seed(cfg.seed, gr.best);
            tr_scale = best.scale;
        }

        sct::TunedModel m = sct::inject(std::move(ck), sel, plan, static_cast<float>(tr_scale));
        m.base_fingerprint = sct::fnv1a64_file(tr_ckpt);
        m.selection_fingerprint = sct::fnv1a64_file(tr_sel);
        std::ofstream mlog;
        if (!tr_metrics.empty()) mlog.open(tr_metrics, std::ios::app);
        sct::TrainResult r = sct::train(m, d, cfg, sct::TuneMode::Sct,
                                        tr_metrics.empty() ? nullptr : &mlog);
        sct::save_artifact(m, tr_out);
        man.output(tr_out);
        if (!tr_metrics.empty()) man.output(tr_metrics);
        man.write(tr_out + ".manifest.json");
        std::cout << "final val_acc=" << r.final_val_acc << " train_acc=" << r.final_train_acc
                  << "\n";
        return 0;
    }

    if (*c_ev) {
        sct::VitCheckpoint ck = sct::VitCheckpoint::load(ev_ckpt);
        sct::Dataset d = sct::Dataset::load(ev_data);
        std::vector<std::size_t> all;
        const auto& split = split_of(d, ev_split, all);
        sct::TunedModel m;
        if (!ev_art.empty()) {
            m = sct::load_artifact(ev_art, std::move(ck));
        } else {
            m.base = std::move(ck);
            m.head_w = m.base.weights.get("head.weight");
            m.head_b = m.base.weights.get("head.bias");
        }
        std::cout << "accuracy=" << sct::evaluate(m, d, split) << "\n";
        return 0;
    }

    if (*c_er) {
        sct::RunManifest man("erase", seed);
        man.input(er_ckpt);
        man.input(er_data);
        man.input(er_sel);
        sct::VitCheckpoint ck = sct::VitCheckpoint::load(er_ckpt);
        sct::Dataset d = sct::Dataset::load(er_data);
        sct::ChannelSelection sel = sct::load_selection(er_sel);
        sct::TunedModel m;
        if (!er_art.empty()) {
            man.input(er_art);
            m = sct::load_artifact(er_art, std::move(ck));
        } else {
            m.base = std::move(ck);
            m.head_w = m.base.weights.get("head.weight");
            m.head_b = m.base.weights.get("head.bias");
        }
        const std::size_t L = m.base.cfg.num_layers;
        const std::size_t D = m.base.cfg.embed_dim;
        std::vector<std::size_t> all;
        const auto& split = split_of(d, er_split, all);
        std::vector<std::size_t> all_layers;
        for (std::size_t l = 1; l <= L; ++l) all_layers.push_back(l);

        std::ofstream os(er_out, std::ios::trunc);
        if (!os) throw sct::IoError("cannot open for writing: " + er_out);
        os << "kind,layer,trial,accuracy\n";
        const double control = sct::evaluate(m, d, split);
        os << "control,0,0," << control << "\n";

        auto eval_erased = [&](const std::vector<std::vector<std::size_t>>& idx,
                               const std::vector<std::size_t>& layers) {
            return sct::evaluate(m, d, split, 64, sct::make_erase_hook(idx, layers));
        };

        if (er_mode == "all") {
            os << "salient,0,0," << eval_erased(sel.indices, all_layers) << "\n";
            for (std::size_t trial = 0; trial < er_trials; ++trial) {
                sct::Rng rng(sct::derive_seed(seed, trial));
                std::vector<std::vector<std::size_t>> ridx(L);
                for (std::size_t l = 0; l < L; ++l) {
                    std::vector<std::size_t> pool(D);
                    for (std::size_t i = 0; i < D; ++i) pool[i] = i;
                    const std::size_t K = sel.indices[l].size();
                    for (std::size_t i = 0; i < K; ++i)
                        std::swap(pool[i],
                                  pool[i + static_cast<std::size_t>(rng.next_below(D - i))]);
                    ridx[l].assign(pool.begin(), pool.begin() + static_cast<long>(K));
                    std::sort(ridx[l].begin(), ridx[l].end());
                }
                os << "random,0," << trial << ',' << eval_erased(ridx, all_layers) << "\n";
            }
        } else if (er_mode == "per-layer") {
            for (std::size_t l = 1; l <= L; ++l)
                os << "salient," << l << ",0," << eval_erased(sel.indices, {l}) << "\n";
        } else {
            throw sct::ConfigError("--mode must be all or per-layer");
        }
        os.close();
        man.output(er_out);
        man.write(er_out + ".manifest.json");
        std::cout << "wrote " << er_out << "\n";
        return 0;
    }

    if (*c_pa || *c_fl) {
        const auto ks = parse_k_list(ac_k, ac_layers);
        sct::InjectionPlan plan =
            sct::InjectionPlan::all_layers(ac_layers, sct::insert_position_from(ac_position));
        const std::uint64_t params = sct::count_extra_params(plan, ks, /*with_bias=*/false);
        const std::uint64_t params_b = sct::count_extra_params(plan, ks, /*with_bias=*/true);
        const std::uint64_t N = ac_tokens;
        std::uint64_t flops = 0;
        for (std::size_t l : plan.layers)
            flops += plan.positions_per_layer() * N * static_cast<std::uint64_t>(ks[l - 1]) *
                     ks[l - 1];
        if (*c_pa) {
            const double millions = std::round(params / 1e6 * 100.0) / 100.0;
            std::cout << "extra_params=" << params << "\n";
            std::cout << "extra_params_with_bias=" << params_b << "\n";
            std::cout << "extra_params_millions=" << std::fixed << std::setprecision(2)
                      << millions << "\n";
            std::cout.unsetf(std::ios::fixed);
            std::cout << "ratio_vs_full=" << std::llround(ac_full_m / millions) << "\n";
        } else {
            std::cout << "extra_flops=" << flops << "\n";
        }
        if (!ac_compare.empty()) {
            sct::ComparatorSpec spec;
            for (const std::string& c : ac_compare) {
                const auto pos = c.find(':');
                if (pos == std::string::npos)
                    throw sct::ConfigError("--compare entries look like method:value");
                const std::string method = c.substr(0, pos);
                const std::uint64_t v = std::stoull(c.substr(pos + 1));
                if (method == "adapter")
                    spec.adapter_hidden = v;
                else if (method == "vpt")
                    spec.prompt_len = v;
                else if (method == "ssf")
                    spec.ssf_inserts = v;
                else
                    throw sct::ConfigError("unknown comparator '" + method + "'");
            }
            std::cout << "method,params,flops\n";
            for (const auto& row : sct::comparator_costs(ac_layers, ac_dim, ac_tokens, ks, spec))
                std::cout << row.method << ',' << row.params << ',' << row.flops << "\n";
        }
        return 0;
    }

    if (*c_rp) {
        sct::ChannelSelection sel = sct::load_selection(rp_sel);
        std::ofstream os(rp_out, std::ios::trunc);
        if (!os) throw sct::IoError("cannot open for writing: " + rp_out);
        os << "layer,k,rank,channel,score\n";
        for (std::size_t l = 0; l < sel.num_layers(); ++l)
            for (std::size_t i = 0; i < sel.indices[l].size(); ++i)
                os << (l + 1) << ',' << sel.k_per_layer[l] << ',' << i << ','
                   << sel.indices[l][i] << ',' << sel.selected_scores[l][i] << "\n";
        std::cout << "wrote " << rp_out << "\n";
        return 0;
    }

    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const sct::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const sct::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const sct::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const sct::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
