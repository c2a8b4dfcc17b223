#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sct/container.hpp"
#include "sct/select.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out;
};

struct Workspace {
    fs::path dir;
    Workspace() {
        dir = fs::temp_directory_path() / ("sct_cli_test_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Workspace() { fs::remove_all(dir); }
    std::string path(const std::string& rel) const { return (dir / rel).string(); }

    CliResult run(const std::string& args, const std::string& env = "") const {
        const std::string out_file = path("cmd_output.txt");
        std::string cmd = "cd " + dir.string() + " && ";
        if (!env.empty()) cmd += "env " + env + " ";
        cmd += std::string(SCT_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
        const int raw = std::system(cmd.c_str());
        CliResult r;
        r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
        std::ifstream is(out_file);
        std::stringstream ss;
        ss << is.rdbuf();
        r.out = ss.str();
        return r;
    }
};

const std::string kTinyModel =
    "--image 8 --patch 4 --dim 16 --layers 2 --heads 2 --classes 2 --samples-per-class 10";

std::string slurp(const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& s) {
    std::size_t n = 0;
    for (char c : s)
        if (c == '\n') ++n;
    return n;
}

} // namespace

TEST_CASE("init-toy creates checkpoint, dataset, config and manifest") {
    Workspace ws;
    const CliResult r = ws.run("init-toy --out-dir toy --seed 5 " + kTinyModel);
    INFO(r.out);
    REQUIRE(r.code == 0);
    CHECK(fs::exists(ws.path("toy/checkpoint.sctw")));
    CHECK(fs::exists(ws.path("toy/dataset.sctw")));
    CHECK(fs::exists(ws.path("toy/config.json")));
    CHECK(fs::exists(ws.path("toy/manifest.json")));

    const auto man = nlohmann::json::parse(slurp(ws.path("toy/manifest.json")));
    CHECK(man.at("command") == "init-toy");
    CHECK(man.at("seed") == 5);
    CHECK(man.at("outputs").size() == 3);
    CHECK(man.contains("duration_seconds"));

    SECTION("refuses to overwrite without --force") {
        const CliResult again = ws.run("init-toy --out-dir toy --seed 5 " + kTinyModel);
        CHECK(again.code == 2);
        const CliResult forced = ws.run("init-toy --out-dir toy --seed 5 --force " + kTinyModel);
        CHECK(forced.code == 0);
    }
}

TEST_CASE("init-toy is seed-deterministic and honours SCT_SEED") {
    Workspace ws;
    REQUIRE(ws.run("init-toy --out-dir a --seed 9 " + kTinyModel).code == 0);
    REQUIRE(ws.run("init-toy --out-dir b --seed 9 " + kTinyModel).code == 0);
    CHECK(slurp(ws.path("a/checkpoint.sctw")) == slurp(ws.path("b/checkpoint.sctw")));
    CHECK(slurp(ws.path("a/dataset.sctw")) == slurp(ws.path("b/dataset.sctw")));

    REQUIRE(ws.run("init-toy --out-dir c " + kTinyModel, "SCT_SEED=9").code == 0);
    CHECK(slurp(ws.path("c/checkpoint.sctw")) == slurp(ws.path("a/checkpoint.sctw")));
    REQUIRE(ws.run("init-toy --out-dir e " + kTinyModel, "SCT_SEED=10").code == 0);
    CHECK(slurp(ws.path("e/checkpoint.sctw")) != slurp(ws.path("a/checkpoint.sctw")));
}

TEST_CASE("select / train / eval / erase pipeline on a tiny model") {
    Workspace ws;
    REQUIRE(ws.run("init-toy --out-dir toy --seed 3 " + kTinyModel).code == 0);

    const CliResult sel = ws.run(
        "select --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
        "--k 4 --out sel.json --report imp.csv --seed 3");
    INFO(sel.out);
    REQUIRE(sel.code == 0);
    REQUIRE(fs::exists(ws.path("sel.json")));
    CHECK(fs::exists(ws.path("sel.json.manifest.json")));

    const sct::ChannelSelection loaded = sct::load_selection(ws.path("sel.json"));
    REQUIRE(loaded.num_layers() == 2);
    for (const auto& idx : loaded.indices) {
        CHECK(idx.size() == 4);
        CHECK(std::is_sorted(idx.begin(), idx.end()));
        for (std::size_t i : idx) CHECK(i < 16);
    }
    // importance report: header + 2 layers * 16 channels
    const std::string imp = slurp(ws.path("imp.csv"));
    CHECK(count_lines(imp) == 1 + 2 * 16);
    CHECK(imp.rfind("layer,channel,z", 0) == 0);

    const CliResult tr = ws.run(
        "train --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
        "--selection sel.json --scale 0.2 --lr 0.01 --wd 0.001 --epochs 2 --warmup 1 "
        "--batch 8 --seed 3 --out model.sctw --metrics metrics.jsonl");
    INFO(tr.out);
    REQUIRE(tr.code == 0);
    CHECK(fs::exists(ws.path("model.sctw")));
    CHECK(fs::exists(ws.path("model.sctw.manifest.json")));
    CHECK(tr.out.find("val_acc=") != std::string::npos);
    CHECK(count_lines(slurp(ws.path("metrics.jsonl"))) == 2); // one record per epoch

    const CliResult ev = ws.run(
        "eval --checkpoint toy/checkpoint.sctw --artifact model.sctw "
        "--dataset toy/dataset.sctw --split val");
    INFO(ev.out);
    REQUIRE(ev.code == 0);
    CHECK(ev.out.rfind("accuracy=", 0) == 0);

    const CliResult er = ws.run(
        "erase --checkpoint toy/checkpoint.sctw --artifact model.sctw "
        "--dataset toy/dataset.sctw --selection sel.json --mode all "
        "--random-trials 2 --seed 3 --out erase.csv");
    INFO(er.out);
    REQUIRE(er.code == 0);
    const std::string erased = slurp(ws.path("erase.csv"));
    // header + control + salient + 2 random trials
    CHECK(count_lines(erased) == 5);
    CHECK(erased.rfind("kind,layer,trial,accuracy", 0) == 0);
    CHECK(erased.find("control,") != std::string::npos);
    CHECK(erased.find("salient,") != std::string::npos);
    CHECK(erased.find("random,0,1,") != std::string::npos);

    const CliResult erl = ws.run(
        "erase --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
        "--selection sel.json --mode per-layer --out erase_pl.csv");
    REQUIRE(erl.code == 0);
    CHECK(count_lines(slurp(ws.path("erase_pl.csv"))) == 1 + 1 + 2); // header, control, L rows

    const CliResult rp = ws.run("report --selection sel.json --out sel_report.csv");
    REQUIRE(rp.code == 0);
    CHECK(count_lines(slurp(ws.path("sel_report.csv"))) == 1 + 2 * 4);
}

TEST_CASE("train supports baselines and scale search") {
    Workspace ws;
    REQUIRE(ws.run("init-toy --out-dir toy --seed 4 " + kTinyModel).code == 0);
    REQUIRE(ws.run("select --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
                   "--k 4 --out sel.json --seed 4")
                .code == 0);

    SECTION("linear probe baseline") {
        const CliResult r = ws.run(
            "train --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
            "--baseline linear-probe --epochs 3 --warmup 1 --batch 8 --seed 4 --out lp.sctw");
        INFO(r.out);
        REQUIRE(r.code == 0);
        CHECK(r.out.find("baseline linear-probe") != std::string::npos);
        CHECK(fs::exists(ws.path("lp.sctw")));
    }
    SECTION("unknown baseline is a config error") {
        CHECK(ws.run("train --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
                     "--baseline nonsense --epochs 2 --warmup 1")
                  .code == 2);
    }
    SECTION("omitted --scale searches the scale grid") {
        const CliResult r = ws.run(
            "train --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
            "--selection sel.json --lr 0.01 --wd 0.001 --epochs 2 --warmup 1 --batch 8 "
            "--grid-scales 0.1,0.5 --seed 4 --out gs.sctw");
        INFO(r.out);
        REQUIRE(r.code == 0);
        CHECK(r.out.find("best:") != std::string::npos);
        CHECK(fs::exists(ws.path("gs.sctw")));
        const std::string table = slurp(ws.path("gs.sctw.grid.csv"));
        CHECK(count_lines(table) == 1 + 2); // header + one row per scale
    }
    SECTION("explicit grid sweep writes the full table") {
        const CliResult r = ws.run(
            "train --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
            "--selection sel.json --grid --grid-lrs 0.01,0.001 --grid-wds 0.001 "
            "--grid-scales 0.2 --epochs 2 --warmup 1 --batch 8 --seed 4 "
            "--out grid.sctw --grid-out grid.csv --workers 2");
        INFO(r.out);
        REQUIRE(r.code == 0);
        CHECK(count_lines(slurp(ws.path("grid.csv"))) == 1 + 2);
    }
}

TEST_CASE("accounting subcommands print the closed forms") {
    Workspace ws;
    const CliResult pa = ws.run("params --k 96 --layers 12 --tokens 197");
    INFO(pa.out);
    REQUIRE(pa.code == 0);
    CHECK(pa.out.find("extra_params=110592\n") != std::string::npos);
    CHECK(pa.out.find("extra_params_with_bias=111744\n") != std::string::npos);
    CHECK(pa.out.find("extra_params_millions=0.11\n") != std::string::npos);
    CHECK(pa.out.find("ratio_vs_full=780\n") != std::string::npos);

    const CliResult fl = ws.run("flops --k 96 --layers 12 --tokens 197");
    REQUIRE(fl.code == 0);
    CHECK(fl.out.find("extra_flops=21786624\n") != std::string::npos);

    const CliResult cmp = ws.run(
        "params --k 96 --layers 12 --tokens 197 --dim 768 "
        "--compare adapter:24 --compare vpt:10 --compare ssf:74");
    REQUIRE(cmp.code == 0);
    CHECK(cmp.out.find("method,params,flops") != std::string::npos);
    CHECK(cmp.out.find("sct,110592,21786624") != std::string::npos);
    CHECK(cmp.out.find("ssf,681984,") != std::string::npos);

    const CliResult both = ws.run("params --k 96 --layers 12 --position both");
    REQUIRE(both.code == 0);
    CHECK(both.out.find("extra_params=221184\n") != std::string::npos);
}

TEST_CASE("failure exit codes") {
    Workspace ws;
    REQUIRE(ws.run("init-toy --out-dir toy --seed 2 " + kTinyModel).code == 0);

    SECTION("missing input file -> 3") {
        CHECK(ws.run("select --checkpoint nope.sctw --dataset toy/dataset.sctw").code == 3);
    }
    SECTION("corrupt checkpoint -> 3") {
        std::ofstream(ws.path("bad.sctw"), std::ios::binary) << "garbage";
        CHECK(ws.run("select --checkpoint bad.sctw --dataset toy/dataset.sctw").code == 3);
    }
    SECTION("bad option values -> 2") {
        CHECK(ws.run("select --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
                     "--strategy bogus")
                  .code == 2);
        CHECK(ws.run("select --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw --k 99")
                  .code == 2);
        CHECK(ws.run("eval --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
                     "--split bogus")
                  .code == 2);
        REQUIRE(ws.run("select --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
                       "--k 4 --out ok_sel.json")
                    .code == 0);
        CHECK(ws.run("train --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
                     "--selection ok_sel.json --epochs 2 --warmup 2 --scale 0.1")
                  .code == 2); // warmup must be < epochs
    }
    SECTION("invalid selection json -> 3") {
        std::ofstream(ws.path("sel.json")) << "{broken";
        CHECK(ws.run("train --checkpoint toy/checkpoint.sctw --dataset toy/dataset.sctw "
                     "--selection sel.json --scale 0.1 --epochs 2 --warmup 1")
                  .code == 3);
    }
}
