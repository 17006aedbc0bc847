#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pabn/common.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("pabn_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Spawns the real binary through the shell; env assignments prefix the
// command so tests control PABN_OUT and the fault hook per call.
RunResult run_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    const fs::path dir = fs::temp_directory_path();
    const std::string tag = std::to_string(::getpid()) + "_" + std::to_string(counter++);
    const fs::path out_file = dir / ("pabn_cli_out_" + tag);
    const fs::path err_file = dir / ("pabn_cli_err_" + tag);

    std::string cmd = "env PABN_OUT= " + env + " " + std::string(PABN_CLI_PATH) + " " + args +
                      " >" + out_file.string() + " 2>" + err_file.string();
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    fs::remove(out_file);
    fs::remove(err_file);
    return r;
}

int count_ppm(const fs::path& root) {
    int n = 0;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && e.path().extension() == ".ppm") {
            ++n;
        }
    }
    return n;
}

void make_dataset(const fs::path& dir) {
    auto r = run_cli("synth --classes 10 --per-class 20 --seed 7 --out " + dir.string());
    REQUIRE(r.code == 0);
}

}  // namespace

TEST_CASE("synth writes the dataset, manifest and resolved config") {
    TempDir tmp("synth");
    const auto ds = tmp.path / "ds";
    auto r = run_cli("synth --classes 10 --per-class 20 --seed 7 --out " + ds.string());
    CHECK(r.code == 0);
    CHECK(count_ppm(ds) == 200);
    CHECK(fs::exists(ds / "manifest.json"));

    const json resolved = json::parse(slurp(ds / "resolved_config.json"));
    CHECK(resolved["subcommand"] == "synth");
    CHECK(resolved["classes"] == 10);
    CHECK(resolved["per-class"] == 20);
    CHECK(resolved["seed"] == 7);

    const auto ds2 = tmp.path / "ds2";
    auto r2 = run_cli("synth --classes 10 --per-class 20 --seed 7 --out " + ds2.string());
    CHECK(r2.code == 0);
    CHECK(slurp(ds / "manifest.json") == slurp(ds2 / "manifest.json"));
    CHECK(slurp(ds / "class_0000" / "img_0000.ppm") == slurp(ds2 / "class_0000" / "img_0000.ppm"));
}

TEST_CASE("missing output directory is a usage error") {
    auto r = run_cli("synth --classes 10 --per-class 20 --seed 7");
    CHECK(r.code == 1);
    CHECK(r.err.find("--out") != std::string::npos);
}

TEST_CASE("PABN_OUT provides the default output directory") {
    TempDir tmp("envout");
    const auto ds = tmp.path / "envds";
    auto r = run_cli("synth --classes 10 --per-class 20 --seed 3",
                     "PABN_OUT=" + ds.string());
    CHECK(r.code == 0);
    CHECK(fs::exists(ds / "manifest.json"));
    CHECK(count_ppm(ds) == 200);
}

TEST_CASE("train writes checkpoint, log and resolved config") {
    TempDir tmp("train");
    const auto ds = tmp.path / "ds";
    make_dataset(ds);

    const auto run = tmp.path / "run";
    auto r = run_cli("train --data " + ds.string() +
                     " --ways 2 --shots 1 --queries 2 --episodes 3 --seed 5 --out " +
                     run.string());
    CHECK(r.code == 0);
    CHECK(fs::exists(run / "checkpoint.bin"));
    CHECK(fs::exists(run / "train_log.csv"));

    const json resolved = json::parse(slurp(run / "resolved_config.json"));
    CHECK(resolved["subcommand"] == "train");
    CHECK(resolved["ways"] == 2);
    CHECK(resolved["align"] == "none");
    CHECK(resolved["lr"] == 0.001);

    std::istringstream log(slurp(run / "train_log.csv"));
    std::string line;
    REQUIRE(std::getline(log, line));
    CHECK(line == "episode,loss,align_penalty");
    std::vector<std::string> rows;
    while (std::getline(log, line)) {
        rows.push_back(line);
    }
    CHECK(rows.size() == 2);  // episodes 1 and 3 under the default interval
    CHECK(rows[0].rfind("1,", 0) == 0);
    CHECK(rows[1].rfind("3,", 0) == 0);
}

TEST_CASE("train with a single episode logs exactly one row") {
    TempDir tmp("train1");
    const auto ds = tmp.path / "ds";
    make_dataset(ds);
    const auto run = tmp.path / "run";
    auto r = run_cli("train --data " + ds.string() +
                     " --ways 2 --shots 1 --queries 2 --episodes 1 --seed 5 --out " +
                     run.string());
    CHECK(r.code == 0);
    std::istringstream log(slurp(run / "train_log.csv"));
    std::string line;
    std::vector<std::string> rows;
    while (std::getline(log, line)) {
        rows.push_back(line);
    }
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] == "episode,loss,align_penalty");
    CHECK(rows[1].rfind("1,", 0) == 0);
}

TEST_CASE("loss2 with lambda zero matches align none in loss values") {
    TempDir tmp("lambda0");
    const auto ds = tmp.path / "ds";
    make_dataset(ds);

    auto extract_losses = [&](const fs::path& run) {
        std::istringstream log(slurp(run / "train_log.csv"));
        std::string line;
        std::getline(log, line);
        std::vector<std::string> losses;
        while (std::getline(log, line)) {
            const auto a = line.find(',');
            const auto b = line.find(',', a + 1);
            losses.push_back(line.substr(a + 1, b - a - 1));
        }
        return losses;
    };

    const std::string base = "train --data " + ds.string() +
                             " --ways 2 --shots 1 --queries 2 --episodes 3 --seed 11 "
                             "--log-interval 1 --out ";
    auto r1 = run_cli(base + (tmp.path / "none").string() + " --align none");
    auto r2 = run_cli(base + (tmp.path / "l2z").string() + " --align loss2 --lambda 0");
    REQUIRE(r1.code == 0);
    REQUIRE(r2.code == 0);
    const auto l1 = extract_losses(tmp.path / "none");
    const auto l2 = extract_losses(tmp.path / "l2z");
    REQUIRE(l1.size() == 3);
    CHECK(l1 == l2);
}

TEST_CASE("invalid align mode lists the choices") {
    TempDir tmp("badalign");
    auto r = run_cli("train --data x --align bogus --out " + (tmp.path / "o").string());
    CHECK(r.code == 1);
    CHECK(r.err.find("loss1") != std::string::npos);
    CHECK(r.err.find("loss2") != std::string::npos);
    CHECK(r.err.find("none") != std::string::npos);
}

TEST_CASE("config file fills values and flags win") {
    TempDir tmp("config");
    const auto ds = tmp.path / "ds";
    make_dataset(ds);

    const auto cfg_path = tmp.path / "cfg.json";
    {
        json cfg{{"data", ds.string()}, {"ways", 2},     {"shots", 1},
                 {"queries", 2},        {"episodes", 5}, {"seed", 5}};
        std::ofstream(cfg_path) << cfg.dump();
    }
    const auto run = tmp.path / "run";
    auto r = run_cli("train --config " + cfg_path.string() + " --episodes 1 --out " +
                     run.string());
    CHECK(r.code == 0);
    const json resolved = json::parse(slurp(run / "resolved_config.json"));
    CHECK(resolved["episodes"] == 1);  // flag beat the file
    CHECK(resolved["ways"] == 2);      // file filled the rest
    CHECK(resolved["data"] == ds.string());

    auto bad = run_cli("train --config " + (tmp.path / "nope.json").string() + " --out " +
                       run.string());
    CHECK(bad.code == 1);
}

TEST_CASE("eval emits the report json and the formatted csv row") {
    TempDir tmp("eval");
    const auto ds = tmp.path / "ds";
    make_dataset(ds);
    const auto run = tmp.path / "run";
    REQUIRE(run_cli("train --data " + ds.string() +
                    " --ways 2 --shots 1 --queries 2 --episodes 2 --seed 5 --out " + run.string())
                .code == 0);

    const auto ev = tmp.path / "ev";
    const std::string args = "eval --ckpt " + (run / "checkpoint.bin").string() + " --data " +
                             ds.string() +
                             " --ways 2 --shots 1 --queries 2 --episodes 5 --seed 9 --out ";
    auto r = run_cli(args + ev.string());
    CHECK(r.code == 0);

    const json report = json::parse(slurp(ev / "eval_report.json"));
    CHECK(report["n_episodes"] == 5);
    CHECK(report["seed"] == 9);
    CHECK(report["spec"]["ways"] == 2);
    CHECK(report["spec"]["shots"] == 1);
    CHECK(report["spec"]["queries"] == 2);
    CHECK(report["mean"].is_number());
    CHECK(report["half_width_95"].is_number());
    const double mean = report["mean"].get<double>();
    CHECK(mean >= 0.0);
    CHECK(mean <= 1.0);

    const std::string csv = slurp(ev / "eval_summary.csv");
    CHECK(csv.find("ways,shots,queries,n_episodes,seed,accuracy") == 0);
    CHECK(csv.find("±") != std::string::npos);
    CHECK(csv.find("2,1,2,5,9,") != std::string::npos);

    // Same seed, second run directory: byte-identical report.
    const auto ev2 = tmp.path / "ev2";
    auto r2 = run_cli(args + ev2.string());
    CHECK(r2.code == 0);
    CHECK(slurp(ev / "eval_report.json") == slurp(ev2 / "eval_report.json"));

    // Appending keeps one header.
    auto r3 = run_cli(args + ev.string());
    CHECK(r3.code == 0);
    const std::string csv2 = slurp(ev / "eval_summary.csv");
    CHECK(csv2.find("accuracy", csv2.find('\n')) == std::string::npos);
    std::istringstream lines(csv2);
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        ++n;
    }
    CHECK(n == 3);
}

TEST_CASE("eval rejects a single episode and bad inputs with stable codes") {
    TempDir tmp("evalbad");
    const auto ds = tmp.path / "ds";
    make_dataset(ds);
    const auto run = tmp.path / "run";
    REQUIRE(run_cli("train --data " + ds.string() +
                    " --ways 2 --shots 1 --queries 2 --episodes 1 --seed 5 --out " + run.string())
                .code == 0);

    auto one = run_cli("eval --ckpt " + (run / "checkpoint.bin").string() + " --data " +
                       ds.string() + " --ways 2 --shots 1 --queries 2 --episodes 1 --out " +
                       (tmp.path / "e1").string());
    CHECK(one.code == 1);

    auto nockpt = run_cli("eval --ckpt " + (tmp.path / "missing.bin").string() + " --data " +
                          ds.string() + " --out " + (tmp.path / "e2").string());
    CHECK(nockpt.code == 2);

    std::ofstream(tmp.path / "garbage.bin") << "not a checkpoint";
    auto badckpt = run_cli("eval --ckpt " + (tmp.path / "garbage.bin").string() + " --data " +
                           ds.string() + " --out " + (tmp.path / "e3").string());
    CHECK(badckpt.code == 2);
    CHECK(badckpt.err.find("bad magic") != std::string::npos);

    auto nodata = run_cli("eval --ckpt " + (run / "checkpoint.bin").string() + " --data " +
                          (tmp.path / "nodir").string() + " --out " + (tmp.path / "e4").string());
    CHECK(nodata.code == 2);
}

TEST_CASE("train propagates data errors with exit code 2") {
    TempDir tmp("trainbad");
    const auto ds = tmp.path / "ds";
    make_dataset(ds);
    // 10 classes cannot host a 20-way episode.
    auto r = run_cli("train --data " + ds.string() +
                     " --ways 20 --shots 1 --queries 2 --episodes 1 --out " +
                     (tmp.path / "run").string());
    CHECK(r.code == 2);
    CHECK(r.err.find("classes") != std::string::npos);
}

TEST_CASE("gradcheck table covers every primitive and honors the fault hook") {
    auto r = run_cli("gradcheck --scope primitives --seed 3");
    CHECK(r.code == 0);
    const std::vector<std::string> expected_ops = {
        "conv2d",     "batch_norm", "relu",       "sigmoid",   "max_pool2d",
        "matmul",     "transpose",  "reshape",    "slice_item", "stack_rows",
        "add_row_bias", "signed_sqrt", "l2_normalize", "mse_mean", "sum_over_axis",
        "sum_all",    "add",        "sub",        "mul",       "scale"};
    int pass_rows = 0;
    std::istringstream lines(r.out);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.find("PASS") != std::string::npos) {
            ++pass_rows;
        }
    }
    CHECK(pass_rows == static_cast<int>(expected_ops.size()));
    for (const auto& op : expected_ops) {
        CHECK(r.out.find(op) != std::string::npos);
    }
    CHECK(r.out.find("FAIL") == std::string::npos);

    auto faulted = run_cli("gradcheck --scope primitives --seed 3", "PABN_FAULT_OP=sigmoid");
    CHECK(faulted.code == 3);
    int fails = 0;
    std::istringstream flines(faulted.out);
    std::string fail_line;
    while (std::getline(flines, line)) {
        if (line.find("FAIL") != std::string::npos) {
            ++fails;
            fail_line = line;
        }
    }
    CHECK(fails == 1);
    CHECK(fail_line.find("sigmoid") != std::string::npos);
}

TEST_CASE("gradcheck model scope passes and rejects unknown scopes") {
    auto r = run_cli("gradcheck --scope model --seed 7");
    CHECK(r.code == 0);
    CHECK(r.out.find("model") != std::string::npos);
    CHECK(r.out.find("PASS") != std::string::npos);

    auto bad = run_cli("gradcheck --scope everything");
    CHECK(bad.code == 1);
}
