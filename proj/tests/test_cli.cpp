#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
    const std::string cmd = std::string(BYB_CLI_PATH) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    RunResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

const char* kTinyGen =
    "--num-users 12 --num-days 6 --horizon-days 5 --avg-events 4 --vocab 80 --categories 3";

}  // namespace

TEST_CASE("generate is deterministic per seed") {
    TempDir a("byb_cli_gen_a"), b("byb_cli_gen_b"), c("byb_cli_gen_c");
    CHECK(run_cli(std::string("generate --seed 7 ") + kTinyGen + " --out-dir " + a.str())
              .exit_code == 0);
    CHECK(run_cli(std::string("generate --seed 7 ") + kTinyGen + " --out-dir " + b.str())
              .exit_code == 0);
    CHECK(run_cli(std::string("generate --seed 8 ") + kTinyGen + " --out-dir " + c.str())
              .exit_code == 0);
    const std::string da = slurp(a.path / "dataset.jsonl");
    CHECK(!da.empty());
    CHECK(da == slurp(b.path / "dataset.jsonl"));
    CHECK(da != slurp(c.path / "dataset.jsonl"));
    CHECK(fs::exists(a.path / "manifest.json"));
}

TEST_CASE("preset and explicit dims are mutually exclusive") {
    RunResult r = run_cli("count-params --preset base --layers 6");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("mutually exclusive") != std::string::npos);
}

TEST_CASE("unknown flags exit with usage error") {
    CHECK(run_cli("pretrain --frobnicate 3").exit_code == 2);
    CHECK(run_cli("no-such-subcommand").exit_code == 2);
}

TEST_CASE("count-params reports exact preset totals") {
    RunResult base = run_cli("count-params --preset base");
    CHECK(base.exit_code == 0);
    CHECK(base.output.find("total 395264") != std::string::npos);
    RunResult x2 = run_cli("count-params --preset base_x2");
    CHECK(x2.output.find("total 790528") != std::string::npos);
    RunResult tiny = run_cli("count-params --d-model 8 --ff-dim 8 --layers 1 --heads 2");
    CHECK(tiny.output.find("total 416") != std::string::npos);
}

TEST_CASE("pretrain then finetune then eval round trip on a tiny dataset") {
    TempDir dir("byb_cli_pipeline");
    REQUIRE(run_cli(std::string("generate --seed 3 ") + kTinyGen + " --out-dir " + dir.str())
                .exit_code == 0);
    const std::string data = dir.str() + "/dataset.jsonl";

    const std::string common =
        " --d-model 6 --ff-dim 6 --layers 1 --heads 2 --max-id 80 --observation-days 6"
        " --batch-size 6 --seed 5 --dataset " + data;
    RunResult pre = run_cli("pretrain --method byb --epochs 1" + common + " --out-dir " +
                            dir.str() + "/pre");
    CHECK(pre.exit_code == 0);
    CHECK(fs::exists(dir.path / "pre" / "metrics.csv"));
    CHECK(fs::exists(dir.path / "pre" / "checkpoint.bybt"));
    CHECK(fs::exists(dir.path / "pre" / "manifest.json"));

    RunResult ft = run_cli("finetune --task modal-5d --mode freeze --linear-head 1" + common +
                           " --checkpoint " + dir.str() + "/pre/checkpoint.bybt --out-dir " +
                           dir.str() + "/ft");
    CHECK(ft.exit_code == 0);
    CHECK(fs::exists(dir.path / "ft" / "finetuned.bybt"));

    RunResult ev = run_cli("eval --task modal-5d" + common + " --checkpoint " + dir.str() +
                           "/ft/finetuned.bybt --out-dir " + dir.str() + "/eval");
    CHECK(ev.exit_code == 0);
    CHECK(ev.output.find("macro_auroc") != std::string::npos);
    CHECK(fs::exists(dir.path / "eval" / "eval.json"));
    CHECK(fs::exists(dir.path / "eval" / "eval.csv"));

    RunResult attn = run_cli("attn" + common + " --checkpoint " + dir.str() +
                             "/pre/checkpoint.bybt --attn-samples 5 --out-dir " + dir.str() +
                             "/attn");
    CHECK(attn.exit_code == 0);
    CHECK(fs::exists(dir.path / "attn" / "attn_layer0.csv"));
    CHECK(fs::exists(dir.path / "attn" / "attn_layer0_last10.csv"));

    RunResult emb = run_cli("export-emb" + common + " --checkpoint " + dir.str() +
                            "/pre/checkpoint.bybt --export-n 5 --out-dir " + dir.str() + "/emb");
    CHECK(emb.exit_code == 0);
    std::ifstream is(dir.path / "emb" / "embeddings.csv");
    std::string line;
    std::size_t rows = 0;
    std::getline(is, line);
    CHECK(line.rfind("user_id,e0,", 0) == 0);
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 5);
}

TEST_CASE("manifest re-fed as config reproduces the run") {
    TempDir a("byb_cli_manifest_a"), b("byb_cli_manifest_b");
    REQUIRE(run_cli(std::string("generate --seed 11 ") + kTinyGen + " --out-dir " + a.str())
                .exit_code == 0);
    // rerun purely from the manifest (only the output directory moves)
    RunResult r = run_cli("generate --config " + (a.path / "manifest.json").string() +
                          " --out-dir " + b.str());
    CHECK(r.exit_code == 0);
    CHECK(slurp(a.path / "dataset.jsonl") == slurp(b.path / "dataset.jsonl"));
}

TEST_CASE("missing inputs are usage errors") {
    CHECK(run_cli("pretrain --method byb").exit_code == 2);          // no dataset
    CHECK(run_cli("finetune --task modal-5d").exit_code == 2);       // no dataset/checkpoint
    CHECK(run_cli("pretrain --method nope --dataset /tmp/x").exit_code == 2);
}
