#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>
#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "rhoflow/cli.hpp"
#include "rhoflow/model_io.hpp"
#include "rhoflow/synth.hpp"

using namespace rhoflow;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("rhoflow_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string dir(const std::string& name) const { return (path / name).string(); }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

json read_json(const std::string& path) { return json::parse(read_file(path)); }

int cli(std::vector<std::string> args) {
    args.push_back("--log-level");
    args.push_back("quiet");
    return run_cli(args);
}

}  // namespace

TEST_CASE("synth command is deterministic and writes provenance first") {
    TempDir tmp("synth");
    const std::vector<std::string> args = {"synth",  "--out",   tmp.dir("a"), "--drivers", "4",
                                           "--steps", "20",     "--dim",      "8",
                                           "--seed", "5"};
    REQUIRE(cli(args) == 0);
    CHECK(fs::exists(tmp.dir("a") + "/run_config.json"));
    CHECK(fs::exists(tmp.dir("a") + "/inputs.json"));
    CHECK(fs::exists(tmp.dir("a") + "/synth.csv"));
    CHECK(fs::exists(tmp.dir("a") + "/truth.json"));

    std::vector<std::string> args_b = args;
    args_b[2] = tmp.dir("b");
    REQUIRE(cli(args_b) == 0);
    CHECK(read_file(tmp.dir("a") + "/synth.csv") == read_file(tmp.dir("b") + "/synth.csv"));
    CHECK(read_file(tmp.dir("a") + "/truth.json") == read_file(tmp.dir("b") + "/truth.json"));
}

TEST_CASE("synth with zero drivers writes a header-only dataset") {
    TempDir tmp("synth0");
    REQUIRE(cli({"synth", "--out", tmp.dir("z"), "--drivers", "0", "--dim", "8"}) == 0);
    const std::string csv = read_file(tmp.dir("z") + "/synth.csv");
    CHECK(csv == "driver_id,time_s,delta_v,accel,headway,d_ped,d_stop,density,v_avg\n");
}

TEST_CASE("preprocess fast path reruns byte-identically") {
    TempDir tmp("pre");
    REQUIRE(cli({"synth", "--out", tmp.dir("s"), "--drivers", "3", "--steps", "15", "--dim",
                 "8"}) == 0);
    const std::string input = tmp.dir("s") + "/synth.csv";

    REQUIRE(cli({"preprocess", "--input", input, "--out", tmp.dir("p1"), "--fast-path"}) == 0);
    REQUIRE(cli({"preprocess", "--input", input, "--out", tmp.dir("p2"), "--fast-path"}) == 0);
    CHECK(read_file(tmp.dir("p1") + "/preprocessed.csv") ==
          read_file(tmp.dir("p2") + "/preprocessed.csv"));

    const json summary = read_json(tmp.dir("p1") + "/preprocess_summary.json");
    CHECK(summary.at("report_version") == 1);
    CHECK(summary.at("rows_in") == 45);
    CHECK(summary.at("observations_out") == 45);
}

TEST_CASE("preprocess counts malformed raw rows") {
    TempDir tmp("raw");
    std::ofstream raw(tmp.dir("") + "/raw.csv");
    raw << "driver_id,time_s,pos_m,speed_mps,lane,leader_id\n";
    for (int i = 0; i < 12; ++i) {
        const double t = 0.1 * i;
        raw << "lead," << t << ',' << 120.0 + t * 10 << ",10,1,\n";
        raw << "ego," << t << ',' << 100.0 + t * 10 << ",10,1,lead\n";
    }
    raw << "ego,1.3,bogus,10,1,lead\n";
    raw.close();

    REQUIRE(cli({"preprocess", "--input", tmp.dir("") + "/raw.csv", "--out", tmp.dir("out"),
                 "--min-len", "5", "--smooth-std", "0"}) == 0);
    const json summary = read_json(tmp.dir("out") + "/preprocess_summary.json");
    CHECK(summary.at("rows_rejected") == 1);
    CHECK(summary.at("rows_in") == 25);
}

TEST_CASE("train writes a model, a report, and an epoch log") {
    TempDir tmp("train");
    REQUIRE(cli({"synth", "--out", tmp.dir("s"), "--drivers", "6", "--steps", "25", "--dim",
                 "8", "--seed", "3"}) == 0);
    const std::string input = tmp.dir("s") + "/synth.csv";
    const std::vector<std::string> train_args = {
        "train", "--input", input,          "--out",    tmp.dir("t1"), "--k",      "2",
        "--rff-dim", "8",   "--epochs",     "12",       "--restarts",  "1",
        "--seed", "7",      "--threads",    "1"};
    REQUIRE(cli(train_args) == 0);
    CHECK(fs::exists(tmp.dir("t1") + "/model.json"));

    const json report = read_json(tmp.dir("t1") + "/train_report.json");
    CHECK(report.at("report_version") == 1);
    CHECK(report.at("epochs").size() == 12);
    CHECK(report.at("grad_check").is_null());  // off unless requested

    // Epoch log: header plus one row per epoch.
    std::ifstream epochs(tmp.dir("t1") + "/epochs.csv");
    std::string line;
    int lines = 0;
    while (std::getline(epochs, line)) ++lines;
    CHECK(lines == 13);

    // Deterministic rerun matches byte for byte.
    std::vector<std::string> rerun = train_args;
    rerun[4] = tmp.dir("t2");
    REQUIRE(cli(rerun) == 0);
    CHECK(read_file(tmp.dir("t1") + "/model.json") == read_file(tmp.dir("t2") + "/model.json"));
}

TEST_CASE("train with a candidate list delegates to model selection") {
    TempDir tmp("selk");
    REQUIRE(cli({"synth", "--out", tmp.dir("s"), "--drivers", "4", "--steps", "20", "--dim",
                 "8"}) == 0);
    REQUIRE(cli({"train", "--input", tmp.dir("s") + "/synth.csv", "--out", tmp.dir("t"),
                 "--k", "1,2", "--rff-dim", "8", "--epochs", "8", "--restarts", "1",
                 "--threads", "1"}) == 0);
    CHECK_FALSE(fs::exists(tmp.dir("t") + "/model.json"));
    const json table = read_json(tmp.dir("t") + "/select_k.json");
    REQUIRE(table.at("candidates").size() == 2);
    CHECK(table.at("candidates")[0].at("k") == 1);
    CHECK(table.at("candidates")[1].at("k") == 2);
}

TEST_CASE("model files round-trip byte-identically and reject unknown versions") {
    TempDir tmp("io");
    GroundTruth truth = make_two_profile_truth(8, 9);
    ModelFile model;
    model.params = truth.params;
    model.provenance.seed = 9;
    model.provenance.config_hash = "abc";
    model.provenance.final_nll_per_obs = 1.25;
    model.provenance.behavioral_ranges = Matrix::Zero(3, 2);

    const std::string p1 = tmp.dir("") + "/m1.json";
    const std::string p2 = tmp.dir("") + "/m2.json";
    save_model(model, p1);
    const ModelFile back = load_model(p1);
    save_model(back, p2);
    CHECK(read_file(p1) == read_file(p2));

    CHECK(back.params.rff.weights == model.params.rff.weights);
    CHECK(back.params.alpha_raw == model.params.alpha_raw);
    CHECK(back.params.betas[1] == model.params.betas[1]);
    CHECK(back.params.profiles[1].b == model.params.profiles[1].b);
    CHECK(back.provenance.config_hash == "abc");

    json j = read_json(p1);
    j["version"] = 999;
    std::ofstream out(tmp.dir("") + "/bad.json");
    out << j.dump(2);
    out.close();
    CHECK_THROWS_AS(load_model(tmp.dir("") + "/bad.json"), DataError);
}

TEST_CASE("analyze emits the full report bundle") {
    TempDir tmp("analyze");
    REQUIRE(cli({"synth", "--out", tmp.dir("s"), "--drivers", "4", "--steps", "30", "--dim",
                 "8", "--seed", "2"}) == 0);
    const std::string input = tmp.dir("s") + "/synth.csv";
    REQUIRE(cli({"train", "--input", input, "--out", tmp.dir("t"), "--k", "2", "--rff-dim",
                 "8", "--epochs", "10", "--restarts", "1", "--threads", "1"}) == 0);

    // Trace without trajectories is a usage error.
    CHECK(cli({"analyze", "--model", tmp.dir("t") + "/model.json", "--out", tmp.dir("bad"),
               "--trace"}) == 1);

    REQUIRE(cli({"analyze", "--model", tmp.dir("t") + "/model.json", "--out", tmp.dir("a"),
                 "--input", input, "--grid-n", "7", "--trace"}) == 0);
    for (const char* name :
         {"spectral.json", "context.json", "distance.json", "activation_grid.json",
          "state_trace.json"}) {
        const json j = read_json(tmp.dir("a") + "/" + name);
        CHECK(j.at("report_version") == 1);
    }
    CHECK(fs::exists(tmp.dir("a") + "/state_trace.csv"));
    CHECK(fs::exists(tmp.dir("a") + "/activation_marginals.csv"));

    const json spectral = read_json(tmp.dir("a") + "/spectral.json");
    CHECK(spectral.at("profiles").size() == 2);
}

TEST_CASE("gradcheck exit codes and report flags") {
    TempDir tmp("gc");
    REQUIRE(cli({"gradcheck", "--out", tmp.dir("ok"), "--dim", "6", "--drivers", "2",
                 "--steps", "6"}) == 0);
    const json report = read_json(tmp.dir("ok") + "/gradcheck.json");
    CHECK(report.at("passed") == true);
    CHECK(report.at("step") == 1e-5);

    CHECK(cli({"gradcheck", "--out", tmp.dir("fault"), "--dim", "6", "--drivers", "2",
               "--steps", "6", "--inject-fault"}) == 3);

    // A coarse step is flagged; a loose tolerance still passes.
    REQUIRE(cli({"gradcheck", "--out", tmp.dir("coarse"), "--dim", "6", "--drivers", "2",
                 "--steps", "6", "--step", "1e-1", "--tolerance", "1e9"}) == 0);
    const json coarse = read_json(tmp.dir("coarse") + "/gradcheck.json");
    CHECK(coarse.at("step_size_suspect") == true);
    CHECK(coarse.at("tolerance") == 1e9);
}

TEST_CASE("config files provide defaults that flags override") {
    TempDir tmp("config");
    std::ofstream cfg(tmp.dir("") + "/cfg.json");
    cfg << R"({"synth": {"drivers": 3, "steps": 10, "dim": 8, "seed": 4}})";
    cfg.close();

    REQUIRE(cli({"--config", tmp.dir("") + "/cfg.json", "synth", "--out", tmp.dir("a")}) == 0);
    const json run = read_json(tmp.dir("a") + "/run_config.json");
    CHECK(run.at("config").at("drivers") == 3);

    REQUIRE(cli({"--config", tmp.dir("") + "/cfg.json", "synth", "--out", tmp.dir("b"),
                 "--drivers", "5"}) == 0);
    const json run_b = read_json(tmp.dir("b") + "/run_config.json");
    CHECK(run_b.at("config").at("drivers") == 5);
}

TEST_CASE("exit codes map the error taxonomy") {
    TempDir tmp("codes");
    // Usage: unknown flag.
    CHECK(cli({"synth", "--out", tmp.dir("x"), "--definitely-not-a-flag"}) == 1);
    // Usage: missing required option.
    CHECK(cli({"synth"}) == 1);
    // Data: missing input file.
    CHECK(cli({"preprocess", "--input", tmp.dir("") + "/nope.csv", "--out", tmp.dir("y"),
               "--fast-path"}) == 2);
    // Data: not a model file.
    std::ofstream junk(tmp.dir("") + "/junk.json");
    junk << "{}";
    junk.close();
    CHECK(cli({"analyze", "--model", tmp.dir("") + "/junk.json", "--out", tmp.dir("z")}) == 2);
}
