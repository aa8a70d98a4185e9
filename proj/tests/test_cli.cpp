#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nowcast/cli.hpp"
#include "nowcast/model.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/storm.hpp"
#include "test_util.hpp"

using namespace nowcast;
using nowcast::test::read_file_bytes;
using nowcast::test::scratch_dir;

namespace fs = std::filesystem;

namespace {

// Small, fast run configuration shared by the CLI tests.
void write_small_config(const std::string& path, const std::string& extra = "") {
    std::ofstream out(path);
    out << "seed = 7\n"
           "sim.grid = 160\n"
           "sim.frames = 20\n"
           "sim.cells = 10\n"
           "pipeline.patch = 20\n"
           "pipeline.train_windows = 4\n"
           "pipeline.train_centers = 8\n"
           "pipeline.test_windows = 2\n"
           "pipeline.test_centers = 4\n"
           "model.loss_crop = 8\n"
           "train.epochs = 2\n"
           "train.warmup_epochs = 1\n"
           "train.batch = 4\n"
        << extra;
}

std::string run(const std::string& command, const std::string& config,
                const std::string& out_dir, std::optional<int> workers = {}) {
    CliOptions options;
    options.config_path = config;
    options.out = out_dir;
    options.workers = workers;
    return run_command(command, options);
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("gen-data is deterministic and reports the configured sample counts") {
    const std::string dir = scratch_dir("cli_gen");
    write_small_config(dir + "/cfg.txt");
    const std::string r1 = run("gen-data", dir + "/cfg.txt", dir + "/out1");
    const std::string r2 = run("gen-data", dir + "/cfg.txt", dir + "/out2");

    for (const char* name : {"train.nwc1", "test.nwc1", "train.vil1", "test.vil1",
                             "report.json", "manifest.json"}) {
        CAPTURE(name);
        CHECK(read_file_bytes(r1 + "/" + name) == read_file_bytes(r2 + "/" + name));
    }
    const PatchDataset train_ds = read_dataset(r1 + "/train.nwc1");
    CHECK(train_ds.sample_count == 32); // 4 windows x 8 centers
    const PatchDataset test_ds = read_dataset(r1 + "/test.nwc1");
    CHECK(test_ds.sample_count == 8);
    CHECK(test_ds.norm.mean == train_ds.norm.mean); // test reuses train stats
}

TEST_CASE("zero sample counts are rejected as a config error") {
    const std::string dir = scratch_dir("cli_zero");
    write_small_config(dir + "/cfg.txt", "pipeline.train_windows = 0\n");
    try {
        run("gen-data", dir + "/cfg.txt", dir + "/out");
        FAIL("expected config error");
    } catch (const Error& e) {
        CHECK(e.exit_code() == 2);
    }
}

TEST_CASE("unknown config keys are rejected with the line number") {
    const std::string dir = scratch_dir("cli_badkey");
    std::ofstream(dir + "/cfg.txt") << "seed = 1\n# comment\nsim.bogus = 3\n";
    try {
        RunConfig::load(dir + "/cfg.txt");
        FAIL("expected config error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::config);
        const std::string msg = e.what();
        CHECK(msg.find(":3:") != std::string::npos);
        CHECK(msg.find("sim.bogus") != std::string::npos);
    }
}

TEST_CASE("malformed values are rejected") {
    const std::string dir = scratch_dir("cli_badval");
    std::ofstream(dir + "/cfg.txt") << "sim.grid = twelve\n";
    const RunConfig cfg = RunConfig::load(dir + "/cfg.txt");
    CHECK_THROWS_AS(cfg.i64("sim.grid"), Error);
    std::ofstream(dir + "/cfg2.txt") << "seed ~ 3\n";
    CHECK_THROWS_AS(RunConfig::load(dir + "/cfg2.txt"), Error);
}

TEST_CASE("train produces deterministic numeric artifacts") {
    const std::string dir = scratch_dir("cli_train");
    write_small_config(dir + "/cfg.txt");
    const std::string gen = run("gen-data", dir + "/cfg.txt", dir + "/out");

    write_small_config(dir + "/train_cfg.txt",
                       "train.train_dataset = " + gen + "/train.nwc1\n" +
                           "train.test_dataset = " + gen + "/test.nwc1\n");
    const std::string t1 = run("train", dir + "/train_cfg.txt", dir + "/out", 2);
    const std::string t2 = run("train", dir + "/train_cfg.txt", dir + "/out", 2);

    CHECK(read_file_bytes(t1 + "/weights.nww1") == read_file_bytes(t2 + "/weights.nww1"));
    CHECK(read_file_bytes(t1 + "/checkpoint.ckpt") == read_file_bytes(t2 + "/checkpoint.ckpt"));

    // metrics.csv matches except the wall_seconds column.
    std::istringstream m1(read_file_bytes(t1 + "/metrics.csv"));
    std::istringstream m2(read_file_bytes(t2 + "/metrics.csv"));
    std::string l1, l2;
    int rows = 0;
    while (std::getline(m1, l1) && std::getline(m2, l2)) {
        const std::string a = l1.substr(0, l1.rfind(','));
        const std::string b = l2.substr(0, l2.rfind(','));
        CHECK(a == b);
        ++rows;
    }
    CHECK(rows == 1 + 2 * 2 * 2); // header + epochs x ranks x phases
}

TEST_CASE("eval on a static scene reports zero persistence MSE") {
    const std::string dir = scratch_dir("cli_eval");
    // Static storms: zero speed and growth freeze every frame.
    write_small_config(dir + "/cfg.txt", "sim.speed = 0,0\nsim.growth = 0,0\n");
    const std::string gen = run("gen-data", dir + "/cfg.txt", dir + "/out");

    // Any weights serve; eval reports both model and persistence rows.
    ModelConfig mc = tiny_config();
    mc.loss_crop_km = 8;
    mc.train_patch = 20;
    NowcastModel m = build_model(mc, 7);
    save_weights(m.params, mc, dir + "/w.nww1");

    write_small_config(dir + "/eval_cfg.txt", "eval.dataset = " + gen + "/test.nwc1\n" +
                                                  "eval.weights = " + dir + "/w.nww1\n" +
                                                  "eval.crop = 8\n");
    const std::string ev = run("eval", dir + "/eval_cfg.txt", dir + "/out");
    std::istringstream csv(read_file_bytes(ev + "/lead_mse.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "lead_minutes,method,mse");
    int persistence_rows = 0;
    while (std::getline(csv, line)) {
        if (line.find("persistence") == std::string::npos) continue;
        ++persistence_rows;
        const std::string value = line.substr(line.rfind(',') + 1);
        CHECK(std::stod(value) == 0.0);
    }
    CHECK(persistence_rows == 6);
}

TEST_CASE("bench-scaling emits a two-row speedup table") {
    const std::string dir = scratch_dir("cli_bench");
    write_small_config(dir + "/cfg.txt");
    const std::string gen = run("gen-data", dir + "/cfg.txt", dir + "/out");
    write_small_config(dir + "/bench_cfg.txt",
                       "train.train_dataset = " + gen + "/train.nwc1\n" +
                           "train.test_dataset = " + gen + "/test.nwc1\n" +
                           "train.epochs = 1\n" + "bench.workers = 1,2\n");
    const std::string b = run("bench-scaling", dir + "/bench_cfg.txt", dir + "/out");
    std::istringstream csv(read_file_bytes(b + "/speedup.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "N,T_seconds,S,R");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 2);
}

TEST_CASE("infer and match-hist run end to end on generated mosaics") {
    const std::string dir = scratch_dir("cli_infer");
    write_small_config(dir + "/cfg.txt");
    const std::string gen = run("gen-data", dir + "/cfg.txt", dir + "/out");

    ModelConfig mc = tiny_config();
    mc.loss_crop_km = 8;
    mc.train_patch = 20;
    NowcastModel m = build_model(mc, 5);
    save_weights(m.params, mc, dir + "/w.nww1");

    write_small_config(dir + "/infer_cfg.txt",
                       "infer.mosaic = " + gen + "/test.vil1\n" + "infer.weights = " + dir +
                           "/w.nww1\n" + "infer.stats_from = " + gen + "/train.nwc1\n" +
                           "infer.t0 = 6\n");
    const std::string inf = run("infer", dir + "/infer_cfg.txt", dir + "/out");
    const MosaicSequence forecast = read_vil1(inf + "/forecast.vil1");
    CHECK(forecast.frames.size() == 6);
    CHECK(forecast.h == 150); // largest valid tiny extent at or below 160

    // Reference frames larger than the forecast are cropped concentrically.
    write_small_config(dir + "/match_cfg.txt",
                       "match.forecast = " + inf + "/forecast.vil1\n" + "match.reference = " +
                           gen + "/test.vil1\n" + "match.reference_frame = 6\n" +
                           "match.tile = 32\nmatch.bins = 64\n");
    const std::string mh = run("match-hist", dir + "/match_cfg.txt", dir + "/out");
    const MosaicSequence matched = read_vil1(mh + "/matched.vil1");
    CHECK(matched.frames.size() == 6);
    CHECK(matched.h == forecast.h);
}

TEST_CASE("commands never mutate their input files") {
    const std::string dir = scratch_dir("cli_inputs");
    write_small_config(dir + "/cfg.txt");
    const std::string gen = run("gen-data", dir + "/cfg.txt", dir + "/out");
    const std::string train_before = read_file_bytes(gen + "/train.nwc1");
    const std::string test_before = read_file_bytes(gen + "/test.nwc1");

    write_small_config(dir + "/train_cfg.txt",
                       "train.train_dataset = " + gen + "/train.nwc1\n" +
                           "train.test_dataset = " + gen + "/test.nwc1\n");
    run("train", dir + "/train_cfg.txt", dir + "/out");
    CHECK(read_file_bytes(gen + "/train.nwc1") == train_before);
    CHECK(read_file_bytes(gen + "/test.nwc1") == test_before);
}

TEST_CASE("the installed binary maps errors to the documented exit codes") {
    const std::string dir = scratch_dir("cli_exit");
    std::ofstream(dir + "/bad.txt") << "nonsense.key = 1\n";
    const std::string bin = NOWCAST_BIN_PATH;
    const std::string cmd =
        bin + " gen-data --config " + dir + "/bad.txt --out " + dir + "/out > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    CHECK(WEXITSTATUS(rc) == 2);

    const int help_rc = std::system((bin + " --help > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(help_rc) == 0);
}

} // TEST_SUITE
