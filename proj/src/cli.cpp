#include "nowcast/cli.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string_view>

#include "json.hpp"

#include "nowcast/evalbench.hpp"
#include "nowcast/io_util.hpp"
#include "nowcast/model.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/storm.hpp"
#include "nowcast/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace nowcast {

namespace {

constexpr const char* kVersion = "nowcast 1.0.0";

struct KeySpec {
    const char* key;
    const char* def;
    const char* help;
};

const std::vector<KeySpec>& key_registry() {
    static const std::vector<KeySpec> keys = {
        {"seed", "42", "global seed; every artifact is a pure function of (config, seed)"},
        {"out", "runs", "output root; each invocation creates a fresh run directory"},
        {"workers", "1", "worker contexts for training / tiled inference"},

        {"sim.grid", "256", "mosaic grid extent in pixels (1 km per pixel)"},
        {"sim.frames", "40", "frames per generated sequence (10-minute spacing)"},
        {"sim.cells", "24", "precipitation cells per sequence"},
        {"sim.amp", "4,16", "cell amplitude range (field units)"},
        {"sim.radius", "5,9", "cell radius range in km"},
        {"sim.speed", "0.5,1.5", "cell speed range in km per frame"},
        {"sim.growth", "-0.02,0.02", "per-frame exponential growth/decay range"},
        {"sim.vmax", "20", "field value mapped to digital VIL 255"},
        {"sim.sites", "3", "synthetic radar site count"},
        {"sim.range", "230", "radar coverage radius in km"},

        {"pipeline.patch", "70", "square patch extent in pixels"},
        {"pipeline.train_windows", "64", "sequence windows sampled for the training set"},
        {"pipeline.train_centers", "32", "patch centers per training window"},
        {"pipeline.test_windows", "16", "sequence windows sampled for the test set"},
        {"pipeline.test_centers", "32", "patch centers per test window"},
        {"pipeline.w_floor", "1", "sampling weight floor added to digital VIL"},

        {"model.preset", "tiny", "model preset: tiny or canonical"},
        {"model.loss_crop", "48", "loss crop in km at 1 km resolution"},

        {"train.train_dataset", "train.nwc1", "training dataset (NWC1)"},
        {"train.test_dataset", "test.nwc1", "test dataset (NWC1)"},
        {"train.batch", "8", "per-worker batch size n"},
        {"train.eta", "0.0002", "base learning rate"},
        {"train.lr_policy", "scale_up", "scale_up (eta*N), scale_down (eta/N), or none"},
        {"train.warmup_epochs", "5", "linear warmup length in epochs"},
        {"train.epochs", "100", "total training epochs"},
        {"train.momentum", "0", "SGD momentum (0 = plain SGD)"},
        {"train.shuffle", "true", "shuffle each worker's shard per epoch"},
        {"train.val_fraction", "0.3", "fraction of test images per worker validation subset"},
        {"train.checkpoint_in", "", "checkpoint to resume from (empty = fresh run)"},

        {"eval.dataset", "test.nwc1", "dataset to evaluate on (NWC1)"},
        {"eval.weights", "weights.nww1", "trained weights (NWW1)"},
        {"eval.crop", "48", "evaluation crop in km"},

        {"bench.workers", "1,2", "worker counts for bench-scaling (must start at 1)"},
        {"bench.batches", "4,8", "batch sizes for bench-batch"},

        {"infer.mosaic", "test.vil1", "input mosaic sequence (VIL1)"},
        {"infer.weights", "weights.nww1", "trained weights (NWW1)"},
        {"infer.stats_from", "train.nwc1", "dataset supplying normalization stats"},
        {"infer.t0", "6", "forecast issue frame index (uses t0-6 .. t0)"},
        {"infer.tile", "0", "tile extent for tiled inference (0 = single pass)"},

        {"match.forecast", "forecast.vil1", "forecast sequence to post-process (VIL1)"},
        {"match.reference", "test.vil1", "reference sequence (VIL1)"},
        {"match.reference_frame", "6", "reference frame index (the initial condition)"},
        {"match.tile", "64", "histogram matching tile extent"},
        {"match.bins", "256", "histogram resolution"},
    };
    return keys;
}

const KeySpec* find_key(const std::string& key) {
    for (const KeySpec& k : key_registry())
        if (key == k.key) return &k;
    return nullptr;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

} // namespace

RunConfig RunConfig::load(const std::string& path) {
    RunConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) fail(ErrorCode::config, "cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            fail(ErrorCode::config,
                 path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (!find_key(key))
            fail(ErrorCode::config,
                 path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        cfg.values_[key] = value;
    }
    return cfg;
}

std::string RunConfig::raw(const std::string& key) const {
    const auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    const KeySpec* spec = find_key(key);
    if (!spec) fail(ErrorCode::config, "unregistered config key '" + key + "'");
    return spec->def;
}

void RunConfig::override_value(const std::string& key, const std::string& value) {
    if (!find_key(key)) fail(ErrorCode::config, "unregistered config key '" + key + "'");
    values_[key] = value;
}

std::int64_t RunConfig::i64(const std::string& key) const {
    const std::string v = raw(key);
    try {
        std::size_t pos = 0;
        const std::int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        fail(ErrorCode::config, "config key '" + key + "': '" + v + "' is not an integer");
    }
}

std::uint64_t RunConfig::u64(const std::string& key) const {
    const std::string v = raw(key);
    try {
        std::size_t pos = 0;
        const std::uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        fail(ErrorCode::config, "config key '" + key + "': '" + v + "' is not an unsigned integer");
    }
}

double RunConfig::f64(const std::string& key) const {
    const std::string v = raw(key);
    try {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        fail(ErrorCode::config, "config key '" + key + "': '" + v + "' is not a number");
    }
}

bool RunConfig::boolean(const std::string& key) const {
    const std::string v = raw(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(ErrorCode::config, "config key '" + key + "': '" + v + "' is not a boolean");
}

std::string RunConfig::str(const std::string& key) const { return raw(key); }

std::vector<int> RunConfig::int_list(const std::string& key) const {
    const std::string v = raw(key);
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(trim(item)));
        } catch (const std::exception&) {
            fail(ErrorCode::config, "config key '" + key + "': bad integer list '" + v + "'");
        }
    }
    if (out.empty())
        fail(ErrorCode::config, "config key '" + key + "': empty integer list");
    return out;
}

std::pair<double, double> RunConfig::range(const std::string& key) const {
    const std::string v = raw(key);
    const std::size_t comma = v.find(',');
    if (comma == std::string::npos)
        fail(ErrorCode::config, "config key '" + key + "': expected 'lo,hi', got '" + v + "'");
    try {
        return {std::stod(trim(v.substr(0, comma))), std::stod(trim(v.substr(comma + 1)))};
    } catch (const std::exception&) {
        fail(ErrorCode::config, "config key '" + key + "': expected 'lo,hi', got '" + v + "'");
    }
}

std::string RunConfig::echo() const {
    std::string out;
    for (const KeySpec& k : key_registry()) {
        // The output root determines where artifacts land, not what they
        // contain; keep it out of the reproducibility fingerprint.
        if (std::string_view(k.key) == "out") continue;
        out += k.key;
        out += " = ";
        out += raw(k.key);
        out += "\n";
    }
    return out;
}

std::uint64_t RunConfig::content_hash() const {
    const std::string text = echo();
    return fnv1a(text.data(), text.size());
}

std::string RunConfig::help_text() {
    std::string out = "configuration keys (key = value per line, '#' comments):\n";
    for (const KeySpec& k : key_registry()) {
        char line[200];
        std::snprintf(line, sizeof(line), "  %-24s default %-12s %s\n", k.key, k.def, k.help);
        out += line;
    }
    return out;
}

namespace {

// ---- command plumbing ------------------------------------------------------

struct CommandContext {
    RunConfig cfg;
    std::uint64_t seed = 0;
    int workers = 1;
    fs::path run_dir;
    std::string command;

    std::string path_of(const std::string& name) const { return (run_dir / name).string(); }
};

fs::path make_run_dir(const std::string& root, const std::string& command) {
    fs::create_directories(root);
    int next = 0;
    for (const auto& entry : fs::directory_iterator(root)) {
        const std::string name = entry.path().filename().string();
        const std::size_t dash = name.find('-');
        if (dash == std::string::npos) continue;
        try {
            next = std::max(next, std::stoi(name.substr(0, dash)) + 1);
        } catch (const std::exception&) {
        }
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-", next);
    fs::path dir = fs::path(root) / (buf + command);
    fs::create_directory(dir);
    return dir;
}

void write_text_file(const std::string& path, const std::string& text) {
    BinaryWriter w(path);
    w.bytes(text.data(), text.size());
    w.commit();
}

void write_manifest(const CommandContext& ctx, const std::vector<std::string>& artifacts) {
    json m;
    m["command"] = ctx.command;
    m["seed"] = ctx.seed;
    m["config_hash"] = ctx.cfg.content_hash();
    m["version"] = kVersion;
    m["artifacts"] = artifacts;
    write_text_file(ctx.path_of("manifest.json"), m.dump(2) + "\n");
    write_text_file(ctx.path_of("config.txt"), ctx.cfg.echo());
}

ModelConfig model_config_from(const RunConfig& cfg, std::int64_t patch) {
    const std::string preset = cfg.str("model.preset");
    ModelConfig mc;
    if (preset == "tiny")
        mc = tiny_config();
    else if (preset == "canonical")
        mc = canonical_config();
    else
        fail(ErrorCode::config, "model.preset must be 'tiny' or 'canonical', got '" + preset + "'");
    mc.loss_crop_km = static_cast<int>(cfg.i64("model.loss_crop"));
    mc.train_patch = static_cast<int>(patch);
    mc.validate();
    return mc;
}

SimConfig sim_config_from(const RunConfig& cfg, std::uint64_t seed) {
    SimConfig sc;
    sc.grid_h = sc.grid_w = cfg.i64("sim.grid");
    sc.frame_count = static_cast<int>(cfg.i64("sim.frames"));
    sc.cell_count = static_cast<int>(cfg.i64("sim.cells"));
    std::tie(sc.amp_lo, sc.amp_hi) = cfg.range("sim.amp");
    std::tie(sc.radius_lo, sc.radius_hi) = cfg.range("sim.radius");
    std::tie(sc.speed_lo, sc.speed_hi) = cfg.range("sim.speed");
    std::tie(sc.growth_lo, sc.growth_hi) = cfg.range("sim.growth");
    sc.v_max = cfg.f64("sim.vmax");
    sc.seed = seed;
    sc.validate();
    return sc;
}

TrainConfig train_config_from(const RunConfig& cfg, std::uint64_t seed, int workers) {
    TrainConfig tc;
    tc.workers = workers;
    tc.batch_per_worker = static_cast<int>(cfg.i64("train.batch"));
    tc.eta = cfg.f64("train.eta");
    const std::string policy = cfg.str("train.lr_policy");
    if (policy == "scale_up")
        tc.lr_policy = LrPolicy::scale_up;
    else if (policy == "scale_down")
        tc.lr_policy = LrPolicy::scale_down;
    else if (policy == "none")
        tc.lr_policy = LrPolicy::none;
    else
        fail(ErrorCode::config, "train.lr_policy must be scale_up, scale_down or none");
    tc.warmup_epochs = static_cast<int>(cfg.i64("train.warmup_epochs"));
    tc.epochs = static_cast<int>(cfg.i64("train.epochs"));
    tc.momentum = cfg.f64("train.momentum");
    tc.shuffle = cfg.boolean("train.shuffle");
    tc.val_fraction = cfg.f64("train.val_fraction");
    tc.seed = seed;
    tc.validate();
    return tc;
}

CoverageMask coverage_from(const RunConfig& cfg, const SimConfig& sim, std::uint64_t seed) {
    const auto site_count = cfg.i64("sim.sites");
    if (site_count < 1) fail(ErrorCode::config, "sim.sites must be >= 1");
    Rng rng(derive_seed(seed, 0x51735));
    std::vector<std::pair<double, double>> sites;
    for (std::int64_t i = 0; i < site_count; ++i)
        sites.push_back({rng.uniform(0.0, static_cast<double>(sim.grid_h)),
                         rng.uniform(0.0, static_cast<double>(sim.grid_w))});
    return radar_coverage_mask(sim.grid_h, sim.grid_w, sites, cfg.f64("sim.range"));
}

// ---- gen-data ---------------------------------------------------------------

void cmd_gen_data(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    DatasetGenConfig train_gen;
    train_gen.windows = static_cast<int>(cfg.i64("pipeline.train_windows"));
    train_gen.centers_per_window = static_cast<int>(cfg.i64("pipeline.train_centers"));
    train_gen.patch = cfg.i64("pipeline.patch");
    train_gen.w_floor = cfg.f64("pipeline.w_floor");
    DatasetGenConfig test_gen = train_gen;
    test_gen.windows = static_cast<int>(cfg.i64("pipeline.test_windows"));
    test_gen.centers_per_window = static_cast<int>(cfg.i64("pipeline.test_centers"));

    SimConfig train_sim = sim_config_from(cfg, ctx.seed);
    SimConfig test_sim = train_sim;
    test_sim.seed = derive_seed(ctx.seed, 0x7e57da7a);

    const MosaicSequence train_seq = gen_mosaic_sequence(train_sim);
    const MosaicSequence test_seq = gen_mosaic_sequence(test_sim);
    const CoverageMask mask = coverage_from(cfg, train_sim, ctx.seed);

    Rng train_rng(derive_seed(ctx.seed, 0xda7a, 0));
    Rng test_rng(derive_seed(ctx.seed, 0xda7a, 1));
    PatchDataset train_ds = build_dataset(train_seq, mask, train_gen, train_rng);
    PatchDataset test_ds = build_dataset(test_seq, mask, test_gen, test_rng);

    normalize(train_ds);
    apply_normalization(test_ds, train_ds.norm);

    write_vil1(ctx.path_of("train.vil1"), train_seq);
    write_vil1(ctx.path_of("test.vil1"), test_seq);
    write_dataset(ctx.path_of("train.nwc1"), train_ds);
    write_dataset(ctx.path_of("test.nwc1"), test_ds);

    std::printf("train samples: %" PRId64 "  test samples: %" PRId64 "\n",
                train_ds.sample_count, test_ds.sample_count);
    std::printf("normalization: mean %.9g  std %.9g\n", train_ds.norm.mean, train_ds.norm.std);

    json report;
    report["train_samples"] = train_ds.sample_count;
    report["test_samples"] = test_ds.sample_count;
    report["patch"] = train_ds.patch;
    report["norm_mean"] = train_ds.norm.mean;
    report["norm_std"] = train_ds.norm.std;
    write_text_file(ctx.path_of("report.json"), report.dump(2) + "\n");
    write_manifest(ctx, {"train.vil1", "test.vil1", "train.nwc1", "test.nwc1", "report.json"});
}

// ---- train ------------------------------------------------------------------

void cmd_train(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const PatchDataset train_ds = read_dataset(cfg.str("train.train_dataset"));
    const PatchDataset test_ds = read_dataset(cfg.str("train.test_dataset"));
    const ModelConfig mc = model_config_from(cfg, train_ds.patch);
    TrainConfig tc = train_config_from(cfg, ctx.seed, ctx.workers);

    NowcastModel model = build_model(mc, ctx.seed);
    const std::string resume = cfg.str("train.checkpoint_in");
    if (!resume.empty()) {
        TrainerState state = load_checkpoint(resume, mc, tc);
        model.params = std::move(state.params);
        tc.start_epoch = state.next_epoch;
    }

    const TrainingReport report = train(model, train_ds, test_ds, tc);

    write_metrics_csv(ctx.path_of("metrics.csv"), report);
    save_weights(model.params, mc, ctx.path_of("weights.nww1"));
    save_checkpoint(ctx.path_of("checkpoint.ckpt"), model, tc, tc.epochs);

    json r;
    r["epochs"] = tc.epochs;
    r["workers"] = tc.workers;
    r["batch_per_worker"] = tc.batch_per_worker;
    r["min_val_loss"] = report.min_val_loss;
    r["total_wall_seconds"] = report.total_wall_seconds;
    r["parameters"] = model.params.total_elements();
    write_text_file(ctx.path_of("report.json"), r.dump(2) + "\n");
    std::printf("min validation loss: %.9g  wall: %.1fs\n", report.min_val_loss,
                report.total_wall_seconds);
    write_manifest(ctx, {"metrics.csv", "weights.nww1", "checkpoint.ckpt", "report.json"});
}

// ---- eval -------------------------------------------------------------------

void cmd_eval(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const PatchDataset ds = read_dataset(cfg.str("eval.dataset"));
    const ModelConfig mc = model_config_from(cfg, ds.patch);
    NowcastModel model;
    model.config = mc;
    model.params = load_weights(cfg.str("eval.weights"), mc);
    const std::int64_t crop = cfg.i64("eval.crop");

    GraphBundle bundle = build_graph(mc, ds.patch, ds.patch, false);
    Workspace ws(bundle.graph);
    const int finest = bundle.heads.back();
    const auto [oh, ow] = bundle.plan.finest();

    Tensor model_pred(Shape{ds.sample_count, oh, ow, mc.output_frames});
    for (std::int64_t i = 0; i < ds.sample_count; ++i) {
        ws.bind(bundle.input_x, ds.sample_x(i));
        ws.forward(model.params, {finest});
        const Tensor& o = ws.value(finest);
        std::copy(o.data.begin(), o.data.end(),
                  model_pred.data.begin() + static_cast<std::ptrdiff_t>(i * o.numel()));
    }

    Tensor truth(Shape{ds.sample_count, ds.patch, ds.patch, mc.output_frames});
    Tensor inputs(Shape{ds.sample_count, ds.patch, ds.patch, mc.input_frames});
    for (std::size_t k = 0; k < ds.y.size(); ++k) truth.data[k] = static_cast<Scalar>(ds.y[k]);
    for (std::size_t k = 0; k < ds.x.size(); ++k) inputs.data[k] = static_cast<Scalar>(ds.x[k]);
    const Tensor persist = persistence_forecast(inputs);

    const std::vector<double> model_mse = mse_by_lead(model_pred, truth, crop);
    const std::vector<double> persist_mse = mse_by_lead(persist, truth, crop);

    std::vector<LeadRow> rows;
    for (int c = 0; c < mc.output_frames; ++c)
        rows.push_back({(c + 1) * 10, "model", model_mse[static_cast<std::size_t>(c)]});
    for (int c = 0; c < mc.output_frames; ++c)
        rows.push_back({(c + 1) * 10, "persistence", persist_mse[static_cast<std::size_t>(c)]});
    write_lead_csv(ctx.path_of("lead_mse.csv"), rows);

    json r;
    r["samples"] = ds.sample_count;
    r["crop"] = crop;
    r["model_mse"] = model_mse;
    r["persistence_mse"] = persist_mse;
    write_text_file(ctx.path_of("report.json"), r.dump(2) + "\n");
    for (int c = 0; c < mc.output_frames; ++c)
        std::printf("lead %d min: model %.9g  persistence %.9g\n", (c + 1) * 10,
                    model_mse[static_cast<std::size_t>(c)],
                    persist_mse[static_cast<std::size_t>(c)]);
    write_manifest(ctx, {"lead_mse.csv", "report.json"});
}

// ---- benchmarks -------------------------------------------------------------

void cmd_bench_scaling(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const PatchDataset train_ds = read_dataset(cfg.str("train.train_dataset"));
    const PatchDataset test_ds = read_dataset(cfg.str("train.test_dataset"));
    const ModelConfig mc = model_config_from(cfg, train_ds.patch);
    const TrainConfig base = train_config_from(cfg, ctx.seed, 1);
    const std::vector<int> counts = cfg.int_list("bench.workers");

    const ScalingResult result =
        benchmark_scaling(mc, ctx.seed, train_ds, test_ds, base, counts);
    write_speedup_csv(ctx.path_of("speedup.csv"), result.table);

    json r;
    for (const ScalingRun& run : result.runs) {
        json row;
        row["workers"] = run.workers;
        row["t_seconds"] = run.t_seconds;
        row["min_val_loss"] = run.min_val_loss;
        r["runs"].push_back(row);
    }
    write_text_file(ctx.path_of("report.json"), r.dump(2) + "\n");
    for (const SpeedupRow& row : result.table)
        std::printf("N=%d  T=%.2fs  S=%.3f%s\n", row.workers, row.t_seconds, row.speedup,
                    row.has_rel ? ("  R=" + std::to_string(row.rel_speedup)).c_str() : "");
    write_manifest(ctx, {"speedup.csv", "report.json"});
}

void cmd_bench_batch(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const PatchDataset train_ds = read_dataset(cfg.str("train.train_dataset"));
    const PatchDataset test_ds = read_dataset(cfg.str("train.test_dataset"));
    const ModelConfig mc = model_config_from(cfg, train_ds.patch);
    const TrainConfig base = train_config_from(cfg, ctx.seed, ctx.workers);
    const std::vector<int> sizes = cfg.int_list("bench.batches");

    const std::vector<BatchSweepRow> rows =
        batch_size_sweep(mc, ctx.seed, train_ds, test_ds, base, sizes);
    write_batch_sweep_csv(ctx.path_of("batch_sweep.csv"), rows);

    json r;
    for (const BatchSweepRow& row : rows) {
        json jr;
        jr["batch"] = row.batch;
        jr["skipped"] = row.skipped;
        if (!row.skipped) {
            jr["t_seconds"] = row.t_seconds;
            jr["min_val_loss"] = row.min_val_loss;
        }
        r["rows"].push_back(jr);
    }
    write_text_file(ctx.path_of("report.json"), r.dump(2) + "\n");
    for (const BatchSweepRow& row : rows) {
        if (row.skipped)
            std::fprintf(stderr, "warning: batch %d exceeds shard size, skipped\n", row.batch);
        else
            std::printf("batch=%d  T=%.2fs  min_val_loss=%.9g\n", row.batch, row.t_seconds,
                        row.min_val_loss);
    }
    write_manifest(ctx, {"batch_sweep.csv", "report.json"});
}

// ---- infer ------------------------------------------------------------------

std::int64_t largest_valid_extent(const ModelConfig& mc, std::int64_t grid) {
    for (std::int64_t t = grid; t >= 1; --t) {
        try {
            infer_shapes(mc, t, t);
            return t;
        } catch (const Error&) {
        }
        if (grid - t > 256)
            break;
    }
    fail(ErrorCode::data, "no valid inference extent at or below " + std::to_string(grid));
}

void cmd_infer(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const MosaicSequence seq = read_vil1(cfg.str("infer.mosaic"));
    const PatchDataset stats_ds = read_dataset(cfg.str("infer.stats_from"));
    const ModelConfig mc = model_config_from(cfg, stats_ds.patch);
    NowcastModel model;
    model.config = mc;
    model.params = load_weights(cfg.str("infer.weights"), mc);

    const auto t0 = cfg.i64("infer.t0");
    if (t0 < 6 || t0 >= static_cast<std::int64_t>(seq.frames.size()))
        fail(ErrorCode::data, "infer.t0 must leave 6 frames of history");

    // Pad-free network: crop the mosaic centrally to the largest valid extent.
    const std::int64_t vh = largest_valid_extent(mc, seq.h);
    const std::int64_t vw = largest_valid_extent(mc, seq.w);
    const std::int64_t oy = (seq.h - vh) / 2, ox = (seq.w - vw) / 2;

    Tensor frames(Shape{1, vh, vw, mc.input_frames});
    for (int c = 0; c < mc.input_frames; ++c) {
        const Mosaic& m = seq.frames[static_cast<std::size_t>(t0 - 6 + c)];
        for (std::int64_t y = 0; y < vh; ++y)
            for (std::int64_t x = 0; x < vw; ++x)
                frames.at(0, y, x, c) = static_cast<Scalar>(m.at(oy + y, ox + x));
    }

    const InferResult result = infer_grid(model, frames, stats_ds.norm, ctx.workers,
                                          cfg.i64("infer.tile"));

    // Requantize the denormalized forecast back to digital VIL bytes.
    MosaicSequence out_seq;
    out_seq.h = result.forecast.shape.d[1];
    out_seq.w = result.forecast.shape.d[2];
    out_seq.frame_dt_minutes = seq.frame_dt_minutes;
    const std::int64_t base_ts = seq.frames[static_cast<std::size_t>(t0)].timestamp_minutes;
    for (int c = 0; c < mc.output_frames; ++c) {
        Mosaic m;
        m.h = out_seq.h;
        m.w = out_seq.w;
        m.timestamp_minutes = base_ts + (c + 1) * seq.frame_dt_minutes;
        m.grid.resize(static_cast<std::size_t>(m.h * m.w));
        for (std::int64_t y = 0; y < m.h; ++y)
            for (std::int64_t x = 0; x < m.w; ++x) {
                const double v =
                    std::clamp(static_cast<double>(result.forecast.at(0, y, x, c)), 0.0, 255.0);
                m.grid[static_cast<std::size_t>(y * m.w + x)] =
                    static_cast<std::uint8_t>(std::floor(v + 0.5));
            }
        out_seq.frames.push_back(std::move(m));
    }
    write_vil1(ctx.path_of("forecast.vil1"), out_seq);

    json r;
    r["grid"] = {vh, vw};
    r["output"] = {out_seq.h, out_seq.w};
    r["workers"] = ctx.workers;
    r["tile"] = cfg.i64("infer.tile");
    r["wall_seconds"] = result.wall_seconds;
    write_text_file(ctx.path_of("report.json"), r.dump(2) + "\n");
    std::printf("forecast %" PRId64 "x%" PRId64 " from grid %" PRId64 "x%" PRId64 " in %.2fs\n",
                out_seq.h, out_seq.w, vh, vw, result.wall_seconds);
    write_manifest(ctx, {"forecast.vil1", "report.json"});
}

// ---- match-hist -------------------------------------------------------------

void cmd_match_hist(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const MosaicSequence forecast = read_vil1(cfg.str("match.forecast"));
    const MosaicSequence reference = read_vil1(cfg.str("match.reference"));
    const auto ref_idx = cfg.i64("match.reference_frame");
    if (ref_idx < 0 || ref_idx >= static_cast<std::int64_t>(reference.frames.size()))
        fail(ErrorCode::data, "match.reference_frame out of range");
    Mosaic ref = reference.frames[static_cast<std::size_t>(ref_idx)];
    if (ref.h < forecast.h || ref.w < forecast.w)
        fail(ErrorCode::data, "match-hist: reference is smaller than the forecast");
    if (ref.h > forecast.h || ref.w > forecast.w) {
        // Forecasts cover the centered valid region of the source grid, so a
        // larger reference is cropped concentrically to match.
        Mosaic cropped;
        cropped.h = forecast.h;
        cropped.w = forecast.w;
        cropped.timestamp_minutes = ref.timestamp_minutes;
        cropped.grid.resize(static_cast<std::size_t>(forecast.h * forecast.w));
        const std::int64_t oy = (ref.h - forecast.h) / 2, ox = (ref.w - forecast.w) / 2;
        for (std::int64_t y = 0; y < forecast.h; ++y)
            for (std::int64_t x = 0; x < forecast.w; ++x)
                cropped.grid[static_cast<std::size_t>(y * forecast.w + x)] =
                    ref.at(oy + y, ox + x);
        ref = std::move(cropped);
    }

    HistMatchConfig hm;
    hm.tile_px = static_cast<int>(cfg.i64("match.tile"));
    hm.bins = static_cast<int>(cfg.i64("match.bins"));
    hm.validate();

    auto to_frame = [](const Mosaic& m) {
        Tensor t(Shape{m.h, m.w});
        for (std::size_t i = 0; i < m.grid.size(); ++i)
            t.data[i] = static_cast<Scalar>(m.grid[i]);
        return t;
    };
    const Tensor ref_frame = to_frame(ref);

    MosaicSequence out_seq;
    out_seq.h = forecast.h;
    out_seq.w = forecast.w;
    out_seq.frame_dt_minutes = forecast.frame_dt_minutes;
    for (const Mosaic& fm : forecast.frames) {
        const Tensor matched = histogram_match_local(to_frame(fm), ref_frame, hm);
        Mosaic m;
        m.h = fm.h;
        m.w = fm.w;
        m.timestamp_minutes = fm.timestamp_minutes;
        m.grid.resize(fm.grid.size());
        for (std::size_t i = 0; i < m.grid.size(); ++i) {
            const double v = std::clamp(static_cast<double>(matched.data[i]), 0.0, 255.0);
            m.grid[i] = static_cast<std::uint8_t>(std::floor(v + 0.5));
        }
        out_seq.frames.push_back(std::move(m));
    }
    write_vil1(ctx.path_of("matched.vil1"), out_seq);

    json r;
    r["frames"] = out_seq.frames.size();
    r["tile"] = hm.tile_px;
    r["bins"] = hm.bins;
    write_text_file(ctx.path_of("report.json"), r.dump(2) + "\n");
    write_manifest(ctx, {"matched.vil1", "report.json"});
}

} // namespace

std::string run_command(const std::string& command, const CliOptions& options) {
    CommandContext ctx;
    ctx.cfg = RunConfig::load(options.config_path);
    if (options.seed) ctx.cfg.override_value("seed", std::to_string(*options.seed));
    if (options.out) ctx.cfg.override_value("out", *options.out);
    if (options.workers) ctx.cfg.override_value("workers", std::to_string(*options.workers));
    ctx.seed = ctx.cfg.u64("seed");
    ctx.workers = static_cast<int>(ctx.cfg.i64("workers"));
    if (ctx.workers < 1) fail(ErrorCode::config, "workers must be >= 1");
    ctx.command = command;
    ctx.run_dir = make_run_dir(ctx.cfg.str("out"), command);

    if (command == "gen-data")
        cmd_gen_data(ctx);
    else if (command == "train")
        cmd_train(ctx);
    else if (command == "eval")
        cmd_eval(ctx);
    else if (command == "bench-scaling")
        cmd_bench_scaling(ctx);
    else if (command == "bench-batch")
        cmd_bench_batch(ctx);
    else if (command == "infer")
        cmd_infer(ctx);
    else if (command == "match-hist")
        cmd_match_hist(ctx);
    else
        fail(ErrorCode::config, "unknown command '" + command + "'");
    return ctx.run_dir.string();
}

} // namespace nowcast
