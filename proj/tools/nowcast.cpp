// Batch front-end for the nowcasting pipeline: data generation, training,
// evaluation, benchmarking, inference and histogram matching, driven by a
// config file plus flags.
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"

#include "nowcast/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"nowcast: CPU data-parallel precipitation nowcasting"};
    app.require_subcommand(1);
    app.footer(nowcast::RunConfig::help_text());

    nowcast::CliOptions options;

    const char* commands[] = {"gen-data", "train",  "eval",      "bench-scaling",
                              "bench-batch", "infer", "match-hist"};
    const char* descriptions[] = {
        "generate synthetic mosaics and NWC1 train/test datasets",
        "data-parallel training; writes metrics, weights and a checkpoint",
        "model vs persistence MSE by lead time",
        "training wall time and speedup across worker counts",
        "training wall time and min validation loss across batch sizes",
        "full-grid forecast from a VIL1 mosaic",
        "tile-local histogram matching of a forecast to a reference frame"};

    for (std::size_t i = 0; i < std::size(commands); ++i) {
        CLI::App* sub = app.add_subcommand(commands[i], descriptions[i]);
        sub->add_option("--config", options.config_path, "run configuration file");
        sub->add_option_function<std::uint64_t>(
            "--seed", [&](const std::uint64_t& v) { options.seed = v; },
            "override the config seed");
        sub->add_option_function<std::string>(
            "--out", [&](const std::string& v) { options.out = v; },
            "override the output root directory");
        sub->add_option_function<int>(
            "--workers", [&](const int& v) { options.workers = v; },
            "override the worker count");
    }

    CLI11_PARSE(app, argc, argv);

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const std::string run_dir = nowcast::run_command(command, options);
        std::printf("run directory: %s\n", run_dir.c_str());
        return 0;
    } catch (const nowcast::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
