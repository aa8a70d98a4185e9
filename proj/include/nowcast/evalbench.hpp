#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/model.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/trainer.hpp"

namespace nowcast {

// Baseline forecast: every lead repeats the last input frame (channel 6).
Tensor persistence_forecast(const Tensor& x);

// Per-lead MSE over the concentric crop, averaged over samples. Lead i
// corresponds to (i+1)*10 minutes.
std::vector<double> mse_by_lead(const Tensor& pred, const Tensor& truth, std::int64_t crop);

struct LeadRow {
    int lead_minutes;
    std::string method;
    double mse;
};
// Header: lead_minutes,method,mse
void write_lead_csv(const std::string& path, const std::vector<LeadRow>& rows);

struct HistMatchConfig {
    int tile_px = 64;
    int bins = 256;

    void validate() const;
};

// Tile-local histogram matching. Each tile's forecast CDF is mapped through
// the reference tile's quantile function; per-pixel lookups blend the four
// nearest tiles' histograms bilinearly so tile seams vanish. Frames are
// rank-2 [H, W] tensors. A tile larger than the frame degenerates to one
// global tile.
Tensor histogram_match_local(const Tensor& forecast, const Tensor& reference,
                             const HistMatchConfig& cfg);

// Per-tile bin-to-value mapping tables (monotone non-decreasing per tile),
// row-major over the tile grid. Exposed for property checks.
std::vector<std::vector<double>> histmatch_tile_luts(const Tensor& forecast,
                                                     const Tensor& reference,
                                                     const HistMatchConfig& cfg);

struct InferResult {
    Tensor forecast;     // [1, oh, ow, output_frames], denormalized units
    double wall_seconds = 0;
};

// Single fully-convolutional pass over a full grid: normalize, forward,
// denormalize. The grid size must be accepted by infer_shapes; the error for
// an invalid size lists the nearest valid ones. tile_px > 0 splits the grid
// into aligned overlapping tiles fanned out to `workers` threads; the
// stitched result matches the single pass.
InferResult infer_grid(const NowcastModel& model, const Tensor& frames,
                       const NormStats& norm, int workers, std::int64_t tile_px = 0);

// Largest valid input extent <= `want` congruent to `grid mod alignment`.
std::int64_t choose_tile_extent(const ModelConfig& cfg, std::int64_t grid, std::int64_t want);

struct SpeedupRow {
    int workers = 0;
    double t_seconds = 0;
    double speedup = 0;       // S(N) = T(1) / T(N)
    double rel_speedup = 0;   // R(N) = T(prev) / T(N)
    bool has_rel = false;
};

// S and R columns from (N, T) measurements; requires N = 1 present and N
// strictly increasing.
std::vector<SpeedupRow> speedup_table(std::span<const std::pair<int, double>> times);

// Header: N,T_seconds,S,R (R empty on the first row)
void write_speedup_csv(const std::string& path, const std::vector<SpeedupRow>& rows);

struct ScalingRun {
    int workers = 0;
    double t_seconds = 0;
    double min_val_loss = 0;
};

struct ScalingResult {
    std::vector<SpeedupRow> table;
    std::vector<ScalingRun> runs;
};

// Trains the same model/seed once per worker count (sequentially, identical
// config otherwise) and assembles the speedup table.
ScalingResult benchmark_scaling(const ModelConfig& model_cfg, std::uint64_t model_seed,
                                const PatchDataset& train_ds, const PatchDataset& test_ds,
                                const TrainConfig& base, std::span<const int> worker_counts);

struct BatchSweepRow {
    int batch = 0;
    double t_seconds = 0;
    double min_val_loss = 0;
    bool skipped = false;
};

// One training run per batch size; sizes exceeding the shard are skipped with
// a warning row.
std::vector<BatchSweepRow> batch_size_sweep(const ModelConfig& model_cfg,
                                            std::uint64_t model_seed,
                                            const PatchDataset& train_ds,
                                            const PatchDataset& test_ds,
                                            const TrainConfig& base,
                                            std::span<const int> sizes);

// Header: batch,T_seconds,min_val_loss
void write_batch_sweep_csv(const std::string& path, const std::vector<BatchSweepRow>& rows);

} // namespace nowcast
