#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/rng.hpp"
#include "nowcast/storm.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

// 13 consecutive frames centered on t0: inputs t0-60..t0 (7 frames), truth
// t0+10..t0+60 (6 frames), at 10-minute spacing.
struct SequenceWindow {
    static constexpr int kFrames = 13;
    static constexpr int kInputFrames = 7;
    static constexpr int kOutputFrames = 6;

    const MosaicSequence* seq = nullptr;
    int center = 0; // frame index of t0; frames center-6 .. center+6

    const Mosaic& frame(int offset) const { // offset in [-6, 6]
        return seq->frames[static_cast<std::size_t>(center + offset)];
    }
};

SequenceWindow make_window(const MosaicSequence& seq, int center);

struct NormStats {
    double mean = 0.0;
    double std = 1.0;
};

// Training corpus: paired patch tensors stored as 32-bit floats (the on-disk
// representation); converted to Scalar when batches are assembled.
struct PatchDataset {
    std::int64_t sample_count = 0;
    std::int64_t patch = 0;
    int in_channels = 7;
    int out_channels = 6;
    NormStats norm;
    std::vector<float> x; // [S][patch][patch][in_channels]
    std::vector<float> y; // [S][patch][patch][out_channels]

    std::int64_t x_sample_len() const { return patch * patch * in_channels; }
    std::int64_t y_sample_len() const { return patch * patch * out_channels; }

    Tensor sample_x(std::int64_t i) const;
    Tensor sample_y(std::int64_t i) const;
    Tensor gather_x(std::span<const std::int64_t> idx) const; // [B,patch,patch,7]
    Tensor gather_y(std::span<const std::int64_t> idx) const;
};

// Uniformly random window centers with 6 frames of context on both sides.
std::vector<int> select_window_times(const MosaicSequence& seq, int count, Rng& rng);

// Centers drawn without replacement, probability proportional to
// vil + w_floor, restricted to pixels inside the coverage mask whose patch
// fits fully in the grid.
std::vector<std::pair<std::int64_t, std::int64_t>> sample_patch_centers(
    const Mosaic& frame, const CoverageMask& mask, std::int64_t patch, int count,
    double w_floor, Rng& rng);

// Extracts the paired (X, Y) patch around a center and appends it to the
// dataset buffers. Channel c of X is frame t0-60+10c; channel c of Y is frame
// t0+10+10c.
void extract_patch_pair(const SequenceWindow& window,
                        std::pair<std::int64_t, std::int64_t> center_yx, PatchDataset& out);

// Computes global scalar mean/std over X and transforms both X and Y in
// place; Y shares X's stats so persistence stays the identity map in
// normalized space. Errors on zero variance.
void normalize(PatchDataset& ds);
// Applies existing stats (test sets reuse the training stats).
void apply_normalization(PatchDataset& ds, const NormStats& stats);

inline double denormalize_value(double v, const NormStats& s) { return v * s.std + s.mean; }
inline double normalize_value(double v, const NormStats& s) { return (v - s.mean) / s.std; }

// "NWC1" container: magic, version, S, patch, channel counts, mean/std, then
// the X payload and the Y payload as little-endian f32. Byte-exact round trip.
void write_dataset(const std::string& path, const PatchDataset& ds);
PatchDataset read_dataset(const std::string& path);

struct ShardRange {
    std::int64_t begin = 0;
    std::int64_t end = 0;
    std::int64_t size() const { return end - begin; }
};

// Contiguous 1/N slice owned by `rank`; ranges partition [0, S) with sizes
// differing by at most one.
ShardRange shard(std::int64_t sample_count, int workers, int rank);

// round(fraction * S) distinct indices, ascending, deterministic in
// (seed, rank); each rank draws its own independent subset.
std::vector<std::int64_t> validation_subsample(std::int64_t test_count, double fraction,
                                               std::uint64_t seed, int rank);

struct DatasetGenConfig {
    int windows = 64;
    int centers_per_window = 32;
    std::int64_t patch = 70;
    double w_floor = 1.0;
};

// Full generation route: window selection, weighted center sampling, patch
// extraction. Leaves the dataset unnormalized.
PatchDataset build_dataset(const MosaicSequence& seq, const CoverageMask& mask,
                           const DatasetGenConfig& cfg, Rng& rng);

} // namespace nowcast
