#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/error.hpp"

namespace nowcast {

// Synthetic stand-in for a national VIL mosaic: Gaussian precipitation cells
// advecting linearly on a periodic grid, growing or decaying exponentially.
// Pixels are 1 km. Not a meteorological model; it exists to give the network
// learnable spatiotemporal structure with exactly reproducible statistics.
struct SimConfig {
    std::int64_t grid_h = 256;
    std::int64_t grid_w = 256;
    int frame_count = 40;
    int frame_dt_minutes = 10;
    int cell_count = 24;
    double amp_lo = 4.0, amp_hi = 16.0;
    double radius_lo = 5.0, radius_hi = 9.0;  // km
    double speed_lo = 0.5, speed_hi = 1.5;    // km per frame
    double growth_lo = -0.02, growth_hi = 0.02; // per-frame exponential rate
    double v_max = 20.0; // field value mapped to digital VIL 255
    std::uint64_t seed = 0;

    void validate() const;
};

struct Mosaic {
    std::int64_t timestamp_minutes = 0;
    std::int64_t h = 0, w = 0;
    std::vector<std::uint8_t> grid; // digital VIL, row-major

    std::uint8_t at(std::int64_t y, std::int64_t x) const {
        return grid[static_cast<std::size_t>(y * w + x)];
    }
};

struct MosaicSequence {
    std::int64_t h = 0, w = 0;
    int frame_dt_minutes = 10;
    std::vector<Mosaic> frames;
};

struct StormCell {
    double y0, x0;    // initial center
    double vy, vx;    // km per frame
    double amp0;
    double radius;
    double growth;
};

std::vector<StormCell> make_cells(const SimConfig& config);

// Continuous (pre-quantization) field at frame t. Cells advect with periodic
// wrap; amplitudes evolve as amp0 * exp(growth * t), clamped to the amplitude
// range. Always computed in double so sequences are byte-identical across
// build precisions.
std::vector<double> storm_field(const SimConfig& config, const std::vector<StormCell>& cells,
                                int t);

// round(255 * min(v / v_max, 1)), round-half-up. Rejects negative or
// non-finite field values.
std::vector<std::uint8_t> digital_vil_quantize(const std::vector<double>& field, double v_max);

MosaicSequence gen_mosaic_sequence(const SimConfig& config);

struct CoverageMask {
    std::int64_t h = 0, w = 0;
    std::vector<std::uint8_t> inside;

    bool at(std::int64_t y, std::int64_t x) const {
        return inside[static_cast<std::size_t>(y * w + x)] != 0;
    }
};

// mask[p] = true iff some site lies within range_px of p (230 km default,
// matching weather radar range).
CoverageMask radar_coverage_mask(std::int64_t h, std::int64_t w,
                                 const std::vector<std::pair<double, double>>& sites_yx,
                                 double range_px = 230.0);

// "VIL1" container: magic, version, H, W, frame count, frame_dt, then per
// frame an i64 timestamp followed by H*W raw bytes.
void write_vil1(const std::string& path, const MosaicSequence& seq);
MosaicSequence read_vil1(const std::string& path);

} // namespace nowcast
