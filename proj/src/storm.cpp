#include "nowcast/storm.hpp"

#include <algorithm>
#include <cmath>

#include "nowcast/io_util.hpp"
#include "nowcast/rng.hpp"

namespace nowcast {

void SimConfig::validate() const {
    if (grid_h < 1 || grid_w < 1) fail(ErrorCode::config, "sim: grid extents must be >= 1");
    if (frame_count < 1) fail(ErrorCode::config, "sim: frame_count must be >= 1");
    if (frame_dt_minutes != 10)
        fail(ErrorCode::config, "sim: frame spacing is fixed at 10 minutes");
    if (cell_count < 0) fail(ErrorCode::config, "sim: cell_count must be >= 0");
    auto range_ok = [](double lo, double hi) { return lo <= hi; };
    if (!range_ok(amp_lo, amp_hi) || !range_ok(radius_lo, radius_hi) ||
        !range_ok(speed_lo, speed_hi) || !range_ok(growth_lo, growth_hi))
        fail(ErrorCode::config, "sim: parameter ranges must satisfy lo <= hi");
    if (amp_lo < 0 || radius_lo <= 0)
        fail(ErrorCode::config, "sim: amplitude/radius must be positive");
    if (v_max <= 0) fail(ErrorCode::config, "sim: v_max must be > 0");
}

std::vector<StormCell> make_cells(const SimConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, 0x5707713));
    std::vector<StormCell> cells;
    cells.reserve(static_cast<std::size_t>(config.cell_count));
    for (int i = 0; i < config.cell_count; ++i) {
        StormCell c;
        c.y0 = rng.uniform(0.0, static_cast<double>(config.grid_h));
        c.x0 = rng.uniform(0.0, static_cast<double>(config.grid_w));
        const double speed = rng.uniform(config.speed_lo, config.speed_hi);
        const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        c.vy = speed * std::sin(angle);
        c.vx = speed * std::cos(angle);
        c.amp0 = rng.uniform(config.amp_lo, config.amp_hi);
        c.radius = rng.uniform(config.radius_lo, config.radius_hi);
        c.growth = rng.uniform(config.growth_lo, config.growth_hi);
        cells.push_back(c);
    }
    return cells;
}

static double wrap_into(double v, double period) {
    v = std::fmod(v, period);
    return v < 0 ? v + period : v;
}

std::vector<double> storm_field(const SimConfig& config, const std::vector<StormCell>& cells,
                                int t) {
    const std::int64_t H = config.grid_h, W = config.grid_w;
    std::vector<double> field(static_cast<std::size_t>(H * W), 0.0);
    std::vector<double> wy(static_cast<std::size_t>(H)), wx(static_cast<std::size_t>(W));
    for (const StormCell& c : cells) {
        const double cy = wrap_into(c.y0 + c.vy * t, static_cast<double>(H));
        const double cx = wrap_into(c.x0 + c.vx * t, static_cast<double>(W));
        const double amp =
            std::clamp(c.amp0 * std::exp(c.growth * t), config.amp_lo, config.amp_hi);
        const double inv2r2 = 1.0 / (2.0 * c.radius * c.radius);
        // The Gaussian stays separable with toroidal distance: the wrapped
        // metric is min per axis.
        for (std::int64_t i = 0; i < H; ++i) {
            double d = std::abs(static_cast<double>(i) - cy);
            d = std::min(d, static_cast<double>(H) - d);
            wy[static_cast<std::size_t>(i)] = std::exp(-d * d * inv2r2);
        }
        for (std::int64_t j = 0; j < W; ++j) {
            double d = std::abs(static_cast<double>(j) - cx);
            d = std::min(d, static_cast<double>(W) - d);
            wx[static_cast<std::size_t>(j)] = std::exp(-d * d * inv2r2);
        }
        for (std::int64_t i = 0; i < H; ++i) {
            const double ay = amp * wy[static_cast<std::size_t>(i)];
            double* row = field.data() + i * W;
            for (std::int64_t j = 0; j < W; ++j)
                row[j] += ay * wx[static_cast<std::size_t>(j)];
        }
    }
    return field;
}

std::vector<std::uint8_t> digital_vil_quantize(const std::vector<double>& field, double v_max) {
    std::vector<std::uint8_t> out(field.size());
    for (std::size_t i = 0; i < field.size(); ++i) {
        const double v = field[i];
        if (!std::isfinite(v) || v < 0.0)
            fail(ErrorCode::data, "digital VIL quantization requires finite non-negative values");
        const double scaled = 255.0 * std::min(v / v_max, 1.0);
        out[i] = static_cast<std::uint8_t>(std::floor(scaled + 0.5));
    }
    return out;
}

MosaicSequence gen_mosaic_sequence(const SimConfig& config) {
    config.validate();
    const std::vector<StormCell> cells = make_cells(config);
    MosaicSequence seq;
    seq.h = config.grid_h;
    seq.w = config.grid_w;
    seq.frame_dt_minutes = config.frame_dt_minutes;
    seq.frames.reserve(static_cast<std::size_t>(config.frame_count));
    for (int t = 0; t < config.frame_count; ++t) {
        Mosaic m;
        m.timestamp_minutes = static_cast<std::int64_t>(t) * config.frame_dt_minutes;
        m.h = config.grid_h;
        m.w = config.grid_w;
        m.grid = digital_vil_quantize(storm_field(config, cells, t), config.v_max);
        seq.frames.push_back(std::move(m));
    }
    return seq;
}

CoverageMask radar_coverage_mask(std::int64_t h, std::int64_t w,
                                 const std::vector<std::pair<double, double>>& sites_yx,
                                 double range_px) {
    CoverageMask mask;
    mask.h = h;
    mask.w = w;
    mask.inside.assign(static_cast<std::size_t>(h * w), 0);
    const double r2 = range_px * range_px;
    for (const auto& [sy, sx] : sites_yx) {
        if (sy < 0 || sy >= static_cast<double>(h) || sx < 0 || sx >= static_cast<double>(w))
            fail(ErrorCode::data, "radar site outside grid");
        const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(sy - range_px) - 1);
        const auto y1 = std::min<std::int64_t>(h, static_cast<std::int64_t>(sy + range_px) + 2);
        const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(sx - range_px) - 1);
        const auto x1 = std::min<std::int64_t>(w, static_cast<std::int64_t>(sx + range_px) + 2);
        for (std::int64_t y = y0; y < y1; ++y) {
            const double dy = static_cast<double>(y) - sy;
            for (std::int64_t x = x0; x < x1; ++x) {
                const double dx = static_cast<double>(x) - sx;
                if (dy * dy + dx * dx <= r2)
                    mask.inside[static_cast<std::size_t>(y * w + x)] = 1;
            }
        }
    }
    return mask;
}

static constexpr std::uint16_t kVilVersion = 1;

void write_vil1(const std::string& path, const MosaicSequence& seq) {
    BinaryWriter w(path);
    w.magic("VIL1");
    w.u16(kVilVersion);
    w.u32(static_cast<std::uint32_t>(seq.h));
    w.u32(static_cast<std::uint32_t>(seq.w));
    w.u32(static_cast<std::uint32_t>(seq.frames.size()));
    w.u32(static_cast<std::uint32_t>(seq.frame_dt_minutes));
    for (const Mosaic& m : seq.frames) {
        w.i64(m.timestamp_minutes);
        w.bytes(m.grid.data(), m.grid.size());
    }
    w.commit();
}

MosaicSequence read_vil1(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("VIL1");
    const std::uint16_t version = r.u16();
    if (version != kVilVersion)
        fail(ErrorCode::io, path + ": unsupported VIL1 version " + std::to_string(version));
    MosaicSequence seq;
    seq.h = r.u32();
    seq.w = r.u32();
    const std::uint32_t frames = r.u32();
    seq.frame_dt_minutes = static_cast<int>(r.u32());
    for (std::uint32_t i = 0; i < frames; ++i) {
        Mosaic m;
        m.timestamp_minutes = r.i64();
        m.h = seq.h;
        m.w = seq.w;
        m.grid.resize(static_cast<std::size_t>(seq.h * seq.w));
        r.bytes(m.grid.data(), m.grid.size());
        seq.frames.push_back(std::move(m));
    }
    return seq;
}

} // namespace nowcast
