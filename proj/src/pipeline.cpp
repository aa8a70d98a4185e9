#include "nowcast/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "nowcast/io_util.hpp"

namespace nowcast {

SequenceWindow make_window(const MosaicSequence& seq, int center) {
    const int n = static_cast<int>(seq.frames.size());
    if (n < SequenceWindow::kFrames)
        fail(ErrorCode::data, "sequence has " + std::to_string(n) +
                                  " frames; a window needs " +
                                  std::to_string(SequenceWindow::kFrames));
    if (center < 6 || center > n - 7)
        fail(ErrorCode::data, "window center " + std::to_string(center) + " out of range");
    for (int i = center - 6; i < center + 6; ++i) {
        const auto dt = seq.frames[static_cast<std::size_t>(i + 1)].timestamp_minutes -
                        seq.frames[static_cast<std::size_t>(i)].timestamp_minutes;
        if (dt != seq.frame_dt_minutes)
            fail(ErrorCode::data, "window frames are not 10 minutes apart");
    }
    return SequenceWindow{&seq, center};
}

Tensor PatchDataset::sample_x(std::int64_t i) const {
    Tensor t(Shape{1, patch, patch, in_channels});
    const float* src = x.data() + i * x_sample_len();
    for (std::int64_t k = 0; k < x_sample_len(); ++k)
        t.data[static_cast<std::size_t>(k)] = static_cast<Scalar>(src[k]);
    return t;
}

Tensor PatchDataset::sample_y(std::int64_t i) const {
    Tensor t(Shape{1, patch, patch, out_channels});
    const float* src = y.data() + i * y_sample_len();
    for (std::int64_t k = 0; k < y_sample_len(); ++k)
        t.data[static_cast<std::size_t>(k)] = static_cast<Scalar>(src[k]);
    return t;
}

Tensor PatchDataset::gather_x(std::span<const std::int64_t> idx) const {
    Tensor t(Shape{static_cast<std::int64_t>(idx.size()), patch, patch, in_channels});
    const std::int64_t len = x_sample_len();
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const float* src = x.data() + idx[b] * len;
        Scalar* dst = t.ptr() + static_cast<std::int64_t>(b) * len;
        for (std::int64_t k = 0; k < len; ++k) dst[k] = static_cast<Scalar>(src[k]);
    }
    return t;
}

Tensor PatchDataset::gather_y(std::span<const std::int64_t> idx) const {
    Tensor t(Shape{static_cast<std::int64_t>(idx.size()), patch, patch, out_channels});
    const std::int64_t len = y_sample_len();
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const float* src = y.data() + idx[b] * len;
        Scalar* dst = t.ptr() + static_cast<std::int64_t>(b) * len;
        for (std::int64_t k = 0; k < len; ++k) dst[k] = static_cast<Scalar>(src[k]);
    }
    return t;
}

std::vector<int> select_window_times(const MosaicSequence& seq, int count, Rng& rng) {
    const int n = static_cast<int>(seq.frames.size());
    if (n < SequenceWindow::kFrames)
        fail(ErrorCode::data, "sequence shorter than " +
                                  std::to_string(SequenceWindow::kFrames) + " frames");
    const int lo = 6, hi = n - 7; // inclusive valid center range
    std::vector<int> times;
    times.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        times.push_back(lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))));
    return times;
}

namespace {

// Fenwick tree over pixel weights for O(log n) weighted draws without
// replacement.
class WeightedSampler {
public:
    explicit WeightedSampler(std::vector<double> weights)
        : n_(weights.size()), tree_(weights.size() + 1, 0.0) {
        for (std::size_t i = 0; i < n_; ++i) add(i, weights[i]);
    }

    double total() const { return prefix(n_); }

    std::size_t draw_and_remove(Rng& rng) {
        const double u = rng.uniform() * total();
        std::size_t idx = upper_bound(u);
        add(idx, -weight_of(idx));
        return idx;
    }

private:
    void add(std::size_t i, double delta) {
        for (std::size_t k = i + 1; k <= n_; k += k & (~k + 1)) tree_[k] += delta;
    }
    double prefix(std::size_t i) const { // sum of [0, i)
        double s = 0;
        for (std::size_t k = i; k > 0; k -= k & (~k + 1)) s += tree_[k];
        return s;
    }
    double weight_of(std::size_t i) const { return prefix(i + 1) - prefix(i); }
    // Smallest index with prefix(i+1) > u.
    std::size_t upper_bound(double u) const {
        std::size_t pos = 0;
        std::size_t mask = 1;
        while ((mask << 1) <= n_) mask <<= 1;
        for (; mask > 0; mask >>= 1) {
            const std::size_t next = pos + mask;
            if (next <= n_ && tree_[next] <= u) {
                u -= tree_[next];
                pos = next;
            }
        }
        return std::min(pos, n_ - 1);
    }

    std::size_t n_;
    std::vector<double> tree_;
};

} // namespace

std::vector<std::pair<std::int64_t, std::int64_t>> sample_patch_centers(
    const Mosaic& frame, const CoverageMask& mask, std::int64_t patch, int count,
    double w_floor, Rng& rng) {
    if (mask.h != frame.h || mask.w != frame.w)
        fail(ErrorCode::data, "coverage mask does not match mosaic extents");
    const std::int64_t half = patch / 2;
    const std::int64_t y_lo = half, y_hi = frame.h - (patch - half); // patch rows [c-half, c+patch-half)
    const std::int64_t x_lo = half, x_hi = frame.w - (patch - half);
    if (y_hi < y_lo || x_hi < x_lo)
        fail(ErrorCode::data, "patch size " + std::to_string(patch) + " exceeds grid");

    std::vector<std::pair<std::int64_t, std::int64_t>> eligible;
    std::vector<double> weights;
    for (std::int64_t cy = y_lo; cy <= y_hi; ++cy)
        for (std::int64_t cx = x_lo; cx <= x_hi; ++cx)
            if (mask.at(cy, cx)) {
                eligible.push_back({cy, cx});
                weights.push_back(static_cast<double>(frame.at(cy, cx)) + w_floor);
            }
    if (eligible.empty())
        fail(ErrorCode::data, "no eligible patch centers inside coverage");
    if (count > static_cast<int>(eligible.size()))
        fail(ErrorCode::data, "requested " + std::to_string(count) + " centers, only " +
                                  std::to_string(eligible.size()) + " eligible pixels");

    WeightedSampler sampler(std::move(weights));
    std::vector<std::pair<std::int64_t, std::int64_t>> centers;
    centers.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        centers.push_back(eligible[sampler.draw_and_remove(rng)]);
    return centers;
}

void extract_patch_pair(const SequenceWindow& window,
                        std::pair<std::int64_t, std::int64_t> center_yx, PatchDataset& out) {
    const Mosaic& ref = window.frame(0);
    const std::int64_t patch = out.patch;
    const std::int64_t half = patch / 2;
    const std::int64_t y0 = center_yx.first - half;
    const std::int64_t x0 = center_yx.second - half;
    if (y0 < 0 || x0 < 0 || y0 + patch > ref.h || x0 + patch > ref.w)
        fail(ErrorCode::data, "patch out of bounds at center (" +
                                  std::to_string(center_yx.first) + "," +
                                  std::to_string(center_yx.second) + ")");

    const std::size_t x_base = out.x.size();
    const std::size_t y_base = out.y.size();
    out.x.resize(x_base + static_cast<std::size_t>(out.x_sample_len()));
    out.y.resize(y_base + static_cast<std::size_t>(out.y_sample_len()));
    float* xp = out.x.data() + x_base;
    float* yp = out.y.data() + y_base;

    for (std::int64_t i = 0; i < patch; ++i)
        for (std::int64_t j = 0; j < patch; ++j) {
            const std::int64_t px = (i * patch + j);
            for (int c = 0; c < out.in_channels; ++c)
                xp[px * out.in_channels + c] =
                    static_cast<float>(window.frame(c - 6).at(y0 + i, x0 + j));
            for (int c = 0; c < out.out_channels; ++c)
                yp[px * out.out_channels + c] =
                    static_cast<float>(window.frame(c + 1).at(y0 + i, x0 + j));
        }
    out.sample_count += 1;
}

static NormStats compute_stats(const std::vector<float>& x) {
    if (x.empty()) fail(ErrorCode::data, "cannot normalize an empty dataset");
    double sum = 0;
    for (float v : x) sum += static_cast<double>(v);
    const double mean = sum / static_cast<double>(x.size());
    double ss = 0;
    for (float v : x) {
        const double d = static_cast<double>(v) - mean;
        ss += d * d;
    }
    const double stdev = std::sqrt(ss / static_cast<double>(x.size()));
    if (stdev == 0.0) fail(ErrorCode::data, "zero variance: all input values are equal");
    return NormStats{mean, stdev};
}

void apply_normalization(PatchDataset& ds, const NormStats& stats) {
    for (float& v : ds.x) v = static_cast<float>((static_cast<double>(v) - stats.mean) / stats.std);
    for (float& v : ds.y) v = static_cast<float>((static_cast<double>(v) - stats.mean) / stats.std);
    ds.norm = stats;
}

void normalize(PatchDataset& ds) {
    apply_normalization(ds, compute_stats(ds.x));
}

static constexpr std::uint16_t kDatasetVersion = 1;

void write_dataset(const std::string& path, const PatchDataset& ds) {
    BinaryWriter w(path);
    w.magic("NWC1");
    w.u16(kDatasetVersion);
    w.u64(static_cast<std::uint64_t>(ds.sample_count));
    w.u32(static_cast<std::uint32_t>(ds.patch));
    w.u32(static_cast<std::uint32_t>(ds.in_channels));
    w.u32(static_cast<std::uint32_t>(ds.out_channels));
    w.f64(ds.norm.mean);
    w.f64(ds.norm.std);
    for (float v : ds.x) w.f32(v);
    for (float v : ds.y) w.f32(v);
    w.commit();
}

PatchDataset read_dataset(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("NWC1");
    const std::uint16_t version = r.u16();
    if (version != kDatasetVersion)
        fail(ErrorCode::io, path + ": unsupported NWC1 version " + std::to_string(version));
    PatchDataset ds;
    ds.sample_count = static_cast<std::int64_t>(r.u64());
    ds.patch = r.u32();
    ds.in_channels = static_cast<int>(r.u32());
    ds.out_channels = static_cast<int>(r.u32());
    ds.norm.mean = r.f64();
    ds.norm.std = r.f64();
    if (ds.patch < 1 || ds.in_channels < 1 || ds.out_channels < 1 || ds.sample_count < 0)
        fail(ErrorCode::io, path + ": invalid NWC1 header");
    ds.x.resize(static_cast<std::size_t>(ds.sample_count * ds.x_sample_len()));
    ds.y.resize(static_cast<std::size_t>(ds.sample_count * ds.y_sample_len()));
    for (float& v : ds.x) v = r.f32();
    for (float& v : ds.y) v = r.f32();
    if (!r.at_eof())
        fail(ErrorCode::io, path + ": payload longer than header sample count implies");
    return ds;
}

ShardRange shard(std::int64_t sample_count, int workers, int rank) {
    if (workers < 1) fail(ErrorCode::data, "shard: worker count must be >= 1");
    if (rank < 0 || rank >= workers) fail(ErrorCode::data, "shard: rank out of range");
    if (workers > sample_count)
        fail(ErrorCode::data, "shard: more workers (" + std::to_string(workers) +
                                  ") than samples (" + std::to_string(sample_count) + ")");
    const std::int64_t base = sample_count / workers;
    const std::int64_t rem = sample_count % workers;
    const std::int64_t begin = rank * base + std::min<std::int64_t>(rank, rem);
    const std::int64_t len = base + (rank < rem ? 1 : 0);
    return ShardRange{begin, begin + len};
}

std::vector<std::int64_t> validation_subsample(std::int64_t test_count, double fraction,
                                               std::uint64_t seed, int rank) {
    if (test_count < 1) fail(ErrorCode::data, "validation subsample: empty test set");
    if (!(fraction > 0.0) || fraction > 1.0)
        fail(ErrorCode::data, "validation fraction must be in (0, 1]");
    const std::int64_t count = std::llround(fraction * static_cast<double>(test_count));
    std::vector<std::int64_t> pool(static_cast<std::size_t>(test_count));
    for (std::int64_t i = 0; i < test_count; ++i) pool[static_cast<std::size_t>(i)] = i;
    Rng rng(derive_seed(seed, 0x7a11da7e, static_cast<std::uint64_t>(rank)));
    // Partial Fisher-Yates: the first `count` slots become the sample.
    for (std::int64_t i = 0; i < count; ++i) {
        const std::int64_t j =
            i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(test_count - i)));
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(count));
    std::sort(pool.begin(), pool.end());
    return pool;
}

PatchDataset build_dataset(const MosaicSequence& seq, const CoverageMask& mask,
                           const DatasetGenConfig& cfg, Rng& rng) {
    if (cfg.windows < 1 || cfg.centers_per_window < 1)
        fail(ErrorCode::config, "dataset generation requires positive sample counts");
    PatchDataset ds;
    ds.patch = cfg.patch;
    const std::vector<int> times = select_window_times(seq, cfg.windows, rng);
    for (int t0 : times) {
        const SequenceWindow window = make_window(seq, t0);
        const auto centers = sample_patch_centers(window.frame(0), mask, cfg.patch,
                                                  cfg.centers_per_window, cfg.w_floor, rng);
        for (const auto& c : centers) extract_patch_pair(window, c, ds);
    }
    return ds;
}

} // namespace nowcast
