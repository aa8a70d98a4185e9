#include "nowcast/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <thread>

#include "nowcast/io_util.hpp"
#include "nowcast/kernels.hpp"

namespace nowcast {

Tensor persistence_forecast(const Tensor& x) {
    if (x.shape.rank != 4 || x.shape.d[3] < 1)
        fail(ErrorCode::shape, "persistence: input must be rank 4");
    const std::int64_t B = x.shape.d[0], H = x.shape.d[1], W = x.shape.d[2], C = x.shape.d[3];
    const std::int64_t out_c = 6;
    Tensor out(Shape{B, H, W, out_c});
    const Scalar* xp = x.ptr();
    Scalar* op = out.ptr();
    const std::int64_t last = C - 1;
    for (std::int64_t i = 0; i < B * H * W; ++i) {
        const Scalar v = xp[i * C + last];
        for (std::int64_t c = 0; c < out_c; ++c) op[i * out_c + c] = v;
    }
    return out;
}

std::vector<double> mse_by_lead(const Tensor& pred, const Tensor& truth, std::int64_t crop) {
    if (pred.shape.rank != 4 || truth.shape.rank != 4)
        fail(ErrorCode::shape, "mse_by_lead: operands must be rank 4");
    if (pred.shape.d[0] != truth.shape.d[0] || pred.shape.d[3] != truth.shape.d[3])
        fail(ErrorCode::shape, "mse_by_lead: batch/channel mismatch");
    const std::int64_t S = pred.shape.d[0], C = pred.shape.d[3];
    const std::int64_t hp = pred.shape.d[1], wp = pred.shape.d[2];
    const std::int64_t ht = truth.shape.d[1], wt = truth.shape.d[2];
    if (crop > hp || crop > wp || crop > ht || crop > wt)
        fail(ErrorCode::shape, "mse_by_lead: crop exceeds operand extent");
    const std::int64_t oyp = crop_offset(hp, crop), oxp = crop_offset(wp, crop);
    const std::int64_t oyt = crop_offset(ht, crop), oxt = crop_offset(wt, crop);
    std::vector<double> acc(static_cast<std::size_t>(C), 0.0);
    for (std::int64_t s = 0; s < S; ++s)
        for (std::int64_t i = 0; i < crop; ++i) {
            const Scalar* pp = pred.ptr() + ((s * hp + i + oyp) * wp + oxp) * C;
            const Scalar* tp = truth.ptr() + ((s * ht + i + oyt) * wt + oxt) * C;
            for (std::int64_t j = 0; j < crop; ++j)
                for (std::int64_t c = 0; c < C; ++c) {
                    const double d = static_cast<double>(pp[j * C + c]) -
                                     static_cast<double>(tp[j * C + c]);
                    acc[static_cast<std::size_t>(c)] += d * d;
                }
        }
    const double denom = static_cast<double>(S * crop * crop);
    for (double& v : acc) v /= denom;
    return acc;
}

void write_lead_csv(const std::string& path, const std::vector<LeadRow>& rows) {
    BinaryWriter w(path);
    const std::string header = "lead_minutes,method,mse\n";
    w.bytes(header.data(), header.size());
    char line[160];
    for (const LeadRow& r : rows) {
        const int len = std::snprintf(line, sizeof(line), "%d,%s,%.17g\n", r.lead_minutes,
                                      r.method.c_str(), r.mse);
        w.bytes(line, static_cast<std::size_t>(len));
    }
    w.commit();
}

void HistMatchConfig::validate() const {
    if (tile_px < 8) fail(ErrorCode::config, "histmatch: tile_px must be >= 8");
    if (bins < 16) fail(ErrorCode::config, "histmatch: bins must be >= 16");
}

namespace {

struct HistGrid {
    std::int64_t h = 0, w = 0;
    std::int64_t tile = 0;
    std::int64_t ny = 0, nx = 0;
    int bins = 0;
    double lo = 0, width = 0;
    // cum[tile][bin], proportions in [0, 1]
    std::vector<std::vector<double>> cum_src, cum_ref;

    std::int64_t bin_of(double v) const {
        auto k = static_cast<std::int64_t>((v - lo) / width);
        return std::clamp<std::int64_t>(k, 0, bins - 1);
    }
};

void check_frame(const Tensor& t, const char* name) {
    if (t.shape.rank != 2)
        fail(ErrorCode::shape, std::string(name) + " must be a rank-2 frame, got " +
                                   t.shape.str());
    for (Scalar v : t.data)
        if (!std::isfinite(v))
            fail(ErrorCode::data, std::string(name) + " contains non-finite values");
}

std::vector<double> tile_cum(const Tensor& frame, const HistGrid& g, std::int64_t ty,
                             std::int64_t tx) {
    const std::int64_t y0 = ty * g.tile, y1 = std::min(g.h, y0 + g.tile);
    const std::int64_t x0 = tx * g.tile, x1 = std::min(g.w, x0 + g.tile);
    std::vector<double> hist(static_cast<std::size_t>(g.bins), 0.0);
    for (std::int64_t y = y0; y < y1; ++y)
        for (std::int64_t x = x0; x < x1; ++x)
            hist[static_cast<std::size_t>(
                g.bin_of(static_cast<double>(frame.data[static_cast<std::size_t>(y * g.w + x)])))] +=
                1.0;
    const double total = static_cast<double>((y1 - y0) * (x1 - x0));
    double run = 0;
    for (double& v : hist) {
        run += v / total;
        v = run;
    }
    hist.back() = 1.0;
    return hist;
}

HistGrid build_grid(const Tensor& forecast, const Tensor& reference,
                    const HistMatchConfig& cfg) {
    check_frame(forecast, "histmatch forecast");
    check_frame(reference, "histmatch reference");
    if (forecast.shape != reference.shape)
        fail(ErrorCode::shape, "histmatch: frames must have identical extents");
    HistGrid g;
    g.h = forecast.shape.d[0];
    g.w = forecast.shape.d[1];
    // A tile larger than the frame degenerates to a single global tile.
    g.tile = std::min<std::int64_t>(cfg.tile_px, std::max(g.h, g.w));
    g.ny = (g.h + g.tile - 1) / g.tile;
    g.nx = (g.w + g.tile - 1) / g.tile;
    g.bins = cfg.bins;

    double lo = static_cast<double>(forecast.data[0]);
    double hi = lo;
    for (Scalar v : forecast.data) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    for (Scalar v : reference.data) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    g.lo = lo;
    g.width = (hi - lo) / static_cast<double>(cfg.bins);

    if (g.width > 0) {
        g.cum_src.reserve(static_cast<std::size_t>(g.ny * g.nx));
        g.cum_ref.reserve(static_cast<std::size_t>(g.ny * g.nx));
        for (std::int64_t ty = 0; ty < g.ny; ++ty)
            for (std::int64_t tx = 0; tx < g.nx; ++tx) {
                g.cum_src.push_back(tile_cum(forecast, g, ty, tx));
                g.cum_ref.push_back(tile_cum(reference, g, ty, tx));
            }
    }
    return g;
}

double bin_center(const HistGrid& g, std::int64_t j) {
    return g.lo + (static_cast<double>(j) + 0.5) * g.width;
}

} // namespace

std::vector<std::vector<double>> histmatch_tile_luts(const Tensor& forecast,
                                                     const Tensor& reference,
                                                     const HistMatchConfig& cfg) {
    cfg.validate();
    HistGrid g = build_grid(forecast, reference, cfg);
    std::vector<std::vector<double>> luts;
    if (g.width == 0) return luts; // constant frames: no mapping to build
    for (std::int64_t t = 0; t < g.ny * g.nx; ++t) {
        const auto& cs = g.cum_src[static_cast<std::size_t>(t)];
        const auto& cr = g.cum_ref[static_cast<std::size_t>(t)];
        std::vector<double> lut(static_cast<std::size_t>(g.bins));
        for (int k = 0; k < g.bins; ++k) {
            const double u = cs[static_cast<std::size_t>(k)];
            const auto it = std::lower_bound(cr.begin(), cr.end(), u);
            const auto j = static_cast<std::int64_t>(it - cr.begin());
            lut[static_cast<std::size_t>(k)] = bin_center(g, std::min<std::int64_t>(j, g.bins - 1));
        }
        luts.push_back(std::move(lut));
    }
    return luts;
}

Tensor histogram_match_local(const Tensor& forecast, const Tensor& reference,
                             const HistMatchConfig& cfg) {
    cfg.validate();
    HistGrid g = build_grid(forecast, reference, cfg);
    Tensor out = forecast;
    if (g.width == 0) return out; // both frames constant: nothing to match

    const double half_tile = static_cast<double>(g.tile) / 2.0;
    auto axis_blend = [&](std::int64_t p, std::int64_t ntiles, std::int64_t& i0,
                          std::int64_t& i1, double& w1) {
        const double gpos = (static_cast<double>(p) - half_tile) / static_cast<double>(g.tile);
        const double f = std::floor(gpos);
        i0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(f), 0, ntiles - 1);
        i1 = std::clamp<std::int64_t>(i0 + 1, 0, ntiles - 1);
        w1 = std::clamp(gpos - f, 0.0, 1.0);
        if (gpos < 0) w1 = 0;
        if (i0 == i1) w1 = 0;
    };

    for (std::int64_t y = 0; y < g.h; ++y) {
        std::int64_t ty0, ty1;
        double wy1;
        axis_blend(y, g.ny, ty0, ty1, wy1);
        for (std::int64_t x = 0; x < g.w; ++x) {
            std::int64_t tx0, tx1;
            double wx1;
            axis_blend(x, g.nx, tx0, tx1, wx1);

            const std::int64_t tiles[4] = {ty0 * g.nx + tx0, ty0 * g.nx + tx1,
                                           ty1 * g.nx + tx0, ty1 * g.nx + tx1};
            const double weights[4] = {(1 - wy1) * (1 - wx1), (1 - wy1) * wx1,
                                       wy1 * (1 - wx1), wy1 * wx1};

            const double v = static_cast<double>(out.data[static_cast<std::size_t>(y * g.w + x)]);
            const std::int64_t k = g.bin_of(v);
            // Blend the four tiles' CDFs, then invert the blended reference
            // CDF; this is seam-free and keeps self-matching exact per bin.
            double u = 0;
            for (int t = 0; t < 4; ++t)
                u += weights[t] *
                     g.cum_src[static_cast<std::size_t>(tiles[t])][static_cast<std::size_t>(k)];
            auto blended_ref = [&](std::int64_t j) {
                double c = 0;
                for (int t = 0; t < 4; ++t)
                    c += weights[t] * g.cum_ref[static_cast<std::size_t>(tiles[t])]
                                               [static_cast<std::size_t>(j)];
                return c;
            };
            std::int64_t lo = 0, hi = g.bins - 1;
            while (lo < hi) {
                const std::int64_t mid = (lo + hi) / 2;
                if (blended_ref(mid) >= u)
                    hi = mid;
                else
                    lo = mid + 1;
            }
            out.data[static_cast<std::size_t>(y * g.w + x)] =
                static_cast<Scalar>(bin_center(g, lo));
        }
    }
    return out;
}

std::int64_t choose_tile_extent(const ModelConfig& cfg, std::int64_t grid, std::int64_t want) {
    const std::int64_t a = cfg.alignment();
    auto valid = [&](std::int64_t t) {
        if (t < 1 || t > grid) return false;
        try {
            infer_shapes(cfg, t, t);
            return true;
        } catch (const Error&) {
            return false;
        }
    };
    std::int64_t t = std::min(grid, want);
    t -= (t - grid % a + a * 1000000) % a; // largest t <= want with t == grid (mod a)
    for (; t >= a; t -= a)
        if (valid(t)) return t;
    for (t = std::min(grid, want); t <= grid; t += a)
        if (valid(t)) return t;
    fail(ErrorCode::shape, "no valid tile extent for grid " + std::to_string(grid));
}

namespace {

std::string nearest_valid_sizes(const ModelConfig& cfg, std::int64_t h) {
    std::string found;
    int count = 0;
    for (std::int64_t d = 1; d <= 64 && count < 2; ++d)
        for (std::int64_t cand : {h - d, h + d}) {
            if (cand < 1) continue;
            try {
                infer_shapes(cfg, cand, cand);
                found += (count ? ", " : "") + std::to_string(cand);
                ++count;
                if (count >= 2) break;
            } catch (const Error&) {
            }
        }
    return found.empty() ? "none within 64 px" : found;
}

} // namespace

InferResult infer_grid(const NowcastModel& model, const Tensor& frames, const NormStats& norm,
                       int workers, std::int64_t tile_px) {
    if (frames.shape.rank != 4 || frames.shape.d[0] != 1 ||
        frames.shape.d[3] != model.config.input_frames)
        fail(ErrorCode::shape, "infer_grid: input must be [1,H,W," +
                                   std::to_string(model.config.input_frames) + "]");
    const std::int64_t H = frames.shape.d[1], W = frames.shape.d[2];
    ShapePlan plan;
    try {
        plan = infer_shapes(model.config, H, W);
    } catch (const Error&) {
        fail(ErrorCode::shape,
             "infer_grid: grid " + std::to_string(H) + "x" + std::to_string(W) +
                 " is not a valid input size; nearest valid sizes: " +
                 nearest_valid_sizes(model.config, H));
    }

    const auto t0 = std::chrono::steady_clock::now();
    Tensor xn(frames.shape);
    for (std::size_t i = 0; i < frames.data.size(); ++i)
        xn.data[i] = static_cast<Scalar>(
            normalize_value(static_cast<double>(frames.data[i]), norm));

    const auto [out_h, out_w] = plan.finest();
    Tensor canvas(Shape{1, out_h, out_w, model.config.output_frames});

    if (tile_px <= 0) {
        GraphBundle bundle = build_graph(model.config, H, W, false);
        Workspace ws(bundle.graph);
        ws.bind(bundle.input_x, std::move(xn));
        ws.forward(model.params, {bundle.heads.back()});
        canvas = ws.value(bundle.heads.back());
    } else {
        const std::int64_t a = model.config.alignment();
        const std::int64_t th = choose_tile_extent(model.config, H, tile_px);
        const std::int64_t tw = choose_tile_extent(model.config, W, tile_px);
        const ShapePlan tile_plan = infer_shapes(model.config, th, tw);
        const auto [tile_oh, tile_ow] = tile_plan.finest();

        auto offsets = [&](std::int64_t grid, std::int64_t tile, std::int64_t out_tile) {
            std::vector<std::int64_t> offs;
            const std::int64_t step = std::max<std::int64_t>(a, out_tile - out_tile % a);
            for (std::int64_t o = 0;; o += step) {
                offs.push_back(std::min(o, grid - tile));
                if (offs.back() == grid - tile) break;
            }
            return offs;
        };
        const auto oys = offsets(H, th, tile_oh);
        const auto oxs = offsets(W, tw, tile_ow);

        struct Job {
            std::int64_t oy, ox;       // input/canvas offset of this tile
            std::int64_t y0, y1, x0, x1; // owned canvas region
        };
        std::vector<Job> jobs;
        for (std::size_t ky = 0; ky < oys.size(); ++ky)
            for (std::size_t kx = 0; kx < oxs.size(); ++kx) {
                Job j;
                j.oy = oys[ky];
                j.ox = oxs[kx];
                j.y0 = oys[ky];
                j.y1 = ky + 1 < oys.size() ? oys[ky + 1] : out_h;
                j.x0 = oxs[kx];
                j.x1 = kx + 1 < oxs.size() ? oxs[kx + 1] : out_w;
                jobs.push_back(j);
            }

        GraphBundle tile_bundle = build_graph(model.config, th, tw, false);
        const int pool = std::max(1, workers);
        auto run_jobs = [&](int worker) {
            Workspace ws(tile_bundle.graph);
            for (std::size_t jid = static_cast<std::size_t>(worker); jid < jobs.size();
                 jid += static_cast<std::size_t>(pool)) {
                const Job& job = jobs[jid];
                Tensor tile(Shape{1, th, tw, model.config.input_frames});
                const std::int64_t C = model.config.input_frames;
                for (std::int64_t y = 0; y < th; ++y) {
                    const Scalar* src = xn.ptr() + (((job.oy + y) * W) + job.ox) * C;
                    Scalar* dst = tile.ptr() + (y * tw) * C;
                    for (std::int64_t k = 0; k < tw * C; ++k) dst[k] = src[k];
                }
                ws.bind(tile_bundle.input_x, std::move(tile));
                ws.forward(model.params, {tile_bundle.heads.back()});
                const Tensor& o = ws.value(tile_bundle.heads.back());
                const std::int64_t OC = model.config.output_frames;
                for (std::int64_t y = job.y0; y < job.y1; ++y) {
                    const Scalar* src = o.ptr() + ((y - job.oy) * tile_ow + (job.x0 - job.ox)) * OC;
                    Scalar* dst = canvas.ptr() + (y * out_w + job.x0) * OC;
                    for (std::int64_t k = 0; k < (job.x1 - job.x0) * OC; ++k) dst[k] = src[k];
                }
            }
        };
        if (pool == 1) {
            run_jobs(0);
        } else {
            std::vector<std::thread> threads;
            for (int t = 0; t < pool; ++t) threads.emplace_back(run_jobs, t);
            for (auto& t : threads) t.join();
        }
    }

    for (Scalar& v : canvas.data)
        v = static_cast<Scalar>(denormalize_value(static_cast<double>(v), norm));
    InferResult result;
    result.forecast = std::move(canvas);
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

std::vector<SpeedupRow> speedup_table(std::span<const std::pair<int, double>> times) {
    if (times.empty() || times[0].first != 1)
        fail(ErrorCode::data, "speedup table requires a measurement at N = 1 first");
    for (std::size_t i = 1; i < times.size(); ++i)
        if (times[i].first <= times[i - 1].first)
            fail(ErrorCode::data, "speedup table requires strictly increasing worker counts");
    for (const auto& [n, t] : times)
        if (!(t > 0)) fail(ErrorCode::data, "speedup table requires positive times");

    const double t1 = times[0].second;
    std::vector<SpeedupRow> rows;
    for (std::size_t i = 0; i < times.size(); ++i) {
        SpeedupRow r;
        r.workers = times[i].first;
        r.t_seconds = times[i].second;
        r.speedup = t1 / r.t_seconds;
        if (i > 0) {
            r.rel_speedup = times[i - 1].second / r.t_seconds;
            r.has_rel = true;
        }
        rows.push_back(r);
    }
    return rows;
}

void write_speedup_csv(const std::string& path, const std::vector<SpeedupRow>& rows) {
    BinaryWriter w(path);
    const std::string header = "N,T_seconds,S,R\n";
    w.bytes(header.data(), header.size());
    char line[160];
    for (const SpeedupRow& r : rows) {
        int len;
        if (r.has_rel)
            len = std::snprintf(line, sizeof(line), "%d,%.6f,%.17g,%.17g\n", r.workers,
                                r.t_seconds, r.speedup, r.rel_speedup);
        else
            len = std::snprintf(line, sizeof(line), "%d,%.6f,%.17g,\n", r.workers, r.t_seconds,
                                r.speedup);
        w.bytes(line, static_cast<std::size_t>(len));
    }
    w.commit();
}

ScalingResult benchmark_scaling(const ModelConfig& model_cfg, std::uint64_t model_seed,
                                const PatchDataset& train_ds, const PatchDataset& test_ds,
                                const TrainConfig& base, std::span<const int> worker_counts) {
    if (worker_counts.empty() || worker_counts[0] != 1)
        fail(ErrorCode::config, "benchmark_scaling: worker counts must start at 1");
    ScalingResult result;
    std::vector<std::pair<int, double>> times;
    for (int n_workers : worker_counts) {
        NowcastModel model = build_model(model_cfg, model_seed);
        TrainConfig cfg = base;
        cfg.workers = n_workers;
        const TrainingReport report = train(model, train_ds, test_ds, cfg);
        times.push_back({n_workers, report.total_wall_seconds});
        result.runs.push_back({n_workers, report.total_wall_seconds, report.min_val_loss});
    }
    result.table = speedup_table(times);
    return result;
}

std::vector<BatchSweepRow> batch_size_sweep(const ModelConfig& model_cfg,
                                            std::uint64_t model_seed,
                                            const PatchDataset& train_ds,
                                            const PatchDataset& test_ds,
                                            const TrainConfig& base,
                                            std::span<const int> sizes) {
    std::vector<BatchSweepRow> rows;
    for (int n : sizes) {
        BatchSweepRow row;
        row.batch = n;
        const std::int64_t min_shard = train_ds.sample_count / base.workers;
        if (n < 1 || n > min_shard) {
            row.skipped = true;
            rows.push_back(row);
            continue;
        }
        NowcastModel model = build_model(model_cfg, model_seed);
        TrainConfig cfg = base;
        cfg.batch_per_worker = n;
        const TrainingReport report = train(model, train_ds, test_ds, cfg);
        row.t_seconds = report.total_wall_seconds;
        row.min_val_loss = report.min_val_loss;
        rows.push_back(row);
    }
    return rows;
}

void write_batch_sweep_csv(const std::string& path, const std::vector<BatchSweepRow>& rows) {
    BinaryWriter w(path);
    const std::string header = "batch,T_seconds,min_val_loss\n";
    w.bytes(header.data(), header.size());
    char line[160];
    for (const BatchSweepRow& r : rows) {
        if (r.skipped) continue;
        const int len = std::snprintf(line, sizeof(line), "%d,%.6f,%.17g\n", r.batch,
                                      r.t_seconds, r.min_val_loss);
        w.bytes(line, static_cast<std::size_t>(len));
    }
    w.commit();
}

} // namespace nowcast
