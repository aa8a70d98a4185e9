#include "nowcast/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <barrier>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <mutex>
#include <thread>

#include "nowcast/io_util.hpp"

namespace nowcast {

void TrainConfig::validate() const {
    if (workers < 1) fail(ErrorCode::config, "train: workers must be >= 1");
    if (batch_per_worker < 1) fail(ErrorCode::config, "train: batch size must be >= 1");
    if (!(eta > 0)) fail(ErrorCode::config, "train: eta must be > 0");
    if (warmup_epochs < 0 || warmup_epochs > epochs)
        fail(ErrorCode::config, "train: warmup_epochs must be in [0, epochs]");
    if (epochs < 0) fail(ErrorCode::config, "train: epochs must be >= 0");
    if (momentum < 0 || momentum >= 1) fail(ErrorCode::config, "train: momentum must be in [0, 1)");
    if (!(val_fraction > 0) || val_fraction > 1)
        fail(ErrorCode::config, "train: val_fraction must be in (0, 1]");
    if (start_epoch < 0 || start_epoch > epochs)
        fail(ErrorCode::config, "train: start_epoch out of range");
}

std::uint64_t TrainConfig::hash() const {
    auto mix = [](std::uint64_t h, std::uint64_t v) { return fnv1a(&v, sizeof(v), h); };
    auto bits = [](double d) {
        std::uint64_t u;
        std::memcpy(&u, &d, 8);
        return u;
    };
    std::uint64_t h = 0xcbf29ce484222325ull;
    h = mix(h, static_cast<std::uint64_t>(workers));
    h = mix(h, static_cast<std::uint64_t>(batch_per_worker));
    h = mix(h, bits(eta));
    h = mix(h, static_cast<std::uint64_t>(lr_policy));
    h = mix(h, static_cast<std::uint64_t>(warmup_epochs));
    h = mix(h, static_cast<std::uint64_t>(epochs));
    h = mix(h, bits(momentum));
    h = mix(h, seed);
    h = mix(h, shuffle ? 1 : 0);
    h = mix(h, bits(val_fraction));
    return h;
}

double lr_at(int epoch, const TrainConfig& cfg) {
    const double n = static_cast<double>(cfg.workers);
    double target = cfg.eta;
    switch (cfg.lr_policy) {
    case LrPolicy::scale_up: target = cfg.eta * n; break;
    case LrPolicy::scale_down: target = cfg.eta / n; break;
    case LrPolicy::none: break;
    }
    if (epoch < cfg.warmup_epochs)
        return cfg.eta + (static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs)) *
                             (target - cfg.eta);
    return target;
}

GradientSet allreduce_average(std::span<const GradientSet> sums,
                              std::span<const std::int64_t> batch_counts, int n) {
    if (sums.empty()) fail(ErrorCode::data, "allreduce: no gradient sets");
    if (batch_counts.size() != sums.size())
        fail(ErrorCode::data, "allreduce: batch count list does not match worker count");
    for (std::size_t r = 0; r < batch_counts.size(); ++r)
        if (batch_counts[r] != n)
            fail(ErrorCode::data, "allreduce: worker " + std::to_string(r) + " supplied " +
                                      std::to_string(batch_counts[r]) +
                                      " samples, expected n = " + std::to_string(n));
    const int workers = static_cast<int>(sums.size());
    GradientSet out;
    out.grads.reserve(sums[0].grads.size());
    for (const Tensor& t : sums[0].grads) out.grads.emplace_back(t.shape);
    for (int r = 0; r < workers; ++r) {
        if (!out.same_structure(sums[static_cast<std::size_t>(r)]))
            fail(ErrorCode::data, "allreduce: gradient structure mismatch at rank " +
                                      std::to_string(r));
        out.accumulate(sums[static_cast<std::size_t>(r)]);
    }
    out.scale(Scalar(1) / static_cast<Scalar>(static_cast<std::int64_t>(n) * workers));
    return out;
}

static void check_finite(const ParameterSet& params, const GradientSet& grad) {
    for (std::size_t i = 0; i < grad.grads.size(); ++i)
        for (Scalar v : grad.grads[i].data)
            if (!std::isfinite(v))
                fail(ErrorCode::numeric, "non-finite gradient for parameter " +
                                             params.entries[i].name);
}

void sgd_step(ParameterSet& params, const GradientSet& grad, double lr) {
    if (params.entries.size() != grad.grads.size())
        fail(ErrorCode::data, "sgd_step: gradient/parameter structure mismatch");
    check_finite(params, grad);
    for (std::size_t i = 0; i < grad.grads.size(); ++i) {
        Scalar* w = params.entries[i].value.ptr();
        const Scalar* g = grad.grads[i].ptr();
        const std::int64_t m = grad.grads[i].numel();
        for (std::int64_t k = 0; k < m; ++k) w[k] -= static_cast<Scalar>(lr) * g[k];
    }
}

void sgd_momentum_step(ParameterSet& params, GradientSet& velocity, const GradientSet& grad,
                       double lr, double mu) {
    if (!velocity.same_structure(grad))
        fail(ErrorCode::data, "sgd_momentum_step: velocity structure mismatch");
    check_finite(params, grad);
    for (std::size_t i = 0; i < grad.grads.size(); ++i) {
        Scalar* w = params.entries[i].value.ptr();
        Scalar* v = velocity.grads[i].ptr();
        const Scalar* g = grad.grads[i].ptr();
        const std::int64_t m = grad.grads[i].numel();
        for (std::int64_t k = 0; k < m; ++k) {
            v[k] = static_cast<Scalar>(mu) * v[k] + g[k];
            w[k] -= static_cast<Scalar>(lr) * v[k];
        }
    }
}

namespace {

struct AbortState {
    std::atomic<bool> flag{false};
    std::mutex mu;
    ErrorCode code = ErrorCode::numeric;
    std::string message;

    void raise(ErrorCode c, const std::string& msg) {
        std::lock_guard<std::mutex> lock(mu);
        if (!flag.load()) {
            code = c;
            message = msg;
            flag.store(true);
        }
    }
};

} // namespace

TrainingReport train(NowcastModel& model, const PatchDataset& train_ds,
                     const PatchDataset& test_ds, const TrainConfig& cfg) {
    cfg.validate();
    if (train_ds.in_channels != model.config.input_frames ||
        train_ds.out_channels != model.config.output_frames)
        fail(ErrorCode::data, "train: dataset channel counts do not match model");

    TrainingReport report;
    report.config = cfg;
    report.min_val_loss = std::numeric_limits<double>::quiet_NaN();
    if (cfg.epochs == cfg.start_epoch) return report;

    const int N = cfg.workers;
    const int n = cfg.batch_per_worker;

    std::vector<ShardRange> shards;
    std::int64_t min_shard = train_ds.sample_count;
    for (int r = 0; r < N; ++r) {
        shards.push_back(shard(train_ds.sample_count, N, r));
        min_shard = std::min(min_shard, shards.back().size());
    }
    const std::int64_t steps_per_epoch = min_shard / n;
    if (steps_per_epoch < 1)
        fail(ErrorCode::data, "train: batch size " + std::to_string(n) +
                                  " exceeds the smallest shard (" + std::to_string(min_shard) +
                                  " samples)");

    // Shared read-only graph; per-worker workspaces and parameter replicas.
    const GraphBundle bundle = build_graph(model.config, train_ds.patch, train_ds.patch, true);

    std::vector<std::vector<std::int64_t>> val_sets;
    for (int r = 0; r < N; ++r)
        val_sets.push_back(
            validation_subsample(test_ds.sample_count, cfg.val_fraction, cfg.seed, r));

    const int epoch_count = cfg.epochs - cfg.start_epoch;
    const std::int64_t total_steps = static_cast<std::int64_t>(epoch_count) * steps_per_epoch;

    std::vector<ParameterSet> replicas(static_cast<std::size_t>(N), model.params);
    std::vector<GradientSet> slots(static_cast<std::size_t>(N));
    std::vector<std::int64_t> batch_counts(static_cast<std::size_t>(N), n);
    GradientSet shared_avg;
    AbortState abort;

    if (cfg.record_replica_hashes)
        report.step_hashes.assign(static_cast<std::size_t>(total_steps),
                                  std::vector<std::uint64_t>(static_cast<std::size_t>(N), 0));

    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&t0]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    // The stop decision is latched once per phase by the barrier completion,
    // which runs between the last arrival and the releases. Workers act only
    // on the latched value: it cannot change until every worker has arrived
    // at the next barrier, so all replicas stop at the same step. Acting on
    // the raw abort flag instead would race with a faster worker raising it
    // one step ahead.
    std::atomic<bool> stop_now{false};
    auto reduce = [&]() noexcept {
        if (abort.flag.load(std::memory_order_relaxed)) {
            stop_now.store(true);
            return;
        }
        try {
            shared_avg = allreduce_average(slots, batch_counts, n);
        } catch (const Error& e) {
            abort.raise(e.code(), e.what());
            stop_now.store(true);
        } catch (const std::exception& e) {
            abort.raise(ErrorCode::numeric, e.what());
            stop_now.store(true);
        }
    };
    std::barrier sync(N, reduce);

    std::vector<std::vector<MetricsRecord>> worker_records(static_cast<std::size_t>(N));

    auto worker_main = [&](int rank) {
        try {
            ParameterSet& params = replicas[static_cast<std::size_t>(rank)];
            Workspace ws(bundle.graph);
            GradientSet gsum = GradientSet::zeros_like(params);
            GradientSet velocity = GradientSet::zeros_like(params);
            const ShardRange my_shard = shards[static_cast<std::size_t>(rank)];
            std::vector<std::int64_t> order(static_cast<std::size_t>(my_shard.size()));

            for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
                const double lr = lr_at(epoch, cfg);
                for (std::int64_t i = 0; i < my_shard.size(); ++i)
                    order[static_cast<std::size_t>(i)] = my_shard.begin + i;
                if (cfg.shuffle) {
                    Rng rng(derive_seed(cfg.seed, 0x5baff1e5, static_cast<std::uint64_t>(rank),
                                        static_cast<std::uint64_t>(epoch)));
                    for (std::int64_t i = my_shard.size() - 1; i > 0; --i) {
                        const auto j = static_cast<std::int64_t>(
                            rng.below(static_cast<std::uint64_t>(i + 1)));
                        std::swap(order[static_cast<std::size_t>(i)],
                                  order[static_cast<std::size_t>(j)]);
                    }
                }

                double loss_sum = 0;
                std::int64_t loss_count = 0;
                bool stop = false;
                for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
                    gsum.zero();
                    for (int j = 0; j < n; ++j) {
                        const std::int64_t idx = order[static_cast<std::size_t>(step * n + j)];
                        ws.bind(bundle.input_x, train_ds.sample_x(idx));
                        ws.bind(bundle.input_y, train_ds.sample_y(idx));
                        ws.forward(params, {bundle.loss});
                        const double lv = static_cast<double>(ws.value(bundle.loss).data[0]);
                        if (!std::isfinite(lv)) {
                            abort.raise(ErrorCode::numeric,
                                        "training loss diverged (non-finite) at epoch " +
                                            std::to_string(epoch) + ", rank " +
                                            std::to_string(rank));
                            break;
                        }
                        loss_sum += lv;
                        ++loss_count;
                        ws.backward(params, bundle.loss);
                        gsum.accumulate(ws.gradients());
                    }
                    slots[static_cast<std::size_t>(rank)] = gsum;
                    sync.arrive_and_wait();
                    if (stop_now.load()) {
                        stop = true;
                        break;
                    }
                    // Identical update on every replica keeps them bit-equal.
                    if (cfg.momentum > 0)
                        sgd_momentum_step(params, velocity, shared_avg, lr, cfg.momentum);
                    else
                        sgd_step(params, shared_avg, lr);
                    if (cfg.record_replica_hashes) {
                        const std::int64_t global_step =
                            static_cast<std::int64_t>(epoch - cfg.start_epoch) * steps_per_epoch +
                            step;
                        report.step_hashes[static_cast<std::size_t>(global_step)]
                                          [static_cast<std::size_t>(rank)] =
                            params.content_hash();
                    }
                }
                // Abort decisions are taken only at post-barrier points, so
                // every worker passes the same barrier count; checking the
                // flag here could skip a barrier another worker waits on.
                if (stop) break;

                worker_records[static_cast<std::size_t>(rank)].push_back(
                    {epoch, rank, Phase::train,
                     loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0, lr,
                     elapsed()});

                double val_sum = 0;
                std::int64_t val_count = 0;
                for (std::int64_t idx : val_sets[static_cast<std::size_t>(rank)]) {
                    ws.bind(bundle.input_x, test_ds.sample_x(idx));
                    ws.bind(bundle.input_y, test_ds.sample_y(idx));
                    ws.forward(params, {bundle.loss});
                    val_sum += static_cast<double>(ws.value(bundle.loss).data[0]);
                    ++val_count;
                }
                worker_records[static_cast<std::size_t>(rank)].push_back(
                    {epoch, rank, Phase::val,
                     val_count ? val_sum / static_cast<double>(val_count) : 0.0, lr, elapsed()});
            }
        } catch (const Error& e) {
            abort.raise(e.code(), e.what());
            sync.arrive_and_drop();
        } catch (const std::exception& e) {
            abort.raise(ErrorCode::numeric, e.what());
            sync.arrive_and_drop();
        }
    };

    if (N == 1) {
        worker_main(0);
    } else {
        std::vector<std::thread> threads;
        threads.reserve(static_cast<std::size_t>(N));
        for (int r = 0; r < N; ++r) threads.emplace_back(worker_main, r);
        for (auto& t : threads) t.join();
    }

    if (abort.flag.load()) throw Error(abort.code, abort.message);

    model.params = replicas[0];
    for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch)
        for (Phase phase : {Phase::train, Phase::val})
            for (int r = 0; r < N; ++r)
                for (const MetricsRecord& m : worker_records[static_cast<std::size_t>(r)])
                    if (m.epoch == epoch && m.phase == phase && m.rank == r)
                        report.records.push_back(m);

    report.total_wall_seconds = elapsed();
    double best = std::numeric_limits<double>::infinity();
    for (const MetricsRecord& m : report.records)
        if (m.phase == Phase::val) best = std::min(best, m.loss);
    report.min_val_loss = best;
    return report;
}

static constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const NowcastModel& model,
                     const TrainConfig& cfg, int next_epoch) {
    BinaryWriter w(path);
    w.magic("NWC-CKPT1");
    w.u16(kCheckpointVersion);
    w.u64(model.config.hash());
    w.u64(cfg.hash());
    w.u64(cfg.seed);
    w.u32(static_cast<std::uint32_t>(next_epoch));
    write_param_payload(w, model.params);
    w.commit();
}

TrainerState load_checkpoint(const std::string& path, const ModelConfig& model_cfg,
                             const TrainConfig& cfg) {
    BinaryReader r(path);
    r.expect_magic("NWC-CKPT1");
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion)
        fail(ErrorCode::io, path + ": unsupported checkpoint version");
    if (r.u64() != model_cfg.hash())
        fail(ErrorCode::config_hash_mismatch,
             "ConfigHashMismatch: checkpoint " + path + " was written for a different model");
    if (r.u64() != cfg.hash())
        fail(ErrorCode::config_hash_mismatch,
             "ConfigHashMismatch: checkpoint " + path +
                 " was written for a different training configuration");
    r.u64(); // seed, embedded in the config hash as well
    TrainerState state;
    state.next_epoch = static_cast<int>(r.u32());
    state.params = read_param_payload(r);
    return state;
}

void write_metrics_csv(const std::string& path, const TrainingReport& report) {
    BinaryWriter w(path);
    const std::string header = "epoch,rank,phase,loss,lr,wall_seconds\n";
    w.bytes(header.data(), header.size());
    char line[256];
    for (const MetricsRecord& m : report.records) {
        const int len = std::snprintf(line, sizeof(line), "%d,%d,%s,%.17g,%.17g,%.6f\n",
                                      m.epoch, m.rank, m.phase == Phase::train ? "train" : "val",
                                      m.loss, m.lr, m.wall_seconds);
        w.bytes(line, static_cast<std::size_t>(len));
    }
    w.commit();
}

} // namespace nowcast
