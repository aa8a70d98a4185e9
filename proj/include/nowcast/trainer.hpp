#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nowcast/model.hpp"
#include "nowcast/pipeline.hpp"

namespace nowcast {

enum class LrPolicy { scale_up, scale_down, none };

struct TrainConfig {
    int workers = 1;          // N
    int batch_per_worker = 1; // n
    double eta = 0.0002;      // base learning rate
    LrPolicy lr_policy = LrPolicy::scale_up;
    int warmup_epochs = 5;
    int epochs = 100;
    double momentum = 0.0; // 0 = plain SGD; the N-vs-1 equivalence holds for plain SGD
    std::uint64_t seed = 0;
    bool shuffle = true;
    double val_fraction = 0.3;
    int start_epoch = 0; // set when resuming from a checkpoint
    bool record_replica_hashes = false;

    void validate() const;
    std::uint64_t hash() const;
};

// Linear warmup from eta at epoch 0 to the policy target at `warmup_epochs`,
// constant afterward. Target: eta*N (scale_up), eta/N (scale_down), or eta.
double lr_at(int epoch, const TrainConfig& cfg);

// (sum_i g_i) / (n*N), reduced in rank order 0..N-1 so the floating-point
// result is deterministic. Each g_i must be the unnormalized sum of per-sample
// gradients over a batch of exactly n samples.
GradientSet allreduce_average(std::span<const GradientSet> sums,
                              std::span<const std::int64_t> batch_counts, int n);

// omega' = omega - lr * g. Aborts with a diagnostic naming the parameter if
// the gradient is non-finite.
void sgd_step(ParameterSet& params, const GradientSet& grad, double lr);
// v' = mu*v + g; omega' = omega - lr*v'. Velocity must match the param order.
void sgd_momentum_step(ParameterSet& params, GradientSet& velocity, const GradientSet& grad,
                       double lr, double mu);

enum class Phase { train, val };

struct MetricsRecord {
    int epoch = 0;
    int rank = 0;
    Phase phase = Phase::train;
    double loss = 0;
    double lr = 0;
    double wall_seconds = 0;
};

struct TrainingReport {
    std::vector<MetricsRecord> records;
    double total_wall_seconds = 0;
    double min_val_loss = 0;
    TrainConfig config;
    // step_hashes[step][rank]: replica parameter hash after each optimizer
    // step, recorded when config.record_replica_hashes is set.
    std::vector<std::vector<std::uint64_t>> step_hashes;
};

// Synchronous data-parallel training. N worker threads each own a shard, a
// workspace and a full parameter replica; one barrier per step performs the
// rank-ordered gradient average, then every worker applies the identical
// update, so replicas stay bit-identical. model.params receives the final
// weights.
TrainingReport train(NowcastModel& model, const PatchDataset& train_ds,
                     const PatchDataset& test_ds, const TrainConfig& cfg);

struct TrainerState {
    int next_epoch = 0;
    ParameterSet params;
};

// "NWC-CKPT1" checkpoint: config hashes, seed, next epoch, and the full
// parameter payload. Restore validates both hashes, so resuming with a
// different worker count or model is rejected.
void save_checkpoint(const std::string& path, const NowcastModel& model,
                     const TrainConfig& cfg, int next_epoch);
TrainerState load_checkpoint(const std::string& path, const ModelConfig& model_cfg,
                             const TrainConfig& cfg);

// Header: epoch,rank,phase,loss,lr,wall_seconds
void write_metrics_csv(const std::string& path, const TrainingReport& report);

} // namespace nowcast
