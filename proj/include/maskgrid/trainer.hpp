#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "maskgrid/backbone.hpp"
#include "maskgrid/masking.hpp"
#include "maskgrid/rng.hpp"

namespace maskgrid {

enum class Precision { f32, f64 };

std::string to_string(Precision p);
Precision precision_from_string(const std::string& s);

struct TrainConfig {
    double peak_lr = 1e-4;
    int64_t total_updates = 1000;
    double warmup_fraction = 0.03;
    int64_t batch_tokens = 2048;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double cond_dropout_p = 0.1;
    uint64_t seed = 0;
    Precision precision = Precision::f32;
    MaskStrategy strategy = MaskStrategy::full_random;
    double grad_clip = 0.0;           // global-norm clip, 0 disables
    bool sum_objective = false;       // optimize the raw sum instead of the mean
    int64_t checkpoint_interval = 0;  // 0: final checkpoint only
    int threads = 0;                  // 0: MASKGRID_THREADS / hardware

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

// Linear ramp to peak over the warmup span, cosine decay to zero after.
double lr_at(int64_t step, const TrainConfig& cfg);

template <typename T>
struct TrainState {
    int64_t step = 0;
    ModelConfig model;
    Params<T> params;
    Params<T> adam_m;
    Params<T> adam_v;
    Rng rng;

    static TrainState init(const ModelConfig& cfg, uint64_t seed);
    // Fresh optimizer state around an existing parameter set (warm starts).
    static TrainState from_params(const ModelConfig& cfg, Params<T> params, uint64_t seed);
};

template <typename T>
void save_train_state(const std::string& prefix, const TrainState<T>& state);

template <typename T>
TrainState<T> load_train_state(const std::string& prefix);

struct StepMetrics {
    int64_t step = 0;  // 0-based index of the executed update
    double loss_sum = 0.0;
    double loss_mean = 0.0;
    double lr = 0.0;
    int64_t masked_count = 0;

    std::string to_jsonl() const;
};

// One AdamW update with bias correction. grads align with the param entries
// and are multiplied by grad_scale on the way in; t_step is 1-based.
template <typename T>
void adamw_apply(Params<T>& params, Params<T>& adam_m, Params<T>& adam_v,
                 std::span<const std::vector<T>> grads, double grad_scale, double lr,
                 const TrainConfig& cfg, int64_t t_step);

// A sample with its masking and condition-dropout decisions already drawn.
struct PlannedSample {
    const Sequence* seq = nullptr;
    MaskPlan plan;
    bool drop_condition = false;
};

// One AdamW update over a batch: per-sample plans and dropout are drawn from
// the state RNG (one child stream per sample, dropout draw first), then the
// planned step runs. Deterministic for a fixed thread count.
template <typename T>
StepMetrics train_step(TrainState<T>& state, const TrainConfig& cfg, const StrategySpec& strategy,
                       std::span<const Sequence> batch);

template <typename T>
StepMetrics train_step_planned(TrainState<T>& state, const TrainConfig& cfg,
                               std::span<const PlannedSample> batch);

// Next-frame objective for the causal warm-start phase.
template <typename T>
StepMetrics ar_train_step(TrainState<T>& state, const TrainConfig& cfg, std::span<const Sequence> batch);

enum class Objective { masked, ar_next_frame };

template <typename T>
struct TrainHooks {
    std::function<void(const StepMetrics&)> on_metrics;
    std::function<void(const TrainState<T>&)> on_checkpoint;  // every checkpoint_interval updates
};

// Runs cfg.total_updates updates over epochs of the given sequences: each
// epoch shuffles (seeded by epoch index), packs to the token budget, and
// feeds the packed batches through train_step.
template <typename T>
void run_training(TrainState<T>& state, const TrainConfig& cfg, const StrategySpec& strategy,
                  std::span<const Sequence> sequences, const TrainHooks<T>& hooks = {},
                  Objective objective = Objective::masked);

}  // namespace maskgrid
