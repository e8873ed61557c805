#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskgrid/backbone.hpp"
#include "maskgrid/rng.hpp"
#include "maskgrid/types.hpp"

namespace maskgrid {

// Cumulative reveal fractions r_n = tau*(n/N) / (1 + (tau-1)*(n/N)) with
// integer per-step counts from cumulative rounding, so counts always sum to
// the total masked-position count.
struct UnmaskSchedule {
    int32_t steps = 32;
    double tau = 0.1;
    std::vector<double> r;        // r_1..r_N, strictly increasing, r_N == 1
    std::vector<int64_t> counts;  // positions revealed per step
    int64_t total = 0;
};

UnmaskSchedule build_schedule(int32_t steps, double tau, int64_t total_masked);

struct SamplerConfig {
    int32_t steps = 32;
    double tau = 0.1;
    double temperature = 5.0;
    double guidance_scale = 2.0;
    double layer_penalty = 0.5;
    uint64_t seed = 0;

    void validate() const;
    std::string to_json() const;
    static SamplerConfig from_json(const std::string& text);
};

// Script-dependent character weights for duration estimation.
struct DurationWeights {
    double cjk = 1.0;
    double latin = 0.4;
    double digit = 0.6;
    double space_punct = 0.1;
};

enum class CharClass { cjk, latin, digit, space_punct };

CharClass classify_codepoint(uint32_t cp);

// Sum of per-character weights over a UTF-8 string.
double text_weight(const std::string& utf8, const DurationWeights& weights);

struct DurationEstimate {
    double duration = 0.0;  // same unit as the prompt duration
    int64_t frames = 1;     // duration * frame_rate, rounded half up, min 1
};

// D_target = D_prompt * W_target / W_prompt.
DurationEstimate estimate_duration(const std::string& prompt_text, const std::string& target_text,
                                   double prompt_duration, const DurationWeights& weights,
                                   double frame_rate);

// Weight-1-per-token variant used by the toy pipeline.
DurationEstimate estimate_duration_tokens(int64_t prompt_tokens, int64_t target_tokens,
                                          double prompt_duration, double frame_rate);

// Per-position reveal record for tests and debugging.
struct DecodeTrace {
    std::vector<int32_t> reveal_step;  // [t * C + c] -> step index that fixed it
};

// Iterative unmasking: all target positions start at [M]; each step runs the
// conditional forward (and the null-text forward when the guidance scale is
// not 1), combines log-softmax outputs as u + s*(c - u), scores still-masked
// positions by max combined log-score minus the layer penalty, reveals the
// scheduled count via Gumbel-top-k at the configured temperature, and fixes
// each revealed position to the argmax token.
template <typename T>
TokenGrid decode(const ModelConfig& cfg, const Params<T>& params, const std::vector<int32_t>& text,
                 const TokenGrid& prompt_grid, int64_t target_frames, const SamplerConfig& sampler_cfg,
                 const UnmaskSchedule* schedule_override = nullptr, DecodeTrace* trace = nullptr);

// Batch decode with per-sequence RNG streams; all sequences advance together
// through packed forwards. Element 0 is bitwise identical to a single decode
// with the same config.
template <typename T>
std::vector<TokenGrid> decode_batch(const ModelConfig& cfg, const Params<T>& params,
                                    std::span<const std::vector<int32_t>> texts,
                                    std::span<const TokenGrid> prompt_grids,
                                    std::span<const int64_t> target_frames, const SamplerConfig& sampler_cfg);

struct BenchRow {
    int32_t batch = 1;
    int32_t steps = 32;
    double wall_ms_per_frame = 0.0;
};

// Wall-clock per generated frame for each (batch, steps) cell, median of
// `runs` timed repetitions after one warmup.
template <typename T>
std::vector<BenchRow> bench_decode(const ModelConfig& cfg, const Params<T>& params,
                                   const std::vector<int32_t>& text, const TokenGrid& prompt_grid,
                                   int64_t target_frames, std::span<const int32_t> batch_sizes,
                                   std::span<const int32_t> step_counts, SamplerConfig sampler_cfg,
                                   int32_t runs = 5);

std::string bench_csv(std::span<const BenchRow> rows);

// CFG combination in log-softmax space: g = u + s * (c - u); at s == 1 the
// conditional scores pass through untouched.
void cfg_combine(std::span<const double> conditional, std::span<const double> unconditional, double scale,
                 std::span<double> out);

}  // namespace maskgrid
