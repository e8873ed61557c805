#pragma once

#include <span>
#include <string>
#include <vector>

#include "maskgrid/eval.hpp"
#include "maskgrid/trainer.hpp"

namespace maskgrid {

enum class InitScheme { random, ar_warmstart };

std::string to_string(InitScheme s);
InitScheme init_scheme_from_string(const std::string& s);

struct AblationCell {
    std::string name;
    StrategySpec strategy = StrategySpec::preset(MaskStrategy::full_random);
    InitScheme init = InitScheme::random;
    int64_t ar_updates = 0;  // causal pretraining budget for warm starts
};

struct AblationConfig {
    ModelConfig model;
    TrainConfig train;     // per-cell masked-training budget
    TrainConfig ar_train;  // causal pretraining settings (total_updates overridden per cell)
    std::vector<uint64_t> seeds{1, 2, 3};
    int64_t eval_every = 0;  // additionally evaluate at this update interval
    int64_t eval_samples = 64;
    SamplerConfig sampler;
    uint64_t eval_seed = 1234;
};

struct AblationRow {
    std::string cell;
    uint64_t seed = 0;
    int64_t update = 0;
    double heldout_nll = 0.0;
    double wer = 0.0;
    double sim = 0.0;

    std::string to_jsonl() const;
};

// Trains every (cell, seed) to the fixed update budget and records held-out
// masked NLL plus decode metrics, at eval_every intervals and at the end.
std::vector<AblationRow> run_ablation(const AblationConfig& cfg, std::span<const AblationCell> cells,
                                      const ToySpec& spec, std::span<const ToySample> train_samples,
                                      std::span<const ToySample> eval_samples);

std::string ablation_jsonl(std::span<const AblationRow> rows);

}  // namespace maskgrid
