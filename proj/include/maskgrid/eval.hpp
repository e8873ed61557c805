#pragma once

#include <span>
#include <string>
#include <vector>

#include "maskgrid/backbone.hpp"
#include "maskgrid/sampler.hpp"
#include "maskgrid/toylang.hpp"

namespace maskgrid {

// Mean masked NLL over full-random plans drawn from a fixed seed, so scores
// are comparable across models evaluated on the same samples.
template <typename T>
double heldout_masked_nll(const ModelConfig& cfg, const Params<T>& params,
                          std::span<const ToySample> samples, uint64_t eval_seed);

// Mean KL(oracle || model) over masked probe positions: each sample's target
// region is masked by a seeded full-random plan, the exact posterior comes
// from speaker enumeration, the model distribution from its softmax.
template <typename T>
double probe_mean_kl(const ModelConfig& cfg, const Params<T>& params, const ToySpec& spec,
                     std::span<const ToySample> samples, uint64_t eval_seed, int64_t max_positions = 500);

enum class DenoiseTokenMode { as_is, strip, force };

struct DecodeEval {
    double wer = 0.0;  // mean over samples, target region only
    double sim = 0.0;
    int64_t samples = 0;
};

// Decodes each sample's target region from its (possibly corrupted) prompt
// and scores against the clean reference. toy_sim uses the clean prompt so
// the speaker stays identifiable.
template <typename T>
DecodeEval decode_metrics(const ModelConfig& cfg, const Params<T>& params, const ToySpec& spec,
                          std::span<const ToySample> samples, const SamplerConfig& sampler_cfg,
                          DenoiseTokenMode token_mode = DenoiseTokenMode::as_is);

}  // namespace maskgrid
