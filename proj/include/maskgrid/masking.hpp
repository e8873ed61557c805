#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "maskgrid/backbone.hpp"
#include "maskgrid/rng.hpp"
#include "maskgrid/types.hpp"

namespace maskgrid {

enum class MaskStrategy { full_random, soundstorm, maskgct };
enum class LayerLaw { uniform, linear_decreasing };
enum class RatioLaw { uniform, cosine };

std::string to_string(MaskStrategy s);
MaskStrategy mask_strategy_from_string(const std::string& s);

struct StrategySpec {
    MaskStrategy id = MaskStrategy::full_random;
    LayerLaw layer_law = LayerLaw::uniform;
    RatioLaw ratio_law = RatioLaw::uniform;

    // soundstorm: uniform layers, cosine ratio; maskgct: linear-decreasing
    // layers, cosine ratio.
    static StrategySpec preset(MaskStrategy s);

    // Normalized probability of picking each codebook layer.
    std::vector<double> layer_probs(int codebooks) const;

    double draw_ratio(Rng& rng) const;
};

using GridPos = std::pair<int32_t, int32_t>;  // (t, c)

struct MaskPlan {
    std::vector<GridPos> masked;          // replaced by [M] at the input
    std::vector<GridPos> loss_positions;  // subset contributing to the loss
    double ratio = 0.0;                   // per-instance mask ratio p_t
    MaskStrategy strategy = MaskStrategy::full_random;

    std::string to_json() const;
    static MaskPlan from_json(const std::string& text);
};

// Bernoulli(p_t) over every (t, c) in the target region, p_t ~ U(0,1) drawn
// once per instance; all-empty draws are redrawn from scratch. A forced_ratio
// in [0,1] pins p_t instead of drawing it (ratio 0 cannot produce a plan).
MaskPlan plan_full_random(int64_t frames, int32_t codebooks, int64_t prompt_len, Rng& rng,
                          double forced_ratio = -1.0);

// Per-layer baseline: one layer carries the loss; higher layers are masked
// but excluded from it.
MaskPlan plan_per_layer(const StrategySpec& spec, int64_t frames, int32_t codebooks, int64_t prompt_len,
                        Rng& rng);

MaskPlan plan_masking(const StrategySpec& spec, int64_t frames, int32_t codebooks, int64_t prompt_len,
                      Rng& rng);

// Returns a copy of the sequence with plan.masked replaced by the mask id.
Sequence apply_mask(const Sequence& seq, const MaskPlan& plan, const ModelConfig& cfg);

template <typename T>
struct MaskedLoss {
    nk::Tensor<T> sum;       // Eq-style total over loss positions
    int64_t count = 0;       // |loss_positions|
    double mean() const { return static_cast<double>(sum.item()) / static_cast<double>(count); }
};

// Masks the grid, runs the model, and sums -log P(truth) over loss positions.
template <typename T>
MaskedLoss<T> apply_and_loss(const ModelConfig& cfg, const Params<T>& params, const Sequence& seq,
                             const MaskPlan& plan, nk::Tape<T>* tape = nullptr);

// Same, against an already-computed logits grid for this sequence.
template <typename T>
MaskedLoss<T> masked_loss_from_logits(const ModelConfig& cfg, const LogitsGrid<T>& logits,
                                      const Sequence& clean_seq, const MaskPlan& plan,
                                      nk::Tape<T>* tape = nullptr);

}  // namespace maskgrid
