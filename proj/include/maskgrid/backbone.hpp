#pragma once

#include <span>
#include <vector>

#include "maskgrid/checkpoint.hpp"
#include "maskgrid/ops.hpp"
#include "maskgrid/rng.hpp"
#include "maskgrid/types.hpp"

namespace maskgrid {

// One tensor of shape [T, K] per codebook.
template <typename T>
struct LogitsGrid {
    int64_t frames = 0;
    std::vector<nk::Tensor<T>> per_codebook;
};

template <typename T>
using Params = NamedTensors<T>;

// Fresh parameter set: normal(0, 0.02) weights, zero biases, unit norm gains.
template <typename T>
Params<T> init_params(const ModelConfig& cfg, Rng& rng);

// Runs the transformer over [text tokens][acoustic frames] and projects the
// final hidden states at acoustic positions through the C codebook heads.
template <typename T>
LogitsGrid<T> forward(const ModelConfig& cfg, const Params<T>& params, const Sequence& seq,
                      nk::Tape<T>* tape = nullptr);

// Packed variant: each sequence becomes one attention-isolated segment with
// its own position ids. Per-sequence results match the unpacked forward.
template <typename T>
std::vector<LogitsGrid<T>> forward_packed(const ModelConfig& cfg, const Params<T>& params,
                                          std::span<const Sequence> seqs, nk::Tape<T>* tape = nullptr);

// Next-frame prediction loss over all codebooks (causal mode only): logits at
// frame t predict the tokens of frame t+1. Returns the loss sum; position
// count is (frames-1)*codebooks.
template <typename T>
nk::Tensor<T> ar_pretrain_loss(const ModelConfig& cfg, const Params<T>& params, const Sequence& seq,
                               nk::Tape<T>* tape = nullptr);

// Copies every parameter verbatim into a model of the other attention mode.
// Configs must agree on everything except attention_mode.
template <typename T>
Params<T> transfer_weights(const ModelConfig& source_cfg, const Params<T>& source,
                           const ModelConfig& target_cfg);

}  // namespace maskgrid
