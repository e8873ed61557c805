#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "maskgrid/tensor.hpp"

namespace maskgrid::nk {

// Contiguous row range of a packed batch; attention never crosses ranges.
struct SegRange {
    int64_t begin = 0;
    int64_t end = 0;
    int64_t len() const { return end - begin; }
};

// Elementwise sum. b may have a trailing shape of a (leading-batch
// expansion), e.g. [N,D] + [D]; no other broadcasting.
template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, double s);

// [M,K] x [K,N] -> [M,N]
template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

// x [N,Din] * w [Din,Dout] + b [Dout]
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x);

// Normalizes the last axis; gamma/beta shaped [last_dim].
template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);

template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, int axis);

// Max-subtracted for stability; exp of each output slice sums to 1.
template <typename T>
Tensor<T> log_softmax(Tape<T>* tape, const Tensor<T>& x, int axis);

// table [V,D], ids in [0,V) -> [ids.size(),D]; backward scatter-adds into
// exactly the looked-up rows.
template <typename T>
Tensor<T> embedding_lookup(Tape<T>* tape, const Tensor<T>& table, std::span<const int32_t> ids);

template <typename T>
Tensor<T> concatenate(Tape<T>* tape, std::span<const Tensor<T>> parts, int axis);

template <typename T>
Tensor<T> slice(Tape<T>* tape, const Tensor<T>& x, int axis, int64_t start, int64_t len);

// No gradient; returns the flattened index grid of argmax along `axis`.
template <typename T>
std::vector<int64_t> argmax_along_axis(const Tensor<T>& x, int axis);

// -sum over selected rows of log P(target). logits [N,K], targets [N],
// row_mask [N] (nonzero = contributes). Gradient flows only through
// selected rows. Empty selection is an error.
template <typename T>
Tensor<T> cross_entropy_masked(Tape<T>* tape, const Tensor<T>& logits, std::span<const int32_t> targets,
                               std::span<const uint8_t> row_mask);

// Fused multi-head attention with rotary embedding applied to q/k inside.
// q,k,v: [N, heads*head_dim]; positions: per-row rotary position id;
// segments: block-diagonal attention ranges covering [0,N).
template <typename T>
Tensor<T> attention(Tape<T>* tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                    std::span<const int32_t> positions, std::span<const SegRange> segments, bool causal,
                    double rope_base = 10000.0);

namespace detail {
// GEMM kernels: c += a*b with the given transposes. Row-major, no aliasing.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);  // b is [N,K]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);  // a is [K,M]
}  // namespace detail

}  // namespace maskgrid::nk
