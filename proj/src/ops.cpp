#include "maskgrid/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace maskgrid::nk {

namespace detail {

// c += a*b, a [M,K], b [K,N]. Four-row register blocking over the output;
// the inner j loop vectorizes and the b row stays hot across the block.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
        T* __restrict c0 = c + (i + 0) * n;
        T* __restrict c1 = c + (i + 1) * n;
        T* __restrict c2 = c + (i + 2) * n;
        T* __restrict c3 = c + (i + 3) * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T a0 = a[(i + 0) * k + kk];
            const T a1 = a[(i + 1) * k + kk];
            const T a2 = a[(i + 2) * k + kk];
            const T a3 = a[(i + 3) * k + kk];
            const T* __restrict brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) {
                const T bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        T* __restrict ci = c + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T av = a[i * k + kk];
            const T* __restrict brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * brow[j];
        }
    }
}

// c += a*b^T, a [M,K], b [N,K]. Per-element dot products cannot vectorize
// under strict FP, so transpose b once and reuse the blocked nn kernel; the
// transpose cost amortizes over the m rows.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    std::vector<T> bt(static_cast<size_t>(k * n));
    for (int64_t j = 0; j < n; ++j)
        for (int64_t kk = 0; kk < k; ++kk) bt[static_cast<size_t>(kk * n + j)] = b[j * k + kk];
    gemm_nn(a, bt.data(), c, m, k, n);
}

// c += a^T*b, a [K,M], b [K,N] (the dW pattern: accumulate outer products).
// Four k-rows per pass so each c element sees four fused updates per sweep.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    int64_t kk = 0;
    for (; kk + 4 <= k; kk += 4) {
        const T* __restrict a0 = a + (kk + 0) * m;
        const T* __restrict a1 = a + (kk + 1) * m;
        const T* __restrict a2 = a + (kk + 2) * m;
        const T* __restrict a3 = a + (kk + 3) * m;
        const T* __restrict b0 = b + (kk + 0) * n;
        const T* __restrict b1 = b + (kk + 1) * n;
        const T* __restrict b2 = b + (kk + 2) * n;
        const T* __restrict b3 = b + (kk + 3) * n;
        for (int64_t i = 0; i < m; ++i) {
            const T v0 = a0[i], v1 = a1[i], v2 = a2[i], v3 = a3[i];
            T* __restrict ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
        }
    }
    for (; kk < k; ++kk) {
        const T* __restrict arow = a + kk * m;
        const T* __restrict brow = b + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* __restrict ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * brow[j];
        }
    }
}

template void gemm_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void gemm_nt<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_nt<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void gemm_tn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_tn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);

// Splits a shape around `axis` into [outer, axis_len, inner] strides.
struct AxisSplit {
    int64_t outer = 1;
    int64_t len = 1;
    int64_t inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
    if (axis < 0) axis += static_cast<int>(shape.size());
    if (axis < 0 || axis >= static_cast<int>(shape.size())) throw input_error("axis out of range");
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

inline void add_into(std::vector<float>& dst, const float* src, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] += src[i];
}
inline void add_into(std::vector<double>& dst, const double* src, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace detail

using detail::split_axis;

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    const bool same = a.shape == b.shape;
    const bool suffix = !same && b.rank() < a.rank() &&
                        std::equal(b.shape.begin(), b.shape.end(), a.shape.end() - b.rank());
    if (!same && !suffix)
        throw dim_error("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));

    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const int64_t n = a.numel();
    const int64_t bn = b.numel();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.mut_ptr();
    if (same) {
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    } else {
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % bn];
    }
    check_finite(out, "add");

    if (tape) {
        out.gid = tape->alloc_slot(n);
        const int64_t ag = a.gid, bg = b.gid, og = out.gid;
        tape->record([ag, bg, og, n, bn](Tape<T>& t) {
            const std::vector<T>& go = t.grad(og);
            if (ag >= 0) detail::add_into(t.grad(ag), go.data(), static_cast<size_t>(n));
            if (bg >= 0) {
                std::vector<T>& gb = t.grad(bg);
                for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i % bn)] += go[static_cast<size_t>(i)];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        throw dim_error("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const int64_t n = a.numel();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.mut_ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    check_finite(out, "mul");

    if (tape) {
        out.gid = tape->alloc_slot(n);
        const int64_t ag = a.gid, bg = b.gid, og = out.gid;
        auto da = a.data, db = b.data;
        tape->record([ag, bg, og, n, da, db](Tape<T>& t) {
            const std::vector<T>& go = t.grad(og);
            if (ag >= 0) {
                std::vector<T>& g = t.grad(ag);
                for (int64_t i = 0; i < n; ++i) g[i] += go[i] * (*db)[i];
            }
            if (bg >= 0) {
                std::vector<T>& g = t.grad(bg);
                for (int64_t i = 0; i < n; ++i) g[i] += go[i] * (*da)[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, double s) {
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const int64_t n = a.numel();
    const T* pa = a.ptr();
    T* po = out.mut_ptr();
    const T sv = static_cast<T>(s);
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * sv;
    check_finite(out, "scale");

    if (tape) {
        out.gid = tape->alloc_slot(n);
        const int64_t ag = a.gid, og = out.gid;
        tape->record([ag, og, n, sv](Tape<T>& t) {
            if (ag < 0) return;
            const std::vector<T>& go = t.grad(og);
            std::vector<T>& g = t.grad(ag);
            for (int64_t i = 0; i < n; ++i) g[i] += go[i] * sv;
        });
    }
    return out;
}

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw dim_error("matmul: expects rank-2 operands");
    if (a.dim(1) != b.dim(0))
        throw dim_error("matmul: inner extents disagree " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::gemm_nn(a.ptr(), b.ptr(), out.mut_ptr(), m, k, n);
    check_finite(out, "matmul");

    if (tape) {
        out.gid = tape->alloc_slot(out.numel());
        const int64_t ag = a.gid, bg = b.gid, og = out.gid;
        auto da = a.data, db = b.data;
        tape->record([ag, bg, og, m, k, n, da, db](Tape<T>& t) {
            const std::vector<T>& go = t.grad(og);
            if (ag >= 0) detail::gemm_nt(go.data(), db->data(), t.grad(ag).data(), m, n, k);
            if (bg >= 0) detail::gemm_tn(da->data(), go.data(), t.grad(bg).data(), k, m, n);
        });
    }
    return out;
}

template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) throw dim_error("linear: bad operand ranks");
    if (x.dim(1) != w.dim(0) || w.dim(1) != b.dim(0))
        throw dim_error("linear: extents disagree " + shape_str(x.shape) + " x " + shape_str(w.shape));
    const int64_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    T* po = out.mut_ptr();
    const T* pb = b.ptr();
    for (int64_t i = 0; i < m; ++i) std::memcpy(po + i * n, pb, sizeof(T) * static_cast<size_t>(n));
    detail::gemm_nn(x.ptr(), w.ptr(), po, m, k, n);
    check_finite(out, "linear");

    if (tape) {
        out.gid = tape->alloc_slot(out.numel());
        const int64_t xg = x.gid, wg = w.gid, bg = b.gid, og = out.gid;
        auto dx = x.data, dw = w.data;
        tape->record([xg, wg, bg, og, m, k, n, dx, dw](Tape<T>& t) {
            const std::vector<T>& go = t.grad(og);
            if (xg >= 0) detail::gemm_nt(go.data(), dw->data(), t.grad(xg).data(), m, n, k);
            if (wg >= 0) detail::gemm_tn(dx->data(), go.data(), t.grad(wg).data(), k, m, n);
            if (bg >= 0) {
                std::vector<T>& gb = t.grad(bg);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
            }
        });
    }
    return out;
}

namespace {

// 2^k * poly(frac) exponential, |rel err| < 3e-7; hot path for float gelu
inline float fast_expf(float x) {
    if (x < -87.0f) return 0.0f;
    if (x > 88.0f) return std::numeric_limits<float>::infinity();
    const float t = x * 1.4426950408889634f;
    const float fi = std::floor(t);
    const float f = t - fi;
    float p = 1.3333558146e-3f;
    p = p * f + 9.6181291076e-3f;
    p = p * f + 5.5504108664e-2f;
    p = p * f + 2.4022650696e-1f;
    p = p * f + 6.9314718056e-1f;
    p = p * f + 1.0f;
    union {
        uint32_t u;
        float fl;
    } bits;
    bits.u = static_cast<uint32_t>(static_cast<int32_t>(fi) + 127) << 23;
    return p * bits.fl;
}

inline float gelu_tanh(float z) {
    // tanh via one exp; saturates where exp would overflow anyway
    if (z > 9.0f) return 1.0f;
    if (z < -9.0f) return -1.0f;
    const float e = fast_expf(2.0f * z);
    return (e - 1.0f) / (e + 1.0f);
}

inline double gelu_tanh(double z) { return std::tanh(z); }

constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

}  // namespace

// tanh-approximation form; the backward reuses the saved tanh values.
template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    const int64_t n = x.numel();
    const T* px = x.ptr();
    T* po = out.mut_ptr();
    auto th = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
    T* pt = th->data();
    for (int64_t i = 0; i < n; ++i) {
        const T v = px[i];
        const T z = static_cast<T>(kGeluC0) * (v + static_cast<T>(kGeluC1) * v * v * v);
        const T t = gelu_tanh(z);
        pt[i] = t;
        po[i] = T(0.5) * v * (T(1) + t);
    }
    check_finite(out, "gelu");

    if (tape) {
        out.gid = tape->alloc_slot(n);
        const int64_t xg = x.gid, og = out.gid;
        auto dx = x.data;
        tape->record([xg, og, n, dx, th](Tape<T>& t) {
            if (xg < 0) return;
            const std::vector<T>& go = t.grad(og);
            std::vector<T>& g = t.grad(xg);
            const T* v = dx->data();
            const T* tv = th->data();
            for (int64_t i = 0; i < n; ++i) {
                const T vi = v[i];
                const T ti = tv[i];
                const T dz = static_cast<T>(kGeluC0) * (T(1) + T(3) * static_cast<T>(kGeluC1) * vi * vi);
                const T d = T(0.5) * (T(1) + ti) + T(0.5) * vi * (T(1) - ti * ti) * dz;
                g[i] += go[i] * d;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
    if (x.rank() < 1) throw dim_error("layer_norm: rank-0 input");
    const int64_t d = x.shape.back();
    if (gamma.numel() != d || beta.numel() != d) throw dim_error("layer_norm: gamma/beta must be [last_dim]");
    const int64_t rows = x.numel() / d;

    Tensor<T> out = Tensor<T>::zeros(x.shape);
    // saved normalized values and inverse stddev per row for the backward
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
    auto inv_sigma = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const T* px = x.ptr();
    const T* pg = gamma.ptr();
    const T* pb = beta.ptr();
    T* po = out.mut_ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[r] = static_cast<T>(is);
        for (int64_t j = 0; j < d; ++j) {
            const T h = static_cast<T>((row[j] - mean) * is);
            (*xhat)[r * d + j] = h;
            po[r * d + j] = h * pg[j] + pb[j];
        }
    }
    check_finite(out, "layer_norm");

    if (tape) {
        out.gid = tape->alloc_slot(out.numel());
        const int64_t xg = x.gid, gg = gamma.gid, bg = beta.gid, og = out.gid;
        auto dgamma = gamma.data;
        tape->record([xg, gg, bg, og, rows, d, xhat, inv_sigma, dgamma](Tape<T>& t) {
            const std::vector<T>& go = t.grad(og);
            if (gg >= 0) {
                std::vector<T>& g = t.grad(gg);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) g[j] += go[r * d + j] * (*xhat)[r * d + j];
            }
            if (bg >= 0) {
                std::vector<T>& g = t.grad(bg);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) g[j] += go[r * d + j];
            }
            if (xg >= 0) {
                std::vector<T>& g = t.grad(xg);
                for (int64_t r = 0; r < rows; ++r) {
                    double sum_dy = 0, sum_dy_xhat = 0;
                    for (int64_t j = 0; j < d; ++j) {
                        const double dy = static_cast<double>(go[r * d + j]) * (*dgamma)[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * (*xhat)[r * d + j];
                    }
                    const double m1 = sum_dy / d, m2 = sum_dy_xhat / d;
                    const double is = (*inv_sigma)[r];
                    for (int64_t j = 0; j < d; ++j) {
                        const double dy = static_cast<double>(go[r * d + j]) * (*dgamma)[j];
                        g[r * d + j] += static_cast<T>(is * (dy - m1 - (*xhat)[r * d + j] * m2));
                    }
                }
            }
        });
    }
    return out;
}

namespace {

// Shared softmax/log_softmax core over an arbitrary axis.
template <typename T, bool kLog>
Tensor<T> softmax_impl(Tape<T>* tape, const Tensor<T>& x, int axis) {
    const detail::AxisSplit ax = split_axis(x.shape, axis);
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    const T* px = x.ptr();
    T* po = out.mut_ptr();
    for (int64_t o = 0; o < ax.outer; ++o) {
        for (int64_t in = 0; in < ax.inner; ++in) {
            const int64_t base = o * ax.len * ax.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t l = 0; l < ax.len; ++l) mx = std::max(mx, static_cast<double>(px[base + l * ax.inner]));
            double denom = 0;
            for (int64_t l = 0; l < ax.len; ++l) denom += std::exp(static_cast<double>(px[base + l * ax.inner]) - mx);
            if constexpr (kLog) {
                const double log_denom = std::log(denom);
                for (int64_t l = 0; l < ax.len; ++l)
                    po[base + l * ax.inner] =
                        static_cast<T>(static_cast<double>(px[base + l * ax.inner]) - mx - log_denom);
            } else {
                const double inv = 1.0 / denom;
                for (int64_t l = 0; l < ax.len; ++l)
                    po[base + l * ax.inner] =
                        static_cast<T>(std::exp(static_cast<double>(px[base + l * ax.inner]) - mx) * inv);
            }
        }
    }
    check_finite(out, kLog ? "log_softmax" : "softmax");

    if (tape) {
        out.gid = tape->alloc_slot(out.numel());
        const int64_t xg = x.gid, og = out.gid;
        auto dout = out.data;
        tape->record([xg, og, ax, dout](Tape<T>& t) {
            if (xg < 0) return;
            const std::vector<T>& go = t.grad(og);
            std::vector<T>& g = t.grad(xg);
            for (int64_t o = 0; o < ax.outer; ++o) {
                for (int64_t in = 0; in < ax.inner; ++in) {
                    const int64_t base = o * ax.len * ax.inner + in;
                    if constexpr (kLog) {
                        // dx = dy - softmax * sum(dy)
                        double s = 0;
                        for (int64_t l = 0; l < ax.len; ++l) s += go[base + l * ax.inner];
                        for (int64_t l = 0; l < ax.len; ++l) {
                            const double p = std::exp(static_cast<double>((*dout)[base + l * ax.inner]));
                            g[base + l * ax.inner] += static_cast<T>(go[base + l * ax.inner] - p * s);
                        }
                    } else {
                        // dx = p * (dy - sum(dy * p))
                        double s = 0;
                        for (int64_t l = 0; l < ax.len; ++l)
                            s += static_cast<double>(go[base + l * ax.inner]) * (*dout)[base + l * ax.inner];
                        for (int64_t l = 0; l < ax.len; ++l) {
                            const double p = (*dout)[base + l * ax.inner];
                            g[base + l * ax.inner] += static_cast<T>(p * (go[base + l * ax.inner] - s));
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, int axis) {
    return softmax_impl<T, false>(tape, x, axis);
}

template <typename T>
Tensor<T> log_softmax(Tape<T>* tape, const Tensor<T>& x, int axis) {
    return softmax_impl<T, true>(tape, x, axis);
}

template <typename T>
Tensor<T> embedding_lookup(Tape<T>* tape, const Tensor<T>& table, std::span<const int32_t> ids) {
    if (table.rank() != 2) throw dim_error("embedding_lookup: table must be rank-2");
    const int64_t v = table.dim(0), d = table.dim(1);
    for (int32_t id : ids)
        if (id < 0 || id >= v) throw input_error("embedding_lookup: id " + std::to_string(id) + " out of vocabulary");

    const int64_t n = static_cast<int64_t>(ids.size());
    Tensor<T> out = Tensor<T>::zeros({n, d});
    const T* pt = table.ptr();
    T* po = out.mut_ptr();
    for (int64_t i = 0; i < n; ++i)
        std::memcpy(po + i * d, pt + static_cast<int64_t>(ids[i]) * d, sizeof(T) * static_cast<size_t>(d));

    if (tape) {
        out.gid = tape->alloc_slot(out.numel());
        const int64_t tg = table.gid, og = out.gid;
        std::vector<int32_t> ids_copy(ids.begin(), ids.end());
        tape->record([tg, og, d, ids_copy = std::move(ids_copy)](Tape<T>& t) {
            if (tg < 0) return;
            const std::vector<T>& go = t.grad(og);
            std::vector<T>& g = t.grad(tg);
            for (size_t i = 0; i < ids_copy.size(); ++i) {
                T* grow = g.data() + static_cast<int64_t>(ids_copy[i]) * d;
                const T* orow = go.data() + static_cast<int64_t>(i) * d;
                for (int64_t j = 0; j < d; ++j) grow[j] += orow[j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concatenate(Tape<T>* tape, std::span<const Tensor<T>> parts, int axis) {
    if (parts.empty()) throw input_error("concatenate: no inputs");
    const size_t rank = parts[0].rank();
    if (axis < 0) axis += static_cast<int>(rank);
    if (axis < 0 || axis >= static_cast<int>(rank)) throw input_error("concatenate: axis out of range");

    Shape out_shape = parts[0].shape;
    int64_t total_axis = 0;
    for (const Tensor<T>& p : parts) {
        if (p.rank() != rank) throw dim_error("concatenate: rank mismatch");
        for (size_t i = 0; i < rank; ++i)
            if (static_cast<int>(i) != axis && p.shape[i] != out_shape[i])
                throw dim_error("concatenate: extent mismatch off the concat axis");
        total_axis += p.shape[axis];
    }
    out_shape[axis] = total_axis;
    Tensor<T> out = Tensor<T>::zeros(out_shape);

    const detail::AxisSplit ax = split_axis(out_shape, axis);
    T* po = out.mut_ptr();
    int64_t axis_off = 0;
    struct PartRef {
        int64_t gid;
        int64_t axis_off;
        int64_t axis_len;
    };
    std::vector<PartRef> refs;
    refs.reserve(parts.size());
    for (const Tensor<T>& p : parts) {
        const int64_t plen = p.shape[axis];
        const T* pp = p.ptr();
        for (int64_t o = 0; o < ax.outer; ++o) {
            std::memcpy(po + (o * ax.len + axis_off) * ax.inner, pp + o * plen * ax.inner,
                        sizeof(T) * static_cast<size_t>(plen * ax.inner));
        }
        refs.push_back({p.gid, axis_off, plen});
        axis_off += plen;
    }

    if (tape) {
        out.gid = tape->alloc_slot(out.numel());
        const int64_t og = out.gid;
        tape->record([og, ax, refs = std::move(refs)](Tape<T>& t) {
            const std::vector<T>& go = t.grad(og);
            for (const auto& r : refs) {
                if (r.gid < 0) continue;
                std::vector<T>& g = t.grad(r.gid);
                for (int64_t o = 0; o < ax.outer; ++o) {
                    const T* src = go.data() + (o * ax.len + r.axis_off) * ax.inner;
                    T* dst = g.data() + o * r.axis_len * ax.inner;
                    for (int64_t i = 0; i < r.axis_len * ax.inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice(Tape<T>* tape, const Tensor<T>& x, int axis, int64_t start, int64_t len) {
    const detail::AxisSplit ax = split_axis(x.shape, axis);
    if (axis < 0) axis += static_cast<int>(x.rank());
    if (start < 0 || len <= 0 || start + len > ax.len) throw input_error("slice: range out of bounds");

    Shape out_shape = x.shape;
    out_shape[axis] = len;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* px = x.ptr();
    T* po = out.mut_ptr();
    for (int64_t o = 0; o < ax.outer; ++o) {
        std::memcpy(po + o * len * ax.inner, px + (o * ax.len + start) * ax.inner,
                    sizeof(T) * static_cast<size_t>(len * ax.inner));
    }

    if (tape) {
        out.gid = tape->alloc_slot(out.numel());
        const int64_t xg = x.gid, og = out.gid;
        tape->record([xg, og, ax, start, len](Tape<T>& t) {
            if (xg < 0) return;
            const std::vector<T>& go = t.grad(og);
            std::vector<T>& g = t.grad(xg);
            for (int64_t o = 0; o < ax.outer; ++o) {
                const T* src = go.data() + o * len * ax.inner;
                T* dst = g.data() + (o * ax.len + start) * ax.inner;
                for (int64_t i = 0; i < len * ax.inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <typename T>
std::vector<int64_t> argmax_along_axis(const Tensor<T>& x, int axis) {
    const detail::AxisSplit ax = split_axis(x.shape, axis);
    std::vector<int64_t> out(static_cast<size_t>(ax.outer * ax.inner));
    const T* px = x.ptr();
    for (int64_t o = 0; o < ax.outer; ++o) {
        for (int64_t in = 0; in < ax.inner; ++in) {
            const int64_t base = o * ax.len * ax.inner + in;
            int64_t best = 0;
            T best_v = px[base];
            for (int64_t l = 1; l < ax.len; ++l) {
                const T v = px[base + l * ax.inner];
                if (v > best_v) {
                    best_v = v;
                    best = l;
                }
            }
            out[static_cast<size_t>(o * ax.inner + in)] = best;
        }
    }
    return out;
}

template <typename T>
Tensor<T> cross_entropy_masked(Tape<T>* tape, const Tensor<T>& logits, std::span<const int32_t> targets,
                               std::span<const uint8_t> row_mask) {
    if (logits.rank() != 2) throw dim_error("cross_entropy_masked: logits must be [N,K]");
    const int64_t n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(row_mask.size()) != n)
        throw dim_error("cross_entropy_masked: targets/mask length must match logits rows");

    std::vector<int32_t> rows;
    for (int64_t i = 0; i < n; ++i)
        if (row_mask[static_cast<size_t>(i)]) rows.push_back(static_cast<int32_t>(i));
    if (rows.empty()) throw input_error("cross_entropy_masked: empty mask");
    for (int32_t r : rows)
        if (targets[r] < 0 || targets[r] >= k) throw input_error("cross_entropy_masked: target id out of range");

    // saved per selected row: softmax probabilities for the backward
    auto probs = std::make_shared<std::vector<T>>(rows.size() * static_cast<size_t>(k));
    const T* pl = logits.ptr();
    double loss = 0;
    for (size_t ri = 0; ri < rows.size(); ++ri) {
        const T* row = pl + static_cast<int64_t>(rows[ri]) * k;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0;
        for (int64_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        const double log_denom = std::log(denom);
        loss -= static_cast<double>(row[targets[rows[ri]]]) - mx - log_denom;
        T* prow = probs->data() + ri * static_cast<size_t>(k);
        for (int64_t j = 0; j < k; ++j)
            prow[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - mx - log_denom));
    }

    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));
    check_finite(out, "cross_entropy_masked");

    if (tape) {
        out.gid = tape->alloc_slot(1);
        const int64_t lg = logits.gid, og = out.gid;
        std::vector<int32_t> tsel(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) tsel[i] = targets[rows[i]];
        tape->record([lg, og, k, probs, rows = std::move(rows), tsel = std::move(tsel)](Tape<T>& t) {
            if (lg < 0) return;
            const T go = t.grad(og)[0];
            std::vector<T>& g = t.grad(lg);
            for (size_t ri = 0; ri < rows.size(); ++ri) {
                T* grow = g.data() + static_cast<int64_t>(rows[ri]) * k;
                const T* prow = probs->data() + ri * static_cast<size_t>(k);
                for (int64_t j = 0; j < k; ++j) grow[j] += go * prow[j];
                grow[tsel[ri]] -= go;
            }
        });
    }
    return out;
}

namespace {

// cos/sin per (position, pair), shared by the forward and backward passes
template <typename T>
struct RopeTable {
    int64_t pairs = 0;
    std::vector<T> cs;  // [(pos * pairs + j) * 2] = cos, [... + 1] = sin

    RopeTable(int64_t head_dim, int32_t max_pos, double base) : pairs(head_dim / 2) {
        cs.resize(static_cast<size_t>((max_pos + 1) * pairs * 2));
        for (int32_t p = 0; p <= max_pos; ++p) {
            for (int64_t j = 0; j < pairs; ++j) {
                const double theta =
                    static_cast<double>(p) * std::pow(base, -static_cast<double>(2 * j) / (2 * pairs));
                cs[static_cast<size_t>((p * pairs + j) * 2)] = static_cast<T>(std::cos(theta));
                cs[static_cast<size_t>((p * pairs + j) * 2 + 1)] = static_cast<T>(std::sin(theta));
            }
        }
    }

    // sign=-1 applies the inverse rotation (used on gradients)
    void rotate(T* row, int32_t pos, int sign) const {
        const T* t = cs.data() + static_cast<size_t>(pos) * pairs * 2;
        for (int64_t j = 0; j < pairs; ++j) {
            const T c = t[j * 2];
            const T s = t[j * 2 + 1] * static_cast<T>(sign);
            const T x0 = row[j * 2], x1 = row[j * 2 + 1];
            row[j * 2] = x0 * c - x1 * s;
            row[j * 2 + 1] = x0 * s + x1 * c;
        }
    }
};

}  // namespace

template <typename T>
Tensor<T> attention(Tape<T>* tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                    std::span<const int32_t> positions, std::span<const SegRange> segments, bool causal,
                    double rope_base) {
    if (q.shape != k.shape || q.shape != v.shape) throw dim_error("attention: q/k/v shapes differ");
    if (q.rank() != 2) throw dim_error("attention: expects [N, heads*head_dim]");
    const int64_t n = q.dim(0), d = q.dim(1);
    if (heads <= 0 || d % heads != 0) throw dim_error("attention: model dim not divisible by heads");
    if (static_cast<int64_t>(positions.size()) != n) throw dim_error("attention: positions length mismatch");
    const int64_t hd = d / heads;
    const double scale_v = 1.0 / std::sqrt(static_cast<double>(hd));

    int32_t max_pos = 0;
    for (int32_t p : positions) {
        if (p < 0) throw input_error("attention: negative position id");
        max_pos = std::max(max_pos, p);
    }
    auto rope = std::make_shared<RopeTable<T>>(hd, max_pos, rope_base);

    // Rotated q/k copies, saved for the backward pass.
    auto qr = std::make_shared<std::vector<T>>(q.ptr(), q.ptr() + n * d);
    auto kr = std::make_shared<std::vector<T>>(k.ptr(), k.ptr() + n * d);
    for (int64_t i = 0; i < n; ++i) {
        for (int h = 0; h < heads; ++h) {
            rope->rotate(qr->data() + i * d + h * hd, positions[i], +1);
            rope->rotate(kr->data() + i * d + h * hd, positions[i], +1);
        }
    }

    // Attention probabilities per (segment, head), row-major n_seg x n_seg.
    auto probs = std::make_shared<std::vector<std::vector<T>>>();
    probs->resize(segments.size() * static_cast<size_t>(heads));

    Tensor<T> out = Tensor<T>::zeros(q.shape);
    T* po = out.mut_ptr();
    const T* pv = v.ptr();

    for (size_t si = 0; si < segments.size(); ++si) {
        const SegRange seg = segments[si];
        const int64_t sn = seg.len();
        if (sn <= 0 || seg.begin < 0 || seg.end > n) throw input_error("attention: bad segment range");
        for (int h = 0; h < heads; ++h) {
            std::vector<T>& p = (*probs)[si * heads + h];
            p.assign(static_cast<size_t>(sn * sn), T(0));
            for (int64_t i = 0; i < sn; ++i) {
                const T* qi = qr->data() + (seg.begin + i) * d + h * hd;
                const int64_t jmax = causal ? i + 1 : sn;
                double mx = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j < jmax; ++j) {
                    const T* kj = kr->data() + (seg.begin + j) * d + h * hd;
                    double acc = 0;
                    for (int64_t e = 0; e < hd; ++e) acc += static_cast<double>(qi[e]) * kj[e];
                    acc *= scale_v;
                    p[i * sn + j] = static_cast<T>(acc);
                    mx = std::max(mx, acc);
                }
                double denom = 0;
                for (int64_t j = 0; j < jmax; ++j) denom += std::exp(static_cast<double>(p[i * sn + j]) - mx);
                const double inv = 1.0 / denom;
                for (int64_t j = 0; j < jmax; ++j)
                    p[i * sn + j] = static_cast<T>(std::exp(static_cast<double>(p[i * sn + j]) - mx) * inv);
                for (int64_t j = jmax; j < sn; ++j) p[i * sn + j] = T(0);

                T* oi = po + (seg.begin + i) * d + h * hd;
                for (int64_t j = 0; j < jmax; ++j) {
                    const T pij = p[i * sn + j];
                    const T* vj = pv + (seg.begin + j) * d + h * hd;
                    for (int64_t e = 0; e < hd; ++e) oi[e] += pij * vj[e];
                }
            }
        }
    }
    check_finite(out, "attention");

    if (tape) {
        out.gid = tape->alloc_slot(out.numel());
        const int64_t qg = q.gid, kg = k.gid, vg = v.gid, og = out.gid;
        auto vdata = v.data;
        std::vector<int32_t> pos_copy(positions.begin(), positions.end());
        std::vector<SegRange> seg_copy(segments.begin(), segments.end());
        tape->record([qg, kg, vg, og, n, d, hd, heads, causal, scale_v, rope, qr, kr, vdata, probs,
                      pos_copy = std::move(pos_copy), seg_copy = std::move(seg_copy)](Tape<T>& t) {
            const std::vector<T>& go = t.grad(og);
            std::vector<T> dq_rot, dk_rot;
            if (qg >= 0) dq_rot.assign(static_cast<size_t>(n * d), T(0));
            if (kg >= 0) dk_rot.assign(static_cast<size_t>(n * d), T(0));
            std::vector<T>* gv = vg >= 0 ? &t.grad(vg) : nullptr;

            std::vector<T> dp;
            for (size_t si = 0; si < seg_copy.size(); ++si) {
                const SegRange seg = seg_copy[si];
                const int64_t sn = seg.len();
                for (int h = 0; h < heads; ++h) {
                    const std::vector<T>& p = (*probs)[si * heads + h];
                    dp.assign(static_cast<size_t>(sn * sn), T(0));
                    // dP = dO V^T ; dV = P^T dO
                    for (int64_t i = 0; i < sn; ++i) {
                        const T* goi = go.data() + (seg.begin + i) * d + h * hd;
                        const int64_t jmax = causal ? i + 1 : sn;
                        for (int64_t j = 0; j < jmax; ++j) {
                            const T* vj = vdata->data() + (seg.begin + j) * d + h * hd;
                            double acc = 0;
                            for (int64_t e = 0; e < hd; ++e) acc += static_cast<double>(goi[e]) * vj[e];
                            dp[i * sn + j] = static_cast<T>(acc);
                            if (gv) {
                                T* gvj = gv->data() + (seg.begin + j) * d + h * hd;
                                const T pij = p[i * sn + j];
                                for (int64_t e = 0; e < hd; ++e) gvj[e] += pij * goi[e];
                            }
                        }
                    }
                    // dS = P .* (dP - rowsum(dP .* P)), then dQr = dS Kr, dKr = dS^T Qr
                    for (int64_t i = 0; i < sn; ++i) {
                        const int64_t jmax = causal ? i + 1 : sn;
                        double srow = 0;
                        for (int64_t j = 0; j < jmax; ++j)
                            srow += static_cast<double>(dp[i * sn + j]) * p[i * sn + j];
                        for (int64_t j = 0; j < jmax; ++j) {
                            const double ds =
                                (static_cast<double>(dp[i * sn + j]) - srow) * p[i * sn + j] * scale_v;
                            if (ds == 0.0) continue;
                            if (qg >= 0) {
                                T* dqi = dq_rot.data() + (seg.begin + i) * d + h * hd;
                                const T* kj = kr->data() + (seg.begin + j) * d + h * hd;
                                for (int64_t e = 0; e < hd; ++e) dqi[e] += static_cast<T>(ds) * kj[e];
                            }
                            if (kg >= 0) {
                                T* dkj = dk_rot.data() + (seg.begin + j) * d + h * hd;
                                const T* qi = qr->data() + (seg.begin + i) * d + h * hd;
                                for (int64_t e = 0; e < hd; ++e) dkj[e] += static_cast<T>(ds) * qi[e];
                            }
                        }
                    }
                }
            }
            // rotate gradients back (rotation is orthogonal)
            if (qg >= 0) {
                std::vector<T>& g = t.grad(qg);
                for (int64_t i = 0; i < n; ++i)
                    for (int h = 0; h < heads; ++h) rope->rotate(dq_rot.data() + i * d + h * hd, pos_copy[i], -1);
                for (int64_t i = 0; i < n * d; ++i) g[i] += dq_rot[i];
            }
            if (kg >= 0) {
                std::vector<T>& g = t.grad(kg);
                for (int64_t i = 0; i < n; ++i)
                    for (int h = 0; h < heads; ++h) rope->rotate(dk_rot.data() + i * d + h * hd, pos_copy[i], -1);
                for (int64_t i = 0; i < n * d; ++i) g[i] += dk_rot[i];
            }
        });
    }
    return out;
}

#define MASKGRID_INSTANTIATE_OPS(T)                                                                        \
    template Tensor<T> add<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> mul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> scale<T>(Tape<T>*, const Tensor<T>&, double);                                       \
    template Tensor<T> matmul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> linear<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> gelu<T>(Tape<T>*, const Tensor<T>&);                                                \
    template Tensor<T> layer_norm<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                     double);                                                              \
    template Tensor<T> softmax<T>(Tape<T>*, const Tensor<T>&, int);                                        \
    template Tensor<T> log_softmax<T>(Tape<T>*, const Tensor<T>&, int);                                    \
    template Tensor<T> embedding_lookup<T>(Tape<T>*, const Tensor<T>&, std::span<const int32_t>);          \
    template Tensor<T> concatenate<T>(Tape<T>*, std::span<const Tensor<T>>, int);                          \
    template Tensor<T> slice<T>(Tape<T>*, const Tensor<T>&, int, int64_t, int64_t);                        \
    template std::vector<int64_t> argmax_along_axis<T>(const Tensor<T>&, int);                             \
    template Tensor<T> cross_entropy_masked<T>(Tape<T>*, const Tensor<T>&, std::span<const int32_t>,       \
                                               std::span<const uint8_t>);                                  \
    template Tensor<T> attention<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,   \
                                    std::span<const int32_t>, std::span<const SegRange>, bool, double);

MASKGRID_INSTANTIATE_OPS(float)
MASKGRID_INSTANTIATE_OPS(double)

#undef MASKGRID_INSTANTIATE_OPS

}  // namespace maskgrid::nk
