#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "maskgrid/common.hpp"

namespace maskgrid::nk {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d <= 0) throw dim_error("tensor extent must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor. The data buffer is shared and treated as immutable
// once the tensor has been handed to an op; writers own their buffers.
// gid links the tensor to a gradient slot on the tape (-1 = constant).
template <typename T>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    int64_t gid = -1;

    Tensor() = default;

    static Tensor zeros(Shape s) {
        Tensor t;
        const int64_t n = shape_numel(s);
        t.shape = std::move(s);
        t.data = std::make_shared<std::vector<T>>(static_cast<size_t>(n), T(0));
        return t;
    }

    static Tensor full(Shape s, T value) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data->begin(), t.data->end(), value);
        return t;
    }

    static Tensor from(Shape s, std::vector<T> values) {
        if (shape_numel(s) != static_cast<int64_t>(values.size()))
            throw dim_error("value count does not match shape " + shape_str(s));
        Tensor t;
        t.shape = std::move(s);
        t.data = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    static Tensor scalar(T value) { return from({1}, {value}); }

    int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    const T* ptr() const { return data->data(); }
    T* mut_ptr() { return data->data(); }

    T item() const {
        if (numel() != 1) throw dim_error("item() on non-scalar tensor " + shape_str(shape));
        return (*data)[0];
    }

    T at(std::initializer_list<int64_t> idx) const {
        int64_t flat = 0;
        size_t i = 0;
        for (int64_t v : idx) {
            flat = flat * shape[i] + v;
            ++i;
        }
        return (*data)[static_cast<size_t>(flat)];
    }

    bool all_finite() const {
        for (const T& v : *data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

// Reverse-mode tape. Ops append one entry each in execution order; inputs are
// always recorded before the ops that consume them, so a single reverse sweep
// visits every node exactly once in reverse topological order.
template <typename T>
class Tape {
public:
    // Registers a tensor for gradient tracking and returns its slot.
    int64_t watch(Tensor<T>& t) {
        t.gid = alloc_slot(t.numel());
        return t.gid;
    }

    // Allocates a gradient slot for an op output.
    int64_t alloc_slot(int64_t numel) {
        slots_.emplace_back();
        slots_.back().assign(static_cast<size_t>(numel), T(0));
        return static_cast<int64_t>(slots_.size()) - 1;
    }

    std::vector<T>& grad(int64_t gid) { return slots_.at(static_cast<size_t>(gid)); }
    const std::vector<T>& grad(int64_t gid) const { return slots_.at(static_cast<size_t>(gid)); }

    void record(std::function<void(Tape&)> backward_fn) { entries_.push_back(std::move(backward_fn)); }

    size_t size() const { return entries_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays the tape backward.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) throw dim_error("backward() expects a scalar loss");
        if (loss.gid < 0) throw input_error("loss tensor is not on this tape");
        grad(loss.gid).at(0) = T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            (*it)(*this);
        }
    }

private:
    std::vector<std::vector<T>> slots_;
    std::vector<std::function<void(Tape&)>> entries_;
};

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    if (debug_checks() && !t.all_finite()) {
        throw numeric_error(std::string(op) + ": non-finite value in output");
    }
}

}  // namespace maskgrid::nk
