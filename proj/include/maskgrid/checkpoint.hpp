#pragma once

#include <string>
#include <utility>
#include <vector>

#include "maskgrid/tensor.hpp"

namespace maskgrid {

// Checkpoint = <prefix>.json manifest + <prefix>.bin blob. The manifest lists
// named tensors with shapes plus free-form metadata; the blob holds the raw
// little-endian values back to back in manifest order.
template <typename T>
struct NamedTensors {
    std::vector<std::pair<std::string, nk::Tensor<T>>> entries;

    nk::Tensor<T>& at(const std::string& name);
    const nk::Tensor<T>& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    void add(std::string name, nk::Tensor<T> t);
};

template <typename T>
void save_checkpoint(const std::string& prefix, const NamedTensors<T>& tensors,
                     const std::string& meta_json = "{}");

template <typename T>
NamedTensors<T> load_checkpoint(const std::string& prefix, std::string* meta_json_out = nullptr);

// Reads just the dtype field ("f32"/"f64") so callers can dispatch.
std::string checkpoint_dtype(const std::string& prefix);

}  // namespace maskgrid
