#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "maskgrid/rng.hpp"
#include "maskgrid/tensor.hpp"

namespace maskgrid::nk {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t coords_checked = 0;
};

// Compares tape gradients against central finite differences, 64-bit only.
// `f` must rebuild the forward graph from the current parameter values; it
// receives a tape (or nullptr during finite-difference probes) and returns
// the scalar loss. Every coordinate is checked up to `max_coords` total;
// beyond that a random subsample is drawn from `rng`.
GradCheckResult grad_check(const std::function<Tensor<double>(Tape<double>*)>& f,
                           std::span<Tensor<double>* const> params, double eps, int64_t max_coords = 10000,
                           Rng* rng = nullptr);

}  // namespace maskgrid::nk
