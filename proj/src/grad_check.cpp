#include "maskgrid/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace maskgrid::nk {

GradCheckResult grad_check(const std::function<Tensor<double>(Tape<double>*)>& f,
                           std::span<Tensor<double>* const> params, double eps, int64_t max_coords,
                           Rng* rng) {
    if (eps < 1e-7 || eps > 1e-4) throw input_error("grad_check: eps must lie in [1e-7, 1e-4]");

    Tape<double> tape;
    for (Tensor<double>* p : params) tape.watch(*p);
    Tensor<double> loss = f(&tape);
    if (!std::isfinite(loss.item())) throw numeric_error("grad_check: non-finite loss");
    tape.backward(loss);

    int64_t total = 0;
    for (Tensor<double>* p : params) total += p->numel();

    // (param index, coordinate) pairs to probe
    std::vector<std::pair<size_t, int64_t>> coords;
    if (total <= max_coords) {
        for (size_t pi = 0; pi < params.size(); ++pi)
            for (int64_t c = 0; c < params[pi]->numel(); ++c) coords.emplace_back(pi, c);
    } else {
        if (!rng) throw input_error("grad_check: rng required to subsample above max_coords");
        coords.reserve(static_cast<size_t>(max_coords));
        for (int64_t i = 0; i < max_coords; ++i) {
            int64_t flat = static_cast<int64_t>(rng->uniform_int(static_cast<uint64_t>(total)));
            size_t pi = 0;
            while (flat >= params[pi]->numel()) {
                flat -= params[pi]->numel();
                ++pi;
            }
            coords.emplace_back(pi, flat);
        }
    }

    GradCheckResult result;
    result.coords_checked = static_cast<int64_t>(coords.size());
    for (const auto& [pi, c] : coords) {
        Tensor<double>* p = params[pi];
        double* slot = p->mut_ptr() + c;
        const double orig = *slot;

        *slot = orig + eps;
        const double up = f(nullptr).item();
        *slot = orig - eps;
        const double down = f(nullptr).item();
        *slot = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) throw numeric_error("grad_check: non-finite probe loss");

        const double fd = (up - down) / (2.0 * eps);
        const double an = tape.grad(p->gid)[static_cast<size_t>(c)];
        // relative above unit scale, absolute below: coordinates whose
        // gradient sits under the finite-difference noise floor would
        // otherwise report noise as error
        const double denom = std::max({1.0, std::abs(fd), std::abs(an)});
        result.max_rel_err = std::max(result.max_rel_err, std::abs(fd - an) / denom);
    }
    return result;
}

}  // namespace maskgrid::nk
