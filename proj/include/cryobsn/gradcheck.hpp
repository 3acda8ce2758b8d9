#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cryobsn/autograd.hpp"

namespace cryobsn::ag {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst; // "<leaf index>/<flat coordinate>" of the worst entry
};

// Compares reverse-mode gradients of scalar f() w.r.t. the given leaves
// against central finite differences (64-bit, step fd_step). f must rebuild
// its graph from the leaves' current values on every call. Coordinates are
// sampled per leaf (all of them when the leaf is small).
GradCheckResult grad_check(const std::function<Var()>& f, const std::vector<Var>& leaves,
                           uint64_t seed, int samples_per_leaf = 8, double fd_step = 1e-3);

} // namespace cryobsn::ag
