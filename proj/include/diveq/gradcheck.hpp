// SPDX-License-Identifier: Apache-2.0
//
// Central-finite-difference verification of tape pullbacks. The function
// under test must be deterministic: any stochastic draws have to be frozen
// by the caller before checking.

#pragma once

#include <functional>
#include <vector>

#include "diveq/tape.hpp"

namespace diveq::ad {

using DifferentiableFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Returns max over all input coordinates of
//   |analytic - central_difference| / (|central_difference| + 1e-12).
// The function must produce a scalar output. Non-finite values raise a
// numeric_error identifying the offending input and coordinate.
double check_gradient(const DifferentiableFn& fn, const std::vector<Tensor>& points,
                      double step = 1e-5);

// Single-input convenience overload.
double check_gradient(const std::function<Var(Tape&, Var)>& fn, const Tensor& point,
                      double step = 1e-5);

}  // namespace diveq::ad
