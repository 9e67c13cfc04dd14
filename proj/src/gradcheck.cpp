// SPDX-License-Identifier: Apache-2.0

#include "diveq/gradcheck.hpp"

#include <cmath>
#include <string>

#include "diveq/errors.hpp"

namespace diveq::ad {

namespace {

double evaluate(const DifferentiableFn& fn, const std::vector<Tensor>& points) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(points.size());
    for (const Tensor& p : points) vars.push_back(tape.input(p));
    Var out = fn(tape, vars);
    if (!out.value().is_scalar()) {
        throw shape_error("check_gradient: function output must be scalar, got " +
                          out.value().shape_str());
    }
    return out.value().scalar_value();
}

}  // namespace

double check_gradient(const DifferentiableFn& fn, const std::vector<Tensor>& points,
                      double step) {
    // Analytic pass.
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(points.size());
    for (const Tensor& p : points) vars.push_back(tape.input(p));
    Var out = fn(tape, vars);
    if (!out.value().is_scalar()) {
        throw shape_error("check_gradient: function output must be scalar, got " +
                          out.value().shape_str());
    }
    tape.backward(out);
    std::vector<Tensor> analytic;
    analytic.reserve(points.size());
    for (Var v : vars) analytic.push_back(tape.grad(v));

    double max_rel = 0.0;
    std::vector<Tensor> probe = points;
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (std::size_t j = 0; j < points[i].numel(); ++j) {
            const double original = probe[i].data[j];
            probe[i].data[j] = original + step;
            const double f_plus = evaluate(fn, probe);
            probe[i].data[j] = original - step;
            const double f_minus = evaluate(fn, probe);
            probe[i].data[j] = original;

            const double fd = (f_plus - f_minus) / (2.0 * step);
            const double an = analytic[i].data[j];
            if (!std::isfinite(fd) || !std::isfinite(an)) {
                throw numeric_error("check_gradient: non-finite derivative at input " +
                                    std::to_string(i) + ", coordinate " + std::to_string(j));
            }
            const double rel = std::abs(an - fd) / (std::abs(fd) + 1e-12);
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

double check_gradient(const std::function<Var(Tape&, Var)>& fn, const Tensor& point,
                      double step) {
    return check_gradient(
        [&fn](Tape& t, const std::vector<Var>& vs) { return fn(t, vs[0]); }, {point}, step);
}

}  // namespace diveq::ad
