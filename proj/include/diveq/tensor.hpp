// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor of 64-bit floats. This is a plain value type;
// differentiation bookkeeping lives in tape.hpp.

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "diveq/errors.hpp"

namespace diveq {

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shp, double fill = 0.0)
        : shape(std::move(shp)),
          data(shape_numel(shape), fill) {}

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor from(std::vector<std::size_t> shp, std::vector<double> values) {
        if (shape_numel(shp) != values.size()) {
            throw shape_error("tensor: " + std::to_string(values.size()) +
                              " values for shape " + shape_to_string(shp));
        }
        Tensor t;
        t.shape = std::move(shp);
        t.data = std::move(values);
        return t;
    }

    static std::size_t shape_numel(const std::vector<std::size_t>& shp) {
        std::size_t n = 1;
        for (std::size_t d : shp) n *= d;
        return shp.empty() ? 0 : n;
    }

    static std::string shape_to_string(const std::vector<std::size_t>& shp) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shp.size(); ++i) os << (i ? "x" : "") << shp[i];
        os << "]";
        return os.str();
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const { return rank() >= 1 ? shape[0] : 0; }
    std::size_t cols() const { return rank() >= 2 ? shape[1] : 1; }

    double& at(std::size_t i) { return data[i]; }
    double at(std::size_t i) const { return data[i]; }
    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    const double* row(std::size_t r) const { return data.data() + r * cols(); }
    double* row(std::size_t r) { return data.data() + r * cols(); }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    std::string shape_str() const { return shape_to_string(shape); }

    bool is_scalar() const { return numel() == 1; }
    double scalar_value() const {
        if (!is_scalar()) throw shape_error("scalar_value on tensor " + shape_str());
        return data[0];
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Small raw-value helpers used by estimators and trainers outside the tape.

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double squared_distance(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double norm(const double* a, std::size_t n) {
    return std::sqrt(dot(a, a, n));
}

}  // namespace diveq
