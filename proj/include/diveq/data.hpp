// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic dataset generators. Generation is a pure
// function of the spec; identical specs produce identical bytes.

#pragma once

#include <cstdint>
#include <string>

#include "diveq/tensor.hpp"

namespace diveq {

enum class DatasetKind { GAUSSIAN_MIXTURE, RING, GRID_IMAGES, UNIFORM_CUBE };

const char* dataset_kind_name(DatasetKind k);
DatasetKind dataset_kind_from_name(const std::string& name);

struct DatasetSpec {
    DatasetKind kind = DatasetKind::GAUSSIAN_MIXTURE;
    std::size_t dims = 2;
    std::size_t size = 1000;
    std::uint64_t seed = 0;

    // Gaussian mixture: component means evenly spaced on a circle of
    // `radius` in the first two coordinates.
    std::size_t components = 8;
    double radius = 5.0;
    double component_std = 0.3;

    // Ring.
    double ring_radius = 3.0;
    double ring_noise = 0.1;

    // Procedural grayscale patterns flattened to side * side dims.
    std::size_t image_side = 8;

    void validate() const;  // throws config_error naming the field
};

struct Dataset {
    Tensor train;
    Tensor test;
};

// Generates `size` samples and splits them 80/20 with a seeded shuffle.
Dataset generate(const DatasetSpec& spec);

// Raw export: magic "DIVEQDS1", N and D as little-endian u64, then N*D
// little-endian f64 row-major.
void save_dataset(const Tensor& data, const std::string& path);
Tensor load_dataset(const std::string& path);

}  // namespace diveq
