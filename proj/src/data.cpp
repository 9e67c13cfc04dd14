// SPDX-License-Identifier: Apache-2.0

#include "diveq/data.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "diveq/detail/serialize.hpp"
#include "diveq/errors.hpp"
#include "diveq/rng.hpp"

namespace diveq {

const char* dataset_kind_name(DatasetKind k) {
    switch (k) {
        case DatasetKind::GAUSSIAN_MIXTURE: return "gaussian_mixture";
        case DatasetKind::RING: return "ring";
        case DatasetKind::GRID_IMAGES: return "grid_images";
        case DatasetKind::UNIFORM_CUBE: return "uniform_cube";
    }
    return "?";
}

DatasetKind dataset_kind_from_name(const std::string& name) {
    for (DatasetKind k : {DatasetKind::GAUSSIAN_MIXTURE, DatasetKind::RING,
                          DatasetKind::GRID_IMAGES, DatasetKind::UNIFORM_CUBE}) {
        if (name == dataset_kind_name(k)) return k;
    }
    throw config_error("dataset.kind: unknown kind '" + name + "'");
}

void DatasetSpec::validate() const {
    if (size < 10) throw config_error("dataset.size: must be >= 10");
    if (dims < 1) throw config_error("dataset.dims: must be >= 1");
    switch (kind) {
        case DatasetKind::GAUSSIAN_MIXTURE:
            if (components < 1) throw config_error("dataset.components: must be >= 1");
            if (dims < 2) throw config_error("dataset.dims: mixture needs dims >= 2");
            if (component_std < 0.0)
                throw config_error("dataset.component_std: must be >= 0");
            break;
        case DatasetKind::RING:
            if (dims < 2) throw config_error("dataset.dims: ring needs dims >= 2");
            if (ring_radius <= 0.0) throw config_error("dataset.ring_radius: must be > 0");
            if (ring_noise < 0.0) throw config_error("dataset.ring_noise: must be >= 0");
            break;
        case DatasetKind::GRID_IMAGES:
            if (image_side < 2) throw config_error("dataset.image_side: must be >= 2");
            if (dims != image_side * image_side)
                throw config_error("dataset.dims: grid_images requires dims == side^2");
            break;
        case DatasetKind::UNIFORM_CUBE:
            break;
    }
}

namespace {

Tensor generate_all(const DatasetSpec& spec, Rng& rng) {
    Tensor out({spec.size, spec.dims});
    switch (spec.kind) {
        case DatasetKind::GAUSSIAN_MIXTURE: {
            for (std::size_t i = 0; i < spec.size; ++i) {
                const std::size_t comp = rng.integer(spec.components);
                const double angle = 2.0 * std::numbers::pi *
                                     static_cast<double>(comp) /
                                     static_cast<double>(spec.components);
                double* row = out.row(i);
                row[0] = spec.radius * std::cos(angle) + spec.component_std * rng.normal();
                row[1] = spec.radius * std::sin(angle) + spec.component_std * rng.normal();
                for (std::size_t d = 2; d < spec.dims; ++d)
                    row[d] = spec.component_std * rng.normal();
            }
            break;
        }
        case DatasetKind::RING: {
            for (std::size_t i = 0; i < spec.size; ++i) {
                const double angle = 2.0 * std::numbers::pi * rng.uniform();
                const double r = spec.ring_radius + spec.ring_noise * rng.normal();
                double* row = out.row(i);
                row[0] = r * std::cos(angle);
                row[1] = r * std::sin(angle);
                for (std::size_t d = 2; d < spec.dims; ++d)
                    row[d] = spec.ring_noise * rng.normal();
            }
            break;
        }
        case DatasetKind::GRID_IMAGES: {
            const std::size_t side = spec.image_side;
            for (std::size_t i = 0; i < spec.size; ++i) {
                double* row = out.row(i);
                const std::uint64_t pattern = rng.integer(3);
                const double intensity = 0.25 + 0.75 * rng.uniform();
                if (pattern == 0) {  // horizontal bar
                    const std::size_t r0 = rng.integer(side);
                    for (std::size_t c = 0; c < side; ++c) row[r0 * side + c] = intensity;
                } else if (pattern == 1) {  // vertical bar
                    const std::size_t c0 = rng.integer(side);
                    for (std::size_t r = 0; r < side; ++r) row[r * side + c0] = intensity;
                } else {  // soft blob
                    const double cr = rng.uniform(1.0, static_cast<double>(side) - 2.0);
                    const double cc = rng.uniform(1.0, static_cast<double>(side) - 2.0);
                    const double width = 0.8 + 1.2 * rng.uniform();
                    for (std::size_t r = 0; r < side; ++r)
                        for (std::size_t c = 0; c < side; ++c) {
                            const double dr = static_cast<double>(r) - cr;
                            const double dc = static_cast<double>(c) - cc;
                            row[r * side + c] =
                                intensity * std::exp(-(dr * dr + dc * dc) / (2.0 * width * width));
                        }
                }
            }
            break;
        }
        case DatasetKind::UNIFORM_CUBE: {
            for (double& v : out.data) v = rng.uniform();
            break;
        }
    }
    return out;
}

}  // namespace

Dataset generate(const DatasetSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    Tensor all = generate_all(spec, rng);

    // Seeded shuffle, then an 80/20 split.
    std::vector<std::size_t> order(spec.size);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = spec.size - 1; i > 0; --i) {
        const std::size_t j = rng.integer(i + 1);
        std::swap(order[i], order[j]);
    }
    const std::size_t test_size =
        static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(spec.size)));
    const std::size_t train_size = spec.size - test_size;

    Dataset out;
    out.train = Tensor({train_size, spec.dims});
    out.test = Tensor({test_size, spec.dims});
    for (std::size_t i = 0; i < train_size; ++i)
        std::copy_n(all.row(order[i]), spec.dims, out.train.row(i));
    for (std::size_t i = 0; i < test_size; ++i)
        std::copy_n(all.row(order[train_size + i]), spec.dims, out.test.row(i));
    return out;
}

namespace {
constexpr char kDatasetMagic[8] = {'D', 'I', 'V', 'E', 'Q', 'D', 'S', '1'};
}

void save_dataset(const Tensor& data, const std::string& path) {
    if (data.rank() != 2) {
        throw shape_error("save_dataset: expected a matrix, got " + data.shape_str());
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("dataset: cannot open for writing: " + path);
    os.write(kDatasetMagic, 8);
    detail::put_u64(os, data.rows());
    detail::put_u64(os, data.cols());
    for (double v : data.data) detail::put_f64(os, v);
    if (!os) throw io_error("dataset: write failed: " + path);
}

Tensor load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("dataset: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kDatasetMagic, 8) != 0) {
        throw io_error("dataset: malformed header: " + path);
    }
    const std::uint64_t n = detail::get_u64(is, "dataset");
    const std::uint64_t d = detail::get_u64(is, "dataset");
    if (d == 0) throw io_error("dataset: zero dimension");
    Tensor out({static_cast<std::size_t>(n), static_cast<std::size_t>(d)});
    for (double& v : out.data) v = detail::get_f64(is, "dataset");
    return out;
}

}  // namespace diveq
