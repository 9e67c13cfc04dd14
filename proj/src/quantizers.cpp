// SPDX-License-Identifier: Apache-2.0

#include "diveq/quantizers.hpp"

#include <algorithm>
#include <cmath>

#include "diveq/errors.hpp"

namespace diveq {

namespace {

constexpr int kMaxNoiseRetries = 100;

void require_batch_shapes(const char* op, const Tensor& z, const Tensor& cb) {
    if (z.rank() != 2 || cb.rank() != 2) {
        throw shape_error(std::string(op) + ": expected matrices, got " + z.shape_str() +
                          " and " + cb.shape_str());
    }
    if (z.cols() != cb.cols()) {
        throw shape_error(std::string(op) + ": dimension mismatch " + z.shape_str() +
                          " vs codebook " + cb.shape_str());
    }
}

std::vector<std::size_t> resolve_indices(const Tensor& z, const Tensor& rows,
                                         const QuantizerDraw* frozen) {
    if (frozen) {
        if (frozen->indices.size() != z.rows()) {
            throw shape_error("quantize: frozen draw has " +
                              std::to_string(frozen->indices.size()) + " indices for " +
                              std::to_string(z.rows()) + " samples");
        }
        return frozen->indices;
    }
    return nearest_rows(z, rows).indices;
}

Tensor gather_values(const Tensor& m, const std::vector<std::size_t>& indices) {
    Tensor out({indices.size(), m.cols()});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        std::copy_n(m.row(indices[r]), m.cols(), out.row(r));
    }
    return out;
}

double mean_sq_distortion(const Tensor& z, const Tensor& hard) {
    if (z.rows() == 0) return 0.0;
    double acc = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r)
        acc += squared_distance(z.row(r), hard.row(r), z.cols());
    return acc / static_cast<double>(z.rows());
}

// Gaussian sample with standard deviation `sigma`, retried while its norm
// is numerically unusable.
std::vector<double> sample_noise(Rng& rng, std::size_t d, double sigma) {
    std::vector<double> v(d);
    for (int attempt = 0; attempt < kMaxNoiseRetries; ++attempt) {
        for (double& x : v) x = sigma * rng.normal();
        if (norm(v.data(), d) >= ad::kDenomEpsilon) return v;
    }
    throw numeric_error("quantize: noise vector norm below threshold after retries");
}

}  // namespace

const char* method_name(Method m) {
    switch (m) {
        case Method::HARD: return "hard";
        case Method::STE: return "ste";
        case Method::EMA: return "ema";
        case Method::RT: return "rt";
        case Method::STGS: return "stgs";
        case Method::NSVQ: return "nsvq";
        case Method::DIVEQ: return "diveq";
        case Method::SF_DIVEQ: return "sf_diveq";
        case Method::DIVEQ_DETACH: return "diveq_detach";
        case Method::SF_DIVEQ_DETACH: return "sf_diveq_detach";
    }
    return "?";
}

Method method_from_name(const std::string& name) {
    for (Method m : {Method::HARD, Method::STE, Method::EMA, Method::RT, Method::STGS,
                     Method::NSVQ, Method::DIVEQ, Method::SF_DIVEQ, Method::DIVEQ_DETACH,
                     Method::SF_DIVEQ_DETACH}) {
        if (name == method_name(m)) return m;
    }
    throw config_error("quantizer.method: unknown method '" + name + "'");
}

bool method_is_noise_family(Method m) {
    return m == Method::NSVQ || m == Method::DIVEQ || m == Method::SF_DIVEQ ||
           m == Method::DIVEQ_DETACH || m == Method::SF_DIVEQ_DETACH;
}

bool method_is_sf(Method m) {
    return m == Method::SF_DIVEQ || m == Method::SF_DIVEQ_DETACH;
}

void QuantizerConfig::validate() const {
    const bool needs_sigma = method == Method::DIVEQ || method == Method::SF_DIVEQ;
    if (needs_sigma && !(sigma2 > 0.0)) {
        throw config_error("quantizer.sigma2: must be > 0, got " + std::to_string(sigma2));
    }
    if (!(gamma > 0.0 && gamma < 1.0)) {
        throw config_error("quantizer.gamma: must lie in (0, 1), got " + std::to_string(gamma));
    }
    if (!(tau.tau_min > 0.0) || !(tau.tau_start >= tau.tau_min)) {
        throw config_error("quantizer.tau: need tau_start >= tau_min > 0");
    }
    if (alpha < 0.0) throw config_error("quantizer.alpha: must be >= 0");
    if (beta < 0.0) throw config_error("quantizer.beta: must be >= 0");
    if (phi < 0.0) throw config_error("quantizer.phi: must be >= 0");
}

QuantizationResult quantize_hard(ad::Tape& tape, ad::Var z, ad::Var codebook) {
    require_batch_shapes("quantize_hard", z.value(), codebook.value());
    QuantizationResult result;
    result.indices = nearest_rows(z.value(), codebook.value()).indices;
    result.hard_points = gather_values(codebook.value(), result.indices);
    result.distortion = mean_sq_distortion(z.value(), result.hard_points);
    result.z_q = tape.constant(result.hard_points);
    result.z_q_surrogate = result.z_q;
    result.draw.indices = result.indices;
    return result;
}

QuantizationResult quantize_ste(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                const QuantizerDraw* frozen) {
    require_batch_shapes("quantize_ste", z.value(), codebook.value());
    QuantizationResult result;
    result.indices = resolve_indices(z.value(), codebook.value(), frozen);
    result.hard_points = gather_values(codebook.value(), result.indices);
    result.distortion = mean_sq_distortion(z.value(), result.hard_points);

    // z + sg[hard - z]: identity pullback to z, nothing to the codebook.
    Tensor offset({z.value().rows(), z.value().cols()});
    if (frozen && !frozen->ste_offsets.data.empty()) {
        offset = frozen->ste_offsets;
    } else {
        for (std::size_t i = 0; i < offset.numel(); ++i)
            offset.data[i] = result.hard_points.data[i] - z.value().data[i];
    }
    result.draw.ste_offsets = offset;
    result.z_q_surrogate = ad::add(z, tape.constant(std::move(offset)));
    result.z_q = ad::straight_through(result.z_q_surrogate, result.hard_points);
    result.draw.indices = result.indices;
    return result;
}

RotationFactors compute_rotation(const double* z, const double* c, std::size_t d) {
    RotationFactors f;
    const double zn = norm(z, d);
    const double cn = norm(c, d);
    f.rho = cn / (zn + ad::kDenomEpsilon);
    f.z_bar.resize(d);
    f.c_bar.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        f.z_bar[i] = z[i] / (zn + ad::kDenomEpsilon);
        f.c_bar[i] = c[i] / (cn + ad::kDenomEpsilon);
    }
    f.r.resize(d);
    for (std::size_t i = 0; i < d; ++i) f.r[i] = f.z_bar[i] + f.c_bar[i];
    const double rn = norm(f.r.data(), d);
    for (std::size_t i = 0; i < d; ++i) f.r[i] /= (rn + ad::kDenomEpsilon);

    f.matrix = Tensor({d, d});
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double m = (i == j ? 1.0 : 0.0);
            m -= 2.0 * f.r[i] * f.r[j];
            m += 2.0 * f.c_bar[i] * f.z_bar[j];
            f.matrix.data[i * d + j] = f.rho * m;
        }
    }
    return f;
}

QuantizationResult quantize_rt(ad::Tape& tape, ad::Var z, ad::Var codebook,
                               const QuantizerDraw* frozen) {
    require_batch_shapes("quantize_rt", z.value(), codebook.value());
    const Tensor& zv = z.value();
    const std::size_t n = zv.rows(), d = zv.cols();

    QuantizationResult result;
    result.indices = resolve_indices(zv, codebook.value(), frozen);
    result.hard_points = gather_values(codebook.value(), result.indices);
    result.distortion = mean_sq_distortion(zv, result.hard_points);

    std::vector<Tensor> mats;
    std::vector<std::uint8_t> ste_rows;
    if (frozen && !frozen->rotations.empty()) {
        mats = frozen->rotations;
        ste_rows = frozen->ste_rows;
        if (mats.size() != n) {
            throw shape_error("quantize_rt: frozen draw rotation count mismatch");
        }
    } else {
        mats.reserve(n);
        ste_rows.assign(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const double zn = norm(zv.row(i), d);
            const double cn = norm(result.hard_points.row(i), d);
            if (zn < kRotationNormFloor || cn < kRotationNormFloor) {
                // Degenerate norms: identity map plus hard offset, i.e. STE.
                Tensor eye({d, d});
                for (std::size_t j = 0; j < d; ++j) eye.data[j * d + j] = 1.0;
                mats.push_back(std::move(eye));
                ste_rows[i] = 1;
            } else {
                mats.push_back(compute_rotation(zv.row(i), result.hard_points.row(i), d).matrix);
            }
        }
    }
    for (std::uint8_t flag : ste_rows) result.rt_ste_fallbacks += flag;

    // Rows flagged for STE get an additive offset so their surrogate stays
    // z + (hard - z); rotated rows get offset 0.
    Tensor offset({n, d}, 0.0);
    if (frozen && !frozen->ste_offsets.data.empty()) {
        offset = frozen->ste_offsets;
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            if (!ste_rows[i]) continue;
            for (std::size_t c = 0; c < d; ++c)
                offset.data[i * d + c] =
                    result.hard_points.data[i * d + c] - zv.data[i * d + c];
        }
    }
    result.draw.ste_offsets = offset;

    result.z_q_surrogate =
        ad::add(ad::frozen_rows_matvec(mats, z), tape.constant(std::move(offset)));
    result.z_q = ad::straight_through(result.z_q_surrogate, result.hard_points);
    result.draw.indices = result.indices;
    result.draw.rotations = std::move(mats);
    result.draw.ste_rows = std::move(ste_rows);
    return result;
}

QuantizationResult quantize_stgs(ad::Tape& tape, ad::Var z, ad::Var codebook, double tau,
                                 Rng& rng, const QuantizerDraw* frozen) {
    require_batch_shapes("quantize_stgs", z.value(), codebook.value());
    if (!(tau > 0.0)) {
        throw config_error("quantize_stgs: tau must be > 0, got " + std::to_string(tau));
    }
    const std::size_t n = z.value().rows(), k = codebook.value().rows();

    Tensor gumbels({n, k});
    if (frozen) {
        if (!frozen->gumbels.same_shape(gumbels)) {
            throw shape_error("quantize_stgs: frozen gumbel shape mismatch");
        }
        gumbels = frozen->gumbels;
    } else {
        for (double& g : gumbels.data) g = rng.gumbel();
    }

    // Logits are negative squared distances to each codeword.
    ad::Var logits = ad::scale(ad::pairwise_sqdist(z, codebook), -1.0);
    ad::Var perturbed = ad::add(logits, tape.constant(gumbels));
    ad::Var y = ad::softmax_rows(ad::scale(perturbed, 1.0 / tau));

    QuantizationResult result;
    result.indices.resize(n);
    const Tensor& yv = y.value();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (yv.data[i * k + j] > yv.data[i * k + best]) best = j;
        }
        result.indices[i] = best;
    }
    result.hard_points = gather_values(codebook.value(), result.indices);
    result.distortion = mean_sq_distortion(z.value(), result.hard_points);
    result.z_q_surrogate = ad::matmul(y, codebook);
    result.z_q = ad::straight_through(result.z_q_surrogate, result.hard_points);
    result.soft_assignments = y;
    result.draw.indices = result.indices;
    result.draw.gumbels = std::move(gumbels);
    return result;
}

namespace {

// Shared core of the noise-family estimators: z_q = z + ||target - z|| * u
// with a gradient-opaque unit direction u per sample.
QuantizationResult directional_result(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                      std::vector<std::size_t> indices, Tensor unit_dirs,
                                      Tensor hard_points, bool exact_hard_forward) {
    QuantizationResult result;
    result.indices = std::move(indices);
    result.hard_points = std::move(hard_points);
    result.distortion = mean_sq_distortion(z.value(), result.hard_points);

    ad::Var selected = ad::gather_rows(codebook, result.indices);
    ad::Var radius = ad::row_l2norm(ad::sub(selected, z));
    result.z_q_surrogate = ad::add(z, ad::row_scale(radius, tape.constant(unit_dirs)));
    result.z_q = exact_hard_forward
                     ? ad::straight_through(result.z_q_surrogate, result.hard_points)
                     : result.z_q_surrogate;
    result.draw.indices = result.indices;
    result.draw.unit_dirs = std::move(unit_dirs);
    return result;
}

}  // namespace

QuantizationResult quantize_nsvq(ad::Tape& tape, ad::Var z, ad::Var codebook, Rng& rng,
                                 const QuantizerDraw* frozen) {
    require_batch_shapes("quantize_nsvq", z.value(), codebook.value());
    const Tensor& zv = z.value();
    const std::size_t n = zv.rows(), d = zv.cols();

    std::vector<std::size_t> indices = resolve_indices(zv, codebook.value(), frozen);
    Tensor hard = gather_values(codebook.value(), indices);

    Tensor unit({n, d});
    if (frozen) {
        unit = frozen->unit_dirs;
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const double radius = std::sqrt(squared_distance(zv.row(i), hard.row(i), d));
            if (radius < kDegenerateRadius) continue;  // row stays zero
            const std::vector<double> v = sample_noise(rng, d, 1.0);
            const double vn = norm(v.data(), d);
            for (std::size_t c = 0; c < d; ++c) unit.data[i * d + c] = v[c] / vn;
        }
    }
    return directional_result(tape, z, codebook, std::move(indices), std::move(unit),
                              std::move(hard), /*exact_hard_forward=*/false);
}

QuantizationResult quantize_diveq(ad::Tape& tape, ad::Var z, ad::Var codebook, double sigma2,
                                  Rng& rng, const QuantizerDraw* frozen) {
    require_batch_shapes("quantize_diveq", z.value(), codebook.value());
    if (!(sigma2 > 0.0)) {
        throw config_error("quantize_diveq: sigma2 must be > 0, got " + std::to_string(sigma2));
    }
    const Tensor& zv = z.value();
    const std::size_t n = zv.rows(), d = zv.cols();
    const double sigma = std::sqrt(sigma2);

    std::vector<std::size_t> indices = resolve_indices(zv, codebook.value(), frozen);
    Tensor hard = gather_values(codebook.value(), indices);

    Tensor unit({n, d});
    if (frozen) {
        unit = frozen->unit_dirs;
    } else {
        std::vector<double> dir(d);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < d; ++c) dir[c] = hard.data[i * d + c] - zv.data[i * d + c];
            if (norm(dir.data(), d) < kDegenerateRadius) continue;  // already on target
            double vd_norm = 0.0;
            std::vector<double> vd(d);
            for (int attempt = 0; attempt < kMaxNoiseRetries; ++attempt) {
                for (std::size_t c = 0; c < d; ++c) vd[c] = sigma * rng.normal() + dir[c];
                vd_norm = norm(vd.data(), d);
                if (vd_norm >= ad::kDenomEpsilon) break;
            }
            if (vd_norm < ad::kDenomEpsilon) {
                throw numeric_error("quantize_diveq: directional noise collapsed after retries");
            }
            for (std::size_t c = 0; c < d; ++c) unit.data[i * d + c] = vd[c] / vd_norm;
        }
    }
    return directional_result(tape, z, codebook, std::move(indices), std::move(unit),
                              std::move(hard), /*exact_hard_forward=*/false);
}

QuantizationResult quantize_diveq_detach(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                         const QuantizerDraw* frozen) {
    require_batch_shapes("quantize_diveq_detach", z.value(), codebook.value());
    const Tensor& zv = z.value();
    const std::size_t n = zv.rows(), d = zv.cols();

    std::vector<std::size_t> indices = resolve_indices(zv, codebook.value(), frozen);
    Tensor hard = gather_values(codebook.value(), indices);

    Tensor unit({n, d});
    if (frozen) {
        unit = frozen->unit_dirs;
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const double radius = std::sqrt(squared_distance(zv.row(i), hard.row(i), d));
            if (radius < kDegenerateRadius) continue;
            for (std::size_t c = 0; c < d; ++c)
                unit.data[i * d + c] = (hard.data[i * d + c] - zv.data[i * d + c]) / radius;
        }
    }
    return directional_result(tape, z, codebook, std::move(indices), std::move(unit),
                              std::move(hard), /*exact_hard_forward=*/true);
}

namespace {

// Shared construction of both segment-interpolating estimators. The two
// gradient-opaque direction fields already carry the interpolation weights
// folded in; hard_points holds the winning interpolation point.
QuantizationResult segment_result(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                  std::vector<std::size_t> segments,
                                  std::vector<double> lambdas, Tensor dirs1, Tensor dirs2,
                                  Tensor hard_points, bool exact_hard_forward) {
    QuantizationResult result;
    result.indices = std::move(segments);
    result.lambda = std::move(lambdas);
    result.hard_points = std::move(hard_points);
    result.distortion = mean_sq_distortion(z.value(), result.hard_points);

    std::vector<std::size_t> next(result.indices.size());
    for (std::size_t i = 0; i < next.size(); ++i) next[i] = result.indices[i] + 1;

    ad::Var first = ad::gather_rows(codebook, result.indices);
    ad::Var second = ad::gather_rows(codebook, next);
    ad::Var radius1 = ad::row_l2norm(ad::sub(first, z));
    ad::Var radius2 = ad::row_l2norm(ad::sub(second, z));
    ad::Var moved = ad::add(ad::row_scale(radius1, tape.constant(dirs1)),
                            ad::row_scale(radius2, tape.constant(dirs2)));
    result.z_q_surrogate = ad::add(z, moved);
    result.z_q = exact_hard_forward
                     ? ad::straight_through(result.z_q_surrogate, result.hard_points)
                     : result.z_q_surrogate;
    result.draw.indices = result.indices;
    result.draw.lambdas = result.lambda;
    result.draw.unit_dirs = std::move(dirs1);
    result.draw.unit_dirs2 = std::move(dirs2);
    return result;
}

}  // namespace

QuantizationResult quantize_sf_diveq(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                     double sigma2, Rng& rng, const QuantizerDraw* frozen) {
    require_batch_shapes("quantize_sf_diveq", z.value(), codebook.value());
    if (!(sigma2 > 0.0)) {
        throw config_error("quantize_sf_diveq: sigma2 must be > 0");
    }
    const Tensor& zv = z.value();
    const Tensor& cv = codebook.value();
    const std::size_t n = zv.rows(), d = zv.cols(), k = cv.rows();
    if (k < 2) throw shape_error("quantize_sf_diveq: needs K >= 2");
    const double sigma = std::sqrt(sigma2);

    std::vector<std::size_t> segments;
    std::vector<double> lambdas(n);
    Tensor hard({n, d});
    Tensor dirs1({n, d});
    Tensor dirs2({n, d});

    if (frozen) {
        segments = frozen->indices;
        lambdas = frozen->lambdas;
        dirs1 = frozen->unit_dirs;
        dirs2 = frozen->unit_dirs2;
        for (std::size_t i = 0; i < n; ++i) {
            const double lam = lambdas[i];
            const double* a = cv.row(segments[i]);
            const double* b = cv.row(segments[i] + 1);
            for (std::size_t c = 0; c < d; ++c)
                hard.data[i * d + c] = (1.0 - lam) * a[c] + lam * b[c];
        }
    } else {
        // One fresh interpolation factor per segment per batch.
        Codebook view;  // dither works off a codebook; wrap the tape value
        view.vectors = cv;
        const DitheredCodebook dithered = dither(view, rng);
        const NearestResult near = nearest_rows(zv, dithered.points);
        segments = near.indices;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t seg = segments[i];
            const double lam = dithered.lambdas[seg];
            lambdas[i] = lam;
            std::copy_n(dithered.points.row(seg), d, hard.row(i));

            const double* c1 = cv.row(seg);
            const double* c2 = cv.row(seg + 1);
            if (squared_distance(c1, c2, d) < kDegenerateRadius * kDegenerateRadius) {
                // Collapsed segment: plain directional quantization onto c1.
                lambdas[i] = 0.0;
                std::copy_n(c1, d, hard.row(i));
            }
            const double lam_used = lambdas[i];

            std::vector<double> noise(d);
            for (std::size_t c = 0; c < d; ++c) noise[c] = sigma * rng.normal();

            // First endpoint direction, weighted by (1 - lambda).
            {
                std::vector<double> dir(d);
                for (std::size_t c = 0; c < d; ++c) dir[c] = c1[c] - zv.data[i * d + c];
                if (norm(dir.data(), d) >= kDegenerateRadius) {
                    std::vector<double> vd(d);
                    for (std::size_t c = 0; c < d; ++c) vd[c] = noise[c] + dir[c];
                    double vdn = norm(vd.data(), d);
                    for (int attempt = 0; vdn < ad::kDenomEpsilon && attempt < kMaxNoiseRetries;
                         ++attempt) {
                        for (std::size_t c = 0; c < d; ++c)
                            vd[c] = sigma * rng.normal() + dir[c];
                        vdn = norm(vd.data(), d);
                    }
                    if (vdn < ad::kDenomEpsilon) {
                        throw numeric_error(
                            "quantize_sf_diveq: directional noise collapsed after retries");
                    }
                    for (std::size_t c = 0; c < d; ++c)
                        dirs1.data[i * d + c] = (1.0 - lam_used) * vd[c] / vdn;
                }
            }
            // Second endpoint direction, weighted by lambda; skipped entirely
            // for a collapsed segment.
            if (lam_used > 0.0) {
                std::vector<double> dir(d);
                for (std::size_t c = 0; c < d; ++c) dir[c] = c2[c] - zv.data[i * d + c];
                if (norm(dir.data(), d) >= kDegenerateRadius) {
                    std::vector<double> vd(d);
                    for (std::size_t c = 0; c < d; ++c) vd[c] = noise[c] + dir[c];
                    double vdn = norm(vd.data(), d);
                    for (int attempt = 0; vdn < ad::kDenomEpsilon && attempt < kMaxNoiseRetries;
                         ++attempt) {
                        for (std::size_t c = 0; c < d; ++c)
                            vd[c] = sigma * rng.normal() + dir[c];
                        vdn = norm(vd.data(), d);
                    }
                    if (vdn < ad::kDenomEpsilon) {
                        throw numeric_error(
                            "quantize_sf_diveq: directional noise collapsed after retries");
                    }
                    for (std::size_t c = 0; c < d; ++c)
                        dirs2.data[i * d + c] = lam_used * vd[c] / vdn;
                }
            }
        }
    }
    return segment_result(tape, z, codebook, std::move(segments), std::move(lambdas),
                          std::move(dirs1), std::move(dirs2), std::move(hard),
                          /*exact_hard_forward=*/false);
}

QuantizationResult quantize_sf_diveq_detach(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                            Rng& rng, const QuantizerDraw* frozen) {
    require_batch_shapes("quantize_sf_diveq_detach", z.value(), codebook.value());
    const Tensor& zv = z.value();
    const Tensor& cv = codebook.value();
    const std::size_t n = zv.rows(), d = zv.cols(), k = cv.rows();
    if (k < 2) throw shape_error("quantize_sf_diveq_detach: needs K >= 2");

    std::vector<std::size_t> segments;
    std::vector<double> lambdas(n);
    Tensor hard({n, d});
    Tensor dirs1({n, d});
    Tensor dirs2({n, d});

    if (frozen) {
        segments = frozen->indices;
        lambdas = frozen->lambdas;
        dirs1 = frozen->unit_dirs;
        dirs2 = frozen->unit_dirs2;
        for (std::size_t i = 0; i < n; ++i) {
            const double lam = lambdas[i];
            const double* a = cv.row(segments[i]);
            const double* b = cv.row(segments[i] + 1);
            for (std::size_t c = 0; c < d; ++c)
                hard.data[i * d + c] = (1.0 - lam) * a[c] + lam * b[c];
        }
    } else {
        Codebook view;
        view.vectors = cv;
        const DitheredCodebook dithered = dither(view, rng);
        const NearestResult near = nearest_rows(zv, dithered.points);
        segments = near.indices;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t seg = segments[i];
            double lam = dithered.lambdas[seg];
            const double* c1 = cv.row(seg);
            const double* c2 = cv.row(seg + 1);
            if (squared_distance(c1, c2, d) < kDegenerateRadius * kDegenerateRadius) {
                lam = 0.0;
            }
            lambdas[i] = lam;
            for (std::size_t c = 0; c < d; ++c)
                hard.data[i * d + c] = (1.0 - lam) * c1[c] + lam * c2[c];

            const double r1 = std::sqrt(squared_distance(c1, zv.row(i), d));
            if (r1 >= kDegenerateRadius) {
                for (std::size_t c = 0; c < d; ++c)
                    dirs1.data[i * d + c] = (1.0 - lam) * (c1[c] - zv.data[i * d + c]) / r1;
            }
            const double r2 = std::sqrt(squared_distance(c2, zv.row(i), d));
            if (lam > 0.0 && r2 >= kDegenerateRadius) {
                for (std::size_t c = 0; c < d; ++c)
                    dirs2.data[i * d + c] = lam * (c2[c] - zv.data[i * d + c]) / r2;
            }
        }
    }
    return segment_result(tape, z, codebook, std::move(segments), std::move(lambdas),
                          std::move(dirs1), std::move(dirs2), std::move(hard),
                          /*exact_hard_forward=*/true);
}

QuantizationResult quantize(ad::Tape& tape, ad::Var z, ad::Var codebook,
                            const QuantizerConfig& config, double tau, Rng& rng,
                            const QuantizerDraw* frozen) {
    switch (config.method) {
        case Method::HARD: return quantize_hard(tape, z, codebook);
        case Method::STE:
        case Method::EMA: return quantize_ste(tape, z, codebook, frozen);
        case Method::RT: return quantize_rt(tape, z, codebook, frozen);
        case Method::STGS: return quantize_stgs(tape, z, codebook, tau, rng, frozen);
        case Method::NSVQ: return quantize_nsvq(tape, z, codebook, rng, frozen);
        case Method::DIVEQ:
            return quantize_diveq(tape, z, codebook, config.sigma2, rng, frozen);
        case Method::SF_DIVEQ:
            return quantize_sf_diveq(tape, z, codebook, config.sigma2, rng, frozen);
        case Method::DIVEQ_DETACH: return quantize_diveq_detach(tape, z, codebook, frozen);
        case Method::SF_DIVEQ_DETACH:
            return quantize_sf_diveq_detach(tape, z, codebook, rng, frozen);
    }
    throw config_error("quantize: unknown method");
}

std::size_t ema_update(Codebook& codebook, const Tensor& z_batch,
                       const std::vector<std::size_t>& indices, double gamma) {
    if (z_batch.rank() != 2 || z_batch.cols() != codebook.dim()) {
        throw shape_error("ema_update: batch " + z_batch.shape_str() + " vs codebook dim " +
                          std::to_string(codebook.dim()));
    }
    if (indices.size() != z_batch.rows()) {
        throw shape_error("ema_update: " + std::to_string(indices.size()) + " indices for " +
                          std::to_string(z_batch.rows()) + " samples");
    }
    const std::size_t k = codebook.size(), d = codebook.dim();

    std::vector<double> batch_count(k, 0.0);
    Tensor batch_sum({k, d}, 0.0);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::size_t idx = indices[i];
        if (idx >= k) throw shape_error("ema_update: index out of range");
        batch_count[idx] += 1.0;
        for (std::size_t c = 0; c < d; ++c)
            batch_sum.data[idx * d + c] += z_batch.data[i * d + c];
    }

    std::size_t skipped = 0;
    for (std::size_t j = 0; j < k; ++j) {
        codebook.ema_h[j] = gamma * codebook.ema_h[j] + (1.0 - gamma) * batch_count[j];
        for (std::size_t c = 0; c < d; ++c) {
            codebook.ema_g.data[j * d + c] = gamma * codebook.ema_g.data[j * d + c] +
                                             (1.0 - gamma) * batch_sum.data[j * d + c];
        }
        if (batch_count[j] == 0.0) continue;  // unselected vectors stay put
        if (codebook.ema_h[j] == 0.0) {
            ++skipped;
            continue;
        }
        for (std::size_t c = 0; c < d; ++c)
            codebook.vectors.data[j * d + c] = codebook.ema_g.data[j * d + c] / codebook.ema_h[j];
    }
    codebook.has_ema = true;
    return skipped;
}

ResidualStageResult quantize_residual(ad::Tape& tape, ad::Var z,
                                      const std::vector<ad::Var>& codebooks,
                                      const QuantizerConfig& config, double tau, Rng& rng) {
    if (codebooks.empty()) {
        throw shape_error("quantize_residual: needs at least one codebook");
    }
    const Tensor& zv = z.value();
    const std::size_t d = zv.cols();
    for (const ad::Var& cb : codebooks) {
        if (cb.value().cols() != d) {
            throw shape_error("quantize_residual: codebook dim mismatch");
        }
    }

    ResidualStageResult out;
    Tensor stage_input = zv;
    ad::Var stage_input_var = z;
    for (std::size_t s = 0; s < codebooks.size(); ++s) {
        QuantizationResult q;
        try {
            q = quantize(tape, stage_input_var, codebooks[s], config, tau, rng);
        } catch (const std::exception& e) {
            throw runtime_abort("residual stage " + std::to_string(s + 1) + ": " + e.what());
        }

        Tensor residual({zv.rows(), d});
        for (std::size_t i = 0; i < residual.numel(); ++i)
            residual.data[i] = stage_input.data[i] - q.hard_points.data[i];

        out.z_hat_total = (s == 0) ? q.z_q : ad::add(out.z_hat_total, q.z_q);
        if (s == 0) {
            out.hard_total = q.hard_points;
        } else {
            for (std::size_t i = 0; i < out.hard_total.numel(); ++i)
                out.hard_total.data[i] += q.hard_points.data[i];
        }
        out.stage_results.push_back(std::move(q));
        out.residuals.push_back(residual);

        stage_input = std::move(residual);
        stage_input_var = tape.constant(stage_input);
    }
    out.distortion = mean_sq_distortion(zv, out.hard_total);
    return out;
}

}  // namespace diveq
