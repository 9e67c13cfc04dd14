// SPDX-License-Identifier: Apache-2.0
//
// Differentiable vector-quantization estimators. Every estimator takes a
// batch of latents (N x D) and a codebook matrix (K x D), both recorded on
// a tape, and returns a quantized batch z_q whose forward value and
// pullbacks realize that estimator's semantics:
//
//   HARD             nearest codeword, no gradient anywhere
//   STE              hard forward, identity pullback to the latents
//   EMA              STE passthrough; codebook learns via ema_update
//   RT               hard forward, pullback through a frozen per-sample
//                    rotation/rescale applied to the latents
//   STGS             hard forward through an argmax of Gumbel-softmax
//                    assignments, soft pullback into latents and codebook
//   NSVQ             latents plus an isotropic noise vector rescaled to the
//                    true quantization-error magnitude
//   DIVEQ            latents plus directional noise pointing at the nearest
//                    codeword, magnitude equal to the true error
//   SF_DIVEQ         quantization onto per-batch dithered points on the
//                    segments between consecutive codewords
//   *_DETACH         DiVeQ / SF-DiVeQ with the noise removed exactly
//
// Estimators are pure given (inputs, codebook snapshot, draw); batches may
// be evaluated concurrently against a read-locked codebook. Mutation
// (ema_update, usage recording) is single-writer.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diveq/codebook.hpp"
#include "diveq/rng.hpp"
#include "diveq/tape.hpp"

namespace diveq {

enum class Method {
    HARD,
    STE,
    EMA,
    RT,
    STGS,
    NSVQ,
    DIVEQ,
    SF_DIVEQ,
    DIVEQ_DETACH,
    SF_DIVEQ_DETACH,
};

const char* method_name(Method m);
Method method_from_name(const std::string& name);
bool method_is_noise_family(Method m);  // no auxiliary loss terms
bool method_is_sf(Method m);

struct TauSchedule {
    double tau_start = 1.0;
    double tau_min = 0.1;
    std::size_t n_epochs = 100;
};

struct QuantizerConfig {
    Method method = Method::DIVEQ;
    double sigma2 = 1e-3;  // directional-noise variance
    double alpha = 1.0;    // codebook-loss weight
    double beta = 0.25;    // commitment-loss weight
    double gamma = 0.99;   // moving-average decay
    double phi = 1.0;      // KL weight (STGS)
    TauSchedule tau;
    std::uint64_t rng_seed = 0;

    void validate() const;  // throws config_error naming the field
};

// Frozen stochastic context of one quantization call. Estimators record
// the draw they used; passing it back re-evaluates the same assignment and
// noise, which is what finite-difference gradient checks need (every
// gradient-opaque quantity stays at its recorded value).
struct QuantizerDraw {
    std::vector<std::size_t> indices;     // codeword (or segment) per sample
    Tensor unit_dirs;                     // N x D gradient-opaque directions
    Tensor unit_dirs2;                    // N x D secondary directions (SF)
    std::vector<double> lambdas;          // per-sample interpolation factors
    std::vector<Tensor> rotations;        // per-sample frozen rho*R (RT)
    std::vector<std::uint8_t> ste_rows;   // RT rows that fell back to STE
    Tensor ste_offsets;                   // N x D frozen hard-minus-latent offsets
    Tensor gumbels;                       // N x K Gumbel draws (STGS)
};

struct QuantizationResult {
    ad::Var z_q;            // production output
    ad::Var z_q_surrogate;  // differentiable path (pre hard-forward splice)
    std::vector<std::size_t> indices;
    std::vector<double> lambda;  // SF variants only
    Tensor hard_points;          // N x D hard assignment targets
    double distortion = 0.0;     // mean squared distance to hard_points
    QuantizerDraw draw;
    std::size_t rt_ste_fallbacks = 0;
    ad::Var soft_assignments;  // STGS row-stochastic assignments
};

// Per-sample rotation/rescale factors mapping a latent direction onto its
// codeword direction.
struct RotationFactors {
    double rho = 1.0;            // ||c|| / ||z||
    std::vector<double> r;       // unit reflection direction
    std::vector<double> z_bar;   // unit latent
    std::vector<double> c_bar;   // unit codeword
    Tensor matrix;               // D x D, rho * (I - 2 r r^T + 2 c_bar z_bar^T)
};
RotationFactors compute_rotation(const double* z, const double* c, std::size_t d);

QuantizationResult quantize_hard(ad::Tape& tape, ad::Var z, ad::Var codebook);
QuantizationResult quantize_ste(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                const QuantizerDraw* frozen = nullptr);
QuantizationResult quantize_rt(ad::Tape& tape, ad::Var z, ad::Var codebook,
                               const QuantizerDraw* frozen = nullptr);
QuantizationResult quantize_stgs(ad::Tape& tape, ad::Var z, ad::Var codebook, double tau,
                                 Rng& rng, const QuantizerDraw* frozen = nullptr);
QuantizationResult quantize_nsvq(ad::Tape& tape, ad::Var z, ad::Var codebook, Rng& rng,
                                 const QuantizerDraw* frozen = nullptr);
QuantizationResult quantize_diveq(ad::Tape& tape, ad::Var z, ad::Var codebook, double sigma2,
                                  Rng& rng, const QuantizerDraw* frozen = nullptr);
QuantizationResult quantize_sf_diveq(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                     double sigma2, Rng& rng,
                                     const QuantizerDraw* frozen = nullptr);
QuantizationResult quantize_diveq_detach(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                         const QuantizerDraw* frozen = nullptr);
QuantizationResult quantize_sf_diveq_detach(ad::Tape& tape, ad::Var z, ad::Var codebook,
                                            Rng& rng,
                                            const QuantizerDraw* frozen = nullptr);

// Dispatch on config.method. `tau` only matters for STGS.
QuantizationResult quantize(ad::Tape& tape, ad::Var z, ad::Var codebook,
                            const QuantizerConfig& config, double tau, Rng& rng,
                            const QuantizerDraw* frozen = nullptr);

// Moving-average codebook update. For every codeword the averaged count and
// numerator decay by gamma and absorb this batch's assignments; vectors are
// recomputed only for codewords that were actually selected. Returns the
// number of divisions skipped because the averaged count reached zero.
std::size_t ema_update(Codebook& codebook, const Tensor& z_batch,
                       const std::vector<std::size_t>& indices, double gamma);

// Multi-stage residual quantization: stage 1 quantizes z, each later stage
// quantizes the hard residual of the previous one, and the differentiable
// total is the sum of the per-stage outputs.
struct ResidualStageResult {
    std::vector<QuantizationResult> stage_results;
    std::vector<Tensor> residuals;  // residual after each stage
    ad::Var z_hat_total;
    Tensor hard_total;
    double distortion = 0.0;  // mean squared distance between z and hard_total
};
ResidualStageResult quantize_residual(ad::Tape& tape, ad::Var z,
                                      const std::vector<ad::Var>& codebooks,
                                      const QuantizerConfig& config, double tau, Rng& rng);

// Radius below which a latent counts as already sitting on its target;
// noise-based estimators then return the latent unchanged with zero
// auxiliary gradient.
inline constexpr double kDegenerateRadius = 1e-12;
// Norm threshold under which RT falls back to STE semantics for a sample.
inline constexpr double kRotationNormFloor = 1e-9;

}  // namespace diveq
