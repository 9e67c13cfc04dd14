// SPDX-License-Identifier: Apache-2.0
//
// Composite training objectives per estimator family. Term conventions:
// reconstruction is a mean over all entries; the codebook and commitment
// terms are means over samples of squared Euclidean norms.

#pragma once

#include "diveq/quantizers.hpp"
#include "diveq/tape.hpp"

namespace diveq {

struct LossBreakdown {
    double reconstruction = 0.0;
    double codebook_term = 0.0;    // pulls selected codewords toward latents
    double commitment_term = 0.0;  // pulls latents toward selected codewords
    double kl_term = 0.0;          // batch-usage prior pressure (STGS only)
    double total = 0.0;
    ad::Var total_var;  // the value actually backpropagated
};

// Reconstruction + codebook + commitment. EMA-style training passes
// include_codebook_term = false (its codebook learns from moving averages
// instead of this gradient).
LossBreakdown loss_ste_family(ad::Tape& tape, ad::Var x, ad::Var x_r, ad::Var z,
                              const QuantizationResult& quantization, ad::Var codebook,
                              double alpha, double beta, bool include_codebook_term = true);

// Reconstruction + phi * KL between the batch-mean soft assignment and the
// uniform distribution over codewords.
LossBreakdown loss_gs(ad::Tape& tape, ad::Var x, ad::Var x_r, ad::Var soft_assignments,
                      double phi);

// phi * KL(batch-mean assignment || uniform); the KL piece of loss_gs.
ad::Var kl_to_uniform(ad::Tape& tape, ad::Var soft_assignments, double phi);

// Reconstruction only; the codebook learns through the quantization path.
LossBreakdown loss_noise_family(ad::Tape& tape, ad::Var x, ad::Var x_r);

}  // namespace diveq
