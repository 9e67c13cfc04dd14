// SPDX-License-Identifier: Apache-2.0

#include "diveq/losses.hpp"

#include <cmath>

#include "diveq/errors.hpp"

namespace diveq {

namespace {

ad::Var mse(ad::Var x, ad::Var x_r) {
    if (!x.value().same_shape(x_r.value())) {
        throw shape_error("loss: reconstruction shape " + x_r.value().shape_str() +
                          " vs input " + x.value().shape_str());
    }
    const double inv = 1.0 / static_cast<double>(x.value().numel());
    return ad::scale(ad::sqnorm(ad::sub(x, x_r)), inv);
}

// Mean over samples of squared row norms.
ad::Var mean_row_sqnorm(ad::Var m) {
    const double inv = 1.0 / static_cast<double>(m.value().rows());
    return ad::scale(ad::sum(ad::row_sqnorm(m)), inv);
}

}  // namespace

LossBreakdown loss_ste_family(ad::Tape& tape, ad::Var x, ad::Var x_r, ad::Var z,
                              const QuantizationResult& quantization, ad::Var codebook,
                              double alpha, double beta, bool include_codebook_term) {
    LossBreakdown out;
    ad::Var recon = mse(x, x_r);
    ad::Var selected = ad::gather_rows(codebook, quantization.indices);
    ad::Var commitment =
        ad::scale(mean_row_sqnorm(ad::sub(z, ad::stop_gradient(selected))), beta);

    ad::Var total = ad::add(recon, commitment);
    if (include_codebook_term) {
        ad::Var cb_term =
            ad::scale(mean_row_sqnorm(ad::sub(ad::stop_gradient(z), selected)), alpha);
        total = ad::add(total, cb_term);
        out.codebook_term = cb_term.value().scalar_value();
    }
    out.reconstruction = recon.value().scalar_value();
    out.commitment_term = commitment.value().scalar_value();
    out.total = total.value().scalar_value();
    out.total_var = total;
    return out;
}

ad::Var kl_to_uniform(ad::Tape& tape, ad::Var soft_assignments, double phi) {
    const std::size_t k = soft_assignments.value().cols();
    // KL(mean assignment || uniform) = ln K + sum_k q_k ln q_k.
    ad::Var q_bar = ad::col_mean(soft_assignments);
    return ad::scale(
        ad::add(tape.constant(Tensor::scalar(std::log(static_cast<double>(k)))),
                ad::sum(ad::xlogx(q_bar))),
        phi);
}

LossBreakdown loss_gs(ad::Tape& tape, ad::Var x, ad::Var x_r, ad::Var soft_assignments,
                      double phi) {
    LossBreakdown out;
    ad::Var recon = mse(x, x_r);
    ad::Var kl = kl_to_uniform(tape, soft_assignments, phi);
    ad::Var total = ad::add(recon, kl);
    out.reconstruction = recon.value().scalar_value();
    out.kl_term = kl.value().scalar_value();
    out.total = total.value().scalar_value();
    out.total_var = total;
    return out;
}

LossBreakdown loss_noise_family(ad::Tape& tape, ad::Var x, ad::Var x_r) {
    (void)tape;
    LossBreakdown out;
    ad::Var recon = mse(x, x_r);
    out.reconstruction = recon.value().scalar_value();
    out.total = out.reconstruction;
    out.total_var = recon;
    return out;
}

}  // namespace diveq
