// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "diveq/errors.hpp"
#include "diveq/gradcheck.hpp"
#include "diveq/quantizers.hpp"
#include "oracles.hpp"

using namespace diveq;

namespace {

double row_distance(const Tensor& a, const Tensor& b, std::size_t row) {
    return std::sqrt(squared_distance(a.row(row), b.row(row), a.cols()));
}

// Weighted-sum functional of a quantized batch; weights keep coordinates of
// the gradient away from zero.
double estimator_gradcheck(Method method, double sigma2, std::size_t n, std::size_t d,
                           std::size_t k, std::uint64_t seed, bool wrt_codebook) {
    Rng rng(seed);
    const Tensor z = oracles::random_tensor({n, d}, rng);
    const Tensor book = oracles::random_tensor({k, d}, rng);
    const Tensor weights = oracles::random_tensor({n, d}, rng, 0.5, 1.5);

    // One reference call to capture the frozen draw.
    QuantizerDraw draw;
    {
        ad::Tape tape;
        ad::Var zv = tape.input(z);
        ad::Var cv = tape.input(book);
        QuantizerConfig cfg;
        cfg.method = method;
        cfg.sigma2 = sigma2;
        Rng noise(seed + 1);
        draw = quantize(tape, zv, cv, cfg, 1.0, noise).draw;
    }

    auto fn = [&](ad::Tape& tape, const std::vector<ad::Var>& in) {
        ad::Var zv = in[0];
        ad::Var cv = in.size() > 1 ? in[1] : tape.constant(book);
        QuantizerConfig cfg;
        cfg.method = method;
        cfg.sigma2 = sigma2;
        Rng unused(0);
        QuantizationResult q = quantize(tape, zv, cv, cfg, 1.0, unused, &draw);
        return ad::sum(ad::mul(q.z_q_surrogate, tape.constant(weights)));
    };
    if (wrt_codebook) {
        return ad::check_gradient(fn, {z, book});
    }
    return ad::check_gradient(fn, {z});
}

Codebook axis_book() {
    return Codebook::init(Tensor::from({2, 2}, {1, 0, -1, 0}));
}

}  // namespace

TEST_CASE("hard quantization") {
    ad::Tape tape;
    Codebook cb = axis_book();
    ad::Var cv = tape.input(cb.vectors);

    SUBCASE("latent on a codeword has zero distortion") {
        ad::Var z = tape.constant(Tensor::from({1, 2}, {1, 0}));
        QuantizationResult q = quantize_hard(tape, z, cv);
        CHECK(q.indices[0] == 0);
        CHECK(q.distortion == 0.0);
    }
    SUBCASE("latent near a codeword snaps to it") {
        ad::Var z = tape.constant(Tensor::from({1, 2}, {0.9, 0}));
        QuantizationResult q = quantize_hard(tape, z, cv);
        CHECK(q.z_q.value().at(0, 0) == 1.0);
        CHECK(q.z_q.value().at(0, 1) == 0.0);
    }
    SUBCASE("no gradient reaches the latents or codebook") {
        ad::Var z = tape.input(Tensor::from({1, 2}, {0.9, 0}));
        QuantizationResult q = quantize_hard(tape, z, cv);
        tape.backward(ad::sum(q.z_q));
        for (double g : tape.grad(z).data) CHECK(g == 0.0);
        for (double g : tape.grad(cv).data) CHECK(g == 0.0);
    }
}

TEST_CASE("hard quantization matches the exhaustive scan on random batches") {
    Rng rng(404);
    const Tensor book = oracles::random_tensor({8, 3}, rng);
    const Tensor z = oracles::random_tensor({64, 3}, rng);
    ad::Tape tape;
    QuantizationResult q =
        quantize_hard(tape, tape.constant(z), tape.constant(book));
    const std::vector<std::size_t> want = oracles::brute_nearest(z, book);
    for (std::size_t i = 0; i < 64; ++i) {
        CHECK(q.indices[i] == want[i]);
        for (std::size_t c = 0; c < 3; ++c)
            CHECK(q.z_q.value().at(i, c) == book.at(want[i], c));
    }
}

TEST_CASE("straight-through estimator") {
    Rng rng(7);
    const Tensor book = oracles::random_tensor({4, 2}, rng);
    const Tensor z = oracles::random_tensor({5, 2}, rng);

    SUBCASE("forward equals hard quantization bit for bit") {
        ad::Tape tape;
        ad::Var cv = tape.input(book);
        QuantizationResult ste = quantize_ste(tape, tape.input(z), cv);
        QuantizationResult hard = quantize_hard(tape, tape.constant(z), cv);
        for (std::size_t i = 0; i < z.numel(); ++i)
            CHECK(ste.z_q.value().data[i] == hard.z_q.value().data[i]);
    }
    SUBCASE("pullback to latents is the identity") {
        ad::Tape tape;
        ad::Var zv = tape.input(z);
        QuantizationResult q = quantize_ste(tape, zv, tape.input(book));
        tape.backward(ad::sum(q.z_q));
        for (double g : tape.grad(zv).data) CHECK(g == 1.0);
    }
    SUBCASE("pullback to the codebook through quantization is exactly zero") {
        ad::Tape tape;
        ad::Var cv = tape.input(book);
        QuantizationResult q = quantize_ste(tape, tape.input(z), cv);
        tape.backward(ad::sum(q.z_q));
        for (double g : tape.grad(cv).data) CHECK(g == 0.0);
    }
    SUBCASE("latent gradient matches finite differences") {
        CHECK(estimator_gradcheck(Method::STE, 0, 4, 2, 4, 11, false) < 1e-4);
    }
}

TEST_CASE("moving-average codebook update") {
    SUBCASE("zero decay moves the codeword onto its latent") {
        Codebook cb = axis_book();
        ema_update(cb, Tensor::from({1, 2}, {0.37, -0.2}), {0}, 1e-12);
        CHECK(cb.vectors.at(0, 0) == doctest::Approx(0.37).epsilon(1e-9));
        CHECK(cb.vectors.at(0, 1) == doctest::Approx(-0.2).epsilon(1e-9));
    }
    SUBCASE("hand-computed single-step update is exact") {
        Codebook cb = Codebook::init(Tensor::from({2, 2}, {1, 0, 9, 9}));
        cb.ema_h = {1.0, 0.0};
        cb.ema_g.at(0, 0) = 1.0;
        cb.ema_g.at(0, 1) = 0.0;
        cb.has_ema = true;
        const double gamma = 0.99;
        ema_update(cb, Tensor::from({1, 2}, {2, 0}), {0}, gamma);
        const double expect_h = gamma * 1.0 + (1.0 - gamma) * 1.0;
        const double expect_g = gamma * 1.0 + (1.0 - gamma) * 2.0;
        CHECK(cb.ema_h[0] == expect_h);
        CHECK(cb.ema_g.at(0, 0) == expect_g);
        CHECK(cb.vectors.at(0, 0) == expect_g / expect_h);
        CHECK(cb.ema_h[0] == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(cb.vectors.at(0, 0) == doctest::Approx(1.01).epsilon(1e-12));
    }
    SUBCASE("codewords with no assigned latents stay put") {
        Codebook cb = axis_book();
        const Tensor before = cb.vectors;
        ema_update(cb, Tensor::from({1, 2}, {0.9, 0}), {0}, 0.99);
        CHECK(cb.vectors.at(1, 0) == before.at(1, 0));
        CHECK(cb.vectors.at(1, 1) == before.at(1, 1));
    }
    SUBCASE("zero averaged count skips the division") {
        Codebook cb = axis_book();
        // No prior mass and a zero-count batch for codeword 1.
        const std::size_t skipped = ema_update(cb, Tensor({0, 2}), {}, 0.5);
        CHECK(skipped == 0);
        CHECK(cb.vectors.at(1, 0) == -1.0);
    }
}

TEST_CASE("rotation trick") {
    SUBCASE("parallel latent and codeword reduce to pure rescaling") {
        const double z[2] = {0.5, 0.0};
        const double c[2] = {2.0, 0.0};
        const RotationFactors f = compute_rotation(z, c, 2);
        CHECK(f.rho == doctest::Approx(4.0));
        CHECK(norm(f.r.data(), 2) == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(norm(f.z_bar.data(), 2) == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(norm(f.c_bar.data(), 2) == doctest::Approx(1.0).epsilon(1e-9));
        // rho * R applied to z lands on c.
        CHECK(f.matrix.at(0, 0) * z[0] + f.matrix.at(0, 1) * z[1] ==
              doctest::Approx(2.0).epsilon(1e-9));
    }
    SUBCASE("perpendicular case maps the latent onto the codeword") {
        Codebook cb = Codebook::init(Tensor::from({2, 2}, {1, 0, 5, 5}));
        ad::Tape tape;
        ad::Var zv = tape.input(Tensor::from({1, 2}, {0, 1}));
        QuantizationResult q = quantize_rt(tape, zv, tape.input(cb.vectors));
        CHECK(q.z_q.value().at(0, 0) == 1.0);
        CHECK(q.z_q.value().at(0, 1) == 0.0);
        // The surrogate realizes the same point up to rounding.
        CHECK(std::abs(q.z_q_surrogate.value().at(0, 0) - 1.0) < 1e-9);
        CHECK(std::abs(q.z_q_surrogate.value().at(0, 1)) < 1e-9);
        CHECK(q.rt_ste_fallbacks == 0);
    }
    SUBCASE("forward equals hard assignment on random batches") {
        Rng rng(23);
        for (int trial = 0; trial < 10; ++trial) {
            const Tensor book = oracles::random_tensor({6, 3}, rng);
            const Tensor z = oracles::random_tensor({8, 3}, rng);
            ad::Tape tape;
            ad::Var cv = tape.input(book);
            QuantizationResult rt = quantize_rt(tape, tape.input(z), cv);
            QuantizationResult hard = quantize_hard(tape, tape.constant(z), cv);
            for (std::size_t i = 0; i < z.numel(); ++i)
                CHECK(rt.z_q.value().data[i] == hard.z_q.value().data[i]);
        }
    }
    SUBCASE("zero-norm latents fall back to straight-through semantics") {
        Codebook cb = axis_book();
        ad::Tape tape;
        ad::Var zv = tape.input(Tensor::from({2, 2}, {0, 0, 0.9, 0}));
        QuantizationResult q = quantize_rt(tape, zv, tape.input(cb.vectors));
        CHECK(q.rt_ste_fallbacks == 1);
        tape.backward(ad::sum(q.z_q));
        // The degenerate row gets the identity pullback.
        CHECK(tape.grad(zv).at(0, 0) == 1.0);
        CHECK(tape.grad(zv).at(0, 1) == 1.0);
    }
    SUBCASE("frozen-rotation pullback matches finite differences") {
        CHECK(estimator_gradcheck(Method::RT, 0, 4, 2, 4, 31, false) < 1e-4);
        CHECK(estimator_gradcheck(Method::RT, 0, 3, 8, 16, 37, false) < 1e-4);
    }
}

TEST_CASE("straight-through Gumbel-softmax") {
    Rng rng(17);
    const Tensor book = oracles::random_tensor({4, 2}, rng, -3.0, 3.0);
    const Tensor z = oracles::random_tensor({6, 2}, rng);

    SUBCASE("vanishing temperature concentrates the soft assignment") {
        ad::Tape tape;
        QuantizerDraw frozen;
        frozen.gumbels = Tensor({6, 4}, 0.0);
        QuantizationResult q = quantize_stgs(tape, tape.input(z), tape.input(book), 1e-4,
                                             rng, &frozen);
        const Tensor& y = q.soft_assignments.value();
        for (std::size_t i = 0; i < 6; ++i) {
            double mx = 0.0;
            for (std::size_t j = 0; j < 4; ++j) mx = std::max(mx, y.at(i, j));
            CHECK(mx > 0.999);
        }
    }
    SUBCASE("zero gumbels at unit temperature reduce to a plain softmax") {
        ad::Tape tape;
        QuantizerDraw frozen;
        frozen.gumbels = Tensor({6, 4}, 0.0);
        ad::Var zv = tape.input(z);
        ad::Var cv = tape.input(book);
        QuantizationResult q = quantize_stgs(tape, zv, cv, 1.0, rng, &frozen);
        ad::Var expected =
            ad::softmax_rows(ad::scale(ad::pairwise_sqdist(zv, cv), -1.0));
        for (std::size_t i = 0; i < 24; ++i)
            CHECK(q.soft_assignments.value().data[i] ==
                  doctest::Approx(expected.value().data[i]).epsilon(1e-12));
    }
    SUBCASE("forward output is the hard argmax codeword") {
        ad::Tape tape;
        QuantizationResult q =
            quantize_stgs(tape, tape.input(z), tape.input(book), 0.7, rng);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t c = 0; c < 2; ++c)
                CHECK(q.z_q.value().at(i, c) == book.at(q.indices[i], c));
    }
    SUBCASE("soft path matches finite differences for latents and codebook") {
        CHECK(estimator_gradcheck(Method::STGS, 0, 4, 2, 4, 41, true) < 1e-4);
    }
    SUBCASE("temperature must be positive") {
        ad::Tape tape;
        CHECK_THROWS_AS(
            quantize_stgs(tape, tape.input(z), tape.input(book), 0.0, rng),
            config_error);
    }
}

TEST_CASE("noise-substitution quantization") {
    Rng rng(53);
    const Tensor book = oracles::random_tensor({5, 3}, rng);
    const Tensor z = oracles::random_tensor({12, 3}, rng);

    SUBCASE("the error magnitude equals the true quantization error") {
        ad::Tape tape;
        Rng noise(1234);
        QuantizationResult q =
            quantize_nsvq(tape, tape.input(z), tape.input(book), noise);
        for (std::size_t i = 0; i < 12; ++i) {
            const double moved = row_distance(q.z_q.value(), z, i);
            const double true_err = row_distance(z, q.hard_points, i);
            CHECK(moved == doctest::Approx(true_err).epsilon(1e-9));
        }
    }
    SUBCASE("a latent on a codeword stays exactly put") {
        Tensor z0({1, 3});
        std::copy_n(book.row(2), 3, z0.row(0));
        ad::Tape tape;
        Rng noise(5);
        QuantizationResult q =
            quantize_nsvq(tape, tape.constant(z0), tape.input(book), noise);
        for (std::size_t c = 0; c < 3; ++c) CHECK(q.z_q.value().at(0, c) == z0.at(0, c));
    }
    SUBCASE("per-sample noise differs across identical rows") {
        Tensor twin({2, 3});
        std::copy_n(z.row(0), 3, twin.row(0));
        std::copy_n(z.row(0), 3, twin.row(1));
        ad::Tape tape;
        Rng noise(77);
        QuantizationResult q =
            quantize_nsvq(tape, tape.constant(twin), tape.input(book), noise);
        CHECK(row_distance(q.z_q.value(), twin, 0) ==
              doctest::Approx(row_distance(q.z_q.value(), twin, 1)).epsilon(1e-9));
        bool any_differs = false;
        for (std::size_t c = 0; c < 3; ++c)
            if (q.z_q.value().at(0, c) != q.z_q.value().at(1, c)) any_differs = true;
        CHECK(any_differs);
    }
    SUBCASE("gradients match finite differences under a frozen draw") {
        CHECK(estimator_gradcheck(Method::NSVQ, 0, 4, 2, 4, 61, true) < 1e-4);
    }
}

TEST_CASE("directional quantization") {
    Rng rng(71);
    const Tensor book = oracles::random_tensor({6, 2}, rng);
    const Tensor z = oracles::random_tensor({10, 2}, rng);

    SUBCASE("vanishing variance lands on the selected codeword") {
        ad::Tape tape;
        Rng noise(3);
        QuantizationResult q =
            quantize_diveq(tape, tape.constant(z), tape.input(book), 1e-12, noise);
        for (std::size_t i = 0; i < 10; ++i) {
            CHECK(row_distance(q.z_q.value(), q.hard_points, i) < 1e-5);
        }
    }
    SUBCASE("the error magnitude is preserved for any variance") {
        for (double sigma2 : {1e-1, 1e-3, 1e-6}) {
            ad::Tape tape;
            Rng noise(9);
            QuantizationResult q =
                quantize_diveq(tape, tape.constant(z), tape.input(book), sigma2, noise);
            for (std::size_t i = 0; i < 10; ++i) {
                const double moved = row_distance(q.z_q.value(), z, i);
                const double true_err = row_distance(z, q.hard_points, i);
                CHECK(moved == doctest::Approx(true_err).epsilon(1e-9));
            }
        }
    }
    SUBCASE("a latent on a codeword stays exactly put with zero extra gradient") {
        Tensor z0({1, 2});
        std::copy_n(book.row(1), 2, z0.row(0));
        ad::Tape tape;
        Rng noise(4);
        ad::Var cv = tape.input(book);
        QuantizationResult q = quantize_diveq(tape, tape.constant(z0), cv, 1e-3, noise);
        for (std::size_t c = 0; c < 2; ++c) CHECK(q.z_q.value().at(0, c) == z0.at(0, c));
        tape.backward(ad::sum(q.z_q));
        for (double g : tape.grad(cv).data) CHECK(g == 0.0);
    }
    SUBCASE("gradients match finite differences under a frozen draw") {
        CHECK(estimator_gradcheck(Method::DIVEQ, 1e-3, 4, 2, 4, 83, true) < 1e-4);
        CHECK(estimator_gradcheck(Method::DIVEQ, 1e-3, 3, 8, 16, 89, true) < 1e-4);
    }
    SUBCASE("sigma2 must be positive") {
        ad::Tape tape;
        Rng noise(1);
        CHECK_THROWS_AS(
            quantize_diveq(tape, tape.constant(z), tape.input(book), 0.0, noise),
            config_error);
    }
}

TEST_CASE("detach variants land exactly on their targets") {
    Rng rng(97);
    const Tensor book = oracles::random_tensor({5, 3}, rng);
    const Tensor z = oracles::random_tensor({7, 3}, rng);

    SUBCASE("plain detach forward equals hard assignment bit for bit") {
        ad::Tape tape;
        ad::Var cv = tape.input(book);
        QuantizationResult q = quantize_diveq_detach(tape, tape.input(z), cv);
        QuantizationResult hard = quantize_hard(tape, tape.constant(z), cv);
        for (std::size_t i = 0; i < z.numel(); ++i)
            CHECK(q.z_q.value().data[i] == hard.z_q.value().data[i]);
    }
    SUBCASE("segment detach forward equals the interpolation point exactly") {
        ad::Tape tape;
        Rng noise(15);
        QuantizationResult q =
            quantize_sf_diveq_detach(tape, tape.constant(z), tape.input(book), noise);
        for (std::size_t i = 0; i < 7; ++i) {
            const double lam = q.lambda[i];
            for (std::size_t c = 0; c < 3; ++c) {
                const double expected = (1.0 - lam) * book.at(q.indices[i], c) +
                                        lam * book.at(q.indices[i] + 1, c);
                CHECK(q.z_q.value().at(i, c) == expected);
            }
        }
    }
    SUBCASE("gradients match finite differences") {
        CHECK(estimator_gradcheck(Method::DIVEQ_DETACH, 0, 4, 2, 4, 101, true) < 1e-4);
        CHECK(estimator_gradcheck(Method::SF_DIVEQ_DETACH, 0, 4, 2, 4, 103, true) < 1e-4);
    }
}

TEST_CASE("space-filling directional quantization") {
    Rng rng(113);
    const Tensor book = oracles::random_tensor({6, 2}, rng);
    const Tensor z = oracles::random_tensor({9, 2}, rng);

    SUBCASE("zero interpolation factor reduces exactly to the plain estimator") {
        // Shared frozen draw with lambda = 0: both estimators see the same
        // segment-start codeword and the same noise direction.
        ad::Tape tape;
        Rng noise(7);
        QuantizationResult probe =
            quantize_sf_diveq(tape, tape.constant(z), tape.input(book), 1e-3, noise);
        QuantizerDraw frozen = probe.draw;
        std::fill(frozen.lambdas.begin(), frozen.lambdas.end(), 0.0);
        // Rescale stored directions to lambda = 0 weights: first direction
        // carries weight 1, second carries 0.
        for (std::size_t i = 0; i < z.rows(); ++i) {
            const double lam = probe.draw.lambdas[i];
            for (std::size_t c = 0; c < 2; ++c) {
                const double u1 = probe.draw.unit_dirs.at(i, c);
                frozen.unit_dirs.at(i, c) = lam < 1.0 ? u1 / (1.0 - lam) : 0.0;
                frozen.unit_dirs2.at(i, c) = 0.0;
            }
        }
        ad::Tape tape2;
        Rng unused(0);
        QuantizationResult sf = quantize_sf_diveq(tape2, tape2.constant(z),
                                                  tape2.input(book), 1e-3, unused, &frozen);
        QuantizerDraw dv;
        dv.indices = frozen.indices;
        dv.unit_dirs = frozen.unit_dirs;
        QuantizationResult plain = quantize_diveq(tape2, tape2.constant(z),
                                                  tape2.input(book), 1e-3, unused, &dv);
        for (std::size_t i = 0; i < z.numel(); ++i)
            CHECK(sf.z_q.value().data[i] ==
                  doctest::Approx(plain.z_q.value().data[i]).epsilon(1e-12));
    }
    SUBCASE("vanishing variance lands on the winning dithered point") {
        ad::Tape tape;
        Rng noise(29);
        QuantizationResult q =
            quantize_sf_diveq(tape, tape.constant(z), tape.input(book), 1e-12, noise);
        for (std::size_t i = 0; i < 9; ++i)
            CHECK(row_distance(q.z_q.value(), q.hard_points, i) < 1e-5);
    }
    SUBCASE("interpolation factors live in the unit interval") {
        ad::Tape tape;
        Rng noise(31);
        QuantizationResult q =
            quantize_sf_diveq(tape, tape.constant(z), tape.input(book), 1e-3, noise);
        for (double lam : q.lambda) {
            CHECK(lam >= 0.0);
            CHECK(lam < 1.0);
        }
    }
    SUBCASE("collapsed segments behave like plain directional quantization") {
        const Tensor degenerate = Tensor::from({3, 2}, {0, 0, 0, 0, 5, 5});
        ad::Tape tape;
        Rng noise(37);
        QuantizationResult q = quantize_sf_diveq(
            tape, tape.constant(Tensor::from({1, 2}, {0.2, 0.0})),
            tape.input(degenerate), 1e-12, noise);
        if (q.indices[0] == 0) {
            // Segment 0 is collapsed; the target is its single point.
            CHECK(q.lambda[0] == 0.0);
            CHECK(row_distance(q.z_q.value(), q.hard_points, 0) < 1e-5);
            CHECK(q.hard_points.at(0, 0) == 0.0);
        }
    }
    SUBCASE("gradients match finite differences under a frozen draw") {
        CHECK(estimator_gradcheck(Method::SF_DIVEQ, 1e-3, 4, 2, 4, 127, true) < 1e-4);
        CHECK(estimator_gradcheck(Method::SF_DIVEQ, 1e-3, 3, 8, 16, 131, true) < 1e-4);
    }
    SUBCASE("needs at least two codewords") {
        ad::Tape tape;
        Rng noise(1);
        CHECK_THROWS_AS(quantize_sf_diveq(tape, tape.constant(z),
                                          tape.input(Tensor({1, 2}, 0.0)), 1e-3, noise),
                        shape_error);
    }
}

TEST_CASE("quantization is deterministic under a fixed seed") {
    Rng rng(139);
    const Tensor book = oracles::random_tensor({5, 2}, rng);
    const Tensor z = oracles::random_tensor({6, 2}, rng);
    for (Method m : {Method::NSVQ, Method::DIVEQ, Method::SF_DIVEQ, Method::STGS}) {
        QuantizerConfig cfg;
        cfg.method = m;
        auto run = [&]() {
            ad::Tape tape;
            Rng noise(555);
            return quantize(tape, tape.constant(z), tape.input(book), cfg, 0.7, noise)
                .z_q.value();
        };
        const Tensor a = run();
        const Tensor b = run();
        INFO(method_name(m));
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data[i] == b.data[i]);
    }
}

TEST_CASE("residual quantization") {
    Rng rng(149);

    SUBCASE("one stage equals plain quantization") {
        const Tensor book = oracles::random_tensor({4, 2}, rng);
        const Tensor z = oracles::random_tensor({6, 2}, rng);
        ad::Tape tape;
        ad::Var cv = tape.input(book);
        QuantizerConfig cfg;
        cfg.method = Method::HARD;
        Rng noise(1);
        ResidualStageResult r = quantize_residual(tape, tape.constant(z), {cv}, cfg, 1.0,
                                                  noise);
        QuantizationResult plain = quantize_hard(tape, tape.constant(z), cv);
        CHECK(r.distortion == doctest::Approx(plain.distortion));
        for (std::size_t i = 0; i < z.numel(); ++i)
            CHECK(r.hard_total.data[i] == plain.hard_points.data[i]);
    }

    SUBCASE("an exactly decomposable latent reaches zero distortion in two stages") {
        const Tensor book1 = Tensor::from({2, 2}, {1, 0, 0, 1});
        const Tensor book2 = Tensor::from({2, 2}, {0.25, 0.25, -0.25, 0.25});
        Tensor z({1, 2});
        z.at(0, 0) = book1.at(1, 0) + book2.at(0, 0);
        z.at(0, 1) = book1.at(1, 1) + book2.at(0, 1);
        ad::Tape tape;
        QuantizerConfig cfg;
        cfg.method = Method::HARD;
        Rng noise(1);
        ResidualStageResult r =
            quantize_residual(tape, tape.constant(z),
                              {tape.input(book1), tape.input(book2)}, cfg, 1.0, noise);
        CHECK(r.distortion == doctest::Approx(0.0).epsilon(1e-15));
    }

    SUBCASE("residuals satisfy the stage identity exactly") {
        const Tensor z = oracles::random_tensor({5, 3}, rng);
        std::vector<Tensor> books{oracles::random_tensor({4, 3}, rng),
                                  oracles::random_tensor({4, 3}, rng)};
        ad::Tape tape;
        QuantizerConfig cfg;
        cfg.method = Method::DIVEQ;
        cfg.sigma2 = 1e-3;
        Rng noise(2);
        ResidualStageResult r = quantize_residual(
            tape, tape.constant(z), {tape.input(books[0]), tape.input(books[1])}, cfg,
            1.0, noise);
        // residual[0] = z - hard[0], residual[1] = residual[0] - hard[1].
        for (std::size_t i = 0; i < z.numel(); ++i) {
            CHECK(r.residuals[0].data[i] ==
                  z.data[i] - r.stage_results[0].hard_points.data[i]);
            CHECK(r.residuals[1].data[i] ==
                  r.residuals[0].data[i] - r.stage_results[1].hard_points.data[i]);
        }
    }

    SUBCASE("later stages refine the quantization on residual-seeded codebooks") {
        // Stage codebooks drawn from the stage inputs themselves; three
        // stages then beat one on batch distortion.
        for (int trial = 0; trial < 10; ++trial) {
            const Tensor z = oracles::random_tensor({128, 2}, rng);
            Rng pick(1000 + trial);
            Tensor book1({8, 2});
            for (std::size_t j = 0; j < 8; ++j)
                std::copy_n(z.row(pick.integer(128)), 2, book1.row(j));
            ad::Tape tape;
            QuantizerConfig cfg;
            cfg.method = Method::HARD;
            Rng noise(1);
            ad::Var zv = tape.constant(z);
            ad::Var b1 = tape.input(book1);
            ResidualStageResult one = quantize_residual(tape, zv, {b1}, cfg, 1.0, noise);

            Tensor book2({8, 2});
            for (std::size_t j = 0; j < 8; ++j)
                std::copy_n(one.residuals[0].row(pick.integer(128)), 2, book2.row(j));
            ResidualStageResult two =
                quantize_residual(tape, zv, {b1, tape.input(book2)}, cfg, 1.0, noise);

            Tensor book3({8, 2});
            for (std::size_t j = 0; j < 8; ++j)
                std::copy_n(two.residuals[1].row(pick.integer(128)), 2, book3.row(j));
            ResidualStageResult three = quantize_residual(
                tape, zv, {b1, tape.constant(book2), tape.input(book3)}, cfg, 1.0, noise);

            CHECK(three.distortion < one.distortion);
        }
    }
}
