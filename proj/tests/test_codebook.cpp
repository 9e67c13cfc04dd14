// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "diveq/codebook.hpp"
#include "diveq/errors.hpp"
#include "oracles.hpp"

using namespace diveq;

namespace {

Codebook two_word_book() {
    return Codebook::init(Tensor::from({2, 2}, {1, 0, -1, 0}));
}

std::filesystem::path temp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("nearest picks the closest codeword") {
    const Codebook cb = two_word_book();
    const NearestResult r = nearest(Tensor::from({1, 2}, {0.9, 0.0}), cb);
    CHECK(r.indices[0] == 0);
    CHECK(r.distances[0] == doctest::Approx(0.1));
}

TEST_CASE("a latent equal to a codeword maps to it with zero distance") {
    const Codebook cb = two_word_book();
    const NearestResult r = nearest(Tensor::from({1, 2}, {-1.0, 0.0}), cb);
    CHECK(r.indices[0] == 1);
    CHECK(r.distances[0] == 0.0);
}

TEST_CASE("ties break toward the lowest index") {
    const Codebook cb = Codebook::init(Tensor::from({3, 1}, {2.0, 0.0, 2.0}));
    const NearestResult r = nearest(Tensor::from({1, 1}, {2.0}), cb);
    CHECK(r.indices[0] == 0);
}

TEST_CASE("nearest matches the exhaustive oracle on random batches") {
    Rng rng(99);
    const Tensor book = oracles::random_tensor({8, 3}, rng);
    const Codebook cb = Codebook::init(book);
    const Tensor z = oracles::random_tensor({100, 3}, rng);
    const NearestResult got = nearest(z, cb);
    const std::vector<std::size_t> want = oracles::brute_nearest(z, book);
    for (std::size_t i = 0; i < 100; ++i) CHECK(got.indices[i] == want[i]);
}

TEST_CASE("empty batch yields empty outputs") {
    const Codebook cb = two_word_book();
    const NearestResult r = nearest(Tensor({0, 2}), cb);
    CHECK(r.indices.empty());
    CHECK(r.distances.empty());
}

TEST_CASE("dimension mismatch is an error") {
    const Codebook cb = two_word_book();
    CHECK_THROWS_AS(nearest(Tensor({1, 3}, 0.0), cb), shape_error);
}

TEST_CASE("dither interpolates consecutive codewords") {
    Codebook cb = Codebook::init(Tensor::from({3, 2}, {0, 0, 2, 2, 4, 0}));

    SUBCASE("points satisfy the interpolation identity exactly") {
        Rng rng(5);
        const DitheredCodebook d = dither(cb, rng);
        REQUIRE(d.points.rows() == 2);
        for (std::size_t j = 0; j < 2; ++j) {
            const double lam = d.lambdas[j];
            CHECK(lam >= 0.0);
            CHECK(lam < 1.0);
            for (std::size_t c = 0; c < 2; ++c) {
                const double expected =
                    (1.0 - lam) * cb.vectors.at(j, c) + lam * cb.vectors.at(j + 1, c);
                CHECK(d.points.at(j, c) == expected);
            }
        }
    }

    SUBCASE("fixed seed reproduces the same dithered codebook") {
        Rng a(17), b(17);
        const DitheredCodebook da = dither(cb, a);
        const DitheredCodebook db = dither(cb, b);
        for (std::size_t i = 0; i < da.points.numel(); ++i)
            CHECK(da.points.data[i] == db.points.data[i]);
    }
}

TEST_CASE("dither requires at least two codewords") {
    Codebook cb = Codebook::init(Tensor({1, 2}, 1.0));
    Rng rng(1);
    CHECK_THROWS_AS(dither(cb, rng), shape_error);
}

TEST_CASE("usage statistics") {
    SUBCASE("uniform counts maximize perplexity at K") {
        std::vector<std::uint64_t> counts(16, 5);
        const UsageStats s = usage_stats_from_counts(counts);
        CHECK(s.perplexity == doctest::Approx(16.0).epsilon(1e-9));
        CHECK(s.usage_fraction == 1.0);
    }
    SUBCASE("a single used codeword gives perplexity 1") {
        std::vector<std::uint64_t> counts{0, 42, 0};
        const UsageStats s = usage_stats_from_counts(counts);
        CHECK(s.perplexity == doctest::Approx(1.0));
        CHECK(s.usage_fraction == doctest::Approx(1.0 / 3.0));
    }
    SUBCASE("counts 10/5/0 match the hand-computed entropy") {
        std::vector<std::uint64_t> counts{10, 5, 0};
        const UsageStats s = usage_stats_from_counts(counts);
        // H = ln 3 - (2/3) ln 2 in nats.
        const double expected_entropy = std::log(3.0) - (2.0 / 3.0) * std::log(2.0);
        CHECK(s.entropy == doctest::Approx(expected_entropy).epsilon(1e-12));
        CHECK(s.perplexity == doctest::Approx(std::exp(expected_entropy)).epsilon(1e-12));
        CHECK(s.perplexity == doctest::Approx(1.8899).epsilon(1e-4));
    }
    SUBCASE("zero total count is flagged as no data") {
        const UsageStats s = usage_stats_from_counts({0, 0});
        CHECK(s.no_data);
        CHECK(s.entropy == 0.0);
        CHECK(s.perplexity == 1.0);
        for (double p : s.probs) CHECK(p == 0.0);
    }
    SUBCASE("probabilities sum to one when data exists") {
        Rng rng(21);
        std::vector<std::uint64_t> counts(9);
        for (auto& c : counts) c = rng.integer(50);
        counts[0] += 1;  // ensure a nonzero total
        const UsageStats s = usage_stats_from_counts(counts);
        double acc = 0.0;
        for (double p : s.probs) acc += p;
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("record_usage accumulates assignments") {
    Codebook cb = two_word_book();
    record_usage(cb, {0, 0, 1});
    CHECK(cb.usage_counts[0] == 2);
    CHECK(cb.usage_counts[1] == 1);
    CHECK_THROWS_AS(record_usage(cb, {5}), shape_error);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    Rng rng(31);
    Codebook cb = Codebook::init(oracles::random_tensor({4, 3}, rng));
    cb.usage_counts = {3, 0, 7, 1};

    SUBCASE("without moving-average state") {
        const auto path = temp_file("diveq_cb_plain.cbk");
        save_checkpoint(cb, path.string());
        const Codebook loaded = load_checkpoint(path.string());
        REQUIRE(loaded.size() == 4);
        for (std::size_t i = 0; i < cb.vectors.numel(); ++i)
            CHECK(loaded.vectors.data[i] == cb.vectors.data[i]);
        CHECK(loaded.usage_counts == cb.usage_counts);
        CHECK_FALSE(loaded.has_ema);
    }

    SUBCASE("with moving-average state") {
        cb.has_ema = true;
        for (double& v : cb.ema_g.data) v = rng.uniform(-1, 1);
        for (double& v : cb.ema_h) v = rng.uniform(0, 2);
        const auto path = temp_file("diveq_cb_ema.cbk");
        save_checkpoint(cb, path.string());
        const Codebook loaded = load_checkpoint(path.string());
        REQUIRE(loaded.has_ema);
        for (std::size_t i = 0; i < cb.ema_g.numel(); ++i)
            CHECK(loaded.ema_g.data[i] == cb.ema_g.data[i]);
        for (std::size_t i = 0; i < cb.ema_h.size(); ++i)
            CHECK(loaded.ema_h[i] == cb.ema_h[i]);
    }
}

TEST_CASE("checkpoint load rejects malformed files") {
    SUBCASE("truncated") {
        const auto path = temp_file("diveq_cb_trunc.cbk");
        Codebook cb = two_word_book();
        save_checkpoint(cb, path.string());
        // Chop the file short.
        std::filesystem::resize_file(path, 20);
        CHECK_THROWS_AS(load_checkpoint(path.string()), io_error);
    }
    SUBCASE("wrong magic") {
        const auto path = temp_file("diveq_cb_magic.cbk");
        std::ofstream os(path, std::ios::binary);
        os << "NOTDIVEQ" << std::string(64, '\0');
        os.close();
        CHECK_THROWS_AS(load_checkpoint(path.string()), io_error);
    }
    SUBCASE("zero codewords rejected") {
        const auto path = temp_file("diveq_cb_zero.cbk");
        std::ofstream os(path, std::ios::binary);
        os << "DIVEQCB1";
        for (int i = 0; i < 17; ++i) os.put('\0');  // K = 0, D = 0, flag
        os.close();
        CHECK_THROWS_AS(load_checkpoint(path.string()), io_error);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint("/nonexistent/never.cbk"), io_error);
    }
}
