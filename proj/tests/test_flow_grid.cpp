#include <cmath>
#include <random>

#include "doctest.h"
#include "urbanfm/flow_grid.hpp"

using namespace urbanfm;

namespace {

// Straightforward left-to-right block sum, independent of the library's
// pairwise scheme.
FlowMap naive_coarsen(const FlowMap& fine, int n) {
    FlowMap out(fine.height / n, fine.width / n, 0.0);
    for (int i = 0; i < fine.height; ++i)
        for (int j = 0; j < fine.width; ++j) out.at(i / n, j / n) += fine.at(i, j);
    return out;
}

FlowMap random_map(int h, int w, std::mt19937& rng, double lo = 0.0, double hi = 100.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    FlowMap m(h, w);
    for (auto& v : m.values) v = u(rng);
    return m;
}

}  // namespace

TEST_CASE("coarsen matches a naive block-sum oracle") {
    std::mt19937 rng(7);
    for (int n : {2, 3, 4}) {
        for (int rep = 0; rep < 20; ++rep) {
            FlowMap fine = random_map(3 * n, 5 * n, rng);
            FlowMap got = coarsen(fine, ScaleFactor(n));
            FlowMap want = naive_coarsen(fine, n);
            REQUIRE(got.height == want.height);
            REQUIRE(got.width == want.width);
            for (size_t i = 0; i < got.size(); ++i)
                CHECK(got.values[i] == doctest::Approx(want.values[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("coarsen rejects indivisible shapes") {
    FlowMap fine(5, 4, 1.0);
    CHECK_THROWS_AS(coarsen(fine, ScaleFactor(2)), ShapeError);
}

TEST_CASE("nn_upsample replicates each block") {
    FlowMap coarse(2, 3);
    for (size_t i = 0; i < coarse.size(); ++i) coarse.values[i] = static_cast<double>(i + 1);
    FlowMap up = nn_upsample(coarse, ScaleFactor(3));
    REQUIRE(up.height == 6);
    REQUIRE(up.width == 9);
    for (int i = 0; i < up.height; ++i)
        for (int j = 0; j < up.width; ++j) CHECK(up.at(i, j) == coarse.at(i / 3, j / 3));
}

TEST_CASE("n2_normalize matches a brute-force oracle and is proper") {
    std::mt19937 rng(11);
    for (int n : {2, 3}) {
        FlowMap raw = random_map(2 * n, 2 * n, rng, 0.5, 10.0);
        const double eps = 1e-7;
        DistributionMap d = n2_normalize(raw, ScaleFactor(n), eps);
        for (int i = 0; i < raw.height; ++i)
            for (int j = 0; j < raw.width; ++j) {
                double s = 0.0;
                for (int di = 0; di < n; ++di)
                    for (int dj = 0; dj < n; ++dj) s += raw.at((i / n) * n + di, (j / n) * n + dj);
                CHECK(d.at(i, j) == doctest::Approx(raw.at(i, j) / (s + eps)).epsilon(1e-12));
            }
        CHECK(d.is_proper(ScaleFactor(n), 1e-5));
    }
}

TEST_CASE("n2_normalize handles all-zero blocks and rejects negatives") {
    FlowMap zeros(2, 2, 0.0);
    DistributionMap d = n2_normalize(zeros, ScaleFactor(2));
    for (double v : d.values) CHECK(v == 0.0);

    FlowMap bad(2, 2, 1.0);
    bad.at(0, 1) = -0.5;
    CHECK_THROWS_AS(n2_normalize(bad, ScaleFactor(2)), DomainError);
}

TEST_CASE("distribute composes with normalization to reproduce the input mass") {
    std::mt19937 rng(13);
    FlowMap raw = random_map(6, 6, rng, 0.0, 50.0);
    const ScaleFactor n(2);
    FlowMap coarse = coarsen(raw, n);
    DistributionMap d = n2_normalize(raw, n, 0.0);
    FlowMap fine = distribute(coarse, d, n);
    CHECK(structural_violation(coarse, fine, n) <= 1e-9);
}

TEST_CASE("uniform distribution over power-of-two blocks is exactly mass-preserving") {
    // 1/4 and 1/16 are exact binary fractions and the pairwise block sums add
    // equal values in a balanced tree, so the residual must be exactly zero.
    std::mt19937 rng(17);
    for (int n : {2, 4}) {
        for (int rep = 0; rep < 50; ++rep) {
            FlowMap coarse = random_map(4, 4, rng, 0.0, 2000.0);
            DistributionMap d(4 * n, 4 * n, 1.0 / (n * n));
            FlowMap fine = distribute(coarse, d, ScaleFactor(n));
            CHECK(structural_violation(coarse, fine, ScaleFactor(n)) == 0.0);
        }
    }
}

TEST_CASE("uniform distribution at scale 3 is mass-preserving to rounding error") {
    std::mt19937 rng(19);
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        FlowMap coarse = random_map(4, 4, rng, 0.0, 2000.0);
        DistributionMap d(12, 12, 1.0 / 9.0);
        FlowMap fine = distribute(coarse, d, ScaleFactor(3));
        FlowMap agg = coarsen(fine, ScaleFactor(3));
        for (size_t i = 0; i < agg.size(); ++i)
            worst = std::max(worst, std::abs(agg.values[i] - coarse.values[i]) /
                                        std::max(1.0, std::abs(coarse.values[i])));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("structural_violation reports the worst block") {
    FlowMap coarse(1, 2);
    coarse.at(0, 0) = 10.0;
    coarse.at(0, 1) = 20.0;
    FlowMap fine(2, 4, 0.0);
    // First block sums to 10 (exact), second to 23 (off by 3).
    fine.at(0, 0) = 4.0;
    fine.at(1, 1) = 6.0;
    fine.at(0, 2) = 20.0;
    fine.at(1, 3) = 3.0;
    CHECK(structural_violation(coarse, fine, ScaleFactor(2)) == doctest::Approx(3.0));
}

TEST_CASE("scale factor and map validation") {
    CHECK_THROWS_AS(ScaleFactor(1), ConfigError);
    CHECK_THROWS_AS(ScaleFactor(0), ConfigError);
    FlowMap m(2, 2, 1.0);
    CHECK_NOTHROW(m.validate());
    m.at(1, 1) = -1e-9;
    CHECK_THROWS_AS(m.validate(), DomainError);
}
