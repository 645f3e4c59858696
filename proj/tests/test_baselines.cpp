#include <cstdio>
#include <random>

#include "doctest.h"
#include "urbanfm/baselines.hpp"
#include "urbanfm/data.hpp"

using namespace urbanfm;

TEST_CASE("mean partition spreads each superregion evenly and exactly") {
    FlowMap coarse(2, 2);
    coarse.at(0, 0) = 8.0;
    coarse.at(0, 1) = 0.0;
    coarse.at(1, 0) = 1.0;
    coarse.at(1, 1) = 100.0;
    FlowMap fine = mean_partition(coarse, ScaleFactor(2));
    REQUIRE(fine.height == 4);
    REQUIRE(fine.width == 4);
    CHECK(fine.at(0, 0) == 2.0);
    CHECK(fine.at(1, 1) == 2.0);
    CHECK(fine.at(0, 2) == 0.0);
    CHECK(fine.at(3, 3) == 25.0);
    CHECK(structural_violation(coarse, fine, ScaleFactor(2)) == 0.0);
}

TEST_CASE("historical average uses ratio-of-sums fractions") {
    // Two training steps over one 2x2 block:
    //   t0: [1 3; 0 0], t1: [3 1; 4 4] -> totals [4 4; 4 4], block total 16.
    std::vector<FlowMap> hist;
    hist.push_back(FlowMap(2, 2, {1.0, 3.0, 0.0, 0.0}));
    hist.push_back(FlowMap(2, 2, {3.0, 1.0, 4.0, 4.0}));
    HAModel m = ha_fit(hist, ScaleFactor(2));
    for (double v : m.dist.values) CHECK(v == doctest::Approx(0.25));

    FlowMap coarse(1, 1, {40.0});
    FlowMap fine = ha_infer(m, coarse);
    for (double v : fine.values) CHECK(v == doctest::Approx(10.0));
}

TEST_CASE("historical average falls back to uniform for zero-mass blocks") {
    std::vector<FlowMap> hist = {FlowMap(2, 4, 0.0)};
    hist[0].at(0, 2) = 6.0;  // mass only in the second block
    hist[0].at(1, 3) = 2.0;
    HAModel m = ha_fit(hist, ScaleFactor(2));
    // First block: uniform 1/4. Second: 6/8 and 2/8.
    CHECK(m.dist.at(0, 0) == doctest::Approx(0.25));
    CHECK(m.dist.at(1, 1) == doctest::Approx(0.25));
    CHECK(m.dist.at(0, 2) == doctest::Approx(0.75));
    CHECK(m.dist.at(1, 3) == doctest::Approx(0.25));
    CHECK(m.dist.is_proper(ScaleFactor(2)));

    CHECK_THROWS_AS(ha_fit({}, ScaleFactor(2)), DomainError);
}

TEST_CASE("historical average is exact on stationary noiseless data") {
    SynthConfig cfg;
    cfg.coarse_h = 4;
    cfg.coarse_w = 4;
    cfg.scale = 2;
    cfg.steps = 48;
    cfg.seed = 21;
    cfg.noise = 0.0;
    cfg.stationary = true;
    auto out = synth_generate(cfg);
    Dataset d = split_filter(std::move(out.samples), out.manifest);

    std::vector<FlowMap> train_fine;
    for (const auto& s : d.train) train_fine.push_back(s.fine);
    HAModel m = ha_fit(train_fine, ScaleFactor(2));

    double se = 0.0;
    size_t cells = 0;
    for (const auto& s : d.test) {
        FlowMap pred = ha_infer(m, s.coarse);
        for (size_t i = 0; i < pred.size(); ++i) {
            const double e = pred.values[i] - s.fine.values[i];
            se += e * e;
            ++cells;
        }
    }
    CHECK(std::sqrt(se / cells) <= 1e-6);
}

TEST_CASE("historical-average model round-trips through its file format") {
    std::vector<FlowMap> hist = {FlowMap(2, 2, {1.0, 2.0, 3.0, 4.0})};
    HAModel m = ha_fit(hist, ScaleFactor(2));
    const std::string path = "/tmp/urbanfm_test_ha.txt";
    write_ha_model(path, m);
    HAModel back = read_ha_model(path, ScaleFactor(2));
    REQUIRE(back.dist.values.size() == m.dist.values.size());
    for (size_t i = 0; i < m.dist.values.size(); ++i)
        CHECK(back.dist.values[i] == doctest::Approx(m.dist.values[i]).epsilon(1e-6));
    std::remove(path.c_str());
}
