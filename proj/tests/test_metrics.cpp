#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "doctest.h"
#include "urbanfm/inferencers.hpp"
#include "urbanfm/metrics.hpp"

using namespace urbanfm;

TEST_CASE("metrics match a worked example") {
    // Targets [2 0; 1 4], predictions [3 1; 1 3]: errors 1,1,0,1.
    std::vector<FlowMap> targets = {FlowMap(2, 2, {2.0, 0.0, 1.0, 4.0})};
    std::vector<FlowMap> preds = {FlowMap(2, 2, {3.0, 1.0, 1.0, 3.0})};
    MetricsReport r = compute_metrics(preds, targets);
    CHECK(r.rmse == doctest::Approx(std::sqrt(3.0 / 4.0)));
    CHECK(r.mae == doctest::Approx(3.0 / 4.0));
    // MAPE over target >= 1e-6 only: |1|/2 + 0/1 + |1|/4 over 3 cells.
    CHECK(r.mape_defined);
    CHECK(r.mape == doctest::Approx((0.5 + 0.0 + 0.25) / 3.0));
    CHECK(r.mape_excluded_cells == 1);
    CHECK(r.samples == 1);
}

TEST_CASE("MAPE is flagged undefined when every target is zero") {
    std::vector<FlowMap> targets = {FlowMap(1, 2, 0.0)};
    std::vector<FlowMap> preds = {FlowMap(1, 2, {1.0, 2.0})};
    MetricsReport r = compute_metrics(preds, targets);
    CHECK_FALSE(r.mape_defined);
    CHECK(r.mape_excluded_cells == 2);
    CHECK(r.rmse == doctest::Approx(std::sqrt(2.5)));
    const std::string text = format_report(r, "probe");
    CHECK(text.find("undefined") != std::string::npos);
}

TEST_CASE("metrics are symmetric under sample permutation and batch size") {
    std::mt19937 rng(31);
    std::uniform_real_distribution<double> u(0.0, 50.0);
    std::vector<Sample> split;
    for (int t = 0; t < 23; ++t) {  // deliberately not a multiple of the batch
        Sample s;
        s.timestamp = t;
        s.fine = FlowMap(4, 4);
        for (auto& v : s.fine.values) v = u(rng);
        s.coarse = coarsen(s.fine, ScaleFactor(2));
        split.push_back(std::move(s));
    }

    MeanInferencer mean2(2);
    MetricsReport a = evaluate(mean2, split, 2, 16);
    MetricsReport b = evaluate(mean2, split, 2, 5);
    MetricsReport c = evaluate(mean2, split, 2, 23);
    CHECK(std::abs(a.rmse - b.rmse) <= 1e-6);
    CHECK(std::abs(a.rmse - c.rmse) <= 1e-6);
    CHECK(std::abs(a.mae - b.mae) <= 1e-6);
    CHECK(std::abs(a.mape - b.mape) <= 1e-6);

    auto shuffled = split;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    MetricsReport d = evaluate(mean2, shuffled, 2, 16);
    CHECK(std::abs(a.rmse - d.rmse) <= 1e-9);
    CHECK(std::abs(a.mae - d.mae) <= 1e-9);

    // Mean partition never violates the structural constraint.
    CHECK(a.structural_residual == 0.0);
}

TEST_CASE("report files are written as key=value pairs") {
    MetricsReport r;
    r.rmse = 1.25;
    r.mae = 0.5;
    r.mape = 0.125;
    r.samples = 3;
    const std::string path = "/tmp/urbanfm_test_report.txt";
    write_report_kv(path, r, "mean");
    std::ifstream is(path);
    std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    CHECK(all.find("method=mean") != std::string::npos);
    CHECK(all.find("rmse=1.25") != std::string::npos);
    CHECK(all.find("samples=3") != std::string::npos);
    std::remove(path.c_str());
}

TEST_CASE("shape mismatches are rejected") {
    std::vector<FlowMap> t = {FlowMap(2, 2, 1.0)};
    std::vector<FlowMap> p = {FlowMap(2, 3, 1.0)};
    CHECK_THROWS_AS(compute_metrics(p, t), ShapeError);
    CHECK_THROWS_AS(compute_metrics({}, {}), ShapeError);
}
