#include <random>

#include "doctest.h"
#include "urbanfm/external.hpp"

using namespace urbanfm;

TEST_CASE("prime factorization is nondecreasing and multiplies back") {
    CHECK(prime_factors(2) == std::vector<int>({2}));
    CHECK(prime_factors(3) == std::vector<int>({3}));
    CHECK(prime_factors(4) == std::vector<int>({2, 2}));
    CHECK(prime_factors(6) == std::vector<int>({2, 3}));
    CHECK(prime_factors(12) == std::vector<int>({2, 2, 3}));
    for (int n : {2, 3, 4, 5, 6, 8, 9, 10, 12, 16}) {
        auto fs = prime_factors(n);
        int prod = 1;
        for (size_t i = 0; i < fs.size(); ++i) {
            prod *= fs[i];
            if (i) CHECK(fs[i] >= fs[i - 1]);
        }
        CHECK(prod == n);
    }
}

TEST_CASE("feature vector length follows the embedding widths") {
    ExternalConfig c;
    CHECK(c.feature_length() == 2 + 3 + 1 + 1 + 2 + 3);  // = 12
    c.has_ticket_price = true;
    CHECK(c.feature_length() == 13);
}

TEST_CASE("encode produces min-max scaled continuous features and embeddings") {
    ExternalConfig c;
    std::mt19937 rng(5);
    ExternalFusion<double> fusion;
    fusion.init(c, 4, 4, 2, rng);

    ExternalRecord r;
    r.temperature = c.temp_min;  // scales to 0
    r.wind_speed = c.wind_max;   // scales to 1
    r.weather = 3;
    r.hour_of_day = 7;
    ExternalRecord r2;
    r2.temperature = (c.temp_min + c.temp_max) / 2.0;  // scales to 0.5

    auto e = fusion.encode({r, r2});
    REQUIRE(e.shape() == std::vector<int>({2, 12}));
    CHECK(e.data()[0] == doctest::Approx(0.0));
    CHECK(e.data()[1] == doctest::Approx(1.0));
    CHECK(e.data()[12] == doctest::Approx(0.5));
    // Weather embedding of record 0 equals row 3 of the table.
    for (int j = 0; j < 3; ++j)
        CHECK(e.data()[2 + j] == fusion.embed_weather.data()[3 * 3 + j]);

    ExternalRecord bad;
    bad.weather = c.weather_vocab;
    CHECK_THROWS_AS(fusion.encode({bad}), DomainError);

    ExternalConfig ct = c;
    ct.has_ticket_price = true;
    ExternalFusion<double> ft;
    ft.init(ct, 4, 4, 2, rng);
    CHECK_THROWS_AS(ft.encode({r}), DomainError);  // record lacks ticket_price
    ExternalRecord rt = r;
    rt.ticket_price = ct.ticket_max;
    auto et = ft.encode({rt});
    REQUIRE(et.shape() == std::vector<int>({1, 13}));
    CHECK(et.data()[12] == doctest::Approx(1.0));
}

TEST_CASE("fusion produces coarse and fine spatial maps of the right shapes") {
    ExternalConfig c;
    std::mt19937 rng(9);
    ExternalFusion<double> fusion;
    fusion.init(c, 32, 32, 4, rng);
    CHECK(fusion.subpixel.size() == 2);  // 4 = 2 * 2

    std::vector<ExternalRecord> recs(3);
    recs[1].hour_of_day = 12;
    recs[2].weekend = 1;
    auto e = fusion.encode(recs);
    std::mt19937 drop(1);
    auto out = fusion.forward(e, /*train=*/false, drop, 0.1, 1e-5);
    CHECK(out.coarse.shape() == std::vector<int>({3, 1, 32, 32}));
    CHECK(out.fine.shape() == std::vector<int>({3, 1, 128, 128}));
}

TEST_CASE("zeroed fusion weights give identically zero feature maps") {
    ExternalConfig c;
    std::mt19937 rng(13);
    ExternalFusion<double> fusion;
    fusion.init(c, 4, 4, 2, rng);
    for (nn::Tensor<double>* t : {&fusion.fc1_w, &fusion.fc1_b, &fusion.fc2_w, &fusion.fc2_b})
        nn::init_constant(*t, 0.0);
    for (auto& blk : fusion.subpixel) {
        nn::init_constant(blk.conv_w, 0.0);
        nn::init_constant(blk.conv_b, 0.0);
        nn::init_constant(blk.bn_beta, 0.0);
    }
    std::vector<ExternalRecord> recs(2);
    auto e = fusion.encode(recs);
    std::mt19937 drop(1);
    auto out = fusion.forward(e, /*train=*/false, drop, 0.1, 1e-5);
    for (double v : out.coarse.data()) CHECK(v == 0.0);
    for (double v : out.fine.data()) CHECK(v == 0.0);
}
