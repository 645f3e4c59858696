#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "urbanfm/checkpoint.hpp"
#include "urbanfm/nn/adam.hpp"
#include "urbanfm/train.hpp"

using namespace urbanfm;

TEST_CASE("the learning-rate staircase halves every 20 epochs") {
    CHECK(lr_at_epoch(1e-4, 0, 20) == 1e-4);
    CHECK(lr_at_epoch(1e-4, 19, 20) == 1e-4);
    CHECK(lr_at_epoch(1e-4, 20, 20) == 5e-5);
    CHECK(lr_at_epoch(1e-4, 39, 20) == 5e-5);
    CHECK(lr_at_epoch(1e-4, 40, 20) == 2.5e-5);
    CHECK(lr_at_epoch(1e-4, 200, 20) == 1e-4 * std::pow(2.0, -10.0));
    for (int e = 0; e < 200; ++e)
        CHECK(lr_at_epoch(1e-4, e, 20) == 1e-4 * std::pow(2.0, -(e / 20)));
    CHECK_THROWS_AS(lr_at_epoch(1e-4, 0, 0), ConfigError);
    CHECK_THROWS_AS(lr_at_epoch(1e-4, -1, 20), ConfigError);
}

TEST_CASE("min-max scaling divides by the scaler without clipping") {
    FlowMap m(1, 3, {1500.0, 3000.0, 0.0});
    auto t = minmax_scale(m, 1500.0);
    REQUIRE(t.shape() == std::vector<int>({1, 1, 1, 3}));
    CHECK(t.data()[0] == 1.0f);
    CHECK(t.data()[1] == 2.0f);  // above the scaler: no clipping
    CHECK(t.data()[2] == 0.0f);

    // Round trip within single-precision resolution.
    std::mt19937 rng(41);
    std::uniform_real_distribution<double> u(0.0, 2500.0);
    FlowMap r(8, 8);
    for (auto& v : r.values) v = u(rng);
    FlowMap back = minmax_descale(minmax_scale(r, 1500.0), 1500.0);
    for (size_t i = 0; i < r.size(); ++i)
        CHECK(std::abs(back.values[i] - r.values[i]) <= 1e-7 * std::max(1.0, r.values[i]));

    CHECK_THROWS_AS(minmax_scale(m, 0.0), ConfigError);
    CHECK_THROWS_AS(minmax_descale(t, -1.0), ConfigError);
}

TEST_CASE("the optimizer's first step matches the closed form") {
    // With m = (1-b1)g, v = (1-b2)g^2 and bias correction, step 1 moves each
    // weight by exactly lr * g / (|g| + eps') where eps' = eps * sqrt(1-b2)...
    // easier: for g = 1, w <- w - lr * 1 / (1 + eps_hat), eps_hat tiny.
    nn::TensorF w({2}, 1.0f, true);
    w.grad()[0] = 1.0f;
    w.grad()[1] = -1.0f;
    std::vector<nn::Parameter<float>> params = {{"w", w}};
    nn::Adam<float> opt;
    opt.init(params);
    opt.step(params, 0.1f);
    // mhat = g, vhat = g^2 -> step = lr * g/(|g| + eps).
    CHECK(w.data()[0] == doctest::Approx(1.0f - 0.1f).epsilon(1e-5));
    CHECK(w.data()[1] == doctest::Approx(1.0f + 0.1f).epsilon(1e-5));
    CHECK(opt.t == 1);
}

TEST_CASE("structural penalty uses the mean over coarse cells") {
    // 4x4 prediction with a single +1 excess cell over a 2x2-block grid:
    // block sums deviate by 1 in one of 4 blocks -> mean |dev| = 1/4.
    auto pred = nn::TensorD({1, 1, 4, 4}, 0.0);
    pred.data()[0] = 1.0;
    std::vector<double> target(4, 0.0);
    auto pooled = nn::sum_pool(pred, 2);
    auto pen = nn::mae_to_const(pooled, target);
    CHECK(pen.data()[0] == doctest::Approx(0.25));
}

TEST_CASE("training reduces the loss and tracks the best validation epoch") {
    SynthConfig scfg;
    scfg.coarse_h = 4;
    scfg.coarse_w = 4;
    scfg.scale = 2;
    scfg.steps = 60;
    scfg.seed = 9;
    auto out = synth_generate(scfg);
    Dataset d = split_filter(std::move(out.samples), out.manifest);

    UrbanFMConfig mcfg;
    mcfg.M = 1;
    mcfg.F = 8;
    mcfg.N = 2;
    mcfg.I = 4;
    mcfg.J = 4;
    mcfg.variant = Variant::NoExternal;
    auto model = UrbanFMModel::build(mcfg, 1);

    TrainConfig tcfg;
    tcfg.epochs = 8;
    tcfg.batch = 8;
    tcfg.lr = 1e-3;
    tcfg.seed = 2;
    tcfg.coarse_scaler = d.manifest.coarse_scaler;
    tcfg.fine_scaler = d.manifest.fine_scaler;
    const std::string dir = "/tmp/urbanfm_test_train_out";
    std::filesystem::remove_all(dir);
    tcfg.out_dir = dir;

    TrainHistory h = train_loop(model, d.train, d.valid, tcfg);
    REQUIRE(h.rows.size() == 8);
    CHECK(h.rows.back().train_loss < h.rows.front().train_loss);
    CHECK(h.best_epoch >= 0);
    double best = 1e300;
    int best_at = -1;
    for (const auto& r : h.rows)
        if (r.val_rmse < best) {
            best = r.val_rmse;
            best_at = r.epoch;
        }
    CHECK(h.best_epoch == best_at);
    CHECK(h.best_val_rmse == doctest::Approx(best));

    // Artifacts: checkpoint of the best model plus a per-epoch history CSV.
    REQUIRE(std::filesystem::exists(dir + "/best.ckpt"));
    REQUIRE(std::filesystem::exists(dir + "/history.csv"));
    LoadedCheckpoint lc = load_checkpoint(dir + "/best.ckpt");
    CHECK(lc.extra.at("best_epoch") == h.best_epoch);
    auto pa = model.params();
    auto pb = lc.model.params();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].tensor.data() == pb[i].tensor.data());

    std::ifstream is(dir + "/history.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "epoch,lr,train_loss,val_rmse,val_mae,val_mape");
    size_t lines = 0;
    for (std::string l; std::getline(is, l);)
        if (!l.empty()) ++lines;
    CHECK(lines == 8);
    std::filesystem::remove_all(dir);
}

TEST_CASE("training is deterministic in the seed") {
    SynthConfig scfg;
    scfg.coarse_h = 4;
    scfg.coarse_w = 4;
    scfg.steps = 40;
    scfg.seed = 9;
    auto out = synth_generate(scfg);
    Dataset d = split_filter(std::move(out.samples), out.manifest);

    UrbanFMConfig mcfg;
    mcfg.M = 1;
    mcfg.F = 4;
    mcfg.N = 2;
    mcfg.I = 4;
    mcfg.J = 4;
    mcfg.variant = Variant::NoExternal;

    TrainConfig tcfg;
    tcfg.epochs = 3;
    tcfg.batch = 4;
    tcfg.seed = 5;
    tcfg.coarse_scaler = d.manifest.coarse_scaler;
    tcfg.fine_scaler = d.manifest.fine_scaler;

    auto m1 = UrbanFMModel::build(mcfg, 1);
    auto m2 = UrbanFMModel::build(mcfg, 1);
    TrainHistory h1 = train_loop(m1, d.train, d.valid, tcfg);
    TrainHistory h2 = train_loop(m2, d.train, d.valid, tcfg);
    REQUIRE(h1.rows.size() == h2.rows.size());
    for (size_t i = 0; i < h1.rows.size(); ++i) {
        CHECK(h1.rows[i].train_loss == h2.rows[i].train_loss);
        CHECK(h1.rows[i].val_rmse == h2.rows[i].val_rmse);
    }
    auto p1 = m1.params();
    auto p2 = m2.params();
    for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].tensor.data() == p2[i].tensor.data());
}

TEST_CASE("degenerate training inputs are rejected") {
    SynthConfig scfg;
    scfg.coarse_h = 4;
    scfg.coarse_w = 4;
    scfg.steps = 20;
    auto out = synth_generate(scfg);
    Dataset d = split_filter(std::move(out.samples), out.manifest);

    UrbanFMConfig mcfg;
    mcfg.M = 1;
    mcfg.F = 4;
    mcfg.N = 2;
    mcfg.I = 4;
    mcfg.J = 4;
    mcfg.variant = Variant::NoExternal;
    auto model = UrbanFMModel::build(mcfg, 1);

    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch = 1;  // batch statistics need >= 2
    CHECK_THROWS_AS(train_loop(model, d.train, d.valid, tcfg), ConfigError);
    tcfg.batch = 4;
    CHECK_THROWS_AS(train_loop(model, {}, d.valid, tcfg), DomainError);
    CHECK_THROWS_AS(train_loop(model, d.train, {}, tcfg), DomainError);
}
