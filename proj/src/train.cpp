#include "urbanfm/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "urbanfm/checkpoint.hpp"
#include "urbanfm/inferencers.hpp"
#include "urbanfm/nn/adam.hpp"
#include "urbanfm/nn/ops.hpp"

namespace urbanfm {

double lr_at_epoch(double base_lr, int epoch, int halve_every) {
    if (halve_every < 1) throw ConfigError("lr_at_epoch: halve_every must be >= 1");
    if (epoch < 0) throw ConfigError("lr_at_epoch: epoch must be >= 0");
    return base_lr * std::pow(2.0, -static_cast<double>(epoch / halve_every));
}

nn::TensorF minmax_scale(const FlowMap& map, double scaler) {
    if (scaler <= 0.0) throw ConfigError("minmax_scale: scaler must be positive");
    std::vector<float> v(map.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(map.values[i] / scaler);
    return nn::TensorF::from_data({1, 1, map.height, map.width}, std::move(v));
}

FlowMap minmax_descale(const nn::TensorF& t, double scaler) {
    if (scaler <= 0.0) throw ConfigError("minmax_descale: scaler must be positive");
    if (t.ndim() != 4 || t.dim(0) != 1 || t.dim(1) != 1)
        throw ShapeError("minmax_descale: expected a (1,1,H,W) tensor");
    FlowMap m(t.dim(2), t.dim(3));
    for (size_t i = 0; i < m.size(); ++i) m.values[i] = static_cast<double>(t.data()[i]) * scaler;
    return m;
}

void write_history_csv(const std::string& path, const TrainHistory& h) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.precision(10);
    os << "epoch,lr,train_loss,val_rmse,val_mae,val_mape\n";
    for (const auto& r : h.rows) {
        os << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.val_rmse << ','
           << r.val_mae << ',';
        if (r.val_mape_defined)
            os << r.val_mape;
        else
            os << "undefined";
        os << '\n';
    }
}

namespace {

struct Snapshot {
    std::vector<std::vector<float>> params;
    std::vector<std::vector<float>> buffers;
};

Snapshot take_snapshot(UrbanFMModel& model) {
    Snapshot s;
    for (auto& p : model.params()) s.params.push_back(p.tensor.data());
    for (auto& b : model.buffers()) s.buffers.push_back(*b.second);
    return s;
}

void restore_snapshot(UrbanFMModel& model, const Snapshot& s) {
    auto ps = model.params();
    auto bs = model.buffers();
    for (size_t i = 0; i < ps.size(); ++i) ps[i].tensor.data() = s.params[i];
    for (size_t i = 0; i < bs.size(); ++i) *bs[i].second = s.buffers[i];
}

// (B,1,I,J) scaled coarse inputs for the given sample indices.
nn::TensorF batch_coarse(const std::vector<Sample>& split, const std::vector<size_t>& idx,
                         size_t start, size_t end, int I, int J, double scaler) {
    const int B = static_cast<int>(end - start);
    std::vector<float> v(static_cast<size_t>(B) * I * J);
    for (size_t b = start; b < end; ++b) {
        const auto& c = split[idx[b]].coarse;
        if (c.height != I || c.width != J)
            throw ShapeError("train: coarse map shape does not match model grid");
        for (size_t i = 0; i < c.size(); ++i)
            v[(b - start) * I * J + i] = static_cast<float>(c.values[i] / scaler);
    }
    return nn::TensorF::from_data({B, 1, I, J}, std::move(v));
}

}  // namespace

TrainHistory train_loop(UrbanFMModel& model, const std::vector<Sample>& train_split,
                        const std::vector<Sample>& valid_split, const TrainConfig& cfg) {
    if (train_split.size() < 2) throw DomainError("train: need at least two training samples");
    if (valid_split.empty()) throw DomainError("train: empty validation split");
    if (cfg.batch < 2) throw ConfigError("train: batch size must be >= 2 (batch statistics)");
    const auto& mc = model.cfg;
    const int I = mc.I, J = mc.J, N = mc.N;
    const int NH = N * I, NW = N * J;
    const size_t fine_cells = static_cast<size_t>(NH) * NW;

    auto params = model.params();
    nn::Adam<float> opt;
    opt.init(params);
    std::mt19937 rng(cfg.seed);

    if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

    TrainHistory history;
    Snapshot best;
    ModelInferencer inferencer(model, cfg.coarse_scaler, cfg.fine_scaler);

    std::vector<size_t> idx(train_split.size());
    std::iota(idx.begin(), idx.end(), size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg.lr, epoch, cfg.halve_every);
        std::shuffle(idx.begin(), idx.end(), rng);

        double loss_sum = 0.0;
        size_t batches = 0;
        for (size_t start = 0; start < idx.size(); start += cfg.batch) {
            const size_t end = std::min(idx.size(), start + cfg.batch);
            const int B = static_cast<int>(end - start);
            if (B < 2) break;  // batch statistics need at least two samples

            auto coarse = batch_coarse(train_split, idx, start, end, I, J, cfg.coarse_scaler);

            std::vector<float> target(static_cast<size_t>(B) * fine_cells);
            for (size_t b = start; b < end; ++b) {
                const auto& f = train_split[idx[b]].fine;
                if (f.height != NH || f.width != NW)
                    throw ShapeError("train: fine map shape does not match model grid");
                for (size_t i = 0; i < f.size(); ++i)
                    target[(b - start) * fine_cells + i] =
                        static_cast<float>(f.values[i] / cfg.fine_scaler);
            }
            auto target_t = nn::TensorF::from_data({B, 1, NH, NW}, std::move(target));

            std::vector<ExternalRecord> records;
            if (mc.has_external())
                for (size_t b = start; b < end; ++b) records.push_back(train_split[idx[b]].external);

            auto out = model.forward(coarse, mc.has_external() ? &records : nullptr,
                                     /*train=*/true, &rng);

            nn::TensorF loss;
            if (mc.variant == Variant::StructuralLoss) {
                std::vector<float> coarse_norm_fine(static_cast<size_t>(B) * I * J);
                for (size_t b = start; b < end; ++b) {
                    const auto& c = train_split[idx[b]].coarse;
                    for (size_t i = 0; i < c.size(); ++i)
                        coarse_norm_fine[(b - start) * I * J + i] =
                            static_cast<float>(c.values[i] / cfg.fine_scaler);
                }
                auto mse = nn::mse_loss(out, target_t);
                auto structural =
                    nn::mae_to_const(nn::sum_pool(out, N), std::move(coarse_norm_fine));
                loss = nn::add_scalars(mse, structural, static_cast<float>(cfg.lambda));
            } else {
                // dist * upsampled coarse, in the normalized fine space
                std::vector<float> factor(static_cast<size_t>(B) * fine_cells);
                for (size_t b = start; b < end; ++b) {
                    const auto& c = train_split[idx[b]].coarse;
                    for (int i = 0; i < NH; ++i)
                        for (int j = 0; j < NW; ++j)
                            factor[(b - start) * fine_cells + static_cast<size_t>(i) * NW + j] =
                                static_cast<float>(c.at(i / N, j / N) / cfg.fine_scaler);
                }
                auto pred = nn::mul_const(out, std::move(factor));
                loss = nn::mse_loss(pred, target_t);
            }

            const double loss_val = loss.data()[0];
            if (!std::isfinite(loss_val))
                throw DomainError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                  " (try a lower learning rate)");
            loss_sum += loss_val;
            ++batches;

            opt.zero_grad(params);
            loss.backward();
            opt.step(params, static_cast<float>(lr));
        }
        if (batches == 0) throw DomainError("train: no full batch could be formed");

        MetricsReport val = evaluate(inferencer, valid_split, N, cfg.batch);

        EpochRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = loss_sum / static_cast<double>(batches);
        row.val_rmse = val.rmse;
        row.val_mae = val.mae;
        row.val_mape = val.mape;
        row.val_mape_defined = val.mape_defined;
        history.rows.push_back(row);

        if (history.best_epoch < 0 || val.rmse < history.best_val_rmse) {
            history.best_epoch = epoch;
            history.best_val_rmse = val.rmse;
            best = take_snapshot(model);
        }
    }

    restore_snapshot(model, best);

    if (!cfg.out_dir.empty()) {
        nlohmann::json extra;
        extra["best_epoch"] = history.best_epoch;
        extra["best_val_rmse"] = history.best_val_rmse;
        extra["coarse_scaler"] = cfg.coarse_scaler;
        extra["fine_scaler"] = cfg.fine_scaler;
        save_checkpoint(cfg.out_dir + "/best.ckpt", model, &opt, extra);
        write_history_csv(cfg.out_dir + "/history.csv", history);
    }
    return history;
}

}  // namespace urbanfm
