#pragma once

#include <string>
#include <vector>

#include "urbanfm/data.hpp"
#include "urbanfm/model.hpp"

namespace urbanfm {

struct TrainConfig {
    int epochs = 200;
    int batch = 16;
    double lr = 1e-4;
    int halve_every = 20;  // epochs between learning-rate halvings
    double lambda = 1.0;   // structural-loss weight (variant sl only)
    unsigned seed = 0;
    double coarse_scaler = 1500.0;
    double fine_scaler = 100.0;
    std::string out_dir;  // empty: keep results in memory only
};

// Stepwise decay: lr * 2^-(epoch / halve_every), integer division, epoch from 0.
double lr_at_epoch(double base_lr, int epoch, int halve_every);

// Min-max normalization against a fixed scaler; values above the scaler map
// beyond 1 (no clipping, so mass is preserved). Tensor shape (1,1,H,W).
nn::TensorF minmax_scale(const FlowMap& map, double scaler);
FlowMap minmax_descale(const nn::TensorF& t, double scaler);

struct EpochRow {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_rmse = 0.0;
    double val_mae = 0.0;
    double val_mape = 0.0;
    bool val_mape_defined = true;
};

struct TrainHistory {
    std::vector<EpochRow> rows;
    int best_epoch = -1;
    double best_val_rmse = 0.0;
};

void write_history_csv(const std::string& path, const TrainHistory& h);

// Mini-batch training with the adaptive-moment optimizer. Tracks validation
// RMSE after each epoch, keeps the best weights (restored into `model` on
// return), and, when out_dir is set, writes best.ckpt and history.csv there.
TrainHistory train_loop(UrbanFMModel& model, const std::vector<Sample>& train_split,
                        const std::vector<Sample>& valid_split, const TrainConfig& cfg);

}  // namespace urbanfm
