#pragma once

#include <vector>

#include "urbanfm/flow_grid.hpp"

namespace urbanfm {

// Historical-average allocation: per-block fractions from training data.
struct HAModel {
    DistributionMap dist;
    int scale = 2;
};

// Evenly distribute each superregion's flow over its N^2 subregions.
FlowMap mean_partition(const FlowMap& coarse, ScaleFactor scale);

// Per-block fraction = sum_t fine_t / sum_t blocksum_t (ratio of sums);
// blocks with zero historical mass fall back to uniform 1/N^2.
HAModel ha_fit(const std::vector<FlowMap>& train_fine, ScaleFactor scale);

FlowMap ha_infer(const HAModel& model, const FlowMap& coarse);

void write_ha_model(const std::string& path, const HAModel& model);
HAModel read_ha_model(const std::string& path, ScaleFactor scale);

}  // namespace urbanfm
