#include "urbanfm/baselines.hpp"

#include "urbanfm/data.hpp"

namespace urbanfm {

FlowMap mean_partition(const FlowMap& coarse, ScaleFactor scale) {
    const int n = scale.n;
    FlowMap out(coarse.height * n, coarse.width * n);
    const double frac = 1.0 / (n * n);
    for (int i = 0; i < out.height; ++i)
        for (int j = 0; j < out.width; ++j) out.at(i, j) = coarse.at(i / n, j / n) * frac;
    return out;
}

HAModel ha_fit(const std::vector<FlowMap>& train_fine, ScaleFactor scale) {
    if (train_fine.empty()) throw DomainError("ha_fit: empty training sequence");
    const int n = scale.n;
    const int H = train_fine[0].height, W = train_fine[0].width;
    FlowMap accum(H, W, 0.0);
    for (const auto& f : train_fine) {
        if (f.height != H || f.width != W) throw ShapeError("ha_fit: inconsistent map shapes");
        for (size_t i = 0; i < accum.size(); ++i) accum.values[i] += f.values[i];
    }
    const FlowMap block_totals = coarsen(accum, scale);
    HAModel m;
    m.scale = n;
    m.dist = DistributionMap(H, W);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const double total = block_totals.at(i / n, j / n);
            m.dist.at(i, j) = total > 0.0 ? accum.at(i, j) / total : 1.0 / (n * n);
        }
    return m;
}

FlowMap ha_infer(const HAModel& model, const FlowMap& coarse) {
    return distribute(coarse, model.dist, ScaleFactor(model.scale));
}

void write_ha_model(const std::string& path, const HAModel& model) {
    FlowMap as_map(model.dist.height, model.dist.width, model.dist.values);
    write_flow_stack(path, {as_map});
}

HAModel read_ha_model(const std::string& path, ScaleFactor scale) {
    auto maps = read_flow_stack(path);
    if (maps.size() != 1) throw ParseError("ha model file must contain exactly one grid");
    HAModel m;
    m.scale = scale.n;
    m.dist = DistributionMap(maps[0].height, maps[0].width);
    m.dist.values = maps[0].values;
    return m;
}

}  // namespace urbanfm
