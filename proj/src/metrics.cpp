#include "urbanfm/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace urbanfm {

namespace {
constexpr double kMapeZeroThreshold = 1e-6;
}

MetricsReport compute_metrics(const std::vector<FlowMap>& preds,
                              const std::vector<FlowMap>& targets) {
    if (preds.size() != targets.size() || preds.empty())
        throw ShapeError("compute_metrics: need equal, nonempty prediction/target sets");
    double se = 0.0, ae = 0.0, ape = 0.0;
    size_t cells = 0, mape_cells = 0, excluded = 0;
    for (size_t s = 0; s < preds.size(); ++s) {
        if (preds[s].height != targets[s].height || preds[s].width != targets[s].width)
            throw ShapeError("compute_metrics: shape mismatch at sample " + std::to_string(s));
        for (size_t i = 0; i < preds[s].size(); ++i) {
            const double d = preds[s].values[i] - targets[s].values[i];
            se += d * d;
            ae += std::abs(d);
            ++cells;
            if (targets[s].values[i] >= kMapeZeroThreshold) {
                ape += std::abs(d) / targets[s].values[i];
                ++mape_cells;
            } else {
                ++excluded;
            }
        }
    }
    MetricsReport r;
    r.samples = preds.size();
    r.rmse = std::sqrt(se / cells);
    r.mae = ae / cells;
    r.mape_excluded_cells = excluded;
    if (mape_cells > 0) {
        r.mape = ape / mape_cells;
    } else {
        r.mape = std::nan("");
        r.mape_defined = false;
    }
    return r;
}

MetricsReport evaluate(Inferencer& inferencer, const std::vector<Sample>& split, int scale,
                       int batch_size) {
    if (split.empty()) throw DomainError("evaluate: empty split");
    std::vector<FlowMap> preds, targets;
    preds.reserve(split.size());
    for (size_t start = 0; start < split.size(); start += batch_size) {
        const size_t end = std::min(split.size(), start + batch_size);
        std::vector<Sample> batch(split.begin() + start, split.begin() + end);
        auto out = inferencer.infer_batch(batch);
        if (out.size() != batch.size())
            throw ConfigError("evaluate: inferencer returned wrong batch size");
        for (auto& f : out) preds.push_back(std::move(f));
    }
    for (const auto& s : split) targets.push_back(s.fine);
    MetricsReport r = compute_metrics(preds, targets);

    const ScaleFactor sf(scale);
    double worst = 0.0;
    for (size_t s = 0; s < split.size(); ++s) {
        const auto& c = split[s].coarse;
        const FlowMap agg = coarsen(preds[s], sf);
        for (size_t i = 0; i < c.size(); ++i) {
            const double rel =
                std::abs(c.values[i] - agg.values[i]) / std::max(1.0, std::abs(c.values[i]));
            if (rel > worst) worst = rel;
        }
    }
    r.structural_residual = worst;
    return r;
}

std::string format_report(const MetricsReport& r, const std::string& method) {
    std::ostringstream os;
    os << "method:              " << method << "\n"
       << "samples:             " << r.samples << "\n"
       << "rmse:                " << r.rmse << "\n"
       << "mae:                 " << r.mae << "\n"
       << "mape:                " << (r.mape_defined ? std::to_string(r.mape) : "undefined")
       << "\n"
       << "mape_excluded_cells: " << r.mape_excluded_cells << "\n"
       << "structural_residual: " << r.structural_residual << "\n";
    return os.str();
}

void write_report_kv(const std::string& path, const MetricsReport& r, const std::string& method) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.precision(12);
    os << "method=" << method << '\n'
       << "samples=" << r.samples << '\n'
       << "rmse=" << r.rmse << '\n'
       << "mae=" << r.mae << '\n';
    if (r.mape_defined)
        os << "mape=" << r.mape << '\n';
    else
        os << "mape=undefined\n";
    os << "mape_excluded_cells=" << r.mape_excluded_cells << '\n'
       << "structural_residual=" << r.structural_residual << '\n';
}

void write_error_grids(const std::string& path, const std::vector<FlowMap>& preds,
                       const std::vector<FlowMap>& targets) {
    if (preds.size() != targets.size())
        throw ShapeError("write_error_grids: prediction/target count mismatch");
    std::vector<FlowMap> err;
    err.reserve(preds.size());
    for (size_t s = 0; s < preds.size(); ++s) {
        FlowMap e(preds[s].height, preds[s].width);
        for (size_t i = 0; i < e.size(); ++i)
            e.values[i] = std::abs(preds[s].values[i] - targets[s].values[i]);
        err.push_back(std::move(e));
    }
    write_flow_stack(path, err);
}

}  // namespace urbanfm
