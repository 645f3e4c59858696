#pragma once

#include <memory>
#include <string>
#include <vector>

#include "urbanfm/data.hpp"

namespace urbanfm {

struct MetricsReport {
    double rmse = 0.0;
    double mae = 0.0;
    double mape = 0.0;
    bool mape_defined = true;
    size_t mape_excluded_cells = 0;  // cells with target below the zero threshold
    double structural_residual = 0.0;  // worst relative coarse-mass violation
    size_t samples = 0;
};

// Per-pixel means over all samples and cells; MAPE averaged only over cells
// with target >= 1e-6.
MetricsReport compute_metrics(const std::vector<FlowMap>& preds,
                              const std::vector<FlowMap>& targets);

// Anything that maps a batch of samples to fine-grained predictions.
class Inferencer {
public:
    virtual ~Inferencer() = default;
    virtual std::string name() const = 0;
    virtual std::vector<FlowMap> infer_batch(const std::vector<Sample>& batch) = 0;
};

// Runs inference over the split in fixed-size batches, computes metrics plus
// the structural residual of the predictions against the coarse inputs.
MetricsReport evaluate(Inferencer& inferencer, const std::vector<Sample>& split, int scale,
                       int batch_size = 16);

std::string format_report(const MetricsReport& r, const std::string& method);
void write_report_kv(const std::string& path, const MetricsReport& r, const std::string& method);

// Per-cell absolute error grids, one per sample, in the grid text format.
void write_error_grids(const std::string& path, const std::vector<FlowMap>& preds,
                       const std::vector<FlowMap>& targets);

}  // namespace urbanfm
