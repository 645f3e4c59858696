#pragma once

#include <vector>

#include "urbanfm/errors.hpp"

namespace urbanfm {

// Nonnegative 2-D grid of flow volumes (instances per interval).
struct FlowMap {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    FlowMap() = default;
    FlowMap(int h, int w, double fill = 0.0);
    FlowMap(int h, int w, std::vector<double> v);

    double& at(int i, int j) { return values[static_cast<size_t>(i) * width + j]; }
    double at(int i, int j) const { return values[static_cast<size_t>(i) * width + j]; }
    size_t size() const { return values.size(); }

    // Throws DomainError on a negative entry.
    void validate() const;
};

// Upscaling factor N between coarse and fine grids.
struct ScaleFactor {
    int n;
    explicit ScaleFactor(int n_);
};

// Per-block distribution over subregions, shape (N*I, N*J), entries in [0,1].
struct DistributionMap {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    DistributionMap() = default;
    DistributionMap(int h, int w, double fill = 0.0);

    double& at(int i, int j) { return values[static_cast<size_t>(i) * width + j]; }
    double at(int i, int j) const { return values[static_cast<size_t>(i) * width + j]; }

    // True when every N x N block sums to 1 within tol.
    bool is_proper(ScaleFactor scale, double tol = 1e-6) const;
};

// Sum of each N x N block; fine dimensions must be divisible by N.
// Block sums use balanced pairwise summation so that uniform blocks with
// power-of-two N*N aggregate without rounding.
FlowMap coarsen(const FlowMap& fine, ScaleFactor scale);

// Replicate each coarse entry over its N x N block.
FlowMap nn_upsample(const FlowMap& coarse, ScaleFactor scale);

// Divide each entry by its N x N block sum plus eps (sum-pool, upsample, divide).
// Rejects negative entries.
DistributionMap n2_normalize(const FlowMap& raw, ScaleFactor scale, double eps = 1e-7);

// fine(i',j') = coarse(floor(i'/N), floor(j'/N)) * dist(i',j').
FlowMap distribute(const FlowMap& coarse, const DistributionMap& dist, ScaleFactor scale);

// Max over superregions of |coarse - sum of fine block|.
double structural_violation(const FlowMap& coarse, const FlowMap& fine, ScaleFactor scale);

}  // namespace urbanfm
