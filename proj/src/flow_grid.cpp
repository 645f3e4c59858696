#include "urbanfm/flow_grid.hpp"

#include <cmath>
#include <string>

namespace urbanfm {
namespace {

// Balanced pairwise sum over values[base + k*stride], k in [0, count).
double pairwise_sum(const double* values, size_t count, size_t stride) {
    if (count == 1) return values[0];
    size_t half = count / 2;
    return pairwise_sum(values, half, stride) +
           pairwise_sum(values + half * stride, count - half, stride);
}

// Sum of the N x N block with top-left fine index (bi*N, bj*N).
double block_sum(const FlowMap& fine, int n, int bi, int bj) {
    // Gather the block row sums, then pairwise-combine them.
    double rows[64];
    std::vector<double> rows_dyn;
    double* r = rows;
    if (n > 64) {
        rows_dyn.resize(n);
        r = rows_dyn.data();
    }
    for (int di = 0; di < n; ++di) {
        const double* p = &fine.values[static_cast<size_t>(bi * n + di) * fine.width + bj * n];
        r[di] = pairwise_sum(p, n, 1);
    }
    return pairwise_sum(r, n, 1);
}

void check_divisible(int h, int w, int n) {
    if (h % n != 0)
        throw ShapeError("flow-grid: height " + std::to_string(h) +
                         " not divisible by scale " + std::to_string(n));
    if (w % n != 0)
        throw ShapeError("flow-grid: width " + std::to_string(w) +
                         " not divisible by scale " + std::to_string(n));
}

}  // namespace

FlowMap::FlowMap(int h, int w, double fill)
    : height(h), width(w), values(static_cast<size_t>(h) * w, fill) {
    if (h < 1 || w < 1) throw ShapeError("FlowMap: dimensions must be >= 1");
}

FlowMap::FlowMap(int h, int w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
    if (h < 1 || w < 1) throw ShapeError("FlowMap: dimensions must be >= 1");
    if (values.size() != static_cast<size_t>(h) * w)
        throw ShapeError("FlowMap: data length does not match dimensions");
}

void FlowMap::validate() const {
    for (double x : values)
        if (x < 0.0) throw DomainError("FlowMap: negative flow entry");
}

ScaleFactor::ScaleFactor(int n_) : n(n_) {
    if (n < 2) throw ConfigError("ScaleFactor: upscaling factor must be >= 2");
}

DistributionMap::DistributionMap(int h, int w, double fill)
    : height(h), width(w), values(static_cast<size_t>(h) * w, fill) {}

bool DistributionMap::is_proper(ScaleFactor scale, double tol) const {
    const int n = scale.n;
    if (height % n != 0 || width % n != 0) return false;
    for (int bi = 0; bi < height / n; ++bi)
        for (int bj = 0; bj < width / n; ++bj) {
            double s = 0.0;
            for (int di = 0; di < n; ++di)
                for (int dj = 0; dj < n; ++dj) s += at(bi * n + di, bj * n + dj);
            if (std::abs(s - 1.0) > tol) return false;
        }
    return true;
}

FlowMap coarsen(const FlowMap& fine, ScaleFactor scale) {
    const int n = scale.n;
    check_divisible(fine.height, fine.width, n);
    FlowMap out(fine.height / n, fine.width / n);
    for (int bi = 0; bi < out.height; ++bi)
        for (int bj = 0; bj < out.width; ++bj) out.at(bi, bj) = block_sum(fine, n, bi, bj);
    return out;
}

FlowMap nn_upsample(const FlowMap& coarse, ScaleFactor scale) {
    const int n = scale.n;
    FlowMap out(coarse.height * n, coarse.width * n);
    for (int i = 0; i < out.height; ++i)
        for (int j = 0; j < out.width; ++j) out.at(i, j) = coarse.at(i / n, j / n);
    return out;
}

DistributionMap n2_normalize(const FlowMap& raw, ScaleFactor scale, double eps) {
    raw.validate();
    const int n = scale.n;
    check_divisible(raw.height, raw.width, n);
    DistributionMap out(raw.height, raw.width);
    for (int bi = 0; bi < raw.height / n; ++bi)
        for (int bj = 0; bj < raw.width / n; ++bj) {
            const double denom = block_sum(raw, n, bi, bj) + eps;
            for (int di = 0; di < n; ++di)
                for (int dj = 0; dj < n; ++dj) {
                    int i = bi * n + di, j = bj * n + dj;
                    out.at(i, j) = denom == 0.0 ? 0.0 : raw.at(i, j) / denom;
                }
        }
    return out;
}

FlowMap distribute(const FlowMap& coarse, const DistributionMap& dist, ScaleFactor scale) {
    const int n = scale.n;
    if (dist.height != coarse.height * n || dist.width != coarse.width * n)
        throw ShapeError("distribute: distribution map shape does not match coarse grid * scale");
    FlowMap out(dist.height, dist.width);
    for (int i = 0; i < out.height; ++i)
        for (int j = 0; j < out.width; ++j) out.at(i, j) = coarse.at(i / n, j / n) * dist.at(i, j);
    return out;
}

double structural_violation(const FlowMap& coarse, const FlowMap& fine, ScaleFactor scale) {
    const int n = scale.n;
    check_divisible(fine.height, fine.width, n);
    if (fine.height != coarse.height * n || fine.width != coarse.width * n)
        throw ShapeError("structural_violation: fine shape does not match coarse grid * scale");
    double worst = 0.0;
    for (int bi = 0; bi < coarse.height; ++bi)
        for (int bj = 0; bj < coarse.width; ++bj) {
            double r = std::abs(coarse.at(bi, bj) - block_sum(fine, n, bi, bj));
            if (r > worst) worst = r;
        }
    return worst;
}

}  // namespace urbanfm
