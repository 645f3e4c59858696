#pragma once

#include <functional>
#include <vector>

#include "urbanfm/nn/tensor.hpp"

namespace urbanfm::nn {

// Central finite differences against the analytic backward pass.
//
// `forward` must rebuild the graph from the given leaves and return a scalar.
// Returns the max over all leaf coordinates of
//   |analytic - numeric| / max(1e-6, |analytic| + |numeric|).
// The 1e-6 floor keeps near-zero gradients from registering finite-difference
// truncation noise (~1e-10 at unit loss scale) as large relative error.
inline double grad_check(const std::function<TensorD(std::vector<TensorD>&)>& forward,
                         std::vector<TensorD> leaves, double h = 1e-5) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();  // leaves may carry gradients from an earlier check
    }
    auto loss = forward(leaves);
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves) analytic.push_back(l.grad());

    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        for (size_t i = 0; i < leaf.size(); ++i) {
            const double x0 = leaf.data()[i];
            leaf.data()[i] = x0 + h;
            const double fp = forward(leaves).data()[0];
            leaf.data()[i] = x0 - h;
            const double fm = forward(leaves).data()[0];
            leaf.data()[i] = x0;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[li][i];
            const double err =
                std::abs(a - numeric) / std::max(1e-6, std::abs(a) + std::abs(numeric));
            if (err > worst) worst = err;
        }
    }
    return worst;
}

}  // namespace urbanfm::nn
