#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "urbanfm/nn/tensor.hpp"

namespace urbanfm::nn {

// Bias-corrected adaptive-moment optimizer.
template <typename T>
struct Adam {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    int64_t t = 0;
    std::vector<std::vector<T>> m, v;  // aligned with the parameter list

    void init(const std::vector<Parameter<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.tensor.size(), T(0));
            v.emplace_back(p.tensor.size(), T(0));
        }
        t = 0;
    }

    void step(std::vector<Parameter<T>>& params, T lr) {
        if (m.size() != params.size()) throw ConfigError("Adam: state/parameter count mismatch");
        ++t;
        const T bc1 = T(1) - std::pow(beta1, static_cast<T>(t));
        const T bc2 = T(1) - std::pow(beta2, static_cast<T>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& w = params[i].tensor.data();
            auto& g = params[i].tensor.grad();
            auto& mi = m[i];
            auto& vi = v[i];
            for (size_t j = 0; j < w.size(); ++j) {
                mi[j] = beta1 * mi[j] + (T(1) - beta1) * g[j];
                vi[j] = beta2 * vi[j] + (T(1) - beta2) * g[j] * g[j];
                const T mhat = mi[j] / bc1;
                const T vhat = vi[j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    void zero_grad(std::vector<Parameter<T>>& params) {
        for (auto& p : params) p.tensor.zero_grad();
    }
};

}  // namespace urbanfm::nn
