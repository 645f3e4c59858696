#pragma once

#include <random>

#include "urbanfm/nn/tensor.hpp"

namespace urbanfm::nn {

// Gaussian with std 1/sqrt(fan_in).
template <typename T>
void init_fan_in_gaussian(Tensor<T>& t, int fan_in, std::mt19937& rng) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void init_uniform(Tensor<T>& t, double lo, double hi, std::mt19937& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void init_constant(Tensor<T>& t, T value) {
    std::fill(t.data().begin(), t.data().end(), value);
}

}  // namespace urbanfm::nn
