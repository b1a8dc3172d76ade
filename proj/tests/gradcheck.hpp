// Central finite-difference oracle for reverse-mode gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "core/tensor.hpp"

namespace testutil {

inline double uniform_pm1(std::mt19937_64& rng) {
    return 2.0 * ((rng() >> 11) * 0x1.0p-53) - 1.0;
}

inline derain::Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng,
                                    bool requires_grad = true) {
    std::vector<double> data(derain::shape_numel(shape));
    for (double& v : data) v = uniform_pm1(rng);
    return derain::Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// forward() must rebuild the graph from the leaves' current data and return a
// scalar. Returns the max relative error between analytic and central
// finite-difference gradients over every element of every leaf.
inline double max_grad_rel_error(const std::vector<derain::Tensor>& leaves,
                                 const std::function<derain::Tensor()>& forward,
                                 double h = 1e-4) {
    for (const derain::Tensor& leaf : leaves) const_cast<derain::Tensor&>(leaf).zero_grad();
    derain::Tensor loss = forward();
    derain::backward(loss);

    double worst = 0.0;
    for (const derain::Tensor& leaf : leaves) {
        auto& t = const_cast<derain::Tensor&>(leaf);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + h;
            const double up = forward().item();
            t.data()[i] = saved - h;
            const double down = forward().item();
            t.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = t.grad()[i];
            const double rel = std::abs(analytic - numeric) /
                               std::max({1.0, std::abs(analytic), std::abs(numeric)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace testutil
