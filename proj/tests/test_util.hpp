#pragma once

#include <cmath>
#include <functional>

#include "diffdti/nn/tensor.hpp"

namespace testutil {

using diffdti::Rng;
using diffdti::nn::Tensor;

inline void fill_randn(Tensor& t, Rng& rng, double scale = 1.0) {
    for (auto& v : t.v) v = scale * rng.gauss();
}

// Weighted-sum probe: reduces a tensor to a scalar with fixed random weights,
// giving a dense, well-scaled gradient for finite-difference checks.
struct Probe {
    Tensor weights;
    explicit Probe(const Tensor& like, Rng& rng) : weights(Tensor::zeros_like(like)) {
        fill_randn(weights, rng);
    }
    double operator()(const Tensor& y) const { return diffdti::nn::dot(weights, y); }
};

inline bool close_rel(double a, double b, double rtol, double atol = 1e-9) {
    return std::fabs(a - b) <= rtol * std::max(std::fabs(a), std::fabs(b)) + atol;
}

// Central finite difference of f at x[i].
inline double fd_at(diffdti::nn::AlignedVec& storage, size_t i, const std::function<double()>& f,
                    double h) {
    const double orig = storage[i];
    storage[i] = orig + h;
    const double up = f();
    storage[i] = orig - h;
    const double down = f();
    storage[i] = orig;
    return (up - down) / (2.0 * h);
}

// Checks analytic against numeric gradients at a set of strided coordinates.
// Mixed relative error with an absolute floor that absorbs finite-difference
// noise around zero-magnitude gradients.
inline double max_grad_err(diffdti::nn::AlignedVec& storage, const Tensor& analytic,
                           const std::function<double()>& f, size_t stride, double h,
                           double floor = 1e-5) {
    double worst = 0.0;
    for (size_t i = 0; i < storage.size(); i += stride) {
        const double fd = fd_at(storage, i, f, h);
        const double ad = analytic.v[i];
        const double denom = std::max({std::fabs(fd), std::fabs(ad), floor});
        worst = std::max(worst, std::fabs(fd - ad) / denom);
    }
    return worst;
}

} // namespace testutil
