#pragma once

// Central finite differences of a scalar function over every entry of a
// double-precision tensor, perturbed in place.

#include <functional>

#include <torch/torch.h>

namespace oracle {

inline torch::Tensor numeric_gradient(const std::function<double()>& f, torch::Tensor x, double eps = 1e-4) {
    torch::NoGradGuard guard;
    auto flat = x.view({-1});
    auto grad = torch::zeros({flat.numel()}, torch::kFloat64);
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
        const double saved = flat[i].item<double>();
        flat[i] = saved + eps;
        const double up = f();
        flat[i] = saved - eps;
        const double down = f();
        flat[i] = saved;
        grad[i] = (up - down) / (2.0 * eps);
    }
    return grad.view(x.sizes());
}

// ||a - b|| / max(||b||, tiny).
inline double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
    const double denom = std::max(b.to(torch::kFloat64).norm().item<double>(), 1e-12);
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).norm().item<double>() / denom;
}

} // namespace oracle
