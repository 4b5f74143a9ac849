#pragma once

// Independent scalar reference implementations. They loop over plain doubles
// and share no code with the library, so agreement is evidence of
// correctness rather than of consistency.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <torch/torch.h>

namespace adasam::testing {

/// -alpha_t (1 - p_t)^gamma log(p_t) with p clamped to [1e-7, 1 - 1e-7].
inline double focal_oracle(const std::vector<double>& p, int target, const std::vector<double>& alpha,
                           double gamma) {
    double sum = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) {
        const double k = static_cast<int>(c) == target ? 1.0 : 0.0;
        const double pc = std::min(std::max(p[c], 1e-7), 1.0 - 1e-7);
        sum += alpha[c] * std::pow(1.0 - pc, gamma) * k * std::log(pc);
    }
    return -sum;
}

/// probs[l][i] over L labels and N pixels, gt[i] in [0, L). Mean over
/// foreground labels of 1 - 2 sum(p y) / (sum p + sum y + eps); a label with
/// no GT pixel and predicted mass below `absent_mass` is skipped.
inline double dice_oracle(const std::vector<std::vector<double>>& probs, const std::vector<int>& gt,
                          double eps = 1e-6, double absent_mass = 0.5) {
    double total = 0.0;
    int used = 0;
    for (std::size_t l = 1; l < probs.size(); ++l) {
        double inter = 0.0, psum = 0.0, gsum = 0.0;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            const double y = gt[i] == static_cast<int>(l) ? 1.0 : 0.0;
            inter += probs[l][i] * y;
            psum += probs[l][i];
            gsum += y;
        }
        if (gsum == 0.0 && psum < absent_mass) continue;
        total += 1.0 - 2.0 * inter / (psum + gsum + eps);
        ++used;
    }
    return used == 0 ? 0.0 : total / used;
}

/// Set-arithmetic DSC on label vectors, 1 when both are empty.
inline double dsc_oracle(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, int label) {
    double p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] == label;
        const bool b = gt[i] == label;
        p += a;
        g += b;
        both += a && b;
    }
    return p + g == 0 ? 1.0 : 2.0 * both / (p + g);
}

inline double mean_oracle(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double pop_stdev_oracle(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    const double m = mean_oracle(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

/// Largest relative error between the float32 autograd gradient of a scalar
/// function and central differences of the same function evaluated in
/// float64. Relative error is |a - n| / max(|a|, |n|, floor).
inline double gradient_check(const torch::Tensor& input, const std::function<torch::Tensor(const torch::Tensor&)>& fn,
                             double step = 1e-5, double floor = 1e-2) {
    auto x = input.detach().to(torch::kFloat32).clone().set_requires_grad(true);
    auto analytic = torch::autograd::grad({fn(x)}, {x})[0].to(torch::kFloat64).contiguous();
    torch::NoGradGuard guard;
    auto probe = input.detach().to(torch::kFloat64).clone().contiguous();
    auto* data = probe.data_ptr<double>();
    const auto* an = analytic.data_ptr<double>();
    double worst = 0.0;
    for (int64_t i = 0; i < probe.numel(); ++i) {
        const double saved = data[i];
        data[i] = saved + step;
        const double up = fn(probe).item<double>();
        data[i] = saved - step;
        const double down = fn(probe).item<double>();
        data[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(numeric), std::abs(an[i]), floor});
        worst = std::max(worst, std::abs(numeric - an[i]) / denom);
    }
    return worst;
}

/// Random probability vector of length n bounded away from 0 and 1.
inline std::vector<double> random_simplex(std::mt19937_64& rng, int n, double lo = 0.05) {
    std::uniform_real_distribution<double> u(lo, 1.0);
    std::vector<double> v(n);
    double s = 0;
    for (auto& x : v) s += (x = u(rng));
    for (auto& x : v) x /= s;
    return v;
}

}  // namespace adasam::testing
