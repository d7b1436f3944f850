// Helpers shared by the denoiser unit tests and the acceptance run.
#pragma once

#include "otden/denoiser.hpp"
#include "otden/rng.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace otden::testing {

inline std::vector<ImagePatch> random_patches(std::size_t n, int side, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ImagePatch> out;
    for (std::size_t i = 0; i < n; ++i) {
        ImagePatch p(side, side);
        for (double& v : p.pixels) v = u(rng);
        out.push_back(p);
    }
    return out;
}

// Random weights everywhere, including the head and the biases.
inline DenoiserParams random_params(const NetSpec& spec, std::uint64_t seed) {
    DenoiserParams p = init_params(spec, seed, false);
    Rng rng(derive_seed(seed, 1));
    std::uniform_real_distribution<double> u(-0.2, 0.2);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const Layer& l = spec.layers[i];
        if (!l.param_count()) continue;
        const std::size_t bias = p.offsets[i] + l.param_count() - static_cast<std::size_t>(l.out_ch);
        for (int o = 0; o < l.out_ch; ++o) p.values[bias + static_cast<std::size_t>(o)] = u(rng);
    }
    return p;
}

struct GradientCheck {
    std::size_t checked = 0;
    std::size_t straddling = 0;  ///< skipped: the +-h step flips a ReLU
    double worst = 0.0;          ///< max relative error over checked coordinates
};

// Analytic gradient of the full loss (fidelity plus fixed-coupling W1) against
// central differences of the same loss with the coupling held fixed, over
// `trials` random nets and batches. Every layer type appears: strided conv,
// transposed conv, relu, skip. Central differences are only valid inside one
// smooth piece, so coordinates whose perturbation flips a ReLU are left out.
inline GradientCheck run_gradient_check(std::uint64_t trials, double h = 1e-4) {
    const NetSpec spec = NetSpec::default_unet(3);
    GradientCheck g;
    for (std::uint64_t trial = 0; trial < trials; ++trial) {
        const DenoiserParams p = random_params(spec, 100 + trial);
        const auto noisy = random_patches(4, 8, 200 + trial);
        const auto clean = random_patches(4, 8, 300 + trial);
        LossSpec loss;
        loss.lambda = 0.5 + 0.25 * static_cast<double>(trial % 8);
        loss.beta = trial % 3 == 2 ? 2.0 : 1.0;
        const LossResult r = loss_and_grad(p, spec, loss, noisy, clean);
        const auto pattern = relu_pattern(p, spec, noisy);
        for (std::size_t k = 0; k < p.values.size(); ++k) {
            if (std::abs(r.grad[k]) <= 1e-6) continue;
            DenoiserParams plus = p, minus = p;
            plus.values[k] += h;
            minus.values[k] -= h;
            if (relu_pattern(plus, spec, noisy) != pattern || relu_pattern(minus, spec, noisy) != pattern) {
                ++g.straddling;
                continue;
            }
            const double fd = (loss_with_plan(plus, spec, loss, noisy, clean, r.plan) -
                               loss_with_plan(minus, spec, loss, noisy, clean, r.plan)) / (2.0 * h);
            g.worst = std::max(g.worst, std::abs(fd - r.grad[k]) / std::max(std::abs(fd), std::abs(r.grad[k])));
            ++g.checked;
        }
    }
    return g;
}

}  // namespace otden::testing
