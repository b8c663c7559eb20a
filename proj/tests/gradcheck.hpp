#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "mvir/tensor.hpp"

// Central finite-difference gradient check used throughout the test suites.
// Evaluates `f` (a scalar-loss closure over `params`) on a fresh tape, then
// probes up to `coords_per_param` random coordinates of every parameter.
// Each coordinate is probed at two step sizes; coordinates whose two
// estimates disagree sit on an activation kink (relu) where no finite
// difference is meaningful, and are skipped. The rest are Richardson
// extrapolated. Returns the worst relative error between tape and
// finite-difference grads.
template <typename F>
double gradcheck_max_rel_err(std::vector<mvir::Tensor>& params, F f, std::mt19937_64& rng,
                             int coords_per_param = 20, double h = 1e-4) {
    for (auto& p : params) p.zero_grad();
    mvir::Tape tape;
    {
        mvir::Tape::Scope scope(tape);
        mvir::Tensor loss = f();
        mvir::backward(loss);
    }
    auto eval = [&]() { return f().item(); };
    double worst = 0.0;
    for (auto& p : params) {
        const long long n = p.size();
        const long long probes = std::min<long long>(coords_per_param, n);
        for (long long k = 0; k < probes; ++k) {
            const long long idx = (n <= coords_per_param) ? k : static_cast<long long>(rng() % static_cast<unsigned long long>(n));
            const double orig = p.at(idx);
            auto central = [&](double step) {
                p.at(idx) = orig + step;
                const double lp = eval();
                p.at(idx) = orig - step;
                const double lm = eval();
                p.at(idx) = orig;
                return (lp - lm) / (2.0 * step);
            };
            const double fd1 = central(h);
            const double fd2 = central(0.5 * h);
            if (std::fabs(fd1 - fd2) > 1e-5 * std::max({std::fabs(fd1), std::fabs(fd2), 1.0})) continue;
            const double fd = (4.0 * fd2 - fd1) / 3.0;
            const double an = p.has_grad() ? p.grad()[static_cast<size_t>(idx)] : 0.0;
            const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-3});
            worst = std::max(worst, std::fabs(fd - an) / denom);
        }
    }
    return worst;
}
