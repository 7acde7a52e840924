#pragma once

#include <cmath>

#include "cvar/graph.hpp"
#include "cvar/tensor.hpp"

namespace cvar {

// Central-difference check of the tape against an independent numeric
// derivative. `build` maps (graph, input var) to a scalar loss var and is
// invoked once for the analytic pass and twice per coordinate for the
// finite-difference pass. Runs in f64; returns the max relative error
// |analytic - fd| / (|analytic| + |fd| + 1e-12).
template <typename Fn>
double gradcheck(Fn&& build, const Tensor<double>& x, double eps = 1e-4) {
    Tensor<double> analytic;
    {
        Graph<double> g(true);
        auto xv = g.param(&x);
        auto loss = build(g, xv);
        g.backward(loss);
        analytic = g.grad(xv);
    }
    auto eval = [&](const Tensor<double>& xt) {
        Graph<double> g(false);
        auto xv = g.input(xt);
        auto loss = build(g, xv);
        return g.value(loss).data[0];
    };
    double worst = 0.0;
    Tensor<double> xp = x;
    for (size_t i = 0; i < x.numel(); ++i) {
        const double orig = xp.data[i];
        xp.data[i] = orig + eps;
        const double fp = eval(xp);
        xp.data[i] = orig - eps;
        const double fm = eval(xp);
        xp.data[i] = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double a = analytic.data[i];
        const double rel = std::fabs(a - fd) / (std::fabs(a) + std::fabs(fd) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace cvar
