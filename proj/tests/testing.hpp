#pragma once

// Shared helpers for the test suites: finite-difference gradients and small
// tensor builders. Lives in test code only.

#include <cmath>
#include <functional>

#include <brasyn/tensor.hpp>

namespace btest {

using brasyn::Shape;
using brasyn::Tensor;

// Central finite differences of a scalar-valued function of one tensor.
template <class F>
Tensor<double> fd_grad(F f, Tensor<double> x, double h = 1e-5) {
    Tensor<double> g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i] = x0 + h;
        const double fp = f(x);
        x[i] = x0 - h;
        const double fm = f(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

inline double l2(const Tensor<double>& t) {
    double s = 0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
    return std::sqrt(s);
}

inline double rel_err(const Tensor<double>& a, const Tensor<double>& b) {
    Tensor<double> d(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return l2(d) / (l2(a) + l2(b) + 1e-300);
}

inline Tensor<double> randn(Shape shape, std::uint64_t seed, double std = 1.0,
                            double mean = 0.0) {
    brasyn::Rng rng(seed);
    return Tensor<double>::randn(std::move(shape), rng, std, mean);
}

} // namespace btest
