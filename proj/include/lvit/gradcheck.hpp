#pragma once

#include <functional>

#include "lvit/tensor.hpp"

namespace lvit {

// Central-difference gradient verification for a scalar-valued function of x.
// Returns the maximum over coordinates of
//   |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
template <typename Real>
double finite_diff_check(const std::function<Tensor<Real>(const Tensor<Real>&)>& f, Tensor<Real> x, Real eps) {
    if (eps <= Real(0)) throw std::invalid_argument("finite_diff_check: eps must be positive");

    // Analytic gradient through the tape.
    Tensor<Real> xg = Tensor<Real>::from(x.shape(), x.values());
    xg.set_requires_grad(true);
    {
        Tape<Real> tape;
        Tensor<Real> loss = f(xg);
        if (loss.size() != 1) throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
        tape.backward(loss);
    }
    const Tensor<Real> analytic = xg.grad();

    auto eval = [&](const std::vector<Real>& v) -> double {
        Tensor<Real> xt = Tensor<Real>::from(x.shape(), v);
        return static_cast<double>(f(xt).item());
    };

    double max_err = 0.0;
    std::vector<Real> v = x.values();
    for (size_t i = 0; i < v.size(); ++i) {
        const Real orig = v[i];
        v[i] = orig + eps;
        const double fp = eval(v);
        v[i] = orig - eps;
        const double fm = eval(v);
        v[i] = orig;
        const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double a = static_cast<double>(analytic.data()[i]);
        const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace lvit
