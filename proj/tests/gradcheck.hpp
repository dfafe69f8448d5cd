#pragma once

// Finite-difference gradient oracle, test-only. Re-evaluates the forward
// function around perturbed inputs; never touches the backward machinery it
// is checking.

#include <cmath>
#include <functional>
#include <vector>

#include "pnca/rng.hpp"
#include "pnca/tensor.hpp"

namespace gradcheck {

// Scalar-valued function of a set of leaf tensors.
using LossFn = std::function<pnca::Tensor<double>(const std::vector<pnca::Tensor<double>>&)>;

struct Report {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t checked = 0;
};

inline double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
    return std::fabs(a - b) / denom;
}

// Central differences against analytic gradients of `fn` at `inputs`.
// Every input with requires_grad participates.
inline Report check(const LossFn& fn, std::vector<pnca::Tensor<double>> inputs,
                    double step = 1e-6) {
    using pnca::Tensor;
    Report rep;

    for (auto& t : inputs) t.zero_grad();
    Tensor<double> loss = fn(inputs);
    pnca::backward(loss);

    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        const std::vector<double> analytic = t.grad();
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double x0 = t.data()[i];
            const double h = step * std::max(1.0, std::fabs(x0));
            double fplus, fminus;
            {
                pnca::NoGradGuard ng;
                t.data_mut()[i] = x0 + h;
                fplus = fn(inputs).item();
                t.data_mut()[i] = x0 - h;
                fminus = fn(inputs).item();
                t.data_mut()[i] = x0;
            }
            const double numeric = (fplus - fminus) / (2.0 * h);
            rep.max_rel_err = std::max(rep.max_rel_err, rel_err(analytic[i], numeric));
            rep.max_abs_err = std::max(rep.max_abs_err, std::fabs(analytic[i] - numeric));
            ++rep.checked;
        }
    }
    return rep;
}

inline pnca::Tensor<double> random_tensor(pnca::Rng& rng, pnca::Shape shape,
                                          bool requires_grad = true, double lo = -1.0,
                                          double hi = 1.0) {
    std::vector<double> data(pnca::shape_numel(shape));
    for (auto& v : data) v = rng.uniform(lo, hi);
    return pnca::Tensor<double>::from(std::move(data), std::move(shape), requires_grad);
}

// Values bounded away from zero, for ops with kinks or singularities there.
inline pnca::Tensor<double> random_tensor_away_from_zero(pnca::Rng& rng, pnca::Shape shape,
                                                         bool requires_grad = true,
                                                         double margin = 0.05) {
    std::vector<double> data(pnca::shape_numel(shape));
    for (auto& v : data) {
        const double mag = margin + rng.uniform(0.0, 1.0);
        v = rng.bernoulli(0.5) ? mag : -mag;
    }
    return pnca::Tensor<double>::from(std::move(data), std::move(shape), requires_grad);
}

}  // namespace gradcheck
