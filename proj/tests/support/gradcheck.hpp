#pragma once

// Central finite-difference oracle for gradient checks. Runs at 64-bit.
// The oracle is independent of the tape: it only re-evaluates the forward
// function at perturbed inputs.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vtok/tensor.hpp"

namespace gradcheck {

using vtok::TensorT;

struct Result {
    bool ok = true;
    double worst_rel = 0.0;
    std::string detail;
};

// Compares the analytic gradient of `inputs[which]` (populated by the caller
// via a tape backward) against central differences of `forward_loss`, which
// must re-run the whole forward pass from current input values and return the
// scalar loss value.
inline Result compare_fd(TensorT<double>& input, const std::vector<double>& analytic,
                         const std::function<double()>& forward_loss, double eps = 1e-4,
                         double tol = 1e-4) {
    Result r;
    double* p = input.data();
    for (int64_t i = 0; i < input.numel(); ++i) {
        const double saved = p[i];
        p[i] = saved + eps;
        const double fp = forward_loss();
        p[i] = saved - eps;
        const double fm = forward_loss();
        p[i] = saved;
        const double fd = (fp - fm) / (2 * eps);
        const double an = analytic[static_cast<size_t>(i)];
        const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-3});
        const double rel = std::fabs(fd - an) / denom;
        if (rel > r.worst_rel) r.worst_rel = rel;
        if (rel > tol) {
            r.ok = false;
            r.detail = "element " + std::to_string(i) + ": analytic " + std::to_string(an) +
                       " vs fd " + std::to_string(fd) + " (rel " + std::to_string(rel) + ")";
            return r;
        }
    }
    return r;
}

// Convenience wrapper: builds the loss as sum of a weighted projection of the
// op output (a fixed random projection makes the scalar sensitive to every
// output element), runs backward once, then FD-checks every listed input.
struct Harness {
    std::vector<TensorT<double>> inputs;
    std::function<TensorT<double>()> forward;  // consumes `inputs`, returns scalar loss

    Result check_all(double eps = 1e-4, double tol = 1e-4) {
        // Analytic gradients.
        std::vector<std::vector<double>> analytic;
        {
            vtok::TapeT<double> tape;
            for (auto& in : inputs) in.zero_grad();
            auto loss = forward();
            tape.backward(loss);
            for (auto& in : inputs) analytic.push_back(in.grad());
        }
        auto loss_value = [&]() -> double {
            vtok::NoGradT<double> off;
            return forward().item();
        };
        for (size_t k = 0; k < inputs.size(); ++k) {
            auto r = compare_fd(inputs[k], analytic[k], loss_value, eps, tol);
            if (!r.ok) {
                r.detail = "input " + std::to_string(k) + ", " + r.detail;
                return r;
            }
        }
        return {};
    }
};

// Fixed random projection: sum(out * proj) so every element matters.
inline TensorT<double> project(const TensorT<double>& out, uint64_t seed) {
    vtok::Rng rng(seed);
    auto proj = TensorT<double>::uniform(out.shape(), rng, 0.25, 1.75);
    return vtok::ops::sum(vtok::ops::mul(out, proj));
}

}  // namespace gradcheck
