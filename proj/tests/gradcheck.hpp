#pragma once

// Central finite-difference oracle used by the gradient tests. It only
// evaluates the forward function, so it stays independent of every
// backward closure it is checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <random>
#include <vector>

#include "dehaze/autograd.hpp"

namespace dehaze::testing {

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Builds a scalar from `inputs` registered as tape inputs.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double evaluate(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
    return tape.value(fn(tape, vars))[0];
}

/// Max relative error between the tape gradient and central differences over
/// every element of every input.
inline double max_gradient_error(const ScalarFn& fn, std::vector<Tensor> inputs, double h = 1e-4) {
    Tape tape(true);
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.input(t));
    tape.backward(fn(tape, vars));
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor* g = tape.grad(vars[k]);
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double saved = inputs[k][i];
            inputs[k][i] = saved + h;
            const double up = evaluate(fn, inputs);
            inputs[k][i] = saved - h;
            const double down = evaluate(fn, inputs);
            inputs[k][i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = g ? (*g)[i] : 0.0;
            worst = std::max(worst, relative_error(analytic, numeric));
        }
    }
    return worst;
}

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(s);
    for (double& v : t.vec()) v = d(rng);
    return t;
}

}  // namespace dehaze::testing

#include "dehaze/network.hpp"

namespace dehaze::testing {

/// Builds a scalar loss over the parameters of `store`.
using ParamLossFn = std::function<Var(Tape&)>;

struct ParamGradReport {
    double worst = 0.0;
    std::string worst_param;
    std::size_t checked = 0;
};

/// Compares tape gradients of every parameter tensor in `store` against
/// central differences on up to `per_param` randomly chosen entries each.
/// Each entry is scored with the best of the step sizes `hs`: large steps
/// can straddle a ReLU kink, small ones drown tiny gradients in rounding.
inline ParamGradReport param_gradient_error(ParameterStore& store, const ParamLossFn& fn, int per_param,
                                            std::uint64_t seed, const std::vector<double>& hs) {
    store.zero_grad();
    {
        Tape tape(true);
        tape.backward(fn(tape));
    }
    auto eval = [&] {
        Tape tape(false);
        return tape.value(fn(tape))[0];
    };
    std::mt19937_64 rng(seed);
    ParamGradReport rep;
    for (Parameter& p : store.all()) {
        if (!p.trainable) continue;
        const std::size_t n = p.value.size();
        std::vector<std::size_t> picks;
        if (static_cast<std::size_t>(per_param) >= n) {
            for (std::size_t i = 0; i < n; ++i) picks.push_back(i);
        } else {
            for (int k = 0; k < per_param; ++k) picks.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
        }
        for (std::size_t i : picks) {
            const double saved = p.value[i];
            const double analytic = p.grad.size() == n ? p.grad[i] : 0.0;
            double err = std::numeric_limits<double>::infinity();
            for (double h : hs) {
                p.value[i] = saved + h;
                const double up = eval();
                p.value[i] = saved - h;
                const double down = eval();
                p.value[i] = saved;
                err = std::min(err, relative_error(analytic, (up - down) / (2.0 * h)));
            }
            ++rep.checked;
            if (err > rep.worst) {
                rep.worst = err;
                rep.worst_param = p.name;
            }
        }
    }
    return rep;
}

inline ParamGradReport param_gradient_error(ParameterStore& store, const ParamLossFn& fn, int per_param,
                                            std::uint64_t seed, double h = 1e-5) {
    return param_gradient_error(store, fn, per_param, seed, std::vector<double>{h});
}

/// Replaces zero biases with small random values so that no activation sits
/// exactly on a ReLU kink during finite differencing.
inline void randomize_biases(ParameterStore& store, std::uint64_t seed, double scale = 0.05) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-scale, scale);
    for (Parameter& p : store.all()) {
        if (p.name.size() >= 2 && p.name.compare(p.name.size() - 2, 2, ".b") == 0) {
            for (double& v : p.value.vec()) v = d(rng);
        }
    }
}

}  // namespace dehaze::testing
