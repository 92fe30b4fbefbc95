#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "hma/error.hpp"
#include "hma/rng.hpp"
#include "hma/tape.hpp"

namespace hma {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::size_t worst_target = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    /// Coordinates left out because x +- h switched a relu on or off, so the
    /// function is not differentiable over the stencil.
    std::size_t kink_skips = 0;
    /// Fourth-order stencil (-f(x+2H) + 8f(x+H) - 8f(x-H) + f(x-2H)) / 12H
    /// with H = 1e-3 at the worst coordinate. A diagnostic only: it separates
    /// finite-difference noise from a wrong analytic gradient.
    double worst_stencil5 = 0.0;
    double worst_stencil5_rel_error = 0.0;
};

struct GradCheckOptions {
    double step = 1e-5;
    /// 0 checks every coordinate; otherwise a seeded sample of at most this
    /// many coordinates per target tensor.
    std::size_t max_coords_per_target = 0;
    std::uint64_t sample_seed = 0;
};

/// Relative error with the denominator floored at 1e-8 so that exact
/// zeros on both sides compare equal.
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Builds a scalar from `targets`; the builder must bind every target with
/// tape.param(*target) so analytic gradients can be read back.
using ScalarBuilder = std::function<Var(Tape<double>&)>;

/// Central differences (f(x+h e) - f(x-h e)) / 2h for each checked
/// coordinate of every target, compared against one reverse pass.
inline GradCheckResult grad_check(const ScalarBuilder& f, const std::vector<Tensor<double>*>& targets,
                                  const GradCheckOptions& opt = {}) {
    std::vector<Tensor<double>> analytic;
    std::uint64_t signature = 0;
    {
        Tape<double> tape;
        Var out = f(tape);
        if (tape.value(out).size() != 1) throw ShapeError("grad_check: function must return a scalar");
        if (!tape.value(out).all_finite()) throw EvaluationError("grad_check: non-finite function value");
        tape.backward(out);
        for (auto* t : targets) analytic.push_back(tape.grad_of(*t));
        signature = tape.kink_signature();
    }
    bool crossed = false;
    auto eval = [&f, &crossed, signature]() {
        Tape<double> tape;
        tape.set_recording(false);
        const double v = tape.value(f(tape))[0];
        if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite function value under perturbation");
        crossed = crossed || tape.kink_signature() != signature;
        return v;
    };

    GradCheckResult res;
    Rng rng(opt.sample_seed);
    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
        auto& x = *targets[ti];
        std::vector<std::size_t> coords(x.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opt.max_coords_per_target && coords.size() > opt.max_coords_per_target) {
            for (std::size_t i = 0; i < opt.max_coords_per_target; ++i)
                std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
            coords.resize(opt.max_coords_per_target);
        }
        for (std::size_t i : coords) {
            const double orig = x[i];
            crossed = false;
            x[i] = orig + opt.step;
            const double fp = eval();
            x[i] = orig - opt.step;
            const double fm = eval();
            x[i] = orig;
            if (crossed) {
                ++res.kink_skips;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * opt.step);
            const double a = analytic[ti][i];
            const double err = relative_error(a, numeric);
            ++res.coordinates;
            if (res.coordinates == 1 || err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_target = ti;
                res.worst_index = i;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }
    if (res.coordinates > 0) {
        auto& x = *targets[res.worst_target];
        const double orig = x[res.worst_index];
        const double H = 1e-3;
        auto at = [&](double offset) {
            x[res.worst_index] = orig + offset;
            return eval();
        };
        const double d = (-at(2 * H) + 8 * at(H) - 8 * at(-H) + at(-2 * H)) / (12 * H);
        x[res.worst_index] = orig;
        res.worst_stencil5 = d;
        res.worst_stencil5_rel_error = relative_error(res.worst_analytic, d);
    }
    return res;
}

/// Single-input form: f receives the bound leaf for x.
inline GradCheckResult grad_check(const std::function<Var(Tape<double>&, Var)>& f, Tensor<double>& x,
                                  const GradCheckOptions& opt = {}) {
    return grad_check([&](Tape<double>& t) { return f(t, t.param(x)); }, {&x}, opt);
}

}  // namespace hma
