#pragma once

// Finite-difference checks for every differentiable op and composed
// module, each run over a range of seeds with seed-dependent shapes.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hma/caa.hpp"
#include "hma/grad_check.hpp"
#include "hma/network.hpp"
#include "hma/rsa.hpp"

namespace hma {

struct GradCase {
    std::string name;
    bool module = false;
    std::function<GradCheckResult(std::uint64_t seed)> run;
};

namespace detail {

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

/// Values bounded away from zero so relu stays away from its kink.
inline Tensor<double> off_zero(Shape dims, Rng& rng) {
    Tensor<double> t(std::move(dims));
    for (auto& v : t.data()) {
        const double m = rng.uniform(0.1, 1.0);
        v = rng.bernoulli(0.5) ? m : -m;
    }
    return t;
}

/// Random linear read-out so every output coordinate matters.
inline Var readout(Tape<double>& t, Var y, std::uint64_t seed) {
    Rng rng(Rng::mix(seed, 0xbeef));
    return ag::weighted_sum(t, y, random_normal<double>(t.value(y).dims(), rng));
}

using Targets = std::vector<Tensor<double>*>;

inline GradCheckResult check(const std::function<Var(Tape<double>&)>& f, const Targets& targets,
                             std::uint64_t seed, std::size_t max_coords = 0) {
    GradCheckOptions opt;
    opt.max_coords_per_target = max_coords;
    opt.sample_seed = Rng::mix(seed, 0x5a5a);
    return grad_check(f, targets, opt);
}

/// Unary op on one random tensor of rank `rank`.
inline GradCheckResult unary(std::uint64_t seed, const Shape& dims, bool avoid_zero,
                             const std::function<Var(Tape<double>&, Var)>& op) {
    Rng rng(seed);
    auto x = avoid_zero ? off_zero(dims, rng) : random_normal<double>(dims, rng);
    return check([&](Tape<double>& t) { return readout(t, op(t, t.param(x)), seed); }, {&x}, seed);
}

inline Shape random_dims(Rng& rng, std::size_t rank, std::size_t lo, std::size_t hi) {
    Shape d(rank);
    for (auto& e : d) e = pick(rng, lo, hi);
    return d;
}

template <class F>
void collect_params(F&& visit, Targets& out) {
    visit([&](const std::string&, Tensor<double>& p, Slot s) {
        if (s == Slot::param) out.push_back(&p);
    });
}

}  // namespace detail

inline std::vector<GradCase> gradcheck_cases() {
    using namespace detail;
    std::vector<GradCase> cs;
    auto op = [&cs](std::string name, std::function<GradCheckResult(std::uint64_t)> f) {
        cs.push_back({std::move(name), false, std::move(f)});
    };
    auto mod = [&cs](std::string name, std::function<GradCheckResult(std::uint64_t)> f) {
        cs.push_back({std::move(name), true, std::move(f)});
    };

    op("matmul", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
        auto a = random_normal<double>({m, k}, rng);
        auto b = random_normal<double>({k, n}, rng);
        return check([&](Tape<double>& t) { return readout(t, ag::matmul(t, t.param(a), t.param(b)), seed); },
                     {&a, &b}, seed);
    });
    op("bmm", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t B = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        const bool ta = rng.bernoulli(0.5), tb = rng.bernoulli(0.5);
        auto a = random_normal<double>(ta ? Shape{B, k, m} : Shape{B, m, k}, rng);
        auto b = random_normal<double>(tb ? Shape{B, n, k} : Shape{B, k, n}, rng);
        return check(
            [&](Tape<double>& t) { return readout(t, ag::bmm(t, t.param(a), t.param(b), ta, tb), seed); },
            {&a, &b}, seed);
    });
    op("softmax_axis", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t rank = pick(rng, 1, 4);
        const std::size_t axis = pick(rng, 0, rank - 1);
        return unary(seed, random_dims(rng, rank, 1, 4), false,
                     [axis](Tape<double>& t, Var x) { return ag::softmax(t, x, axis); });
    });
    op("relu", [](std::uint64_t seed) {
        Rng rng(seed);
        return unary(seed, random_dims(rng, pick(rng, 1, 4), 1, 4), true,
                     [](Tape<double>& t, Var x) { return ag::relu(t, x); });
    });
    op("sigmoid", [](std::uint64_t seed) {
        Rng rng(seed);
        return unary(seed, random_dims(rng, pick(rng, 1, 4), 1, 4), false,
                     [](Tape<double>& t, Var x) { return ag::sigmoid(t, x); });
    });
    for (std::size_t k : {1u, 3u}) {
        op("conv2d_" + std::to_string(k) + "x" + std::to_string(k), [k](std::uint64_t seed) {
            Rng rng(seed);
            const std::size_t B = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
            const std::size_t H = pick(rng, 2, 6), W = pick(rng, 2, 6), stride = pick(rng, 1, 2);
            const bool with_bias = rng.bernoulli(0.5);
            auto x = random_normal<double>({B, cin, H, W}, rng);
            auto w = random_normal<double>({cout, cin, k, k}, rng);
            auto b = random_normal<double>({cout}, rng);
            const kernels::ConvGeometry geom{stride, k / 2};
            Targets targets{&x, &w};
            if (with_bias) targets.push_back(&b);
            return check(
                [&](Tape<double>& t) {
                    Var bias = with_bias ? t.param(b) : Var{};
                    return readout(t, ag::conv2d(t, t.param(x), t.param(w), bias, geom), seed);
                },
                targets, seed);
        });
    }
    for (bool training : {true, false}) {
        op(training ? "batchnorm_train" : "batchnorm_eval", [training](std::uint64_t seed) {
            Rng rng(seed);
            const std::size_t B = pick(rng, 1, 3), C = pick(rng, 1, 3), H = pick(rng, 2, 4), W = pick(rng, 2, 4);
            auto x = random_normal<double>({B, C, H, W}, rng, 1.5, 0.3);
            BatchNormState<double> st(C);
            st.gamma = random_uniform<double>({C}, rng, 0.5, 1.5);
            st.beta = random_normal<double>({C}, rng);
            st.running_mean = random_normal<double>({C}, rng);
            st.running_var = random_uniform<double>({C}, rng, 0.5, 2.0);
            return check(
                [&](Tape<double>& t) { return readout(t, ag::batchnorm(t, t.param(x), st, training), seed); },
                {&x, &st.gamma, &st.beta}, seed);
        });
    }
    op("global_avg_pool", [](std::uint64_t seed) {
        Rng rng(seed);
        return unary(seed, random_dims(rng, 4, 1, 4), false,
                     [](Tape<double>& t, Var x) { return ag::global_avg_pool(t, x); });
    });
    op("adaptive_region_pool", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t gh = pick(rng, 1, 3), gw = pick(rng, 1, 3), ph = pick(rng, 1, 3), pw = pick(rng, 1, 3);
        const PartitionSpec spec{gh, gw, ph, pw};
        return unary(seed, {pick(rng, 1, 2), pick(rng, 1, 3), gh * ph, gw * pw}, false,
                     [spec](Tape<double>& t, Var x) { return ag::adaptive_region_pool(t, x, spec); });
    });
    op("mean_last_axis", [](std::uint64_t seed) {
        Rng rng(seed);
        return unary(seed, random_dims(rng, pick(rng, 2, 4), 1, 4), false,
                     [](Tape<double>& t, Var x) { return ag::mean_last_axis(t, x); });
    });
    op("concat_channels", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t n = pick(rng, 1, 3), B = pick(rng, 1, 2), H = pick(rng, 1, 3), W = pick(rng, 1, 3);
        std::vector<Tensor<double>> xs;
        for (std::size_t i = 0; i < n; ++i) xs.push_back(random_normal<double>({B, pick(rng, 1, 3), H, W}, rng));
        Targets targets;
        for (auto& x : xs) targets.push_back(&x);
        return check(
            [&](Tape<double>& t) {
                std::vector<Var> vs;
                for (auto& x : xs) vs.push_back(t.param(x));
                return readout(t, ag::concat_channels(t, vs), seed);
            },
            targets, seed);
    });
    op("upsample_nearest", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t f = pick(rng, 1, 3);
        return unary(seed, random_dims(rng, 4, 1, 3), false,
                     [f](Tape<double>& t, Var x) { return ag::upsample_nearest(t, x, f); });
    });
    op("partition_regions", [](std::uint64_t seed) {
        Rng rng(seed);
        const PartitionSpec spec{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
        return unary(seed, {pick(rng, 1, 2), pick(rng, 1, 3), spec.height(), spec.width()}, false,
                     [spec](Tape<double>& t, Var x) { return partition_regions(t, x, spec); });
    });
    op("shuffle_regroup", [](std::uint64_t seed) {
        Rng rng(seed);
        return unary(seed, random_dims(rng, 4, 1, 4), false,
                     [](Tape<double>& t, Var x) { return shuffle_regroup(t, x); });
    });
    op("reshape", [](std::uint64_t seed) {
        Rng rng(seed);
        const Shape d = random_dims(rng, 3, 1, 4);
        return unary(seed, d, false,
                     [d](Tape<double>& t, Var x) { return ag::reshape(t, x, {d[0] * d[1], d[2]}); });
    });
    op("add", [](std::uint64_t seed) {
        Rng rng(seed);
        const Shape d = random_dims(rng, pick(rng, 1, 4), 1, 4);
        auto a = random_normal<double>(d, rng);
        auto b = random_normal<double>(d, rng);
        return check([&](Tape<double>& t) { return readout(t, ag::add(t, t.param(a), t.param(b)), seed); },
                     {&a, &b}, seed);
    });
    op("mul", [](std::uint64_t seed) {
        Rng rng(seed);
        const Shape d = random_dims(rng, pick(rng, 1, 4), 1, 4);
        auto a = random_normal<double>(d, rng);
        auto b = random_normal<double>(d, rng);
        return check([&](Tape<double>& t) { return readout(t, ag::mul(t, t.param(a), t.param(b)), seed); },
                     {&a, &b}, seed);
    });
    op("scale", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = random_normal<double>(random_dims(rng, pick(rng, 1, 4), 1, 4), rng);
        auto s = random_normal<double>({1}, rng);
        return check([&](Tape<double>& t) { return readout(t, ag::scale(t, t.param(x), t.param(s)), seed); },
                     {&x, &s}, seed);
    });
    op("affine_const", [](std::uint64_t seed) {
        Rng rng(seed);
        const double a = rng.normal(), b = rng.normal();
        return unary(seed, random_dims(rng, pick(rng, 1, 4), 1, 4), false,
                     [a, b](Tape<double>& t, Var x) { return ag::affine_const(t, x, a, b); });
    });
    op("region_weight", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t B = pick(rng, 1, 2), C = pick(rng, 1, 3), G = pick(rng, 1, 4), P = pick(rng, 1, 4);
        auto z = random_normal<double>({B, C, G}, rng);
        auto x = random_normal<double>({B, C, G, P}, rng);
        return check(
            [&](Tape<double>& t) { return readout(t, region_weight(t, t.param(z), t.param(x)), seed); }, {&z, &x},
            seed);
    });
    op("cross_entropy", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t B = pick(rng, 1, 2), K = pick(rng, 2, 6), H = pick(rng, 1, 4), W = pick(rng, 1, 4);
        auto x = random_normal<double>({B, K, H, W}, rng, 2.0);
        LabelMap labels({B, H, W});
        for (auto& l : labels.data()) l = static_cast<std::uint8_t>(rng.below(K));
        return check([&](Tape<double>& t) { return ag::cross_entropy(t, t.param(x), labels); }, {&x}, seed);
    });

    // With two classes the context is affine in a single probability map and
    // the BN after delta cancels its weights up to eps, so N = 3 here.
    mod("caa", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t C = 8, N = 3, H = 4, W = 4;
        CaaParams<double> caa(CaaConfig::for_channels(C, N, 2), rng);
        CcaParams<double> cca(N, 2, rng);
        auto x = random_normal<double>({1, C, H, W}, rng);
        Targets targets{&x};
        collect_params([&](auto&& f) { caa.visit("caa", f); }, targets);
        return check(
            [&](Tape<double>& t) { return readout(t, caa_forward(t, t.param(x), caa, cca, false, true).y, seed); },
            targets, seed);
    });
    mod("cca", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t C = 8, N = 3, H = 4, W = 4;
        const std::size_t alpha = pick(rng, 1, 4);
        CaaParams<double> caa(CaaConfig::for_channels(C, N, alpha), rng);
        CcaParams<double> cca(N, alpha, rng);
        cca.gamma[0] = rng.uniform(0.5, 2.0);
        auto x = random_normal<double>({1, C, H, W}, rng);
        Targets targets{&x};
        collect_params([&](auto&& f) { caa.visit("caa", f); }, targets);
        collect_params([&](auto&& f) { cca.visit("cca", f); }, targets);
        return check(
            [&](Tape<double>& t) { return readout(t, caa_forward(t, t.param(x), caa, cca, true, true).y, seed); },
            targets, seed);
    });
    mod("rsa", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t C = 4 * pick(rng, 1, 2);
        const PartitionSpec spec{pick(rng, 2, 3), pick(rng, 2, 3), pick(rng, 2, 3), pick(rng, 2, 3)};
        RsaParams<double> rsa(C, rng);
        rsa.stage1.w[0] = rng.uniform(0.5, 1.5);
        rsa.stage2.w[0] = rng.uniform(0.5, 1.5);
        auto x = random_normal<double>({1, C, spec.height(), spec.width()}, rng);
        Targets targets{&x};
        collect_params([&](auto&& f) { rsa.visit("rsa", f); }, targets);
        return check([&](Tape<double>& t) { return readout(t, rsa_forward(t, t.param(x), spec, rsa, true), seed); },
                     targets, seed);
    });
    mod("hmanet", [](std::uint64_t seed) {
        HmaNetConfig cfg;
        cfg.widths = {16, 16, 32, 32};
        cfg.classes = 3;
        cfg.alpha = 2;
        cfg.grid_h = cfg.grid_w = 2;
        HmaNet<double> net(cfg, seed);
        net.cca.gamma[0] = 0.7;
        net.rsa.stage1.w[0] = 0.9;
        net.rsa.stage2.w[0] = 1.1;
        Rng rng(Rng::mix(seed, 3));
        auto img = random_uniform<double>({1, 3, 16, 16}, rng, 0.0, 1.0);
        LabelMap labels({1, 16, 16});
        for (auto& l : labels.data()) l = static_cast<std::uint8_t>(rng.below(cfg.classes));
        Targets targets{&img};
        collect_params([&](auto&& f) { net.visit(f); }, targets);
        return check(
            [&](Tape<double>& t) {
                auto out = hmanet_forward(t, t.param(img), net, true);
                return hmanet_losses(t, out, labels, LossWeights{}, cfg.output_stride()).total;
            },
            targets, seed, 3);
    });
    return cs;
}

struct GradCheckRow {
    std::string name;
    bool module = false;
    std::size_t seeds = 0;
    std::size_t coordinates = 0;
    double max_rel_error = 0;
    std::uint64_t worst_seed = 0;
    std::size_t kink_skips = 0;
    double worst_analytic = 0, worst_numeric = 0;
    double stencil5_rel_error = 0;  // at the worst coordinate, see GradCheckResult
    bool pass = false;
};

/// Runs every case (or the one named `only`) for seeds first..first+count-1.
inline std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t first_seed, std::size_t seed_count,
                                                     double tolerance = 1e-4, const std::string& only = "") {
    std::vector<GradCheckRow> rows;
    for (const auto& c : gradcheck_cases()) {
        if (!only.empty() && c.name != only) continue;
        GradCheckRow row;
        row.name = c.name;
        row.module = c.module;
        row.seeds = seed_count;
        row.worst_seed = first_seed;
        for (std::size_t i = 0; i < seed_count; ++i) {
            const std::uint64_t seed = Rng::mix(first_seed, i);
            const auto r = c.run(seed);
            row.coordinates += r.coordinates;
            row.kink_skips += r.kink_skips;
            if (i == 0 || r.max_rel_error > row.max_rel_error) {
                row.max_rel_error = r.max_rel_error;
                row.worst_seed = seed;
                row.worst_analytic = r.worst_analytic;
                row.worst_numeric = r.worst_numeric;
                row.stencil5_rel_error = r.worst_stencil5_rel_error;
            }
        }
        row.pass = row.max_rel_error < tolerance;
        rows.push_back(row);
    }
    if (!only.empty() && rows.empty()) throw UsageError("no gradient check named '" + only + "'");
    return rows;
}

}  // namespace hma
