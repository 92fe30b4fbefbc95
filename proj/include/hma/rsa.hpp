#pragma once

// Region shuffle attention.
//
// Stage 1 pools each of the G regions to one token, runs self-attention
// over the G tokens and scales every pixel of a region by its attended
// token. The result is regrouped so that group p holds the pixel at
// intra-region offset p of every region, and stage 2 repeats the block
// over those P groups. Inverse permutations restore [B,C,H,W].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hma/kernels.hpp"
#include "hma/layers.hpp"
#include "hma/tape.hpp"

namespace hma {

template <class T>
struct AttentionStageParams {
    ConvBnRelu<T> theta;  // C -> d
    ConvBnRelu<T> phi;    // C -> d
    Conv<T> g;            // C -> C, with bias
    Tensor<T> w;          // [1], starts at 0

    AttentionStageParams() = default;
    AttentionStageParams(std::size_t channels, std::size_t key_width, Rng& rng)
        : theta(channels, key_width, 1, rng),
          phi(channels, key_width, 1, rng),
          g(channels, channels, 1, rng, true),
          w({1}, T{0}) {}

    std::size_t key_width() const { return theta.conv.out_channels(); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        theta.visit(prefix + ".theta", f);
        phi.visit(prefix + ".phi", f);
        g.visit(prefix + ".g", f);
        f(prefix + ".w", w, Slot::param);
    }
};

inline std::size_t default_key_width(std::size_t channels) { return std::max<std::size_t>(1, channels / 4); }

/// Independent parameters for the two stages.
template <class T>
struct RsaParams {
    AttentionStageParams<T> stage1, stage2;

    RsaParams() = default;
    RsaParams(std::size_t channels, Rng& rng, std::size_t key_width = 0)
        : stage1(channels, key_width ? key_width : default_key_width(channels), rng),
          stage2(channels, key_width ? key_width : default_key_width(channels), rng) {}

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        stage1.visit(prefix + ".stage1", f);
        stage2.visit(prefix + ".stage2", f);
    }
};

/// [B,C,H,W] -> [B,C,G,P]; region g is row-major over the grid and offset
/// p row-major inside the region.
template <class T>
Var partition_regions(Tape<T>& t, Var x, const PartitionSpec& spec) {
    const Shape d = t.value(x).dims();
    if (d.size() != 4) throw ShapeError("partition_regions: expects [B,C,H,W]");
    spec.require_fits(d[2], d[3]);
    return ag::gather_planes(t, x, d[2] * d[3], kernels::partition_index(spec),
                             {d[0], d[1], spec.groups(), spec.positions()});
}

/// Inverse of partition_regions.
template <class T>
Var unpartition_regions(Tape<T>& t, Var xg, const PartitionSpec& spec) {
    const Shape d = t.value(xg).dims();
    if (d.size() != 4 || d[2] != spec.groups() || d[3] != spec.positions())
        throw ShapeError("unpartition_regions: " + shape_str(d) + " does not match the partition");
    const auto fwd = kernels::partition_index(spec);
    std::vector<std::size_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
    return ag::gather_planes(t, xg, fwd.size(), std::move(inv), {d[0], d[1], spec.height(), spec.width()});
}

/// [B,C,G,P] -> [B,C,G], mean over each region's positions.
template <class T>
Var merge_regions(Tape<T>& t, Var xg) {
    if (t.value(xg).rank() != 4) throw ShapeError("merge_regions: expects [B,C,G,P]");
    return ag::mean_last_axis(t, xg);
}

struct StageOutput {
    Var attention;  // [B,G,G], rows sum to one
    Var tokens;     // [B,C,G]
};

/// Non-local attention over G tokens:
///   am = softmax(theta(xm)^T phi(xm) / sqrt(d)),  zm = w * g(xm) am^T + xm.
template <class T>
StageOutput sparse_self_attention(Tape<T>& t, Var xm, AttentionStageParams<T>& p, bool training) {
    const Shape d = t.value(xm).dims();
    if (d.size() != 3) throw ShapeError("sparse_self_attention: expects [B,C,G]");
    Var th = apply_to_tokens(t, p.theta, xm, training);
    Var ph = apply_to_tokens(t, p.phi, xm, training);
    Var scores = ag::bmm(t, th, ph, true, false);
    const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(p.key_width()));
    Var am = ag::softmax(t, ag::affine_const(t, scores, inv_sqrt_d, T{0}), 2);
    Var gx = apply_to_tokens(t, p.g, xm);
    Var agg = ag::bmm(t, gx, am, false, true);
    Var zm = ag::add(t, ag::scale(t, agg, t.param(p.w)), xm);
    return {am, zm};
}

/// out[b,c,g,p] = zm[b,c,g] * xg[b,c,g,p].
template <class T>
Var region_weight(Tape<T>& t, Var zm, Var xg) {
    const Shape zd = t.value(zm).dims();
    const Shape xd = t.value(xg).dims();
    if (zd.size() != 3 || xd.size() != 4 || zd[0] != xd[0] || zd[1] != xd[1] || zd[2] != xd[2])
        throw ShapeError("region_weight: tokens " + shape_str(zd) + " vs regions " + shape_str(xd));
    return ag::mul_broadcast(t, xg, zm, xd[0] * xd[1] * xd[2], xd[3], 1);
}

/// [B,C,G,P] -> [B,C,P,G]: new group p gathers offset p of every region.
/// Applying it twice restores the original layout.
template <class T>
Var shuffle_regroup(Tape<T>& t, Var xg) {
    if (t.value(xg).rank() != 4) throw ShapeError("shuffle_regroup: expects [B,C,G,P]");
    return ag::swap_last_two(t, xg);
}

/// One region-wise attention block over [B,C,groups,positions].
template <class T>
Var region_attention_block(Tape<T>& t, Var grouped, AttentionStageParams<T>& p, bool training) {
    auto st = sparse_self_attention(t, merge_regions(t, grouped), p, training);
    return region_weight(t, st.tokens, grouped);
}

template <class T>
Var rsa_forward(Tape<T>& t, Var x, const PartitionSpec& spec, RsaParams<T>& params, bool training) {
    Var xg = partition_regions(t, x, spec);
    Var x1 = region_attention_block(t, xg, params.stage1, training);
    Var x2 = region_attention_block(t, shuffle_regroup(t, x1), params.stage2, training);
    return unpartition_regions(t, shuffle_regroup(t, x2), spec);
}

/// Dense non-local attention over all H*W pixels with the same block
/// structure as one RSA stage; the reference the RSA cost is compared with.
template <class T>
Var dense_self_attention(Tape<T>& t, Var x, AttentionStageParams<T>& p, bool training) {
    const auto d = t.value(x).dims();
    if (d.size() != 4) throw ShapeError("dense_self_attention: expects [B,C,H,W]");
    Var tokens = ag::reshape(t, x, {d[0], d[1], d[2] * d[3]});
    auto st = sparse_self_attention(t, tokens, p, training);
    return ag::reshape(t, st.tokens, d);
}

struct AttentionFlops {
    double rsa_flops = 0;  // 2 (1/(Gh^2 Gw^2) + 1/(Ph^2 Pw^2)) (HW)^2 C
    double sa_flops = 0;   // (HW)^2 C
    double ratio = 0;      // rsa / sa
    // The same quantity counted stage by stage as 2 * tokens^2 * C
    // (aggregation product, one multiply-accumulate = 2 FLOPs).
    double stage1_term = 0;
    double stage2_term = 0;
};

inline AttentionFlops rsa_attention_flops(const PartitionSpec& spec, std::size_t h, std::size_t w, std::size_t c) {
    spec.require_fits(h, w);
    const double hw = static_cast<double>(h) * static_cast<double>(w);
    const double g = static_cast<double>(spec.groups());
    const double p = static_cast<double>(spec.positions());
    AttentionFlops f;
    f.sa_flops = hw * hw * static_cast<double>(c);
    f.rsa_flops = 2.0 * (1.0 / (g * g) + 1.0 / (p * p)) * f.sa_flops;
    f.ratio = f.rsa_flops / f.sa_flops;
    f.stage1_term = 2.0 * g * g * static_cast<double>(c);
    f.stage2_term = 2.0 * p * p * static_cast<double>(c);
    return f;
}

}  // namespace hma
