#pragma once

// Class augmented attention with the class channel gate.
//
//   xr = reduce(x)                      [B,C',H,W]
//   q  = softmax_class(class_head(x))   [B,N,H,W]
//   S  = xr q^T over pixels,  A = row-softmax(S)           [B,C',N]
//   (gate)  w = sigmoid(W2 relu(W1 GAP(q)))                 [B,N]
//           A <- row-softmax((gamma w_k + 1) A_{.,k})
//   context = A q                                            [B,C',H,W]
//   y = rho(delta(context) + x)

#include <algorithm>
#include <cstddef>
#include <string>

#include "hma/layers.hpp"
#include "hma/tape.hpp"

namespace hma {

struct CaaConfig {
    std::size_t channels = 64;  // C
    std::size_t reduced = 16;   // C', defaults to C/4
    std::size_t classes = 6;    // N
    std::size_t alpha = 150;    // ascending ratio of the gate

    static CaaConfig for_channels(std::size_t c, std::size_t classes, std::size_t alpha = 150) {
        return {c, std::max<std::size_t>(1, c / 4), classes, alpha};
    }
};

template <class T>
struct CaaParams {
    ConvBnRelu<T> reduce;   // C -> C'
    Conv<T> class_head;     // C -> N, with bias
    ConvBnRelu<T> delta;    // C' -> C
    ConvBnRelu<T> rho;      // C -> C

    CaaParams() = default;
    CaaParams(const CaaConfig& cfg, Rng& rng)
        : reduce(cfg.channels, cfg.reduced, 1, rng),
          class_head(cfg.channels, cfg.classes, 1, rng, true),
          delta(cfg.reduced, cfg.channels, 1, rng),
          rho(cfg.channels, cfg.channels, 1, rng) {
        if (cfg.reduced >= cfg.channels) throw UsageError("CAA reduced width must be below the input width");
        if (cfg.classes < 2) throw UsageError("CAA needs at least two classes");
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        reduce.visit(prefix + ".reduce", f);
        class_head.visit(prefix + ".class_head", f);
        delta.visit(prefix + ".delta", f);
        rho.visit(prefix + ".rho", f);
    }
};

template <class T>
struct CcaParams {
    Tensor<T> w1;     // [alpha N, N]
    Tensor<T> w2;     // [N, alpha N]
    Tensor<T> gamma;  // [1], starts at 0

    CcaParams() = default;
    CcaParams(std::size_t classes, std::size_t alpha, Rng& rng) : gamma({1}, T{0}) {
        if (alpha == 0) throw UsageError("CCA ascending ratio must be positive");
        if (classes == 0) throw UsageError("CCA needs at least one class");
        w1 = random_normal<T>({alpha * classes, classes}, rng, std::sqrt(2.0 / static_cast<double>(classes)));
        w2 = random_normal<T>({classes, alpha * classes}, rng, std::sqrt(1.0 / static_cast<double>(alpha * classes)));
    }

    std::size_t classes() const { return w2.dim(0); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w1", w1, Slot::param);
        f(prefix + ".w2", w2, Slot::param);
        f(prefix + ".gamma", gamma, Slot::param);
    }
};

/// Pre-softmax scores S and their row-softmax A, both [B,C',N].
struct ClassAffinity {
    Var scores;
    Var affinity;
};

/// Softmax over the class axis of class logits [B,N,H,W].
template <class T>
Var class_probabilities(Tape<T>& t, Var logits) {
    const Shape d = t.value(logits).dims();
    if (d.size() != 4 || d[1] < 2) throw ShapeError("class attention map must be [B,N,H,W] with N >= 2");
    return ag::softmax(t, logits, 1);
}

/// S[b,u,k] = sum_i xr[b,u,i] q[b,k,i]; A = softmax over k. `probs` is the
/// class-softmaxed attention map.
template <class T>
ClassAffinity class_affinity(Tape<T>& t, Var xr, Var probs) {
    const Shape xd = t.value(xr).dims();
    const Shape pd = t.value(probs).dims();
    if (xd.size() != 4 || pd.size() != 4 || xd[0] != pd[0] || xd[2] != pd[2] || xd[3] != pd[3])
        throw ShapeError("class_affinity: feature " + shape_str(xd) + " and class map " + shape_str(pd) +
                         " disagree");
    const std::size_t B = xd[0], hw = xd[2] * xd[3];
    Var xf = ag::reshape(t, xr, {B, xd[1], hw});
    Var qf = ag::reshape(t, probs, {B, pd[1], hw});
    Var s = ag::bmm(t, xf, qf, false, true);
    return {s, ag::softmax(t, s, 2)};
}

/// Gate w = sigmoid(W2 relu(W1 GAP(q))), one factor per class in (0,1).
template <class T>
Var cca_gate(Tape<T>& t, Var probs, const CcaParams<T>& cca) {
    const Shape pd = t.value(probs).dims();
    if (pd.size() != 4 || pd[1] != cca.classes())
        throw ShapeError("cca_gate: class map " + shape_str(pd) + " does not match " +
                         std::to_string(cca.classes()) + " classes");
    Var g = ag::global_avg_pool(t, probs);                                           // [B,N]
    Var h = ag::relu(t, ag::matmul(t, g, ag::swap_last_two(t, t.param(cca.w1))));   // [B,aN]
    return ag::sigmoid(t, ag::matmul(t, h, ag::swap_last_two(t, t.param(cca.w2))));  // [B,N]
}

/// A'[b,u,.] = softmax_k((gamma w[b,k] + 1) A[b,u,k]).
template <class T>
Var recalibrate_affinity(Tape<T>& t, Var affinity, Var gate, Var gamma) {
    const Shape ad = t.value(affinity).dims();
    const Shape wd = t.value(gate).dims();
    if (ad.size() != 3 || wd.size() != 2 || wd[0] != ad[0] || wd[1] != ad[2])
        throw ShapeError("recalibrate_affinity: affinity " + shape_str(ad) + " vs gate " + shape_str(wd));
    Var factor = ag::affine_const(t, ag::scale(t, gate, gamma), T{1}, T{1});
    Var scaled = ag::mul_broadcast(t, affinity, factor, ad[0], ad[1], ad[2]);
    return ag::softmax(t, scaled, 2);
}

/// context[b,u] = sum_k A[b,u,k] q[b,k], a [B,C',H,W] map.
template <class T>
Var caa_context(Tape<T>& t, Var affinity, Var probs) {
    const Shape pd = t.value(probs).dims();
    const Shape ad = t.value(affinity).dims();
    Var qf = ag::reshape(t, probs, {pd[0], pd[1], pd[2] * pd[3]});
    Var c = ag::bmm(t, affinity, qf);
    return ag::reshape(t, c, {pd[0], ad[1], pd[2], pd[3]});
}

/// y = rho(delta(context) + x).
template <class T>
Var caa_output(Tape<T>& t, Var context, Var x, CaaParams<T>& caa, bool training) {
    Var lifted = caa.delta(t, context, training);
    return caa.rho(t, ag::add(t, lifted, x), training);
}

struct CaaOutput {
    Var y;            // [B,C,H,W]
    Var logits;       // class attention map P, [B,N,H,W]
    Var probs;        // softmax_class(P)
    ClassAffinity affinity;
    Var used_affinity;  // A after the optional gate
};

template <class T>
CaaOutput caa_forward(Tape<T>& t, Var x, CaaParams<T>& caa, const CcaParams<T>& cca, bool use_cca, bool training) {
    const Shape xd = t.value(x).dims();
    if (xd.size() != 4 || xd[1] != caa.class_head.weight.dim(1))
        throw ShapeError("caa_forward: input " + shape_str(xd) + " does not match module width " +
                         std::to_string(caa.class_head.weight.dim(1)));
    CaaOutput out;
    Var xr = caa.reduce(t, x, training);
    out.logits = caa.class_head(t, x);
    out.probs = class_probabilities(t, out.logits);
    out.affinity = class_affinity(t, xr, out.probs);
    out.used_affinity = out.affinity.affinity;
    if (use_cca) {
        Var gate = cca_gate(t, out.probs, cca);
        out.used_affinity = recalibrate_affinity(t, out.affinity.affinity, gate, t.param(cca.gamma));
    }
    out.y = caa_output(t, caa_context(t, out.used_affinity, out.probs), x, caa, training);
    return out;
}

}  // namespace hma
