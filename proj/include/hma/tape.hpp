#pragma once

// Reverse-mode autodiff over an explicit op tape. Every op computes its
// value with a pure kernel and, if any input needs a gradient, records a
// closure holding exactly what its vector-Jacobian product needs.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hma/batchnorm.hpp"
#include "hma/error.hpp"
#include "hma/kernels.hpp"
#include "hma/tensor.hpp"

namespace hma {

struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;
    bool valid() const { return id != npos; }
};

template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor<T>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// When disabled, ops only compute values (inference).
    void set_recording(bool on) { recording_ = on; }
    bool recording() const { return recording_; }

    Var constant(Tensor<T> v) { return push("constant", std::move(v), false, {}); }
    Var leaf(Tensor<T> v) { return push("leaf", std::move(v), recording_, {}); }

    /// Leaf bound to externally owned storage; the same tensor always maps
    /// to the same leaf so shared weights accumulate one gradient.
    Var param(const Tensor<T>& p) {
        auto it = params_.find(&p);
        if (it != params_.end()) return it->second;
        Var v = push("param", p, recording_, {});
        params_.emplace(&p, v);
        return v;
    }

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }
    const std::string& op_name(Var v) const { return nodes_.at(v.id).name; }

    /// Running hash of every relu on/off pattern evaluated on this tape.
    /// Two evaluations with equal signatures took the same linear piece.
    std::uint64_t kink_signature() const { return kink_signature_; }
    void mix_kink_signature(std::uint64_t h) { kink_signature_ = (kink_signature_ ^ h) * 0x100000001b3ULL; }

    Var record(std::string name, Tensor<T> out, std::initializer_list<Var> inputs, Backward bw) {
        return record(std::move(name), std::move(out), std::vector<Var>(inputs), std::move(bw));
    }

    Var record(std::string name, Tensor<T> out, const std::vector<Var>& inputs, Backward bw) {
        bool rg = false;
        if (recording_)
            for (Var in : inputs) rg = rg || nodes_.at(in.id).requires_grad;
        return push(std::move(name), std::move(out), rg, rg ? std::move(bw) : Backward{});
    }

    void accumulate(Var v, const Tensor<T>& g) {
        auto& n = nodes_.at(v.id);
        if (!n.requires_grad) return;
        if (g.dims() != n.value.dims())
            throw ShapeError("gradient for " + n.name + " has dims " + shape_str(g.dims()) + ", value has " +
                             shape_str(n.value.dims()));
        if (n.grad.empty()) {
            n.grad = g;
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
        }
    }

    /// Seeds d(root)/d(root) = 1 and walks the tape in reverse execution
    /// order. The root must hold a single element.
    void backward(Var root) {
        if (value(root).size() != 1) throw ShapeError("backward: root must be a scalar");
        for (auto& n : nodes_) n.grad = Tensor<T>();
        visited_.clear();
        accumulate(root, Tensor<T>(value(root).dims(), T{1}));
        for (std::size_t i = root.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            visited_.push_back(i);
            const Tensor<T> g = n.grad;
            n.backward(*this, g);
        }
    }

    /// Node ids whose backward rule ran during the last backward().
    const std::vector<std::size_t>& backward_order() const { return visited_; }

    /// Gradient of `v`; zeros if nothing flowed into it.
    Tensor<T> grad(Var v) const {
        const auto& n = nodes_.at(v.id);
        return n.grad.empty() ? Tensor<T>(n.value.dims()) : n.grad;
    }

    Tensor<T> grad_of(const Tensor<T>& p) const {
        auto it = params_.find(&p);
        if (it == params_.end()) return Tensor<T>(p.dims());
        return grad(it->second);
    }

private:
    struct Node {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(std::string name, Tensor<T> v, bool rg, Backward bw) {
        nodes_.push_back(Node{std::move(name), std::move(v), Tensor<T>(), rg, std::move(bw)});
        return Var{nodes_.size() - 1};
    }

    std::deque<Node> nodes_;  // stable addresses: value() references survive later records
    std::map<const Tensor<T>*, Var> params_;
    std::vector<std::size_t> visited_;
    bool recording_ = true;
    std::uint64_t kink_signature_ = 0xcbf29ce484222325ULL;
};

/// Differentiable ops. Each mirrors a kernel in kernels.hpp.
namespace ag {

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
    auto out = kernels::matmul(t.value(a), t.value(b));
    return t.record("matmul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        const auto& av = t.value(a);
        const auto& bv = t.value(b);
        const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        if (t.requires_grad(a)) {
            Tensor<T> da(av.dims());
            kernels::gemm(false, true, m, k, n, g.data().data(), bv.data().data(), da.data().data());
            t.accumulate(a, da);
        }
        if (t.requires_grad(b)) {
            Tensor<T> db(bv.dims());
            kernels::gemm(true, false, k, n, m, av.data().data(), g.data().data(), db.data().data());
            t.accumulate(b, db);
        }
    });
}

/// Batched product [B,m,k] x [B,k,n] with optional transposes of either side.
template <class T>
Var bmm(Tape<T>& t, Var a, Var b, bool trans_a = false, bool trans_b = false) {
    auto out = kernels::bmm(t.value(a), t.value(b), trans_a, trans_b);
    return t.record("bmm", std::move(out), {a, b}, [a, b, trans_a, trans_b](Tape<T>& t, const Tensor<T>& g) {
        const auto& av = t.value(a);
        const auto& bv = t.value(b);
        // C = op(A) op(B). dop(A) = G op(B)^T, dop(B) = op(A)^T G.
        if (t.requires_grad(a)) {
            Tensor<T> da = trans_a ? kernels::bmm(bv, g, trans_b, true) : kernels::bmm(g, bv, false, !trans_b);
            t.accumulate(a, da);
        }
        if (t.requires_grad(b)) {
            Tensor<T> db = trans_b ? kernels::bmm(g, av, true, trans_a) : kernels::bmm(av, g, !trans_a, false);
            t.accumulate(b, db);
        }
    });
}

template <class T>
Var reshape(Tape<T>& t, Var x, Shape dims) {
    auto out = t.value(x).reshaped(std::move(dims));
    return t.record("reshape", std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(x, g.reshaped(t.value(x).dims()));
    });
}

template <class T>
Var swap_last_two(Tape<T>& t, Var x) {
    return t.record("swap_last_two", kernels::swap_last_two(t.value(x)), {x},
                    [x](Tape<T>& t, const Tensor<T>& g) { t.accumulate(x, kernels::swap_last_two(g)); });
}

template <class T>
Var softmax(Tape<T>& t, Var x, std::size_t axis) {
    auto out = kernels::softmax_axis(t.value(x), axis);
    const std::size_t id = t.size();
    return t.record("softmax", std::move(out), {x}, [x, axis, id](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(x, kernels::softmax_backward(t.value(Var{id}), g, axis));
    });
}

template <class T>
Var activation(Tape<T>& t, Var x, kernels::Activation kind) {
    auto out = kernels::activation(t.value(x), kind);
    if (kind == kernels::Activation::relu) {
        std::uint64_t h = 0;
        for (auto v : t.value(x).data()) h = (h << 1 | (h >> 63)) ^ (v > T{0} ? 0x9e3779b97f4a7c15ULL : 1);
        t.mix_kink_signature(h);
    }
    const std::size_t id = t.size();
    return t.record(kind == kernels::Activation::relu ? "relu" : "sigmoid", std::move(out), {x},
                    [x, kind, id](Tape<T>& t, const Tensor<T>& g) {
                        const auto& xv = t.value(x);
                        const auto& yv = t.value(Var{id});
                        Tensor<T> dx(g.dims());
                        for (std::size_t i = 0; i < g.size(); ++i)
                            dx[i] = kind == kernels::Activation::relu ? (xv[i] > T{0} ? g[i] : T{0})
                                                                      : g[i] * yv[i] * (T{1} - yv[i]);
                        t.accumulate(x, dx);
                    });
}

template <class T>
Var relu(Tape<T>& t, Var x) {
    return activation(t, x, kernels::Activation::relu);
}

template <class T>
Var sigmoid(Tape<T>& t, Var x) {
    return activation(t, x, kernels::Activation::sigmoid);
}

/// Cross-correlation; pass an invalid Var for no bias.
template <class T>
Var conv2d(Tape<T>& t, Var x, Var w, Var bias, kernels::ConvGeometry geom) {
    const Tensor<T>* bp = bias.valid() ? &t.value(bias) : nullptr;
    auto out = kernels::conv2d(t.value(x), t.value(w), bp, geom);
    auto bw = [x, w, bias, geom](Tape<T>& t, const Tensor<T>& g) {
        auto gr = kernels::conv2d_backward(t.value(x), t.value(w), bias.valid(), geom, g, t.requires_grad(x));
        if (t.requires_grad(x)) t.accumulate(x, gr.dx);
        t.accumulate(w, gr.dweight);
        if (bias.valid()) t.accumulate(bias, gr.dbias);
    };
    if (bias.valid()) return t.record("conv2d", std::move(out), {x, w, bias}, bw);
    return t.record("conv2d", std::move(out), {x, w}, bw);
}

template <class T>
Var batchnorm(Tape<T>& t, Var x, BatchNormState<T>& st, bool training) {
    Var gamma = t.param(st.gamma);
    Var beta = t.param(st.beta);
    kernels::BatchNormSaved<T> saved;
    auto out = kernels::batchnorm(t.value(x), st, training, &saved);
    return t.record("batchnorm", std::move(out), {x, gamma, beta},
                    [x, gamma, beta, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
                        auto gr = kernels::batchnorm_backward(saved, t.value(gamma), g);
                        t.accumulate(x, gr.dx);
                        t.accumulate(gamma, gr.dgamma);
                        t.accumulate(beta, gr.dbeta);
                    });
}

template <class T>
Var global_avg_pool(Tape<T>& t, Var x) {
    return t.record("global_avg_pool", kernels::global_avg_pool(t.value(x)), {x},
                    [x](Tape<T>& t, const Tensor<T>& g) {
                        const auto& xv = t.value(x);
                        const std::size_t hw = xv.dim(2) * xv.dim(3);
                        Tensor<T> dx(xv.dims());
                        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[i / hw] / static_cast<T>(hw);
                        t.accumulate(x, dx);
                    });
}

template <class T>
Var adaptive_region_pool(Tape<T>& t, Var x, const PartitionSpec& spec) {
    return t.record("adaptive_region_pool", kernels::adaptive_region_pool(t.value(x), spec), {x},
                    [x, spec](Tape<T>& t, const Tensor<T>& g) {
                        const auto& xv = t.value(x);
                        const std::size_t H = xv.dim(2), W = xv.dim(3);
                        const T inv = T{1} / static_cast<T>(spec.positions());
                        Tensor<T> dx(xv.dims());
                        for (std::size_t bc = 0; bc < xv.dim(0) * xv.dim(1); ++bc)
                            for (std::size_t y = 0; y < H; ++y)
                                for (std::size_t xx = 0; xx < W; ++xx)
                                    dx[(bc * H + y) * W + xx] =
                                        g[bc * spec.groups() + (y / spec.ph) * spec.gw + xx / spec.pw] * inv;
                        t.accumulate(x, dx);
                    });
}

template <class T>
Var mean_last_axis(Tape<T>& t, Var x) {
    return t.record("mean_last_axis", kernels::mean_last_axis(t.value(x)), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
        const auto& xv = t.value(x);
        const std::size_t n = xv.dims().back();
        Tensor<T> dx(xv.dims());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[i / n] / static_cast<T>(n);
        t.accumulate(x, dx);
    });
}

template <class T>
Var concat_channels(Tape<T>& t, const std::vector<Var>& xs) {
    std::vector<const Tensor<T>*> vals;
    for (Var v : xs) vals.push_back(&t.value(v));
    auto out = kernels::concat_channels(vals);
    auto bw = [xs](Tape<T>& t, const Tensor<T>& g) {
        const std::size_t B = g.dim(0), ctot = g.dim(1), hw = g.dim(2) * g.dim(3);
        std::size_t c0 = 0;
        for (Var v : xs) {
            const auto& xv = t.value(v);
            const std::size_t c = xv.dim(1);
            if (t.requires_grad(v)) {
                Tensor<T> dx(xv.dims());
                for (std::size_t b = 0; b < B; ++b)
                    std::copy_n(g.data().data() + (b * ctot + c0) * hw, c * hw, dx.data().data() + b * c * hw);
                t.accumulate(v, dx);
            }
            c0 += c;
        }
    };
    return t.record("concat_channels", std::move(out), xs, bw);
}

template <class T>
Var upsample_nearest(Tape<T>& t, Var x, std::size_t factor) {
    return t.record("upsample_nearest", kernels::upsample_nearest(t.value(x), factor), {x},
                    [x, factor](Tape<T>& t, const Tensor<T>& g) {
                        const auto& xv = t.value(x);
                        const std::size_t H = xv.dim(2), W = xv.dim(3), OW = W * factor;
                        Tensor<T> dx(xv.dims());
                        for (std::size_t bc = 0; bc < xv.dim(0) * xv.dim(1); ++bc)
                            for (std::size_t oy = 0; oy < H * factor; ++oy)
                                for (std::size_t ox = 0; ox < OW; ++ox)
                                    dx[(bc * H + oy / factor) * W + ox / factor] += g[(bc * H * factor + oy) * OW + ox];
                        t.accumulate(x, dx);
                    });
}

/// Per-plane permutation/gather; see kernels::gather_planes.
template <class T>
Var gather_planes(Tape<T>& t, Var x, std::size_t plane, std::vector<std::size_t> idx, Shape out_dims) {
    auto out = kernels::gather_planes(t.value(x), plane, idx, std::move(out_dims));
    return t.record("gather", std::move(out), {x}, [x, plane, idx = std::move(idx)](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(x, kernels::scatter_planes(g, plane, idx, t.value(x).dims()));
    });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    require_same_dims(av, bv, "add");
    Tensor<T> out(av.dims());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return t.record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

/// Elementwise product of equal-shape tensors.
template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    require_same_dims(av, bv, "mul");
    Tensor<T> out(av.dims());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return t.record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        const auto& av = t.value(a);
        const auto& bv = t.value(b);
        Tensor<T> da(g.dims()), db(g.dims());
        for (std::size_t i = 0; i < g.size(); ++i) {
            da[i] = g[i] * bv[i];
            db[i] = g[i] * av[i];
        }
        t.accumulate(a, da);
        t.accumulate(b, db);
    });
}

/// x * s for a single-element tensor s.
template <class T>
Var scale(Tape<T>& t, Var x, Var s) {
    if (t.value(s).size() != 1) throw ShapeError("scale: factor must hold one element");
    const T sv = t.value(s)[0];
    const auto& xv = t.value(x);
    Tensor<T> out(xv.dims());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sv;
    return t.record("scale", std::move(out), {x, s}, [x, s](Tape<T>& t, const Tensor<T>& g) {
        const auto& xv = t.value(x);
        const T sv = t.value(s)[0];
        Tensor<T> dx(g.dims());
        T ds = 0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            dx[i] = g[i] * sv;
            ds += g[i] * xv[i];
        }
        t.accumulate(x, dx);
        t.accumulate(s, Tensor<T>::scalar(ds).reshaped(t.value(s).dims()));
    });
}

/// a * x + b with constant a, b.
template <class T>
Var affine_const(Tape<T>& t, Var x, T a, T b) {
    const auto& xv = t.value(x);
    Tensor<T> out(xv.dims());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * xv[i] + b;
    return t.record("affine_const", std::move(out), {x}, [x, a](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T> dx(g.dims());
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] = a * g[i];
        t.accumulate(x, dx);
    });
}

/// x viewed as [outer, mid, inner] times y viewed as [outer, inner],
/// broadcast over mid.
template <class T>
Var mul_broadcast(Tape<T>& t, Var x, Var y, std::size_t outer, std::size_t mid, std::size_t inner) {
    const auto& xv = t.value(x);
    const auto& yv = t.value(y);
    if (xv.size() != outer * mid * inner || yv.size() != outer * inner)
        throw ShapeError("mul_broadcast: " + shape_str(xv.dims()) + " cannot broadcast with " + shape_str(yv.dims()));
    Tensor<T> out(xv.dims());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m)
            for (std::size_t i = 0; i < inner; ++i)
                out[(o * mid + m) * inner + i] = xv[(o * mid + m) * inner + i] * yv[o * inner + i];
    return t.record("mul_broadcast", std::move(out), {x, y}, [x, y, outer, mid, inner](Tape<T>& t, const Tensor<T>& g) {
        const auto& xv = t.value(x);
        const auto& yv = t.value(y);
        Tensor<T> dx(xv.dims()), dy(yv.dims());
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < mid; ++m)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t k = (o * mid + m) * inner + i;
                    dx[k] = g[k] * yv[o * inner + i];
                    dy[o * inner + i] += g[k] * xv[k];
                }
        t.accumulate(x, dx);
        t.accumulate(y, dy);
    });
}

/// Sum of x weighted elementwise by a constant tensor; a scalar [1].
template <class T>
Var weighted_sum(Tape<T>& t, Var x, Tensor<T> weights) {
    const auto& xv = t.value(x);
    if (weights.size() != xv.size()) throw ShapeError("weighted_sum: weight count mismatch");
    CompensatedSum<T> acc;
    for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * weights[i];
    const T s = acc.value();
    return t.record("weighted_sum", Tensor<T>::scalar(s), {x}, [x, w = std::move(weights)](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T> dx(t.value(x).dims());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[0] * w[i];
        t.accumulate(x, dx);
    });
}

/// Mean over all pixels of -log softmax(logits)[true class]. logits are
/// [B,K,H,W], labels [B,H,W] with ids in [0,K).
template <class T>
Var cross_entropy(Tape<T>& t, Var logits, const LabelMap& labels) {
    const auto& lv = t.value(logits);
    require_rank(lv, 4, "cross_entropy");
    const std::size_t B = lv.dim(0), K = lv.dim(1), HW = lv.dim(2) * lv.dim(3);
    if (labels.rank() != 3 || labels.dim(0) != B || labels.dim(1) != lv.dim(2) || labels.dim(2) != lv.dim(3))
        throw ShapeError("cross_entropy: labels " + shape_str(labels.dims()) + " do not match logits " +
                         shape_str(lv.dims()));
    for (auto l : labels.data())
        if (l >= K) throw LabelError("label " + std::to_string(l) + " out of range for " + std::to_string(K) + " classes");
    auto prob = kernels::softmax_axis(lv, 1);
    // -log softmax at the label, as log-sum-exp minus the label logit.
    CompensatedSum<T> acc;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
            const T* px = &lv[b * K * HW + i];
            T m = px[0];
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, px[k * HW]);
            T z = 0;
            for (std::size_t k = 0; k < K; ++k) z += std::exp(px[k * HW] - m);
            acc += (std::log(z) + m) - px[labels[b * HW + i] * HW];
        }
    const T loss = acc.value() / static_cast<T>(B * HW);
    return t.record("cross_entropy", Tensor<T>::scalar(loss), {logits},
                    [logits, labels, prob = std::move(prob), B, K, HW](Tape<T>& t, const Tensor<T>& g) {
                        Tensor<T> d = prob;
                        const T inv = g[0] / static_cast<T>(B * HW);
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t i = 0; i < HW; ++i) d[(b * K + labels[b * HW + i]) * HW + i] -= T{1};
                        for (auto& v : d.data()) v *= inv;
                        t.accumulate(logits, d);
                    });
}

}  // namespace ag
}  // namespace hma
