#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "hma/batchnorm.hpp"
#include "hma/rng.hpp"
#include "hma/tape.hpp"

namespace hma {

/// Visitor callbacks receive (qualified name, tensor). Parameters are
/// trained; buffers (BN running statistics) are only checkpointed.
enum class Slot { param, buffer };

/// Convolution with kernel 1x1 or 3x3 and an optional per-channel bias.
template <class T>
struct Conv {
    Tensor<T> weight;
    Tensor<T> bias;  // empty when the layer has no bias
    kernels::ConvGeometry geom;

    Conv() = default;
    Conv(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng, bool with_bias, std::size_t stride = 1,
         double gain = 1.0)
        : geom{stride, k / 2} {
        const double fan_in = static_cast<double>(cin * k * k);
        weight = random_normal<T>({cout, cin, k, k}, rng, std::sqrt(gain / fan_in));
        if (with_bias) bias = Tensor<T>({cout});
    }

    std::size_t out_channels() const { return weight.dim(0); }

    Var operator()(Tape<T>& t, Var x) const {
        Var b = bias.empty() ? Var{} : t.param(bias);
        return ag::conv2d(t, x, t.param(weight), b, geom);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight, Slot::param);
        if (!bias.empty()) f(prefix + ".bias", bias, Slot::param);
    }
};

/// conv -> BN -> ReLU, the transform used for every attention projection.
template <class T>
struct ConvBnRelu {
    Conv<T> conv;
    BatchNormState<T> bn;

    ConvBnRelu() = default;
    ConvBnRelu(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng, std::size_t stride = 1)
        : conv(cin, cout, k, rng, false, stride, 2.0), bn(cout) {}

    Var operator()(Tape<T>& t, Var x, bool training) {
        return ag::relu(t, ag::batchnorm(t, conv(t, x), bn, training));
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        conv.visit(prefix + ".conv", f);
        f(prefix + ".bn.gamma", bn.gamma, Slot::param);
        f(prefix + ".bn.beta", bn.beta, Slot::param);
        f(prefix + ".bn.running_mean", bn.running_mean, Slot::buffer);
        f(prefix + ".bn.running_var", bn.running_var, Slot::buffer);
    }
};

/// Applies a 1x1 layer to token tensors [B,C,G] by viewing them as [B,C,G,1].
template <class T, class Layer, class... Args>
Var apply_to_tokens(Tape<T>& t, Layer& layer, Var tokens, Args&&... args) {
    const Shape d = t.value(tokens).dims();
    Var y = layer(t, ag::reshape(t, tokens, {d[0], d[1], d[2], 1}), std::forward<Args>(args)...);
    const Shape yd = t.value(y).dims();
    return ag::reshape(t, y, {yd[0], yd[1], yd[2]});
}

}  // namespace hma
