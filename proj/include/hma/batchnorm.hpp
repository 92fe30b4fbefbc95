#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hma/error.hpp"
#include "hma/tensor.hpp"

namespace hma {

/// Per-channel affine normalisation state. `gamma`/`beta` are trainable;
/// the running statistics are buffers updated in training mode as
/// running = momentum * running + (1 - momentum) * batch.
template <class T>
struct BatchNormState {
    Tensor<T> gamma, beta, running_mean, running_var;
    double momentum = 0.9;
    double eps = 1e-5;

    BatchNormState() = default;
    explicit BatchNormState(std::size_t channels)
        : gamma({channels}, T{1}), beta({channels}, T{0}), running_mean({channels}, T{0}),
          running_var({channels}, T{1}) {}

    std::size_t channels() const { return gamma.size(); }
};

namespace kernels {

template <class T>
struct BatchNormSaved {
    Tensor<T> xhat;              // normalised input
    std::vector<T> inv_std;      // per channel
    bool training = true;
};

/// Channel axis is 1; every other axis is reduced over. Accepts rank 2..4.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormState<T>& st, bool training, BatchNormSaved<T>* saved = nullptr) {
    if (x.rank() < 2) throw ShapeError("batchnorm: rank must be >= 2");
    const std::size_t B = x.dim(0), C = x.dim(1), inner = x.size() / (B * C);
    if (C != st.channels())
        throw ShapeError("batchnorm: " + std::to_string(C) + " channels but state has " +
                         std::to_string(st.channels()));
    const std::size_t n = B * inner;
    Tensor<T> y(x.dims());
    Tensor<T> xhat(x.dims());
    std::vector<T> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        T mean, var;
        if (training) {
            CompensatedSum<T> s;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < inner; ++i) s += x[(b * C + c) * inner + i];
            mean = s.value() / static_cast<T>(n);
            CompensatedSum<T> ss;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < inner; ++i) {
                    const T d = x[(b * C + c) * inner + i] - mean;
                    ss += d * d;
                }
            var = ss.value() / static_cast<T>(n);
            const T m = static_cast<T>(st.momentum);
            st.running_mean[c] = m * st.running_mean[c] + (T{1} - m) * mean;
            st.running_var[c] = m * st.running_var[c] + (T{1} - m) * var;
        } else {
            mean = st.running_mean[c];
            var = st.running_var[c];
        }
        const T is = T{1} / std::sqrt(var + static_cast<T>(st.eps));
        inv_std[c] = is;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = (b * C + c) * inner + i;
                xhat[k] = (x[k] - mean) * is;
                y[k] = st.gamma[c] * xhat[k] + st.beta[c];
            }
    }
    if (saved) *saved = {std::move(xhat), std::move(inv_std), training};
    return y;
}

template <class T>
struct BatchNormGrads {
    Tensor<T> dx, dgamma, dbeta;
};

template <class T>
BatchNormGrads<T> batchnorm_backward(const BatchNormSaved<T>& s, const Tensor<T>& gamma, const Tensor<T>& dy) {
    const std::size_t B = dy.dim(0), C = dy.dim(1), inner = dy.size() / (B * C);
    const T n = static_cast<T>(B * inner);
    BatchNormGrads<T> g{Tensor<T>(dy.dims()), Tensor<T>({C}), Tensor<T>({C})};
    for (std::size_t c = 0; c < C; ++c) {
        T sdy = 0, sdyx = 0;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = (b * C + c) * inner + i;
                sdy += dy[k];
                sdyx += dy[k] * s.xhat[k];
            }
        g.dbeta[c] = sdy;
        g.dgamma[c] = sdyx;
        const T scale = gamma[c] * s.inv_std[c];
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = (b * C + c) * inner + i;
                g.dx[k] = s.training ? scale * (dy[k] - sdy / n - s.xhat[k] * sdyx / n) : scale * dy[k];
            }
    }
    return g;
}

}  // namespace kernels
}  // namespace hma
