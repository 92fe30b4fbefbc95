#pragma once

// Pure tensor kernels. Every function here is a deterministic function of
// its arguments: reductions run in a fixed order so results are
// reproducible bit-for-bit. The autograd layer in tape.hpp wraps these.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "hma/error.hpp"
#include "hma/tensor.hpp"

namespace hma {

/// Region geometry: a G_h x G_w grid of P_h x P_w pixel regions.
struct PartitionSpec {
    std::size_t gh = 1, gw = 1, ph = 1, pw = 1;

    std::size_t groups() const { return gh * gw; }
    std::size_t positions() const { return ph * pw; }
    std::size_t height() const { return gh * ph; }
    std::size_t width() const { return gw * pw; }

    /// Grid of gh x gw regions over an h x w plane.
    static PartitionSpec from_grid(std::size_t h, std::size_t w, std::size_t gh, std::size_t gw) {
        if (gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0)
            throw PartitionError("plane " + std::to_string(h) + "x" + std::to_string(w) +
                                 " is not divisible by grid " + std::to_string(gh) + "x" + std::to_string(gw));
        return {gh, gw, h / gh, w / gw};
    }

    /// Regions of ph x pw pixels tiling an h x w plane.
    static PartitionSpec from_region(std::size_t h, std::size_t w, std::size_t ph, std::size_t pw) {
        if (ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0)
            throw PartitionError("plane " + std::to_string(h) + "x" + std::to_string(w) +
                                 " is not divisible by region " + std::to_string(ph) + "x" + std::to_string(pw));
        return {h / ph, w / pw, ph, pw};
    }

    void require_fits(std::size_t h, std::size_t w) const {
        if (gh == 0 || gw == 0 || ph == 0 || pw == 0 || height() != h || width() != w)
            throw PartitionError("partition " + std::to_string(gh) + "x" + std::to_string(gw) + " of " +
                                 std::to_string(ph) + "x" + std::to_string(pw) + " does not tile " +
                                 std::to_string(h) + "x" + std::to_string(w));
    }

    friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

namespace kernels {

inline unsigned& thread_count() {
    static unsigned n = 1;
    return n;
}

/// Sets the worker count used by gemm. Results do not depend on it: each
/// output row is always reduced by a single thread in the same order.
inline void set_threads(unsigned n) { thread_count() = std::max(1u, n); }

/// C[m x n] (+)= A[m x k] * B[k x n], all row-major and contiguous.
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    auto rows = [&](std::size_t r0, std::size_t r1) {
        for (std::size_t i = r0; i < r1; ++i) {
            T* ci = c + i * n;
            if (!accumulate) std::fill(ci, ci + n, T{0});
            const T* ai = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = ai[p];
                if (av == T{0}) continue;
                const T* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    };
    const unsigned threads = thread_count();
    if (threads <= 1 || m < 2 * threads || m * n * k < (1u << 20)) {
        rows(0, m);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (m + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
        const std::size_t r0 = t * chunk, r1 = std::min(m, r0 + chunk);
        if (r0 < r1) pool.emplace_back(rows, r0, r1);
    }
    for (auto& th : pool) th.join();
}

template <class T>
std::vector<T> transpose_copy(const T* a, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
    return out;
}

/// General product with optional transposes. op(A) is m x k, op(B) is k x n.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate = false) {
    std::vector<T> at, bt;
    if (trans_a) {
        at = transpose_copy(a, k, m);
        a = at.data();
    }
    if (trans_b) {
        bt = transpose_copy(b, n, k);
        b = bt.data();
    }
    gemm_nn(m, n, k, a, b, c, accumulate);
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    Tensor<T> c({a.dim(0), b.dim(1)});
    gemm_nn(a.dim(0), b.dim(1), a.dim(1), a.data().data(), b.data().data(), c.data().data(), false);
    return c;
}

/// Batched product over the leading axis: [B,m,k] x [B,k,n] -> [B,m,n],
/// either operand optionally transposed in its last two axes.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    if (a.dim(0) != b.dim(0)) throw ShapeError("bmm: batch mismatch");
    const std::size_t m = trans_a ? a.dim(2) : a.dim(1);
    const std::size_t k = trans_a ? a.dim(1) : a.dim(2);
    const std::size_t kb = trans_b ? b.dim(2) : b.dim(1);
    const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
    if (k != kb)
        throw ShapeError("bmm: inner dims differ, " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    Tensor<T> c({a.dim(0), m, n});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        gemm(trans_a, trans_b, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
             c.data().data() + i * m * n);
    return c;
}

/// Splits dims around `axis` into (outer, extent, inner).
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& dims, std::size_t axis) {
    if (axis >= dims.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(dims));
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= dims[i];
    s.extent = dims[axis];
    for (std::size_t i = axis + 1; i < dims.size(); ++i) s.inner *= dims[i];
    return s;
}

template <class T>
Tensor<T> softmax_axis(const Tensor<T>& x, std::size_t axis) {
    const auto s = split_at(x.dims(), axis);
    Tensor<T> y(x.dims());
    const T* xp = x.data().data();
    T* yp = y.data().data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.extent * s.inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xp[base + e * s.inner]);
            T sum = 0;
            for (std::size_t e = 0; e < s.extent; ++e) {
                const T v = std::exp(xp[base + e * s.inner] - mx);
                yp[base + e * s.inner] = v;
                sum += v;
            }
            for (std::size_t e = 0; e < s.extent; ++e) yp[base + e * s.inner] /= sum;
        }
    return y;
}

/// VJP of softmax given its output y: dx = y * (dy - <dy, y>) along the axis.
template <class T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy, std::size_t axis) {
    const auto s = split_at(y.dims(), axis);
    Tensor<T> dx(y.dims());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.extent * s.inner + in;
            T dot = 0;
            for (std::size_t e = 0; e < s.extent; ++e) dot += dy[base + e * s.inner] * y[base + e * s.inner];
            for (std::size_t e = 0; e < s.extent; ++e) {
                const std::size_t i = base + e * s.inner;
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
    return dx;
}

enum class Activation { relu, sigmoid };

template <class T>
T sigmoid_scalar(T v) {
    // Branches keep exp() from overflowing for large |v|.
    if (v >= 0) return T{1} / (T{1} + std::exp(-v));
    const T e = std::exp(v);
    return e / (T{1} + e);
}

template <class T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
    Tensor<T> y(x.dims());
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = kind == Activation::relu ? std::max(x[i], T{0}) : sigmoid_scalar(x[i]);
    return y;
}

struct ConvGeometry {
    std::size_t stride = 1, pad = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (stride == 0 || in + 2 * pad < k)
        throw ShapeError("conv2d: extent " + std::to_string(in) + " too small for kernel " + std::to_string(k));
    return (in + 2 * pad - k) / stride + 1;
}

/// Unfolds one image [C,H,W] into columns [C*kh*kw, OH*OW].
template <class T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            ConvGeometry g, std::size_t oh, std::size_t ow, T* cols) {
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
                T* row = cols + ((ci * kh + ky) * kw + kx) * oh * ow;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                            ix < static_cast<std::ptrdiff_t>(w);
                        row[oy * ow + ox] = inside ? img[(ci * h + iy) * w + ix] : T{0};
                    }
                }
            }
}

/// Adjoint of im2col: scatters columns back onto the image, accumulating.
template <class T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            ConvGeometry g, std::size_t oh, std::size_t ow, T* img) {
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
                const T* row = cols + ((ci * kh + ky) * kw + kx) * oh * ow;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        img[(ci * h + iy) * w + ix] += row[oy * ow + ox];
                    }
                }
            }
}

inline void check_conv(const Shape& x, const Shape& wt) {
    if (x.size() != 4 || wt.size() != 4)
        throw ShapeError("conv2d: expects x [B,C,H,W] and weight [Cout,Cin,kh,kw]");
    if (x[1] != wt[1])
        throw ShapeError("conv2d: input channels " + std::to_string(x[1]) + " but weight expects " +
                         std::to_string(wt[1]));
    for (auto k : {wt[2], wt[3]})
        if (k != 1 && k != 3) throw ShapeError("conv2d: kernel extents must be 1 or 3");
}

/// Cross-correlation (no kernel flip). Optional bias has one entry per
/// output channel; pass nullptr for none.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, ConvGeometry g) {
    check_conv(x.dims(), weight.dims());
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t CO = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    const std::size_t OH = conv_out_extent(H, KH, g.stride, g.pad);
    const std::size_t OW = conv_out_extent(W, KW, g.stride, g.pad);
    if (bias && bias->size() != CO) throw ShapeError("conv2d: bias length mismatch");
    Tensor<T> y({B, CO, OH, OW});
    const bool pointwise = KH == 1 && KW == 1 && g.stride == 1 && g.pad == 0;
    std::vector<T> cols(pointwise ? 0 : C * KH * KW * OH * OW);
    for (std::size_t b = 0; b < B; ++b) {
        const T* img = x.data().data() + b * C * H * W;
        const T* colp = img;
        if (!pointwise) {
            im2col(img, C, H, W, KH, KW, g, OH, OW, cols.data());
            colp = cols.data();
        }
        T* out = y.data().data() + b * CO * OH * OW;
        gemm_nn(CO, OH * OW, C * KH * KW, weight.data().data(), colp, out, false);
        if (bias)
            for (std::size_t co = 0; co < CO; ++co)
                for (std::size_t i = 0; i < OH * OW; ++i) out[co * OH * OW + i] += (*bias)[co];
    }
    return y;
}

template <class T>
struct ConvGrads {
    Tensor<T> dx, dweight, dbias;
};

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, bool has_bias, ConvGeometry g,
                             const Tensor<T>& dy, bool need_dx) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t CO = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    const std::size_t OH = dy.dim(2), OW = dy.dim(3);
    const std::size_t ckk = C * KH * KW, npix = OH * OW;
    ConvGrads<T> gr{Tensor<T>(), Tensor<T>(weight.dims()), Tensor<T>()};
    if (need_dx) gr.dx = Tensor<T>(x.dims());
    if (has_bias) gr.dbias = Tensor<T>({CO});
    const bool pointwise = KH == 1 && KW == 1 && g.stride == 1 && g.pad == 0;
    std::vector<T> cols(pointwise ? 0 : ckk * npix), dcols(ckk * npix);
    for (std::size_t b = 0; b < B; ++b) {
        const T* img = x.data().data() + b * C * H * W;
        const T* colp = img;
        if (!pointwise) {
            im2col(img, C, H, W, KH, KW, g, OH, OW, cols.data());
            colp = cols.data();
        }
        const T* dyb = dy.data().data() + b * CO * npix;
        // dW += dY [CO x npix] * cols^T [npix x ckk]
        gemm(false, true, CO, ckk, npix, dyb, colp, gr.dweight.data().data(), true);
        if (has_bias)
            for (std::size_t co = 0; co < CO; ++co)
                for (std::size_t i = 0; i < npix; ++i) gr.dbias[co] += dyb[co * npix + i];
        if (need_dx) {
            // dcols = W^T [ckk x CO] * dY [CO x npix]
            T* dximg = gr.dx.data().data() + b * C * H * W;
            if (pointwise) {
                gemm(true, false, ckk, npix, CO, weight.data().data(), dyb, dximg, true);
            } else {
                gemm(true, false, ckk, npix, CO, weight.data().data(), dyb, dcols.data(), false);
                col2im(dcols.data(), C, H, W, KH, KW, g, OH, OW, dximg);
            }
        }
    }
    return gr;
}

/// [B,C,H,W] -> [B,C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require_rank(x, 4, "global_avg_pool");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor<T> y({B, C});
    for (std::size_t i = 0; i < B * C; ++i) {
        T s = 0;
        for (std::size_t j = 0; j < HW; ++j) s += x[i * HW + j];
        y[i] = s / static_cast<T>(HW);
    }
    return y;
}

/// [B,C,H,W] -> [B,C,G]: mean over each region of the partition, regions in
/// row-major grid order.
template <class T>
Tensor<T> adaptive_region_pool(const Tensor<T>& x, const PartitionSpec& spec) {
    require_rank(x, 4, "adaptive_region_pool");
    spec.require_fits(x.dim(2), x.dim(3));
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y({B, C, spec.groups()});
    const T n = static_cast<T>(spec.positions());
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t gy = 0; gy < spec.gh; ++gy)
            for (std::size_t gx = 0; gx < spec.gw; ++gx) {
                T s = 0;
                for (std::size_t py = 0; py < spec.ph; ++py)
                    for (std::size_t px = 0; px < spec.pw; ++px)
                        s += x[(bc * H + gy * spec.ph + py) * W + gx * spec.pw + px];
                y[bc * spec.groups() + gy * spec.gw + gx] = s / n;
            }
    return y;
}

/// Mean over the last axis: [..., n] -> [...]. A rank-1 input yields [1].
template <class T>
Tensor<T> mean_last_axis(const Tensor<T>& x) {
    const std::size_t n = x.dims().back();
    Shape out(x.dims().begin(), x.dims().end() - 1);
    if (out.empty()) out = {1};
    Tensor<T> y(out);
    for (std::size_t i = 0; i < y.size(); ++i) {
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += x[i * n + j];
        y[i] = s / static_cast<T>(n);
    }
    return y;
}

template <class T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: no inputs");
    const auto& f = *xs.front();
    require_rank(f, 4, "concat_channels");
    std::size_t ctot = 0;
    for (auto* x : xs) {
        require_rank(*x, 4, "concat_channels");
        if (x->dim(0) != f.dim(0) || x->dim(2) != f.dim(2) || x->dim(3) != f.dim(3))
            throw ShapeError("concat_channels: " + shape_str(x->dims()) + " vs " + shape_str(f.dims()));
        ctot += x->dim(1);
    }
    const std::size_t B = f.dim(0), HW = f.dim(2) * f.dim(3);
    Tensor<T> y({B, ctot, f.dim(2), f.dim(3)});
    for (std::size_t b = 0; b < B; ++b) {
        T* dst = y.data().data() + b * ctot * HW;
        for (auto* x : xs) {
            const std::size_t n = x->dim(1) * HW;
            std::copy_n(x->data().data() + b * n, n, dst);
            dst += n;
        }
    }
    return y;
}

/// Nearest-neighbour upsampling by an integer factor: out(y,x) = in(y/f, x/f).
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
    require_rank(x, 4, "upsample_nearest");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y({B, C, H * factor, W * factor});
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t oy = 0; oy < H * factor; ++oy)
            for (std::size_t ox = 0; ox < W * factor; ++ox)
                y[(bc * H * factor + oy) * W * factor + ox] = x[(bc * H + oy / factor) * W + ox / factor];
    return y;
}

/// Index maps for the region permutations. Each entry is the source flat
/// offset within one [H*W] plane.
inline std::vector<std::size_t> partition_index(const PartitionSpec& spec) {
    std::vector<std::size_t> idx(spec.groups() * spec.positions());
    const std::size_t W = spec.width();
    for (std::size_t gy = 0; gy < spec.gh; ++gy)
        for (std::size_t gx = 0; gx < spec.gw; ++gx)
            for (std::size_t py = 0; py < spec.ph; ++py)
                for (std::size_t px = 0; px < spec.pw; ++px) {
                    const std::size_t g = gy * spec.gw + gx, p = py * spec.pw + px;
                    idx[g * spec.positions() + p] = (gy * spec.ph + py) * W + gx * spec.pw + px;
                }
    return idx;
}

/// Per-plane gather: out[plane, i] = x[plane, idx[i]].
template <class T>
Tensor<T> gather_planes(const Tensor<T>& x, std::size_t plane, const std::vector<std::size_t>& idx, Shape out_dims) {
    const std::size_t planes = x.size() / plane;
    Tensor<T> y(std::move(out_dims));
    if (y.size() != planes * idx.size()) throw ShapeError("gather_planes: output size mismatch");
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < idx.size(); ++i) y[p * idx.size() + i] = x[p * plane + idx[i]];
    return y;
}

/// Adjoint of gather_planes: scatters-add into a zero tensor of `in_dims`.
template <class T>
Tensor<T> scatter_planes(const Tensor<T>& g, std::size_t plane, const std::vector<std::size_t>& idx, Shape in_dims) {
    Tensor<T> x(std::move(in_dims));
    const std::size_t planes = x.size() / plane;
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < idx.size(); ++i) x[p * plane + idx[i]] += g[p * idx.size() + i];
    return x;
}

/// Swaps the last two axes of a rank-3 or rank-4 tensor.
template <class T>
Tensor<T> swap_last_two(const Tensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("swap_last_two: rank must be >= 2");
    const std::size_t r = x.rank(), m = x.dim(r - 2), n = x.dim(r - 1);
    Shape out = x.dims();
    std::swap(out[r - 2], out[r - 1]);
    Tensor<T> y(out);
    const std::size_t planes = x.size() / (m * n);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) y[p * m * n + j * m + i] = x[p * m * n + i * n + j];
    return y;
}

}  // namespace kernels
}  // namespace hma
