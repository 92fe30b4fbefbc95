#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hma/caa.hpp"
#include "hma/layers.hpp"
#include "hma/rsa.hpp"
#include "hma/tape.hpp"

namespace hma {

struct LossWeights {
    double main = 1.0;  // lambda1, segmentation cross-entropy
    double cls = 0.5;   // lambda2, class attention map
    double aux = 0.4;   // lambda3, auxiliary head after stage 3
};

/// lambda1 L_ce + lambda2 L_cls + lambda3 L_aux.
inline double total_loss(double main, double cls, double aux, const LossWeights& w = {}) {
    return w.main * main + w.cls * cls + w.aux * aux;
}

struct HmaNetConfig {
    std::size_t in_channels = 3;
    std::array<std::size_t, 4> widths{16, 32, 64, 64};
    std::array<std::size_t, 4> strides{2, 2, 2, 1};
    std::size_t classes = 6;
    std::size_t alpha = 150;
    std::size_t reduce_divisor = 4;  // C' = C / reduce_divisor
    std::size_t key_divisor = 4;     // d = C / key_divisor
    std::size_t grid_h = 4, grid_w = 4;
    bool use_caa = true;
    bool use_cca = true;
    bool use_rsa = true;

    std::size_t feature_channels() const { return widths[3]; }
    std::size_t output_stride() const { return strides[0] * strides[1] * strides[2] * strides[3]; }
};

template <class T>
struct HmaNet {
    HmaNetConfig cfg;
    std::array<ConvBnRelu<T>, 4> backbone;
    CaaParams<T> caa;
    CcaParams<T> cca;
    RsaParams<T> rsa;
    ConvBnRelu<T> fusion;  // 3C -> C
    Conv<T> classifier;    // C -> K
    Conv<T> aux_head;      // stage-3 width -> K

    HmaNet(const HmaNetConfig& c, std::uint64_t seed) : cfg(c) {
        Rng rng(Rng::mix(seed, 0x1417));
        std::size_t cin = c.in_channels;
        for (std::size_t i = 0; i < 4; ++i) {
            backbone[i] = ConvBnRelu<T>(cin, c.widths[i], 3, rng, c.strides[i]);
            cin = c.widths[i];
        }
        const std::size_t C = c.feature_channels();
        caa = CaaParams<T>(CaaConfig{C, std::max<std::size_t>(1, C / c.reduce_divisor), c.classes, c.alpha}, rng);
        cca = CcaParams<T>(c.classes, c.alpha, rng);
        rsa = RsaParams<T>(C, rng, std::max<std::size_t>(1, C / c.key_divisor));
        fusion = ConvBnRelu<T>(3 * C, C, 1, rng);
        classifier = Conv<T>(C, c.classes, 1, rng, true);
        aux_head = Conv<T>(c.widths[2], c.classes, 1, rng, true);
    }

    /// Visits every tensor as (name, tensor, slot) in a fixed order.
    template <class F>
    void visit(F&& f) {
        for (std::size_t i = 0; i < 4; ++i) backbone[i].visit("backbone.block" + std::to_string(i + 1), f);
        caa.visit("caa", f);
        cca.visit("cca", f);
        rsa.visit("rsa", f);
        fusion.visit("fusion", f);
        classifier.visit("classifier", f);
        aux_head.visit("aux_head", f);
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        visit([&](const std::string&, Tensor<T>& t, Slot s) {
            if (s == Slot::param) n += t.size();
        });
        return n;
    }
};

struct NetOutput {
    Var logits;        // [B,K,H,W]
    Var aux_logits;    // [B,K,H,W]
    Var class_logits;  // class attention map P, [B,K,H/8,W/8]
    Var feature;       // X, [B,C,H/8,W/8]
    Var caa_out;       // Y
    Var rsa_out;       // Z
};

template <class T>
NetOutput hmanet_forward(Tape<T>& t, Var image, HmaNet<T>& net, bool training) {
    const Shape d = t.value(image).dims();
    const std::size_t os = net.cfg.output_stride();
    if (d.size() != 4 || d[1] != net.cfg.in_channels)
        throw ShapeError("hmanet_forward: image must be [B," + std::to_string(net.cfg.in_channels) + ",H,W], got " +
                         shape_str(d));
    if (d[2] % os != 0 || d[3] % os != 0)
        throw PartitionError("image " + std::to_string(d[2]) + "x" + std::to_string(d[3]) +
                             " is not divisible by the output stride " + std::to_string(os));
    const std::size_t fh = d[2] / os, fw = d[3] / os;
    const PartitionSpec spec = PartitionSpec::from_grid(fh, fw, net.cfg.grid_h, net.cfg.grid_w);

    NetOutput out;
    Var h = image;
    Var stage3;
    for (std::size_t i = 0; i < 4; ++i) {
        h = net.backbone[i](t, h, training);
        if (i == 2) stage3 = h;
    }
    out.feature = h;
    const Shape fdims = t.value(h).dims();

    auto caa = caa_forward(t, h, net.caa, net.cca, net.cfg.use_cca, training);
    out.class_logits = caa.logits;
    out.caa_out = net.cfg.use_caa ? caa.y : t.constant(Tensor<T>(fdims));
    out.rsa_out = net.cfg.use_rsa ? rsa_forward(t, h, spec, net.rsa, training) : t.constant(Tensor<T>(fdims));

    Var fused = net.fusion(t, ag::concat_channels(t, {out.caa_out, out.rsa_out, out.feature}), training);
    out.logits = ag::upsample_nearest(t, net.classifier(t, fused), os);
    out.aux_logits = ag::upsample_nearest(t, net.aux_head(t, stage3), os);
    return out;
}

/// Nearest downsampling of [B,H,W] labels: out(y,x) = in(f y, f x).
inline LabelMap downsample_labels(const LabelMap& labels, std::size_t factor) {
    const std::size_t B = labels.dim(0), H = labels.dim(1), W = labels.dim(2);
    if (H % factor || W % factor) throw PartitionError("label map not divisible by the output stride");
    LabelMap out({B, H / factor, W / factor});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t y = 0; y < H / factor; ++y)
            for (std::size_t x = 0; x < W / factor; ++x)
                out.at(b, y, x) = labels.at(b, y * factor, x * factor);
    return out;
}

struct LossVars {
    Var main, cls, aux, total;
};

template <class T>
LossVars hmanet_losses(Tape<T>& t, const NetOutput& out, const LabelMap& labels, const LossWeights& w,
                       std::size_t output_stride) {
    LossVars l;
    l.main = ag::cross_entropy(t, out.logits, labels);
    l.cls = ag::cross_entropy(t, out.class_logits, downsample_labels(labels, output_stride));
    l.aux = ag::cross_entropy(t, out.aux_logits, labels);
    l.total = ag::add(t, ag::add(t, ag::affine_const(t, l.main, static_cast<T>(w.main), T{0}),
                                 ag::affine_const(t, l.cls, static_cast<T>(w.cls), T{0})),
                      ag::affine_const(t, l.aux, static_cast<T>(w.aux), T{0}));
    return l;
}

/// Per-pixel argmax over the class axis; ties go to the lowest index.
template <class T>
LabelMap argmax_classes(const Tensor<T>& logits) {
    const std::size_t B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    LabelMap out({B, H, W});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < H * W; ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (logits[(b * K + k) * H * W + i] > logits[(b * K + best) * H * W + i]) best = k;
            out[b * H * W + i] = static_cast<std::uint8_t>(best);
        }
    return out;
}

}  // namespace hma
