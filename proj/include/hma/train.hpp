#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hma/error.hpp"
#include "hma/hmat.hpp"
#include "hma/metrics.hpp"
#include "hma/network.hpp"
#include "hma/synthetic.hpp"

namespace hma {

/// Poly schedule, implemented literally as base * (1 - (iter/max_iter)^power).
inline double poly_lr(std::size_t iter, std::size_t max_iter, double base_lr, double power = 0.9) {
    if (max_iter == 0 || iter > max_iter) throw UsageError("poly_lr: iteration outside [0, max_iter]");
    return base_lr * (1.0 - std::pow(static_cast<double>(iter) / static_cast<double>(max_iter), power));
}

struct SgdConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

/// SGD with momentum: v <- m v + (g + wd p), p <- p - lr v.
template <class T>
class Sgd {
public:
    void step(HmaNet<T>& net, const Tape<T>& tape, const SgdConfig& cfg) {
        net.visit([&](const std::string& name, Tensor<T>& p, Slot slot) {
            if (slot != Slot::param) return;
            auto [it, fresh] = velocity_.try_emplace(name, p.dims());
            auto& v = it->second;
            const Tensor<T> g = tape.grad_of(p);
            for (std::size_t i = 0; i < p.size(); ++i) {
                v[i] = static_cast<T>(cfg.momentum) * v[i] + g[i] + static_cast<T>(cfg.weight_decay) * p[i];
                p[i] -= static_cast<T>(cfg.lr) * v[i];
            }
        });
    }

private:
    std::map<std::string, Tensor<T>> velocity_;
};

struct Batch {
    Tensor<float> images;  // [B,3,H,W]
    LabelMap labels;       // [B,H,W]
};

inline Batch make_batch(const std::vector<const Scene*>& scenes) {
    if (scenes.empty()) throw UsageError("make_batch: empty batch");
    const std::size_t B = scenes.size(), H = scenes[0]->height(), W = scenes[0]->width();
    Batch b{Tensor<float>({B, 3, H, W}), LabelMap({B, H, W})};
    for (std::size_t i = 0; i < B; ++i) {
        if (scenes[i]->height() != H || scenes[i]->width() != W) throw ShapeError("make_batch: scene sizes differ");
        std::copy(scenes[i]->image.data().begin(), scenes[i]->image.data().end(),
                  b.images.data().begin() + static_cast<std::ptrdiff_t>(i * 3 * H * W));
        std::copy(scenes[i]->labels.data().begin(), scenes[i]->labels.data().end(),
                  b.labels.data().begin() + static_cast<std::ptrdiff_t>(i * H * W));
    }
    return b;
}

struct StepResult {
    double total = 0, main = 0, cls = 0, aux = 0;
};

/// One forward/backward/update. The returned losses are those evaluated
/// before the update.
template <class T>
StepResult train_step(HmaNet<T>& net, Sgd<T>& opt, const Batch& batch, const SgdConfig& sgd,
                      const LossWeights& weights) {
    Tape<T> tape;
    Var img = tape.constant(batch.images.template cast<T>());
    auto out = hmanet_forward(tape, img, net, true);
    auto l = hmanet_losses(tape, out, batch.labels, weights, net.cfg.output_stride());
    StepResult r{static_cast<double>(tape.value(l.total)[0]), static_cast<double>(tape.value(l.main)[0]),
                 static_cast<double>(tape.value(l.cls)[0]), static_cast<double>(tape.value(l.aux)[0])};
    if (!std::isfinite(r.total)) throw DivergenceError("loss became non-finite: " + std::to_string(r.total));
    tape.backward(l.total);
    opt.step(net, tape, sgd);
    return r;
}

struct TrainConfig {
    std::uint64_t seed = 1;
    std::size_t iterations = 2000;
    std::size_t batch_size = 4;
    double base_lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double poly_power = 0.9;
    LossWeights loss_weights;
    bool augment = true;
    AugmentConfig augmentation;
};

struct TrainLogRow {
    std::size_t iteration;
    double lr;
    StepResult loss;
};

/// Trains on `scenes`, drawing shuffled mini-batches epoch by epoch. Every
/// random choice derives from cfg.seed.
template <class T>
std::vector<TrainLogRow> train(HmaNet<T>& net, const std::vector<Scene>& scenes, const TrainConfig& cfg,
                               const std::function<void(const TrainLogRow&)>& on_step = {}) {
    if (scenes.empty()) throw UsageError("train: no scenes");
    if (cfg.batch_size == 0 || cfg.batch_size > scenes.size()) throw UsageError("train: invalid batch size");
    Sgd<T> opt;
    Rng order_rng(Rng::mix(cfg.seed, 2));
    std::vector<std::size_t> order(scenes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = scenes.size();
    std::vector<TrainLogRow> log;
    log.reserve(cfg.iterations);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        std::vector<Scene> augmented;
        std::vector<const Scene*> picks;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            if (cursor == scenes.size()) {
                for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
                cursor = 0;
            }
            const Scene& s = scenes[order[cursor++]];
            if (cfg.augment) {
                augmented.push_back(augment(s, Rng::mix(cfg.seed, 1000003 * (it + 1) + b), cfg.augmentation));
            } else {
                picks.push_back(&s);
            }
        }
        if (cfg.augment)
            for (const auto& s : augmented) picks.push_back(&s);
        const double lr = poly_lr(it, cfg.iterations, cfg.base_lr, cfg.poly_power);
        TrainLogRow row{it, lr,
                        train_step(net, opt, make_batch(picks), SgdConfig{lr, cfg.momentum, cfg.weight_decay},
                                   cfg.loss_weights)};
        log.push_back(row);
        if (on_step) on_step(row);
    }
    return log;
}

template <class T>
LabelMap predict(HmaNet<T>& net, const Tensor<float>& images) {
    Tape<T> tape;
    tape.set_recording(false);
    auto out = hmanet_forward(tape, tape.constant(images.template cast<T>()), net, false);
    return argmax_classes(tape.value(out.logits));
}

struct Evaluation {
    ConfusionMatrix confusion;
    MetricSummary summary;
};

/// Evaluates scene by scene with BN in inference mode.
template <class T>
Evaluation evaluate_model(HmaNet<T>& net, const std::vector<Scene>& scenes) {
    if (scenes.empty()) throw UsageError("evaluate_model: empty dataset");
    ConfusionMatrix cm(net.cfg.classes);
    for (const auto& s : scenes) {
        auto pred = predict(net, make_batch({&s}).images);
        cm.accumulate(pred.data(), s.labels.data());
    }
    return {cm, summarize(cm)};
}

/// Parameter directory: one HMAT file per tensor plus manifest.txt lines
/// `name file dims`.
template <class T>
void save_parameters(const std::filesystem::path& dir, HmaNet<T>& net) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    net.visit([&](const std::string& name, Tensor<T>& t, Slot) {
        const std::string file = name + ".hmat";
        hmat::save(dir / file, t);
        manifest << name << ' ' << file << ' ' << shape_str(t.dims()) << '\n';
    });
    if (!manifest) throw UsageError("cannot write parameter manifest in " + dir.string());
}

template <class T>
void load_parameters(const std::filesystem::path& dir, HmaNet<T>& net) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw FormatError("missing parameter manifest in " + dir.string(), 0);
    std::map<std::string, std::pair<std::string, std::string>> entries;
    std::string name, file, dims;
    while (manifest >> name >> file >> dims) entries[name] = {file, dims};
    net.visit([&](const std::string& n, Tensor<T>& t, Slot) {
        auto it = entries.find(n);
        if (it == entries.end()) throw FormatError("parameter " + n + " missing from manifest", 0);
        auto loaded = hmat::load<T>(dir / it->second.first);
        if (loaded.dims() != t.dims())
            throw FormatError("parameter " + n + " has dims " + shape_str(loaded.dims()) + ", expected " +
                                  shape_str(t.dims()),
                              0);
        t = std::move(loaded);
    });
}

}  // namespace hma
