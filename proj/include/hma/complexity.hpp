#pragma once

// Symbolic cost model for one attention-module invocation.
//
// Every module is lowered to a list of ops with output sizes, FLOPs and
// parameter counts. Only convolutions and matrix products are charged
// FLOPs (one multiply-accumulate = 2 FLOPs). Memory is measured over the
// op schedule in program order at `bytes_per_value` per element; the
// module input and the parameters are not counted.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hma/caa.hpp"
#include "hma/error.hpp"
#include "hma/kernels.hpp"
#include "hma/rng.hpp"
#include "hma/rsa.hpp"

#if defined(__unix__) || defined(__APPLE__)
#include <sys/utsname.h>
#endif

namespace hma {

enum class ModuleKind { sa, rsa, caa };

inline std::string to_string(ModuleKind k) {
    switch (k) {
        case ModuleKind::sa: return "sa";
        case ModuleKind::rsa: return "rsa";
        case ModuleKind::caa: return "caa";
    }
    return "?";
}

inline ModuleKind parse_module_kind(const std::string& s) {
    if (s == "sa") return ModuleKind::sa;
    if (s == "rsa") return ModuleKind::rsa;
    if (s == "caa") return ModuleKind::caa;
    throw UsageError("unsupported module kind '" + s + "' (expected sa, rsa or caa)");
}

enum class MemoryPolicy {
    retain_all,       // every intermediate stays resident, as when activations are kept for backward
    free_after_use,   // an intermediate is released after its last consumer
};

struct ComplexityConfig {
    std::size_t reduced = 0;  // width after the 3x3 reduction conv; 0 picks the per-kind default
    std::size_t key = 0;      // theta/phi width d; 0 means reduced / 4
    std::size_t classes = 6;
    std::size_t alpha = 150;
    std::size_t gh = 8, gw = 8;
    MemoryPolicy memory = MemoryPolicy::retain_all;
    std::size_t bytes_per_value = 4;
};

/// Reduction width used when ComplexityConfig::reduced is 0: C/4 for SA
/// and CAA, C/8 for RSA.
inline std::size_t default_reduced_width(ModuleKind kind, std::size_t channels) {
    const std::size_t div = kind == ModuleKind::rsa ? 8 : 4;
    return std::max<std::size_t>(1, channels / div);
}

struct CostOp {
    std::string name;
    std::size_t values = 0;  // output elements
    double flops = 0;
    std::size_t params = 0;
    std::vector<std::size_t> inputs;  // indices of earlier ops; input_id marks the module input
};

struct ComplexityReport {
    ModuleKind kind = ModuleKind::sa;
    std::size_t batch = 1, channels = 0, height = 0, width = 0;
    std::size_t reduced = 0, key = 0;
    std::size_t params = 0;
    std::size_t memory_bytes = 0;
    double flops = 0;
    double affinity_flops = 0;   // query-key products
    double attention_flops = 0;  // attention-weighted aggregation products
    std::vector<CostOp> ops;

    double gflops() const { return flops * 1e-9; }
    double memory_mb() const { return static_cast<double>(memory_bytes) / (1024.0 * 1024.0); }
    double mparams() const { return static_cast<double>(params) * 1e-6; }
};

namespace detail {

constexpr std::size_t input_id = static_cast<std::size_t>(-1);

class CostGraph {
public:
    std::size_t add(std::string name, std::size_t values, double flops, std::size_t params,
                    std::vector<std::size_t> inputs) {
        ops_.push_back({std::move(name), values, flops, params, std::move(inputs)});
        return ops_.size() - 1;
    }

    /// conv (+BN +ReLU when `bn_relu`) over n pixels; returns the last op.
    std::size_t conv(const std::string& name, std::size_t in, std::size_t n, std::size_t cin, std::size_t cout,
                     std::size_t k, bool bn_relu, bool bias = false) {
        const double macs = static_cast<double>(n) * static_cast<double>(cin) * static_cast<double>(cout) *
                            static_cast<double>(k * k);
        std::size_t id = add(name + ".conv", n * cout, 2.0 * macs, cin * cout * k * k + (bias ? cout : 0), {in});
        if (bn_relu) {
            id = add(name + ".bn", n * cout, 0, 2 * cout, {id});
            id = add(name + ".relu", n * cout, 0, 0, {id});
        }
        return id;
    }

    /// Batched [m x k] . [k x n] product.
    std::size_t matmul(const std::string& name, std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                       std::vector<std::size_t> inputs) {
        const double macs = static_cast<double>(batch) * static_cast<double>(m) * static_cast<double>(k) *
                            static_cast<double>(n);
        return add(name, batch * m * n, 2.0 * macs, 0, std::move(inputs));
    }

    std::size_t elementwise(const std::string& name, std::size_t values, std::vector<std::size_t> inputs,
                            std::size_t params = 0) {
        return add(name, values, 0, params, std::move(inputs));
    }

    const std::vector<CostOp>& ops() const { return ops_; }

    std::size_t peak_values(MemoryPolicy policy) const {
        if (policy == MemoryPolicy::retain_all) {
            std::size_t s = 0;
            for (const auto& op : ops_) s += op.values;
            return s;
        }
        std::vector<std::size_t> last_use(ops_.size(), 0);
        for (std::size_t i = 0; i < ops_.size(); ++i) {
            last_use[i] = i;
            for (auto in : ops_[i].inputs)
                if (in != input_id) last_use[in] = std::max(last_use[in], i);
        }
        last_use.back() = ops_.size();  // the module output survives
        std::size_t live = 0, peak = 0;
        for (std::size_t i = 0; i < ops_.size(); ++i) {
            live += ops_[i].values;
            peak = std::max(peak, live);
            for (std::size_t j = 0; j <= i; ++j)
                if (last_use[j] == i) live -= ops_[j].values;
        }
        return peak;
    }

private:
    std::vector<CostOp> ops_;
};

/// Non-local block over `tokens` positions of width `cr`; returns the output op.
/// Adds its affinity / aggregation FLOPs to the report.
inline std::size_t attention_block(CostGraph& g, ComplexityReport& r, const std::string& name, std::size_t in,
                                   std::size_t batch, std::size_t cr, std::size_t d, std::size_t tokens) {
    const std::size_t n = batch * tokens;
    std::size_t th = g.conv(name + ".theta", in, n, cr, d, 1, true);
    std::size_t ph = g.conv(name + ".phi", in, n, cr, d, 1, true);
    std::size_t gx = g.conv(name + ".g", in, n, cr, cr, 1, false, true);
    std::size_t s = g.matmul(name + ".affinity", batch, tokens, d, tokens, {th, ph});
    r.affinity_flops += g.ops()[s].flops;
    std::size_t a = g.elementwise(name + ".softmax", batch * tokens * tokens, {s});
    std::size_t agg = g.matmul(name + ".aggregate", batch, cr, tokens, tokens, {gx, a});
    r.attention_flops += g.ops()[agg].flops;
    return g.elementwise(name + ".residual", n * cr, {agg, in}, 1);
}

}  // namespace detail

inline ComplexityReport analyze(ModuleKind kind, std::size_t batch, std::size_t channels, std::size_t h,
                                std::size_t w, const ComplexityConfig& cfg = {}) {
    if (batch == 0 || channels == 0 || h == 0 || w == 0) throw UsageError("analyze: empty geometry");
    ComplexityReport r;
    r.kind = kind;
    r.batch = batch;
    r.channels = channels;
    r.height = h;
    r.width = w;
    r.reduced = cfg.reduced ? cfg.reduced : default_reduced_width(kind, channels);
    r.key = cfg.key ? cfg.key : std::max<std::size_t>(1, r.reduced / 4);
    const std::size_t hw = h * w, n = batch * hw, cr = r.reduced, d = r.key;

    detail::CostGraph g;
    std::size_t x = g.conv("reduce", detail::input_id, n, channels, cr, 3, true);
    switch (kind) {
        case ModuleKind::sa:
            detail::attention_block(g, r, "sa", x, batch, cr, d, hw);
            break;
        case ModuleKind::rsa: {
            const PartitionSpec spec = PartitionSpec::from_grid(h, w, cfg.gh, cfg.gw);
            const std::size_t G = spec.groups(), P = spec.positions();
            std::size_t xg = g.elementwise("partition", n * cr, {x});
            std::size_t m1 = g.elementwise("stage1.merge", batch * cr * G, {xg});
            std::size_t z1 = detail::attention_block(g, r, "stage1", m1, batch, cr, d, G);
            std::size_t x1 = g.elementwise("stage1.region_weight", n * cr, {z1, xg});
            std::size_t xs = g.elementwise("shuffle", n * cr, {x1});
            std::size_t m2 = g.elementwise("stage2.merge", batch * cr * P, {xs});
            std::size_t z2 = detail::attention_block(g, r, "stage2", m2, batch, cr, d, P);
            std::size_t x2 = g.elementwise("stage2.region_weight", n * cr, {z2, xs});
            std::size_t xu = g.elementwise("unshuffle", n * cr, {x2});
            g.elementwise("unpartition", n * cr, {xu});
            break;
        }
        case ModuleKind::caa: {
            const std::size_t K = cfg.classes, hidden = cfg.alpha * K;
            std::size_t logits = g.conv("class_head", detail::input_id, n, channels, K, 1, false, true);
            std::size_t probs = g.elementwise("class_softmax", n * K, {logits});
            std::size_t s = g.matmul("affinity", batch, cr, hw, K, {x, probs});
            r.affinity_flops += g.ops()[s].flops;
            std::size_t a = g.elementwise("affinity_softmax", batch * cr * K, {s});
            std::size_t gap = g.elementwise("gap", batch * K, {probs});
            std::size_t h1 = g.matmul("cca.w1", batch, hidden, K, 1, {gap});
            g.add("cca.w1.params", 0, 0, hidden * K, {});
            std::size_t h1r = g.elementwise("cca.relu", batch * hidden, {h1});
            std::size_t gate = g.matmul("cca.w2", batch, K, hidden, 1, {h1r});
            g.add("cca.w2.params", 0, 0, K * hidden, {});
            std::size_t gs = g.elementwise("cca.sigmoid", batch * K, {gate});
            std::size_t ar = g.elementwise("recalibrate", batch * cr * K, {a, gs}, 1);
            std::size_t ctx = g.matmul("context", batch, cr, K, hw, {ar, probs});
            r.attention_flops += g.ops()[ctx].flops;
            std::size_t dl = g.conv("delta", ctx, n, cr, channels, 1, true);
            std::size_t sum = g.elementwise("residual", n * channels, {dl});
            g.conv("rho", sum, n, channels, channels, 1, true);
            break;
        }
    }

    r.ops = g.ops();
    for (const auto& op : r.ops) {
        r.flops += op.flops;
        r.params += op.params;
    }
    r.memory_bytes = g.peak_values(cfg.memory) * cfg.bytes_per_value;
    return r;
}

struct SweepRow {
    ComplexityReport report;
    PartitionSpec spec;
};

/// One row per (kind, size). RSA keeps the region size fixed at
/// region_h x region_w so the grid grows with the image.
inline std::vector<SweepRow> sweep(const std::vector<ModuleKind>& kinds,
                                   const std::vector<std::pair<std::size_t, std::size_t>>& sizes, std::size_t channels,
                                   ComplexityConfig cfg = {}, std::size_t region_h = 16, std::size_t region_w = 16) {
    if (kinds.empty() || sizes.empty()) throw UsageError("sweep: kinds and sizes must be nonempty");
    std::vector<SweepRow> rows;
    for (auto kind : kinds)
        for (auto [h, w] : sizes) {
            const PartitionSpec spec = PartitionSpec::from_region(h, w, region_h, region_w);
            cfg.gh = spec.gh;
            cfg.gw = spec.gw;
            rows.push_back({analyze(kind, 1, channels, h, w, cfg), spec});
        }
    return rows;
}

inline std::string complexity_csv_header() {
    return "kind,H,W,C,params,memory_bytes,flops,affinity_flops,attention_flops\n";
}

inline std::string complexity_csv_row(const ComplexityReport& r) {
    std::ostringstream os;
    os << std::setprecision(17) << to_string(r.kind) << ',' << r.height << ',' << r.width << ',' << r.channels
       << ',' << r.params << ',' << r.memory_bytes << ',' << r.flops << ',' << r.affinity_flops << ','
       << r.attention_flops << '\n';
    return os.str();
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string s = complexity_csv_header();
    for (const auto& row : rows) s += complexity_csv_row(row.report);
    return s;
}

struct HostInfo {
    std::string system, machine;
    unsigned hardware_threads = 0;
    std::string compiler;
};

inline HostInfo host_info() {
    HostInfo h;
#if defined(__unix__) || defined(__APPLE__)
    utsname u{};
    if (uname(&u) == 0) {
        h.system = std::string(u.sysname) + " " + u.release;
        h.machine = u.machine;
    }
#endif
    h.hardware_threads = std::thread::hardware_concurrency();
#if defined(__clang__)
    h.compiler = "clang " __clang_version__;
#elif defined(__GNUC__)
    h.compiler = "gcc " __VERSION__;
#endif
    return h;
}

struct BenchResult {
    ModuleKind kind = ModuleKind::sa;
    std::size_t batch = 1, channels = 0, height = 0, width = 0, gh = 1, gw = 1;
    std::size_t repetitions = 0;
    unsigned threads = 1;
    double median_s = 0;
    std::vector<double> samples;
};

/// Median wall time of `repetitions` f32 forward passes of the SA or RSA
/// block after one warmup pass. Kernels run single-threaded unless
/// `threads` says otherwise.
inline BenchResult wallclock_bench(ModuleKind kind, std::size_t batch, std::size_t channels, std::size_t h,
                                   std::size_t w, std::size_t gh, std::size_t gw, std::size_t repetitions = 5,
                                   std::uint64_t seed = 1, unsigned threads = 1) {
    if (kind == ModuleKind::caa) throw UsageError("wallclock_bench: kind must be sa or rsa");
    if (repetitions < 5) throw UsageError("wallclock_bench: at least 5 repetitions are required");
    if (threads == 0) throw UsageError("wallclock_bench: threads must be positive");
    const unsigned saved = kernels::thread_count();
    kernels::set_threads(threads);

    Rng rng(Rng::mix(seed, 77));
    Tensor<float> x;
    try {
        x = random_normal<float>({batch, channels, h, w}, rng);
    } catch (const std::bad_alloc&) {
        kernels::set_threads(saved);
        throw ResourceError("wallclock_bench: cannot allocate the input");
    }
    RsaParams<float> rsa(channels, rng);
    AttentionStageParams<float> sa(channels, default_key_width(channels), rng);
    const PartitionSpec spec = kind == ModuleKind::rsa ? PartitionSpec::from_grid(h, w, gh, gw) : PartitionSpec{};

    auto run_once = [&] {
        Tape<float> t;
        t.set_recording(false);
        Var in = t.constant(x);
        if (kind == ModuleKind::rsa)
            rsa_forward(t, in, spec, rsa, false);
        else
            dense_self_attention(t, in, sa, false);
    };

    BenchResult r{kind, batch, channels, h, w, kind == ModuleKind::rsa ? gh : 1, kind == ModuleKind::rsa ? gw : 1,
                  repetitions, threads, 0, {}};
    try {
        run_once();
        for (std::size_t i = 0; i < repetitions; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            run_once();
            r.samples.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        }
    } catch (const std::bad_alloc&) {
        kernels::set_threads(saved);
        throw ResourceError("wallclock_bench: allocation failed for " + to_string(kind) + " at [" +
                            std::to_string(batch) + "," + std::to_string(channels) + "," + std::to_string(h) + "," +
                            std::to_string(w) + "]");
    }
    kernels::set_threads(saved);
    std::vector<double> sorted = r.samples;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    r.median_s = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    return r;
}

/// One JSON line: kind, geometry, median_s, samples and a host descriptor.
inline std::string bench_json_line(const BenchResult& r, const HostInfo& host = host_info()) {
    nlohmann::ordered_json j;
    j["kind"] = to_string(r.kind);
    j["geometry"] = {r.batch, r.channels, r.height, r.width};
    j["grid"] = {r.gh, r.gw};
    j["repetitions"] = r.repetitions;
    j["median_s"] = r.median_s;
    j["samples_s"] = r.samples;
    j["threads"] = r.threads;
    j["dtype"] = "f32";
    j["host"] = {{"system", host.system},
                 {"machine", host.machine},
                 {"hardware_threads", host.hardware_threads},
                 {"compiler", host.compiler}};
    return j.dump();
}

}  // namespace hma
