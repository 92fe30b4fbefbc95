#pragma once

// Command-line front end: gradcheck, bench, analyze, gen-data, train, eval
// and sweep. Every subcommand accepts `--config <file>` with `key = value`
// lines; flags given on the command line win over the file.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hma/complexity.hpp"
#include "hma/gradcheck_suite.hpp"
#include "hma/train.hpp"

namespace hma::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3, kAcceptance = 4 };

inline int exit_code_for(const std::string& kind) {
    if (kind == "usage") return kUsage;
    if (kind == "divergence" || kind == "evaluation") return kDivergence;
    return kData;
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::pair<std::string, std::string>> read_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
        kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
}

inline bool truthy(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw UsageError("expected a boolean, got '" + v + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& s, const char* what) {
    std::vector<T> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        std::istringstream is(item);
        T v{};
        if (!(is >> v) || !is.eof()) throw UsageError(std::string("bad value '") + item + "' in " + what);
        out.push_back(v);
    }
    if (out.empty()) throw UsageError(std::string(what) + " is empty");
    return out;
}

/// "8x8,4x8" -> {{8,8},{4,8}}; a bare "4" means 4x4.
inline std::vector<std::pair<std::size_t, std::size_t>> parse_grids(const std::string& s) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& g : parse_list<std::string>(s, "--grids")) {
        const auto x = g.find('x');
        try {
            if (x == std::string::npos) {
                const auto n = std::stoul(g);
                out.emplace_back(n, n);
            } else {
                out.emplace_back(std::stoul(g.substr(0, x)), std::stoul(g.substr(x + 1)));
            }
        } catch (const std::logic_error&) {
            throw UsageError("bad grid '" + g + "'");
        }
    }
    return out;
}

/// Effective option values of a parsed subcommand as `key = value` lines.
inline std::string echo_config(const CLI::App& sub) {
    std::ostringstream os;
    os << "command = " << sub.get_name() << '\n';
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_single_name();
        if (name.rfind("help", 0) == 0 || name == "config" || name.empty()) continue;
        std::string value;
        if (opt->get_expected_max() == 0) {
            value = opt->count() > 0 ? "true" : "false";
        } else if (opt->count() > 0) {
            value = opt->as<std::string>();
        } else {
            value = opt->get_default_str();
        }
        os << name << " = " << value << '\n';
    }
    return os.str();
}

inline std::string commented(const std::string& text) {
    std::istringstream in(text);
    std::ostringstream os;
    std::string line;
    while (std::getline(in, line)) os << "# " << line << '\n';
    return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    f << content;
    if (!f) throw UsageError("cannot write " + path.string());
}

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

struct TrainOptions {
    std::string data, eval_data, out;
    std::size_t iters = 2000, batch = 4;
    double lr = 0.01, momentum = 0.9, wd = 5e-4, power = 0.9;
    std::uint64_t seed = 1;
    std::size_t crop = 32;
    bool no_augment = false;
    double lambda1 = 1.0, lambda2 = 0.5, lambda3 = 0.4;
    std::size_t alpha = 150, gh = 4, gw = 4;
    bool no_caa = false, no_cca = false, no_rsa = false;
    std::size_t log_every = 0;

    HmaNetConfig net_config() const {
        HmaNetConfig c;
        c.alpha = alpha;
        c.grid_h = gh;
        c.grid_w = gw;
        c.use_caa = !no_caa;
        c.use_cca = !no_cca;
        c.use_rsa = !no_rsa;
        return c;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.seed = seed;
        t.iterations = iters;
        t.batch_size = batch;
        t.base_lr = lr;
        t.momentum = momentum;
        t.weight_decay = wd;
        t.poly_power = power;
        t.loss_weights = {lambda1, lambda2, lambda3};
        t.augment = !no_augment;
        t.augmentation.crop_h = t.augmentation.crop_w = crop;
        return t;
    }
};

inline void add_train_options(CLI::App* sub, TrainOptions& o) {
    sub->add_option("--data", o.data, "training dataset directory (from gen-data)");
    sub->add_option("--iters", o.iters, "iterations");
    sub->add_option("--batch", o.batch, "mini-batch size");
    sub->add_option("--lr", o.lr, "base learning rate");
    sub->add_option("--momentum", o.momentum, "SGD momentum");
    sub->add_option("--wd", o.wd, "weight decay");
    sub->add_option("--power", o.power, "poly schedule power");
    sub->add_option("--seed", o.seed, "seed for init, batching and augmentation");
    sub->add_option("--crop", o.crop, "square training crop after random scaling");
    sub->add_flag("--no-augment", o.no_augment, "train on whole scenes without flip/scale/crop");
    sub->add_option("--lambda1", o.lambda1, "weight of the segmentation loss");
    sub->add_option("--lambda2", o.lambda2, "weight of the class attention map loss");
    sub->add_option("--lambda3", o.lambda3, "weight of the auxiliary loss");
    sub->add_option("--alpha", o.alpha, "CCA ascending ratio");
    sub->add_option("--gh", o.gh, "RSA partitions along height");
    sub->add_option("--gw", o.gw, "RSA partitions along width");
    sub->add_flag("--no-caa", o.no_caa, "zero the class augmented attention branch");
    sub->add_flag("--no-cca", o.no_cca, "skip class channel recalibration");
    sub->add_flag("--no-rsa", o.no_rsa, "zero the region shuffle attention branch");
    sub->add_option("--log-every", o.log_every, "progress line on stderr every N iterations (0 = quiet)");
}

struct TrainOutcome {
    std::vector<TrainLogRow> log;
    double seconds = 0;
};

inline TrainOutcome run_training(HmaNet<float>& net, const std::vector<Scene>& scenes, const TrainOptions& o,
                                 std::ostream& err) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainOutcome r;
    r.log = train(net, scenes, o.train_config(), [&](const TrainLogRow& row) {
        if (o.log_every && (row.iteration % o.log_every == 0 || row.iteration + 1 == o.iters))
            err << "iter " << row.iteration << " lr " << row.lr << " loss " << row.loss.total << '\n';
    });
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

/// Mean total loss over the first (or last) `window` iterations.
inline double window_loss(const std::vector<TrainLogRow>& log, bool last, std::size_t window = 20) {
    if (log.empty()) return 0;
    const std::size_t n = std::min(window, log.size());
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += log[last ? log.size() - n + i : i].loss.total;
    return s / static_cast<double>(n);
}

inline std::string loss_csv(const std::vector<TrainLogRow>& log) {
    std::ostringstream os;
    os << std::setprecision(9) << "iteration,lr,total,main,cls,aux\n";
    for (const auto& r : log)
        os << r.iteration << ',' << r.lr << ',' << r.loss.total << ',' << r.loss.main << ',' << r.loss.cls << ','
           << r.loss.aux << '\n';
    return os.str();
}

inline std::vector<Scene> require_dataset(const std::string& dir, const char* flag) {
    if (dir.empty()) throw UsageError(std::string(flag) + " is required");
    return load_dataset(dir);
}

/// Network settings recorded in a checkpoint's metadata.txt.
inline HmaNetConfig read_checkpoint_config(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "metadata.txt"))
        throw FormatError("missing metadata.txt in " + dir.string(), 0);
    TrainOptions o;
    for (const auto& [k, v] : detail::read_config(dir / "metadata.txt")) {
        try {
            if (k == "alpha") o.alpha = std::stoul(v);
            if (k == "gh") o.gh = std::stoul(v);
            if (k == "gw") o.gw = std::stoul(v);
        } catch (const std::logic_error&) {
            throw FormatError("bad value for " + k + " in checkpoint metadata", 0);
        }
        if (k == "no-caa") o.no_caa = detail::truthy(v);
        if (k == "no-cca") o.no_cca = detail::truthy(v);
        if (k == "no-rsa") o.no_rsa = detail::truthy(v);
    }
    return o.net_config();
}

/// Runs the CLI on argv; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Hybrid multiple attention toolkit", "hma"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
    app.require_subcommand(1);
    app.set_help_flag("--help", "print this help and exit");
    app.set_help_all_flag("--help-all", "help for every subcommand");

    std::string config_path;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "file of 'key = value' lines, overridden by flags");
    };

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks (f64)");
    bool gc_all = false;
    std::string gc_op, gc_out;
    std::uint64_t gc_seed = 7;
    std::size_t gc_seeds = 20;
    double gc_tol = 1e-4;
    gc->add_flag("--all", gc_all, "run every op and module");
    gc->add_option("--op", gc_op, "run a single op or module by name");
    gc->add_option("--seed", gc_seed, "base seed");
    gc->add_option("--seeds", gc_seeds, "seeded shapes per case");
    gc->add_option("--tolerance", gc_tol, "relative error bound");
    gc->add_option("--out", gc_out, "also write the table to this CSV");
    add_config(gc);

    // bench
    auto* bn = app.add_subcommand("bench", "wall-clock forward time of SA and RSA (JSON lines)");
    std::string bn_kind = "both", bn_out;
    std::size_t bn_b = 1, bn_c = 256, bn_h = 64, bn_w = 64, bn_gh = 8, bn_gw = 8, bn_reps = 5;
    std::uint64_t bn_seed = 1;
    unsigned bn_threads = 1;
    double bn_assert = 0;
    bn->add_option("--kind", bn_kind, "sa, rsa or both")->check(CLI::IsMember({"sa", "rsa", "both"}));
    bn->add_option("--b", bn_b, "batch");
    bn->add_option("--c", bn_c, "channels");
    bn->add_option("--h", bn_h, "height");
    bn->add_option("--w", bn_w, "width");
    bn->add_option("--gh", bn_gh, "RSA partitions along height");
    bn->add_option("--gw", bn_gw, "RSA partitions along width");
    bn->add_option("--reps", bn_reps, "timed repetitions (>= 5)");
    bn->add_option("--seed", bn_seed, "input and weight seed");
    bn->add_option("--threads", bn_threads, "gemm worker threads");
    bn->add_option("--assert-speedup", bn_assert, "exit 4 unless SA/RSA median time ratio reaches this");
    bn->add_option("--out", bn_out, "also write the JSON lines here");
    add_config(bn);

    // analyze
    auto* an = app.add_subcommand("analyze", "symbolic params/memory/FLOPs of one module (CSV)");
    std::string an_kind = "all", an_memory = "retain-all", an_out;
    std::size_t an_b = 1, an_c = 2048, an_h = 128, an_w = 128;
    ComplexityConfig an_cfg;
    an->add_option("--kind", an_kind, "sa, rsa, caa or all")->check(CLI::IsMember({"sa", "rsa", "caa", "all"}));
    an->add_option("--b", an_b, "batch");
    an->add_option("--c", an_c, "input channels");
    an->add_option("--h", an_h, "height");
    an->add_option("--w", an_w, "width");
    an->add_option("--gh", an_cfg.gh, "RSA partitions along height");
    an->add_option("--gw", an_cfg.gw, "RSA partitions along width");
    an->add_option("--reduced", an_cfg.reduced, "reduction width (0 = per-kind default)");
    an->add_option("--key", an_cfg.key, "query/key width (0 = reduced / 4)");
    an->add_option("--classes", an_cfg.classes, "classes for CAA");
    an->add_option("--alpha", an_cfg.alpha, "CCA ascending ratio");
    an->add_option("--memory", an_memory, "retain-all or free-after-use")
        ->check(CLI::IsMember({"retain-all", "free-after-use"}));
    an->add_option("--bytes", an_cfg.bytes_per_value, "bytes per stored value");
    an->add_option("--out", an_out, "also write the CSV here");
    add_config(an);

    // gen-data
    auto* gd = app.add_subcommand("gen-data", "write a synthetic scene dataset");
    std::string gd_out;
    std::size_t gd_count = 200, gd_h = 64, gd_w = 64;
    std::uint64_t gd_seed = 1;
    gd->add_option("--out", gd_out, "dataset directory")->required();
    gd->add_option("--count", gd_count, "number of scenes");
    gd->add_option("--h", gd_h, "height");
    gd->add_option("--w", gd_w, "width");
    gd->add_option("--seed", gd_seed, "dataset seed");
    add_config(gd);

    // train
    auto* tr = app.add_subcommand("train", "train the toy network and write a checkpoint");
    TrainOptions tro;
    add_train_options(tr, tro);
    tr->add_option("--out", tro.out, "checkpoint directory")->required();
    tr->add_option("--eval-data", tro.eval_data, "held-out dataset evaluated after training");
    add_config(tr);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (metric CSV)");
    std::string ev_ckpt, ev_data, ev_out;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--out", ev_out, "also write the CSV here");
    add_config(ev);

    // sweep
    auto* sw = app.add_subcommand("sweep", "complexity, alpha or partition sweeps (CSV)");
    std::string sw_what, sw_sizes = "32,64,96,128", sw_kinds = "sa,rsa", sw_values = "50,75,100,125,150,175,200",
                         sw_grids = "4x4,4x2,2x4,2x2", sw_out;
    std::size_t sw_c = 2048, sw_region = 16;
    TrainOptions swo;
    sw->add_option("what", sw_what, "complexity, alpha or partition")
        ->required()
        ->check(CLI::IsMember({"complexity", "alpha", "partition"}));
    sw->add_option("--sizes", sw_sizes, "complexity: square sizes H=W");
    sw->add_option("--kinds", sw_kinds, "complexity: module kinds");
    sw->add_option("--c", sw_c, "complexity: channels");
    sw->add_option("--region", sw_region, "complexity: fixed RSA region side P");
    sw->add_option("--values", sw_values, "alpha: ratios to train");
    sw->add_option("--grids", sw_grids, "partition: GhxGw grids to train");
    add_train_options(sw, swo);
    sw->add_option("--eval-data", swo.eval_data, "alpha/partition: held-out dataset");
    sw->add_option("--out", sw_out, "also write the CSV here");
    add_config(sw);

    // Splice `--config` contents in right after the subcommand name so that
    // later command-line flags take precedence.
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        auto sub_it = std::find_if(args.begin(), args.end(), [](const std::string& a) { return a[0] != '-'; });
        if (sub_it != args.end()) {
            CLI::App* sub = nullptr;
            try {
                sub = app.get_subcommand(*sub_it);
            } catch (const CLI::OptionNotFound&) {
            }
            std::string file;
            for (std::size_t i = 0; i < args.size(); ++i) {
                if (args[i] == "--config" && i + 1 < args.size()) file = args[i + 1];
                if (args[i].rfind("--config=", 0) == 0) file = args[i].substr(9);
            }
            if (sub && !file.empty()) {
                std::vector<std::string> injected;
                for (const auto& [key, value] : detail::read_config(file)) {
                    if (key == "command") {
                        if (value != sub->get_name())
                            throw UsageError("config is for '" + value + "', not '" + sub->get_name() + "'");
                        continue;
                    }
                    if (key == "what" && sub == sw) {
                        continue;
                    }
                    const CLI::Option* opt = sub->get_option_no_throw("--" + key);
                    if (!opt) throw UsageError("unknown config key '" + key + "' for " + sub->get_name());
                    if (opt->get_expected_max() == 0) {
                        if (detail::truthy(value)) injected.push_back("--" + key);
                    } else {
                        injected.push_back("--" + key);
                        injected.push_back(value);
                    }
                }
                args.insert(sub_it + 1, injected.begin(), injected.end());
            }
        }
    } catch (const Error& e) {
        err << "error: " << e.kind() << ": " << e.what() << '\n';
        return exit_code_for(e.kind());
    }

    std::vector<const char*> cargv{argv[0]};
    for (const auto& a : args) cargv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: usage: " << msg << '\n';
        return kUsage;
    }

    try {
        if (gc->parsed()) {
            if (!gc_all && gc_op.empty()) throw UsageError("gradcheck needs --all or --op NAME");
            if (gc_seeds == 0) throw UsageError("--seeds must be positive");
            const auto t0 = std::chrono::steady_clock::now();
            const auto rows = run_gradcheck_suite(gc_seed, gc_seeds, gc_tol, gc_all ? "" : gc_op);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::ostringstream csv;
            csv << "name,kind,seeds,coordinates,kink_skips,max_rel_error,worst_seed,worst_analytic,worst_numeric,"
                   "stencil5_rel_error,status\n";
            std::size_t failed = 0;
            for (const auto& r : rows) {
                csv << std::setprecision(6) << r.name << ',' << (r.module ? "module" : "op") << ',' << r.seeds << ','
                    << r.coordinates << ',' << r.kink_skips << ',' << r.max_rel_error << ',' << r.worst_seed << ','
                    << r.worst_analytic << ',' << r.worst_numeric << ',' << r.stencil5_rel_error << ','
                    << (r.pass ? "PASS" : "FAIL") << '\n';
                failed += !r.pass;
            }
            out << csv.str();
            if (!gc_out.empty()) detail::write_file(gc_out, detail::commented(detail::echo_config(*gc)) + csv.str());
            err << "gradcheck: " << rows.size() << " cases, " << failed << " failed, " << std::fixed
                << std::setprecision(1) << secs << " s\n";
            return failed ? kAcceptance : kOk;
        }

        if (bn->parsed()) {
            std::vector<ModuleKind> kinds;
            if (bn_kind != "rsa") kinds.push_back(ModuleKind::sa);
            if (bn_kind != "sa") kinds.push_back(ModuleKind::rsa);
            if (bn_assert > 0 && kinds.size() != 2) throw UsageError("--assert-speedup needs --kind both");
            const HostInfo host = host_info();
            std::string lines;
            std::map<ModuleKind, double> median;
            for (auto k : kinds) {
                const auto r = wallclock_bench(k, bn_b, bn_c, bn_h, bn_w, bn_gh, bn_gw, bn_reps, bn_seed, bn_threads);
                median[k] = r.median_s;
                lines += bench_json_line(r, host) + '\n';
            }
            bool pass = true;
            if (kinds.size() == 2) {
                nlohmann::ordered_json j;
                const double speedup = median[ModuleKind::sa] / median[ModuleKind::rsa];
                j["speedup_sa_over_rsa"] = speedup;
                if (bn_assert > 0) {
                    pass = speedup >= bn_assert;
                    j["threshold"] = bn_assert;
                    j["pass"] = pass;
                }
                lines += j.dump() + '\n';
            }
            out << lines;
            if (!bn_out.empty()) detail::write_file(bn_out, lines);
            return pass ? kOk : kAcceptance;
        }

        if (an->parsed()) {
            an_cfg.memory = an_memory == "retain-all" ? MemoryPolicy::retain_all : MemoryPolicy::free_after_use;
            std::vector<ModuleKind> kinds;
            if (an_kind == "all")
                kinds = {ModuleKind::sa, ModuleKind::rsa, ModuleKind::caa};
            else
                kinds = {parse_module_kind(an_kind)};
            const PartitionSpec spec = PartitionSpec::from_grid(an_h, an_w, an_cfg.gh, an_cfg.gw);
            std::ostringstream csv;
            csv << "kind,B,H,W,C,reduced,key,gh,gw,params,memory_bytes,memory_mib,flops,gflops,affinity_flops,"
                   "attention_flops,formula_sa_flops,formula_rsa_flops,formula_ratio\n";
            csv << std::setprecision(17);
            for (auto k : kinds) {
                const auto r = analyze(k, an_b, an_c, an_h, an_w, an_cfg);
                const auto f = rsa_attention_flops(spec, an_h, an_w, r.reduced);
                const double b = static_cast<double>(an_b);
                csv << to_string(k) << ',' << an_b << ',' << an_h << ',' << an_w << ',' << an_c << ',' << r.reduced
                    << ',' << r.key << ',' << spec.gh << ',' << spec.gw << ',' << r.params << ',' << r.memory_bytes
                    << ',' << r.memory_mb() << ',' << r.flops << ',' << r.gflops() << ',' << r.affinity_flops << ','
                    << r.attention_flops << ',' << b * f.sa_flops << ',' << b * f.rsa_flops << ',' << f.ratio << '\n';
            }
            out << csv.str();
            if (!an_out.empty()) detail::write_file(an_out, detail::commented(detail::echo_config(*an)) + csv.str());
            return kOk;
        }

        if (gd->parsed()) {
            if (gd_count == 0) throw UsageError("--count must be positive");
            save_dataset(gd_out, generate_scenes(gd_seed, gd_count, gd_h, gd_w), gd_seed);
            err << "gen-data: wrote " << gd_count << " scenes of " << gd_h << "x" << gd_w << " to " << gd_out << '\n';
            return kOk;
        }

        if (tr->parsed()) {
            const auto scenes = require_dataset(tro.data, "--data");
            const std::string started = detail::utc_now();
            HmaNet<float> net(tro.net_config(), tro.seed);
            const auto outcome = run_training(net, scenes, tro, err);
            const std::filesystem::path dir = tro.out;
            save_parameters(dir / "params", net);
            const std::string config = detail::echo_config(*tr);
            detail::write_file(dir / "loss.csv", detail::commented(config) + loss_csv(outcome.log));
            const double first = window_loss(outcome.log, false), last = window_loss(outcome.log, true);
            std::ostringstream meta;
            meta << config << std::setprecision(9) << "# initial_loss = " << first << "\n# final_loss = " << last
                 << "\n# parameters = " << net.parameter_count() << '\n';
            std::ostringstream summary;
            summary << std::setprecision(9) << "initial_loss," << first << "\nfinal_loss," << last << "\nratio,"
                    << (first > 0 ? last / first : 0) << '\n';
            if (!tro.eval_data.empty()) {
                const auto eval = evaluate_model(net, load_dataset(tro.eval_data));
                const std::string metrics = summary_csv(eval.summary, scene_class_names());
                detail::write_file(dir / "metrics.csv", detail::commented(config) + metrics);
                summary << metrics;
            }
            meta << "# started = " << started << "\n# finished = " << detail::utc_now() << "\n# seconds = "
                 << std::fixed << std::setprecision(2) << outcome.seconds << '\n';
            detail::write_file(dir / "metadata.txt", meta.str());
            out << summary.str();
            return kOk;
        }

        if (ev->parsed()) {
            HmaNet<float> net(read_checkpoint_config(ev_ckpt), 0);
            load_parameters(std::filesystem::path(ev_ckpt) / "params", net);
            const auto eval = evaluate_model(net, load_dataset(ev_data));
            const std::string metrics = summary_csv(eval.summary, scene_class_names());
            out << metrics;
            if (!ev_out.empty()) detail::write_file(ev_out, detail::commented(detail::echo_config(*ev)) + metrics);
            return kOk;
        }

        if (sw->parsed()) {
            std::ostringstream csv;
            if (sw_what == "complexity") {
                std::vector<ModuleKind> kinds;
                for (const auto& k : detail::parse_list<std::string>(sw_kinds, "--kinds"))
                    kinds.push_back(parse_module_kind(k));
                std::vector<std::pair<std::size_t, std::size_t>> sizes;
                for (auto s : detail::parse_list<std::size_t>(sw_sizes, "--sizes")) sizes.emplace_back(s, s);
                csv << sweep_csv(sweep(kinds, sizes, sw_c, {}, sw_region, sw_region));
            } else {
                const auto scenes = require_dataset(swo.data, "--data");
                const auto held_out = require_dataset(swo.eval_data, "--eval-data");
                auto run_one = [&](const TrainOptions& o) {
                    HmaNet<float> net(o.net_config(), o.seed);
                    run_training(net, scenes, o, err);
                    return evaluate_model(net, held_out).summary;
                };
                csv << std::fixed << std::setprecision(6);
                if (sw_what == "alpha") {
                    csv << "alpha,OA,mIoU,meanF1\n";
                    for (auto a : detail::parse_list<std::size_t>(sw_values, "--values")) {
                        TrainOptions o = swo;
                        o.alpha = a;
                        const auto s = run_one(o);
                        csv << a << ',' << s.oa << ',' << s.miou << ',' << s.mean_f1 << '\n';
                        err << "alpha " << a << " mIoU " << s.miou << '\n';
                    }
                } else {
                    csv << "gh,gw,OA,mIoU,meanF1\n";
                    for (auto [gh, gw] : detail::parse_grids(sw_grids)) {
                        TrainOptions o = swo;
                        o.gh = gh;
                        o.gw = gw;
                        const auto s = run_one(o);
                        csv << gh << ',' << gw << ',' << s.oa << ',' << s.miou << ',' << s.mean_f1 << '\n';
                        err << "grid " << gh << "x" << gw << " mIoU " << s.miou << '\n';
                    }
                }
            }
            out << csv.str();
            if (!sw_out.empty()) detail::write_file(sw_out, detail::commented(detail::echo_config(*sw)) + csv.str());
            return kOk;
        }
    } catch (const Error& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: " << e.kind() << ": " << msg << '\n';
        return exit_code_for(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: format: " << e.what() << '\n';
        return kData;
    } catch (const std::bad_alloc&) {
        err << "error: resource: out of memory\n";
        return kData;
    }
    return kUsage;
}

}  // namespace hma::cli
