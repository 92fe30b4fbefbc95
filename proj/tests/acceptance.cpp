// Acceptance run: one PASS/FAIL line per criterion on stdout, details on
// stderr. Exit code is 0 unless --strict is given and a criterion failed.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "hma/hma.hpp"

using namespace hma;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 6) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

bool bit_equal(const Tensor<double>& a, const Tensor<double>& b) {
    return a.dims() == b.dims() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

// 1
Verdict gradient_suite(const fs::path& work) {
    const auto t0 = Clock::now();
    const auto rows = run_gradcheck_suite(7, 20, 1e-4);
    const double s = seconds_since(t0);
    std::ofstream csv(work / "gradcheck.csv");
    csv << "name,max_rel_error,worst_seed,stencil5_rel_error,pass\n";
    Verdict v{s < 300.0, ""};
    std::string failed;
    for (const auto& r : rows) {
        csv << r.name << ',' << r.max_rel_error << ',' << r.worst_seed << ',' << r.stencil5_rel_error << ','
            << (r.pass ? "PASS" : "FAIL") << '\n';
        std::cerr << "  gradcheck " << std::left << std::setw(22) << r.name << " max_rel " << fmt(r.max_rel_error, 3)
                  << " stencil5 " << fmt(r.stencil5_rel_error, 3) << (r.pass ? "" : "  <-- over 1e-4") << '\n';
        if (!r.pass) {
            v.pass = false;
            failed += (failed.empty() ? "" : " ") + r.name + "=" + fmt(r.max_rel_error, 3);
        }
    }
    v.detail = std::to_string(rows.size()) + " cases x 20 seeds in " + fmt(s, 3) + " s" +
               (failed.empty() ? "" : "; over tolerance: " + failed);
    return v;
}

// 2
Verdict identity_at_init() {
    std::size_t argmax_rows = 0, token_checks = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(Rng::mix(500, seed));
        CaaParams<double> caa(CaaConfig::for_channels(16, 6, 4), rng);
        CcaParams<double> cca(6, 4, rng);
        auto x = random_normal<double>({2, 16, 4, 4}, rng);
        Tape<double> t;
        auto out = caa_forward(t, t.constant(x), caa, cca, true, true);
        const auto& a = t.value(out.affinity.affinity);
        const auto& r = t.value(out.used_affinity);
        const std::size_t n = a.dims().back();
        for (std::size_t row = 0; row < a.size() / n; ++row) {
            std::size_t ba = 0, br = 0;
            for (std::size_t k = 1; k < n; ++k) {
                if (a[row * n + k] > a[row * n + ba]) ba = k;
                if (r[row * n + k] > r[row * n + br]) br = k;
            }
            if (ba != br) return {false, "row argmax moved at seed " + std::to_string(seed)};
            ++argmax_rows;
        }

        RsaParams<double> rsa(8, rng);
        const PartitionSpec spec{2, 2, 2, 2};
        auto xr = random_normal<double>({2, 8, 4, 4}, rng);
        Tape<double> u;
        Var xg = partition_regions(u, u.constant(xr), spec);
        Var xm1 = merge_regions(u, xg);
        if (!bit_equal(u.value(sparse_self_attention(u, xm1, rsa.stage1, true).tokens), u.value(xm1)))
            return {false, "stage 1 tokens changed at seed " + std::to_string(seed)};
        Var xm2 = merge_regions(u, shuffle_regroup(u, region_attention_block(u, xg, rsa.stage1, true)));
        if (!bit_equal(u.value(sparse_self_attention(u, xm2, rsa.stage2, true).tokens), u.value(xm2)))
            return {false, "stage 2 tokens changed at seed " + std::to_string(seed)};
        token_checks += 2;
    }
    return {true, std::to_string(argmax_rows) + " affinity rows keep their argmax; " + std::to_string(token_checks) +
                      " stage outputs bit-identical to their inputs"};
}

// 3
Verdict complexity_formula() {
    const auto f = rsa_attention_flops(PartitionSpec::from_grid(128, 128, 8, 8), 128, 128, 2048);
    const double want = 34.0 / 65536.0;
    const double rel = std::abs(f.ratio - want) / want;
    const double hw = 128.0 * 128.0;
    const double direct = 2.0 * (1.0 / (64.0 * 64.0) + 1.0 / (256.0 * 256.0)) * hw * hw * 2048.0;
    const bool ok = rel <= 2 * std::numeric_limits<double>::epsilon() && f.rsa_flops == direct &&
                    f.stage1_term + f.stage2_term == f.rsa_flops;
    return {ok, "ratio " + fmt(f.ratio, 17) + " vs 34/65536, rel diff " + fmt(rel, 3)};
}

std::map<std::string, std::array<double, 3>> reference_costs() {
    std::ifstream in(fs::path(HMA_TEST_DATA_DIR) / "reference_costs.csv");
    if (!in) throw FormatError("missing reference_costs.csv fixture", 0);
    std::map<std::string, std::array<double, 3>> out;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (header) {
            header = false;
            continue;
        }
        std::istringstream row(line);
        std::string kind, cell;
        std::getline(row, kind, ',');
        std::array<double, 3> v{};
        for (auto& e : v) {
            std::getline(row, cell, ',');
            e = std::stod(cell);
        }
        out[kind] = v;
    }
    return out;
}

// 4
Verdict table_ratios() {
    const auto t0 = Clock::now();
    const auto sa = analyze(ModuleKind::sa, 1, 2048, 128, 128);
    const auto rsa = analyze(ModuleKind::rsa, 1, 2048, 128, 128);
    const double s = seconds_since(t0);
    const double flop_ratio = rsa.flops / sa.flops;
    const double mem_ratio = static_cast<double>(sa.memory_bytes) / static_cast<double>(rsa.memory_bytes);
    const auto ref = reference_costs();
    const double ref_flop = ref.at("rsa")[2] / ref.at("sa")[2];
    const double ref_mem = ref.at("sa")[1] / ref.at("rsa")[1];

    ComplexityConfig uniform;
    uniform.reduced = 512;
    const auto rsa_uniform = analyze(ModuleKind::rsa, 1, 2048, 128, 128, uniform);
    std::cerr << "  analyzer sa:  params " << sa.params << " memory_mib " << fmt(sa.memory_bytes / 1048576.0)
              << " gflops " << fmt(sa.flops / 1e9) << '\n'
              << "  analyzer rsa: params " << rsa.params << " memory_mib " << fmt(rsa.memory_bytes / 1048576.0)
              << " gflops " << fmt(rsa.flops / 1e9) << '\n'
              << "  reference ratios: flops " << fmt(ref_flop, 4) << " memory " << fmt(ref_mem, 4) << '\n'
              << "  info: rsa at reduced width C/4: flop ratio " << fmt(rsa_uniform.flops / sa.flops, 4)
              << " memory ratio " << fmt(double(sa.memory_bytes) / double(rsa_uniform.memory_bytes), 4) << '\n';
    const bool ok = flop_ratio >= 0.15 && flop_ratio <= 0.31 && mem_ratio >= 14 && mem_ratio <= 26 && s < 10.0;
    return {ok, "RSA/SA GFLOPs " + fmt(flop_ratio, 4) + " in [0.15,0.31], SA/RSA memory " + fmt(mem_ratio, 4) +
                    " in [14,26], " + fmt(s, 3) + " s"};
}

// 5
Verdict sweep_shape(const fs::path& work) {
    const std::vector<std::pair<std::size_t, std::size_t>> sizes{{32, 32}, {64, 64}, {96, 96}, {128, 128}};
    const std::string csv = sweep_csv(sweep({ModuleKind::sa, ModuleKind::rsa}, sizes, 2048));
    std::ofstream(work / "sweep_complexity.csv") << csv;

    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> cols;
    {
        std::istringstream h(line);
        for (std::string c; std::getline(h, c, ',');) cols.push_back(c);
    }
    auto col = [&](const std::string& name) {
        return static_cast<std::size_t>(std::find(cols.begin(), cols.end(), name) - cols.begin());
    };
    std::map<std::string, std::vector<std::array<double, 3>>> series;  // kind -> (HW, affinity, attention)
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::istringstream r(line);
        for (std::string c; std::getline(r, c, ',');) f.push_back(c);
        const double hw = std::stod(f[col("H")]) * std::stod(f[col("W")]);
        series[f[col("kind")]].push_back({hw, std::stod(f[col("affinity_flops")]), std::stod(f[col("attention_flops")])});
    }
    if (series["sa"].size() != 4 || series["rsa"].size() != 4) return {false, "sweep CSV lacks rows"};

    // least-squares fit of affinity = a (HW)^2 through the origin
    double num = 0, den = 0;
    for (const auto& p : series["sa"]) {
        num += p[1] * p[0] * p[0];
        den += p[0] * p[0] * p[0] * p[0];
    }
    const double a = num / den;
    double worst_fit = 0;
    for (const auto& p : series["sa"]) worst_fit = std::max(worst_fit, std::abs(p[1] - a * p[0] * p[0]) / p[1]);

    double worst_growth = 0;
    const auto& rs = series["rsa"];
    for (std::size_t i = 1; i < rs.size(); ++i)
        worst_growth = std::max(worst_growth, (rs[i][2] / rs[0][2]) / (rs[i][0] / rs[0][0]));
    const bool ok = worst_fit <= 0.01 && worst_growth <= 1.0 + 1e-12;
    return {ok, "SA affinity vs (HW)^2 worst deviation " + fmt(worst_fit, 3) +
                    "; RSA attention growth / HW growth max " + fmt(worst_growth, 4)};
}

// 6
Verdict wallclock() {
    const auto sa = wallclock_bench(ModuleKind::sa, 1, 256, 64, 64, 8, 8, 5, 1, 1);
    const auto rsa = wallclock_bench(ModuleKind::rsa, 1, 256, 64, 64, 8, 8, 5, 1, 1);
    const double speedup = sa.median_s / rsa.median_s;
    return {speedup >= 3.0, "SA median " + fmt(sa.median_s, 4) + " s, RSA median " + fmt(rsa.median_s, 4) +
                                " s, speedup " + fmt(speedup, 4) + " (need >= 3)"};
}

double window(const std::vector<TrainLogRow>& log, bool last, std::size_t n = 20) {
    n = std::min(n, log.size());
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += log[last ? log.size() - n + i : i].loss.total;
    return s / static_cast<double>(n);
}

struct RunResult {
    double initial = 0, final = 0, miou = 0, seconds = 0;
};

RunResult train_once(const std::vector<Scene>& train_set, const std::vector<Scene>& held, std::uint64_t seed,
                     bool attention, const LossWeights& weights, const fs::path& log_path) {
    HmaNetConfig nc;
    nc.use_caa = nc.use_cca = nc.use_rsa = attention;
    TrainConfig tc;
    tc.seed = seed;
    tc.loss_weights = weights;
    HmaNet<float> net(nc, seed);
    const auto t0 = Clock::now();
    const auto log = train(net, train_set, tc);
    RunResult r;
    r.initial = window(log, false);
    r.final = window(log, true);
    r.miou = evaluate_model(net, held).summary.miou;
    r.seconds = seconds_since(t0);
    std::ofstream out(log_path);
    out << "iteration,lr,total,main,cls,aux\n" << std::setprecision(9);
    for (const auto& row : log)
        out << row.iteration << ',' << row.lr << ',' << row.loss.total << ',' << row.loss.main << ',' << row.loss.cls
            << ',' << row.loss.aux << '\n';
    return r;
}

struct TrainingData {
    std::vector<Scene> train, held;
};

// 7
Verdict toy_training(const TrainingData& d, const fs::path& work, RunResult& full_seed1) {
    const auto t0 = Clock::now();
    double gap = 0;
    bool converged = true;
    std::ostringstream detail;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto full = train_once(d.train, d.held, seed, true, LossWeights{},
                                     work / ("train_full_seed" + std::to_string(seed) + ".csv"));
        const auto bare = train_once(d.train, d.held, seed, false, LossWeights{},
                                     work / ("train_bare_seed" + std::to_string(seed) + ".csv"));
        if (seed == 1) full_seed1 = full;
        for (const auto* r : {&full, &bare}) converged = converged && r->final < 0.3 * r->initial;
        gap += full.miou - bare.miou;
        std::cerr << "  seed " << seed << ": full loss " << fmt(full.initial, 4) << " -> " << fmt(full.final, 4)
                  << " mIoU " << fmt(full.miou, 4) << " (" << fmt(full.seconds, 3) << " s); bare loss "
                  << fmt(bare.initial, 4) << " -> " << fmt(bare.final, 4) << " mIoU " << fmt(bare.miou, 4) << " ("
                  << fmt(bare.seconds, 3) << " s)\n";
        detail << (seed == 1 ? "" : ", ") << "s" << seed << " loss ratio " << fmt(full.final / full.initial, 3) << "/"
               << fmt(bare.final / bare.initial, 3) << " mIoU " << fmt(full.miou, 4) << "/" << fmt(bare.miou, 4);
    }
    gap /= 3;
    const double s = seconds_since(t0);
    const bool ok = converged && gap >= 0.02 && s < 1800;
    return {ok, "mean mIoU gain " + fmt(gap, 4) + " (need >= 0.02), all final < 0.3 initial: " +
                    (converged ? "yes" : "no") + ", " + fmt(s, 4) + " s; " + detail.str()};
}

// 8
Verdict loss_weights(const TrainingData& d, const fs::path& work, const RunResult& defaults_run) {
    HmaNetConfig nc;
    nc.alpha = 4;
    nc.grid_h = nc.grid_w = 2;
    HmaNet<double> net(nc, 8);
    const Scene* picks[] = {&d.train[0], &d.train[1]};
    const auto batch = make_batch({picks[0], picks[1]});
    Tape<double> t;
    auto out = hmanet_forward(t, t.constant(batch.images.cast<double>()), net, true);
    auto l = hmanet_losses(t, out, batch.labels, LossWeights{}, nc.output_stride());
    const double main = t.value(l.main)[0], cls = t.value(l.cls)[0], aux = t.value(l.aux)[0];
    const bool exact = t.value(l.total)[0] == total_loss(main, cls, aux) &&
                       total_loss(0.7, 0.9, 1.1) == 0.7 + 0.45 + 0.4 * 1.1 && total_loss(1, 1, 1) == 1.0 + 0.5 + 0.4;

    struct Setting {
        const char* name;
        LossWeights w;
    };
    const Setting settings[] = {{"ce", {1, 0, 0}}, {"ce+cls", {1, 0.5, 0}}, {"ce+aux", {1, 0, 0.4}}, {"ce+cls+aux", {1, 0.5, 0.4}}};
    bool converged = true;
    std::ostringstream detail;
    for (const auto& s : settings) {
        const RunResult r = s.w.cls == 0.5 && s.w.aux == 0.4
                                ? defaults_run
                                : train_once(d.train, d.held, 1, true, s.w, work / (std::string("train_loss_") + s.name + ".csv"));
        const bool c = std::isfinite(r.final) && r.final < 0.3 * r.initial;
        converged = converged && c;
        detail << ' ' << s.name << ' ' << fmt(r.initial, 4) << "->" << fmt(r.final, 4) << " mIoU " << fmt(r.miou, 4);
    }
    return {exact && converged, std::string("total_loss exact: ") + (exact ? "yes" : "no") + ";" + detail.str()};
}

// 9
Verdict metric_oracle() {
    Rng rng(9);
    double worst_cross = 0;
    for (int pair = 0; pair < 100; ++pair) {
        const std::size_t k = rng.range(2, 8), h = rng.range(4, 40), w = rng.range(4, 40);
        LabelMap pred({h, w}), truth({h, w});
        for (auto& v : pred.data()) v = static_cast<std::uint8_t>(rng.below(k));
        for (auto& v : truth.data()) v = static_cast<std::uint8_t>(rng.below(k));
        ConfusionMatrix cm(k);
        cm.accumulate(pred, truth);
        std::vector<std::vector<std::uint64_t>> m(k, std::vector<std::uint64_t>(k, 0));
        for (std::size_t i = 0; i < pred.size(); ++i) ++m[truth[i]][pred[i]];
        std::uint64_t trace = 0;
        for (std::size_t c = 0; c < k; ++c) {
            std::uint64_t tp = m[c][c], fp = 0, fn = 0;
            for (std::size_t j = 0; j < k; ++j)
                if (j != c) {
                    fp += m[j][c];
                    fn += m[c][j];
                }
            trace += tp;
            const double p = tp + fp ? double(tp) / double(tp + fp) : 0.0;
            const double r = tp + fn ? double(tp) / double(tp + fn) : 0.0;
            const double f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
            const double j = tp + fp + fn ? double(tp) / double(tp + fp + fn) : 0.0;
            if (f1_score(cm, c).value != f1 || iou(cm, c).value != j)
                return {false, "mismatch at pair " + std::to_string(pair) + " class " + std::to_string(c)};
            worst_cross = std::max(worst_cross, std::abs(f1 - 2 * j / (1 + j)));
        }
        if (overall_accuracy(cm) != double(trace) / double(pred.size()))
            return {false, "OA mismatch at pair " + std::to_string(pair)};
    }
    return {worst_cross <= 1e-12, "100 pairs exact; max |F1 - 2IoU/(1+IoU)| = " + fmt(worst_cross, 3)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hma acceptance run"};
    std::string work = "acceptance_work";
    bool strict = false;
    std::vector<int> only;
    app.add_option("--work", work, "directory for CSV artifacts");
    app.add_flag("--strict", strict, "exit 4 when any criterion fails");
    app.add_option("--only", only, "run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);

    auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
    int failures = 0;
    auto report = [&](int n, const std::string& name, const std::function<Verdict()>& fn) {
        if (!wanted(n)) return;
        const auto t0 = Clock::now();
        Verdict v;
        try {
            v = fn();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        if (!v.pass) ++failures;
        std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << " " << name << ": " << v.detail << " ["
                  << fmt(seconds_since(t0), 4) << " s]" << std::endl;
    };

    report(1, "gradient suite", [&] { return gradient_suite(work); });
    report(2, "identity at init", [] { return identity_at_init(); });
    report(3, "complexity formula", [] { return complexity_formula(); });
    report(4, "efficiency ratios", [] { return table_ratios(); });
    report(5, "complexity scaling", [&] { return sweep_shape(work); });
    report(6, "wallclock speedup", [] { return wallclock(); });

    TrainingData data;
    if (wanted(7) || wanted(8)) {
        data.train = generate_scenes(1, 200, 64, 64);
        data.held = generate_scenes(2, 50, 64, 64);
    }
    RunResult defaults_run;
    report(7, "toy training", [&] { return toy_training(data, work, defaults_run); });
    report(8, "loss weights", [&] {
        if (defaults_run.initial == 0)
            defaults_run = train_once(data.train, data.held, 1, true, LossWeights{}, fs::path(work) / "train_full_seed1.csv");
        return loss_weights(data, work, defaults_run);
    });
    report(9, "metric oracle", [] { return metric_oracle(); });

    std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
              << std::endl;
    return strict && failures ? 4 : 0;
}
