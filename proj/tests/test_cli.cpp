#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "hma/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "hma");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = hma::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("hma_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, HelpExitsZero) {
    const auto r = invoke({"train", "--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("--iters"), std::string::npos);
}

TEST(Cli, UnknownSubcommandIsUsageError) {
    const auto r = invoke({"frobnicate"});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(lines(r.err), 1u);
    EXPECT_EQ(r.err.rfind("error: usage: ", 0), 0u);
}

TEST(Cli, UnknownFlagIsUsageError) {
    const auto r = invoke({"analyze", "--bogus", "3"});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(lines(r.err), 1u);
}

TEST(Cli, AnalyzeReportsFormulaRatio) {
    const auto r = invoke({"analyze", "--kind", "rsa", "--h", "128", "--w", "128", "--c", "2048", "--gh", "8", "--gw", "8"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream in(r.out);
    std::string line, header, row;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (header.empty())
            header = line;
        else
            row = line;
    }
    EXPECT_EQ(header.rfind("kind,", 0), 0u);
    EXPECT_EQ(row.rfind("rsa,", 0), 0u);
    const auto last = row.substr(row.rfind(',') + 1);
    EXPECT_NEAR(std::stod(last), 34.0 / 65536.0, 1e-15);
}

TEST(Cli, AnalyzeRejectsUnknownKind) {
    EXPECT_EQ(invoke({"analyze", "--kind", "aspp"}).code, 1);
}

TEST(Cli, GradcheckSingleOp) {
    const auto r = invoke({"gradcheck", "--op", "relu", "--seeds", "3"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("relu,"), std::string::npos);
    EXPECT_NE(r.out.find(",PASS"), std::string::npos);
    EXPECT_EQ(invoke({"gradcheck", "--op", "nope"}).code, 1);
}

TEST(Cli, GenDataTrainEvalRoundTrip) {
    const auto data = scratch("data"), ck = scratch("ck"), ck2 = scratch("ck2");
    ASSERT_EQ(invoke({"gen-data", "--out", data.string(), "--count", "4", "--h", "32", "--w", "32"}).code, 0);
    EXPECT_TRUE(fs::exists(data / "manifest.txt"));

    const std::vector<std::string> train{"train", "--data", data.string(), "--iters", "3", "--batch", "2",
                                         "--alpha", "4", "--crop", "16", "--gh", "2", "--gw", "2"};
    auto args = train;
    args.insert(args.end(), {"--out", ck.string(), "--eval-data", data.string()});
    auto r = invoke(args);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(ck / "params" / "manifest.txt"));
    EXPECT_TRUE(fs::exists(ck / "loss.csv"));
    EXPECT_TRUE(fs::exists(ck / "metrics.csv"));
    EXPECT_NE(slurp(ck / "metadata.txt").find("alpha = 4"), std::string::npos);

    // identical configuration gives identical parameters
    args = train;
    args.insert(args.end(), {"--out", ck2.string()});
    ASSERT_EQ(invoke(args).code, 0);
    for (const auto& e : fs::directory_iterator(ck / "params"))
        EXPECT_EQ(slurp(e.path()), slurp(ck2 / "params" / e.path().filename())) << e.path();

    r = invoke({"eval", "--checkpoint", ck.string(), "--data", data.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("mIoU,"), std::string::npos);

    fs::remove_all(data);
    fs::remove_all(ck);
    fs::remove_all(ck2);
}

TEST(Cli, ConfigFileWithFlagOverride) {
    const auto data = scratch("cfgdata"), out = scratch("cfgout");
    ASSERT_EQ(invoke({"gen-data", "--out", data.string(), "--count", "2", "--h", "32", "--w", "32"}).code, 0);
    const auto cfg = fs::temp_directory_path() / "hma_cli_run.cfg";
    {
        std::ofstream f(cfg);
        f << "# toy run\ndata = " << data.string() << "\niters = 50\nbatch = 2\nalpha = 4\ncrop = 16\ngh = 2\ngw = 2\n";
    }
    auto r = invoke({"train", "--config", cfg.string(), "--iters", "2", "--out", out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(slurp(out / "metadata.txt").find("iters = 2"), std::string::npos);
    const auto loss = slurp(out / "loss.csv");
    EXPECT_NE(loss.find("# iters = 2"), std::string::npos);
    EXPECT_NE(loss.find("iteration,lr,total,main,cls,aux\n0,"), std::string::npos);

    {
        std::ofstream f(cfg);
        f << "colour = blue\n";
    }
    EXPECT_EQ(invoke({"train", "--config", cfg.string(), "--out", out.string()}).code, 1);
    fs::remove_all(data);
    fs::remove_all(out);
    fs::remove(cfg);
}

TEST(Cli, MissingDataIsDataError) {
    const auto r = invoke({"train", "--data", "/nonexistent/hma", "--out", scratch("nodata").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(lines(r.err), 1u);
    EXPECT_EQ(invoke({"eval", "--checkpoint", "/nonexistent/ck", "--data", "/nonexistent/hma"}).code, 2);
}

TEST(Cli, DivergenceExitsThree) {
    const auto data = scratch("divdata");
    ASSERT_EQ(invoke({"gen-data", "--out", data.string(), "--count", "2", "--h", "32", "--w", "32"}).code, 0);
    const auto r = invoke({"train", "--data", data.string(), "--out", scratch("divout").string(), "--iters", "30",
                           "--batch", "2", "--lr", "1e9", "--alpha", "4", "--crop", "16", "--gh", "2", "--gw", "2"});
    EXPECT_EQ(r.code, 3);
    EXPECT_EQ(r.err.rfind("error: divergence: ", 0), 0u);
    fs::remove_all(data);
    fs::remove_all(scratch("divout"));
}

TEST(Cli, SweepComplexityCsv) {
    const auto r = invoke({"sweep", "complexity", "--sizes", "32,64", "--kinds", "sa,rsa", "--c", "256"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::size_t rows = 0;
    std::istringstream in(r.out);
    for (std::string line; std::getline(in, line);)
        if (!line.empty() && line[0] != '#') ++rows;
    EXPECT_EQ(rows, 1u + 4u);
}

TEST(Cli, BenchEmitsJsonLines) {
    const auto r = invoke({"bench", "--kind", "both", "--c", "8", "--h", "8", "--w", "8", "--gh", "2", "--gw", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("\"kind\":\"sa\""), std::string::npos);
    EXPECT_NE(r.out.find("\"kind\":\"rsa\""), std::string::npos);
    EXPECT_NE(r.out.find("speedup_sa_over_rsa"), std::string::npos);
}
