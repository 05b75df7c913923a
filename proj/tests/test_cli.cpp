#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "cli.hpp"
#include "flowvos/data_io.hpp"
#include "flowvos/model.hpp"

using namespace flowvos;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "flowvos");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("flowvos_test_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_files(const fs::path& dir, const std::string& extension) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == extension;
    return n;
}

std::size_t count_lines(const std::string& s) {
    std::size_t n = 0;
    for (char c : s) n += c == '\n';
    return n;
}

} // namespace

TEST(Cli, UsageErrorsExitWithOne) {
    EXPECT_EQ(run({}).code, cli::kUsage);
    EXPECT_EQ(run({"bogus"}).code, cli::kUsage);
    EXPECT_EQ(run({"synth", "--frames", "3"}).code, cli::kUsage); // --out and --seed missing
    EXPECT_EQ(run({"--help"}).code, cli::kOk);
}

TEST(Cli, SynthWritesSequences) {
    const fs::path dir = temp_dir("synth");
    const auto r = run({"synth", "--out", (dir / "one").string(), "--frames", "4", "--objects", "2", "--seed", "3",
                        "--distractors"});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const Sequence seq = load_sequence(dir / "one");
    EXPECT_EQ(seq.frames.size(), 4u);
    EXPECT_EQ(seq.meta.objects, 2u);
    ASSERT_EQ(run({"synth", "--out", (dir / "many").string(), "--sequences", "3", "--seed", "9"}).code, cli::kOk);
    EXPECT_EQ(list_sequences(dir / "many").size(), 3u);
}

TEST(Cli, EvalOfIdenticalDirectoriesIsPerfect) {
    const fs::path dir = temp_dir("eval");
    ASSERT_EQ(run({"synth", "--out", (dir / "seq").string(), "--frames", "4", "--seed", "1"}).code, cli::kOk);
    const auto r = run({"eval", "--pred", (dir / "seq").string(), "--gt", (dir / "seq").string(), "--report",
                        (dir / "report.json").string(), "--frames-csv", (dir / "frames.csv").string()});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const std::string json = slurp(dir / "report.json");
    EXPECT_NE(json.find("\"J&F\": 1.0"), std::string::npos) << json;
    EXPECT_EQ(count_lines(slurp(dir / "frames.csv")), 4u); // header + frames 1..3
}

TEST(Cli, EvalReportsMissingPredictionsAsDataErrors) {
    const fs::path dir = temp_dir("eval_missing");
    ASSERT_EQ(run({"synth", "--out", (dir / "seq").string(), "--frames", "3", "--seed", "1"}).code, cli::kOk);
    fs::create_directories(dir / "pred");
    const auto r = run({"eval", "--pred", (dir / "pred").string(), "--gt", (dir / "seq").string(), "--report",
                        (dir / "r.json").string()});
    EXPECT_EQ(r.code, cli::kData);
    EXPECT_NE(r.err.find("00000.pgm"), std::string::npos) << r.err;
}

TEST(Cli, TrainThenRunWritesOneMaskPerFrame) {
    const fs::path dir = temp_dir("train_run");
    ASSERT_EQ(run({"synth", "--out", (dir / "data").string(), "--sequences", "2", "--frames", "5", "--seed", "4"}).code,
              cli::kOk);
    ASSERT_EQ(run({"synth", "--out", (dir / "seq").string(), "--frames", "10", "--seed", "40"}).code, cli::kOk);
    std::ofstream(dir / "cfg.txt") << "seed = 5\ntrain.epochs = 7\ntrain.samples_per_epoch = 2\n";
    const auto t = run({"train", "--data", (dir / "data").string(), "--out", (dir / "m.ckpt").string(), "--config",
                        (dir / "cfg.txt").string(), "--epochs", "1", "--fusion", "concat"});
    ASSERT_EQ(t.code, cli::kOk) << t.err;
    const Model m = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(m.config.train_epochs, 1u); // flag beats file
    EXPECT_EQ(m.config.train_samples, 2u);
    EXPECT_EQ(m.config.fusion_mode, FusionMode::concat);

    const auto r = run({"run", "--seq", (dir / "seq").string(), "--ckpt", (dir / "m.ckpt").string(), "--out",
                        (dir / "masks").string()});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    EXPECT_EQ(count_files(dir / "masks", ".pgm"), 10u);
    EXPECT_EQ(count_lines(slurp(dir / "masks" / "timing.csv")), 11u);
    const auto e = run({"eval", "--pred", (dir / "masks").string(), "--gt", (dir / "seq").string(), "--report",
                        (dir / "r.json").string()});
    EXPECT_EQ(e.code, cli::kOk) << e.err;
}

TEST(Cli, ErrorsMapToExitCodes) {
    const fs::path dir = temp_dir("errors");
    EXPECT_EQ(run({"train", "--data", (dir / "nothing").string(), "--out", (dir / "m.ckpt").string(), "--seed", "1"})
                  .code,
              cli::kData);
    auto r = run({"train", "--data", dir.string(), "--out", (dir / "m.ckpt").string(), "--seed", "1", "--set",
                  "learner.bogus=3"});
    EXPECT_EQ(r.code, cli::kUsage);
    EXPECT_NE(r.err.find("learner.bogus"), std::string::npos) << r.err;
    EXPECT_EQ(run({"train", "--data", dir.string(), "--out", (dir / "m.ckpt").string()}).code, cli::kUsage);

    ASSERT_EQ(run({"synth", "--out", (dir / "seq").string(), "--frames", "3", "--seed", "2"}).code, cli::kOk);
    std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
    r = run({"run", "--seq", (dir / "seq").string(), "--ckpt", (dir / "bad.ckpt").string(), "--out",
             (dir / "out").string()});
    EXPECT_EQ(r.code, cli::kData);
    EXPECT_NE(r.err.find("bad.ckpt"), std::string::npos) << r.err;

    // A non-finite flow value is a numerical failure.
    RunConfig cfg;
    cfg.seed = 3;
    cfg.has_seed = true;
    Model model = Model::create(cfg);
    save_checkpoint(dir / "m.ckpt", model);
    {
        std::fstream flo(dir / "seq" / "flows" / "00001.flo", std::ios::in | std::ios::out | std::ios::binary);
        const float nan = std::numeric_limits<float>::quiet_NaN();
        flo.seekp(12 + 5 * 8);
        flo.write(reinterpret_cast<const char*>(&nan), sizeof(nan));
    }
    r = run({"run", "--seq", (dir / "seq").string(), "--ckpt", (dir / "m.ckpt").string(), "--out",
             (dir / "out").string()});
    EXPECT_EQ(r.code, cli::kNumerical) << r.err;
}

TEST(Cli, AblateWritesThreeRowsAndBaselineIgnoresFlow) {
    const fs::path dir = temp_dir("ablate");
    for (const char* split : {"train", "test"}) {
        ASSERT_EQ(run({"synth", "--out", (dir / "data" / split).string(), "--sequences", "2", "--frames", "4",
                       "--seed", split == std::string("train") ? "10" : "20", "--distractors"})
                      .code,
                  cli::kOk);
    }
    const std::vector<std::string> common{"--seed", "6", "--epochs", "1", "--samples", "2"};
    auto args = std::vector<std::string>{"ablate", "--data", (dir / "data").string(), "--out",
                                         (dir / "a.csv").string()};
    args.insert(args.end(), common.begin(), common.end());
    const auto r = run(args);
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const std::string csv = slurp(dir / "a.csv");
    EXPECT_EQ(count_lines(csv), 4u);
    EXPECT_EQ(csv.rfind("mode,J,F,J&F\n", 0), 0u);
    EXPECT_NE(csv.find("\nnone,"), std::string::npos);
    EXPECT_NE(csv.find("\nconcat,"), std::string::npos);
    EXPECT_NE(csv.find("\nattention,"), std::string::npos);
    const std::string table = slurp(dir / "a.txt");
    EXPECT_EQ(count_lines(table), 4u);
    EXPECT_NE(table.find("Baseline"), std::string::npos);

    // Replace every flow file with zeros: the baseline row must not move.
    for (const char* split : {"train", "test"}) {
        for (const auto& seq : list_sequences(dir / "data" / split)) {
            for (const auto& e : fs::directory_iterator(seq / "flows")) {
                FlowField f = read_flo(e.path());
                write_flo(e.path(), FlowField::zeros(f.width, f.height));
            }
        }
    }
    args[4] = (dir / "b.csv").string();
    ASSERT_EQ(run(args).code, cli::kOk);
    auto first_row = [](const std::string& s) {
        const auto b = s.find('\n') + 1;
        return s.substr(b, s.find('\n', b) - b);
    };
    EXPECT_EQ(first_row(slurp(dir / "b.csv")), first_row(csv));
    EXPECT_EQ(first_row(csv).rfind("none,", 0), 0u);

    EXPECT_EQ(run({"ablate", "--data", (dir / "data" / "train").string(), "--out", (dir / "c.csv").string(), "--seed",
                   "1"})
                  .code,
              cli::kData);
}
