#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "adasam/segex.hpp"
#include "fixtures.hpp"

#ifndef ADASAM_CLI_PATH
#error "ADASAM_CLI_PATH must point at the adasam binary"
#endif

using adasam::testing::TempDir;

namespace {

struct RunResult {
    int code = -1;
    std::string output;
};

/// Runs the CLI with stdout and stderr merged.
RunResult run(const std::string& args) {
    const std::string cmd = std::string(ADASAM_CLI_PATH) + " " + args + " 2>&1";
    RunResult r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

nlohmann::json read_json(const std::filesystem::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

}  // namespace

TEST(Cli, HelpListsSubcommands) {
    auto r = run("--help");
    EXPECT_EQ(r.code, 0) << r.output;
    for (const char* sub : {"gen-data", "train", "infer", "prompt", "eval", "timing", "experiment", "ablate", "segex"}) {
        EXPECT_NE(r.output.find(sub), std::string::npos) << sub;
    }
    auto segex = run("segex --help");
    EXPECT_EQ(segex.code, 0);
    for (const char* sub : {"build", "serve", "report", "llm"}) EXPECT_NE(segex.output.find(sub), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run("--no-such-flag").code, 2);
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("train").code, 2);
    EXPECT_EQ(run("experiment --out /tmp/x --preset huge").code, 2);
}

TEST(Cli, MissingDatasetIsAnIoError) {
    TempDir dir("cli_io");
    auto r = run("eval --ckpt " + (dir / "nope").string() + " --data " + (dir / "nothing").string());
    EXPECT_EQ(r.code, 1) << r.output;
    EXPECT_NE(r.output.find("\"error\""), std::string::npos);
}

TEST(Cli, ExperimentEndToEnd) {
    TempDir dir("cli_exp");
    const auto data = (dir / "data").string();
    auto gen = run("gen-data --out " + data + " --n-train 30 --n-val 4 --n-test 6 --size 64 --seed 3");
    ASSERT_EQ(gen.code, 0) << gen.output;
    auto exp = run("-q experiment --data " + data + " --out " + (dir / "exp").string() +
                   " --grid budgets=0,5 seeds=1 --preset desk --epochs 1");
    ASSERT_EQ(exp.code, 0) << exp.output;
    auto table = read_json(dir / "exp" / "table.json");
    ASSERT_EQ(table.at("rows").size(), 2u);
    EXPECT_EQ(table.at("rows")[1].at("budget"), 5);
    EXPECT_TRUE(table.contains("provenance"));
    EXPECT_TRUE(std::filesystem::exists(dir / "exp" / "table.md"));
    EXPECT_NE(exp.output.find("| budget |"), std::string::npos);
}

TEST(Cli, TrainInferAndSegexPipeline) {
    TempDir dir("cli_segex");
    const auto data = (dir / "data").string();
    ASSERT_EQ(run("gen-data --out " + data + " --n-train 12 --n-val 2 --n-test 4 --size 64 --seed 5").code, 0);
    auto train = run("-q train --data " + data + " --out " + (dir / "run").string() +
                     " --preset desk --epochs 1 --budget 4");
    ASSERT_EQ(train.code, 0) << train.output;
    auto infer = run("-q infer --ckpt " + (dir / "run").string() + " --data " + data + " --split test --out " +
                     (dir / "pred").string());
    ASSERT_EQ(infer.code, 0) << infer.output;
    auto prompt = run("-q prompt --ckpt " + (dir / "run").string() + " --image " + data + "/" +
                      read_json(dir / "data" / "manifest.json").at("records")[0].at("image").get<std::string>());
    ASSERT_EQ(prompt.code, 0) << prompt.output;

    const auto session = (dir / "sess").string();
    auto build = run("-q segex build --data " + data + " --split test --pred " + (dir / "pred").string() +
                     " --seed 9 --out " + session);
    ASSERT_EQ(build.code, 0) << build.output;
    EXPECT_TRUE(std::filesystem::exists(session + ".key.sealed"));
    auto llm = run("-q segex llm --session " + session + " --backend mock --mock-score MQ=2");
    ASSERT_EQ(llm.code, 0) << llm.output;
    auto report = run("-q segex report --session " + session + " --out " + (dir / "report.json").string());
    ASSERT_EQ(report.code, 0) << report.output;
    auto rj = read_json(dir / "report.json");
    bool llm_rows = false;
    for (const auto& row : rj.at("rows")) {
        if (row.at("observer") == "llm1" && row.at("complete").get<int>() > 0) {
            llm_rows = true;
            EXPECT_NEAR(row.at("criteria").at("MQ").at("mean").get<double>(), 2.0, 1e-9);
        }
    }
    EXPECT_TRUE(llm_rows);
    // Session files on disk stay blinded.
    std::ifstream in(session + "/session.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    EXPECT_FALSE(adasam::segex::contains_source_marker(text));
}
