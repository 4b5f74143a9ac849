#include <gtest/gtest.h>

#include <fstream>

#include "adasam/error.hpp"
#include "adasam/experiments.hpp"
#include "fixtures.hpp"

using namespace adasam;
using adasam::testing::TempDir;

namespace {

BudgetCell cell(int budget, std::uint64_t seed, double ada, double base) {
    BudgetCell c;
    c.budget = budget;
    c.seed = seed;
    c.ada = DscReport::from_slices({{"a", ada, ada}});
    c.baseline = DscReport::from_slices({{"a", base, std::nullopt}});
    return c;
}

TrainConfig quick_train() {
    auto tc = TrainConfig::desk();
    tc.epochs = 1;
    tc.batch_size = 8;
    return tc;
}

}  // namespace

TEST(ExperimentGrid, Validation) {
    ExperimentGrid g;
    EXPECT_NO_THROW(g.validate(200));
    EXPECT_THROW(g.validate(60), ConfigError);
    g.budgets = {-1};
    EXPECT_THROW(g.validate(200), ConfigError);
    g = ExperimentGrid{};
    g.seeds.clear();
    EXPECT_THROW(g.validate(200), ConfigError);
    g = ExperimentGrid{};
    g.ranks = {-2};
    EXPECT_THROW(g.validate(200), ConfigError);
    nlohmann::json j = ExperimentGrid{};
    EXPECT_EQ(j.at("budgets"), (std::vector<int>{0, 5, 50, 100}));
}

TEST(BudgetTable, SummarizesAcrossSeedsInFirstSeenOrder) {
    BudgetTable t;
    t.cells = {cell(5, 1, 0.6, 0.5), cell(0, 1, 0.3, 0.2), cell(5, 2, 0.8, 0.5), cell(0, 2, 0.5, 0.4)};
    t.summarize();
    ASSERT_EQ(t.rows.size(), 2u);
    EXPECT_EQ(t.rows[0].budget, 5);
    EXPECT_NEAR(t.rows[0].ada_overall.mean, 0.7, 1e-12);
    EXPECT_NEAR(t.rows[0].ada_overall.stdev, 0.1, 1e-12);
    EXPECT_NEAR(t.rows[0].base_vl.mean, 0.5, 1e-12);
    EXPECT_EQ(t.rows[0].base_vl.stdev, 0.0);
    EXPECT_EQ(t.rows[1].budget, 0);
    EXPECT_NEAR(t.rows[1].ada_vm.mean, 0.4, 1e-12);
    EXPECT_EQ(t.rows[1].base_vm.n, 0u);
    const auto md = t.to_markdown();
    EXPECT_NE(md.find("| 0.300(0.100) | - |"), std::string::npos) << md;
    EXPECT_NE(md.find("| 5 | 0.700(0.100)"), std::string::npos);
    EXPECT_EQ(t.to_json().at("rows").size(), 2u);
    EXPECT_EQ(t.to_json().at("cells").size(), 4u);
}

TEST(RankReference, KnownRanks) {
    EXPECT_DOUBLE_EQ(*reference_rank_dsc(2), 0.84);
    EXPECT_DOUBLE_EQ(*reference_rank_dsc(4), 0.85);
    EXPECT_DOUBLE_EQ(*reference_rank_dsc(6), 0.86);
    EXPECT_DOUBLE_EQ(*reference_rank_dsc(8), 0.91);
    EXPECT_FALSE(reference_rank_dsc(16).has_value());
}

class TinyExperiment : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("exp");
        manifest_ = new DatasetManifest(build_dataset(adasam::testing::small_phantoms(16, 2, 4, 3), dir_->path() / "data"));
    }
    static void TearDownTestSuite() {
        delete manifest_;
        delete dir_;
    }
    static TempDir* dir_;
    static DatasetManifest* manifest_;
};

TempDir* TinyExperiment::dir_ = nullptr;
DatasetManifest* TinyExperiment::manifest_ = nullptr;

TEST_F(TinyExperiment, BudgetSweepWritesTableAndCells) {
    ExperimentGrid grid;
    grid.budgets = {0, 4};
    grid.seeds = {1};
    int callbacks = 0;
    ExperimentOptions options;
    options.out_dir = dir_->path() / "sweep";
    options.on_cell = [&](const BudgetCell&) { ++callbacks; };
    auto table = label_budget_experiment(grid, *manifest_, ModelConfig::desk(), quick_train(), options);
    EXPECT_EQ(callbacks, 2);
    ASSERT_EQ(table.rows.size(), 2u);
    for (const auto& c : table.cells) {
        EXPECT_GE(c.ada.overall.mean, 0.0);
        EXPECT_LE(c.ada.overall.mean, 1.0);
        EXPECT_GT(c.train_seconds, 0.0);
    }
    std::ifstream in(options.out_dir / "table.json");
    auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j.at("rows").size(), 2u);
    EXPECT_EQ(j.at("grid").at("budgets"), grid.budgets);
    EXPECT_TRUE(std::filesystem::exists(options.out_dir / "cells" / "budget4_seed1.json"));
    grid.budgets = {17};
    EXPECT_THROW(label_budget_experiment(grid, *manifest_, ModelConfig::desk(), quick_train()), ConfigError);
}

TEST_F(TinyExperiment, RankAblationReportsParameterCounts) {
    auto tc = quick_train();
    tc.label_budget = 4;
    auto table = lora_rank_ablation({2, 8}, {1}, *manifest_, ModelConfig::desk(), tc);
    ASSERT_EQ(table.rows.size(), 2u);
    EXPECT_EQ(table.budget, 4);
    EXPECT_LT(table.rows[0].params.trainable, table.rows[1].params.trainable);
    EXPECT_EQ(table.rows[0].params.total - table.rows[0].params.trainable,
              table.rows[1].params.total - table.rows[1].params.trainable);
    EXPECT_DOUBLE_EQ(*table.rows[1].reference_dsc, 0.91);
    EXPECT_GT(table.rows[0].trainable_fraction, 0.0);
    EXPECT_LT(table.rows[0].trainable_fraction, 1.0);
    EXPECT_NE(table.to_markdown().find("0.91"), std::string::npos);
    EXPECT_EQ(table.to_json().at("rows").size(), 2u);
}

TEST_F(TinyExperiment, TimingCoversEveryImage) {
    auto model = make_model(ModelConfig::desk());
    std::vector<std::filesystem::path> paths;
    for (const auto* r : manifest_->split(Split::kTest)) paths.push_back(manifest_->image_path(*r));
    auto report = timing_report(model, paths, Tau(0.49), kDefaultPad, 3);
    ASSERT_EQ(report.samples_ms.size(), paths.size());
    EXPECT_EQ(report.repeat_means_ms.size(), 3u);
    EXPECT_LE(report.min_ms, report.median_ms);
    EXPECT_LE(report.median_ms, report.max_ms);
    EXPECT_GT(report.mean_ms, 0.0);
    EXPECT_GE(report.repeat_variance_ms2, 0.0);
    EXPECT_EQ(report.to_json().at("samples_ms").size(), paths.size());
    EXPECT_THROW(timing_report(model, paths, Tau(0.49), kDefaultPad, 0), ConfigError);
    EXPECT_THROW(timing_report(model, {dir_->path() / "missing.png"}, Tau(0.49)), IoError);
}
