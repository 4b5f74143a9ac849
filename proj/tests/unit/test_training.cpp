#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "adasam/error.hpp"
#include "adasam/training.hpp"
#include "fixtures.hpp"

using namespace adasam;
using adasam::testing::TempDir;

namespace {

std::vector<SliceClass> random_classes(std::mt19937_64& rng, int n, const std::vector<int>& allowed) {
    std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
    std::vector<SliceClass> out(static_cast<std::size_t>(n));
    for (auto& c : out) c = SliceClass{allowed[pick(rng)]};
    return out;
}

std::vector<Sample> in_memory_samples(int n, std::uint64_t seed = 3) {
    std::vector<Sample> out;
    int k = 0;
    for (auto& [image, mask] : adasam::testing::phantom_slices(n, seed)) {
        Sample s;
        s.id = "m" + std::to_string(k++);
        s.slice_class = derive_slice_class(mask);
        s.image = std::move(image);
        s.mask = std::move(mask);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST(SelectLabeled, CoversEveryPresentClassOverSeededDraws) {
    std::mt19937_64 rng(100);
    std::uniform_int_distribution<int> size(20, 200);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        // Random subsets of the four classes, some of them rare.
        std::vector<int> allowed{0, 1, 2, 3};
        if (seed % 3 == 1) allowed = {1, 3, 3, 3};
        if (seed % 3 == 2) allowed = {0, 2, 3, 3, 3, 3, 3};
        auto classes = random_classes(rng, size(rng), allowed);
        std::set<int> present;
        for (auto c : classes) present.insert(c.value);
        for (int budget : {static_cast<int>(present.size()), 5, 17}) {
            auto chosen = select_labeled(classes, budget, seed);
            ASSERT_EQ(static_cast<int>(chosen.size()), budget);
            std::set<int> covered;
            for (int i : chosen) covered.insert(classes[static_cast<std::size_t>(i)].value);
            EXPECT_EQ(covered, present) << "seed " << seed << " budget " << budget;
            EXPECT_EQ(std::set<int>(chosen.begin(), chosen.end()).size(), chosen.size());
            EXPECT_EQ(select_labeled(classes, budget, seed), chosen);
        }
    }
}

TEST(SelectLabeled, RareClassWinsWhenBudgetIsShort) {
    std::vector<SliceClass> classes(50, SliceClass{3});
    classes[7] = SliceClass{2};
    classes[20] = SliceClass{1};
    classes[21] = SliceClass{1};
    auto chosen = select_labeled(classes, 1, 4);
    ASSERT_EQ(chosen.size(), 1u);
    EXPECT_EQ(chosen[0], 7);
}

TEST(SelectLabeled, EdgeBudgets) {
    std::mt19937_64 rng(1);
    auto classes = random_classes(rng, 30, {0, 1, 2, 3});
    EXPECT_TRUE(select_labeled(classes, 0, 1).empty());
    EXPECT_EQ(select_labeled(classes, kBudgetAll, 1).size(), 30u);
    EXPECT_EQ(select_labeled(classes, 30, 1).size(), 30u);
    // Different seeds generally draw different sets.
    EXPECT_NE(select_labeled(classes, 10, 1), select_labeled(classes, 10, 2));
}

TEST(InverseFrequencyAlpha, NormalizedToMeanOne) {
    std::vector<SliceClass> classes{{0}, {1}, {1}, {3}, {3}, {3}, {3}};
    auto alpha = inverse_frequency_alpha(classes, 4);
    ASSERT_EQ(alpha.size(), 4u);
    double sum = 0;
    for (double a : alpha) sum += a;
    EXPECT_NEAR(sum / 4.0, 1.0, 1e-12);
    // Class 2 is absent and counts as one slice, like class 0.
    EXPECT_DOUBLE_EQ(alpha[0], alpha[2]);
    EXPECT_NEAR(alpha[1] / alpha[3], 2.0, 1e-12);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate(10));
    c.label_budget = 11;
    EXPECT_THROW(c.validate(10), ConfigError);
    c = TrainConfig{};
    c.epochs = 0;
    EXPECT_THROW(c.validate(10), ConfigError);
    c = TrainConfig{};
    c.tau = 1.0;
    EXPECT_THROW(c.validate(10), ValidationError);
    nlohmann::json j = TrainConfig::desk();
    auto back = j.get<TrainConfig>();
    EXPECT_DOUBLE_EQ(back.learning_rate, 1e-3);
    EXPECT_EQ(back.label_budget, kBudgetAll);
}

TEST(TrainStep, FiniteLossesAndParametersMove) {
    torch::set_num_threads(1);
    auto model = make_model(ModelConfig::desk());
    auto config = TrainConfig::desk();
    auto optimizer = make_optimizer(model, config);
    auto samples = in_memory_samples(6);
    std::vector<BatchItem> batch;
    for (std::size_t i = 0; i < samples.size(); ++i) batch.push_back({&samples[i], i % 2 == 0});
    TrainState state;
    auto before = model->cls_head->weight.detach().clone();
    auto stats = train_step(model, *optimizer, batch, state, config, FocalParams{});
    EXPECT_TRUE(std::isfinite(stats.cls_loss));
    ASSERT_TRUE(stats.seg_loss.has_value());
    EXPECT_TRUE(std::isfinite(*stats.seg_loss));
    EXPECT_NEAR(stats.total_loss, stats.cls_loss + *stats.seg_loss, 1e-5);
    EXPECT_GT(stats.seg_count, 0);
    EXPECT_EQ(state.step, 1);
    EXPECT_FALSE(torch::equal(before, model->cls_head->weight));
}

TEST(TrainStep, UnlabeledBatchLeavesDecoderUntouched) {
    torch::set_num_threads(1);
    auto model = make_model(ModelConfig::desk());
    auto config = TrainConfig::desk();
    auto optimizer = make_optimizer(model, config);
    auto samples = in_memory_samples(4);
    std::vector<BatchItem> batch;
    for (auto& s : samples) batch.push_back({&s, false});
    std::vector<torch::Tensor> decoder_before;
    for (const auto& p : model->decoder->parameters()) decoder_before.push_back(p.detach().clone());
    TrainState state;
    auto stats = train_step(model, *optimizer, batch, state, config, FocalParams{});
    EXPECT_FALSE(stats.seg_loss.has_value());
    EXPECT_EQ(stats.seg_count, 0);
    EXPECT_DOUBLE_EQ(stats.total_loss, stats.cls_loss);
    auto params = model->decoder->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        EXPECT_TRUE(torch::equal(params[i], decoder_before[i]));
        EXPECT_TRUE(!params[i].grad().defined() || params[i].grad().abs().sum().item<double>() == 0.0);
    }
}

TEST(TrainStep, SegmentationGradientReachesSharedAdapters) {
    torch::set_num_threads(1);
    auto samples = in_memory_samples(4);
    std::vector<BatchItem> batch;
    for (auto& s : samples) batch.push_back({&s, true});
    // Adapter gradients with and without the Dice term; a tiny learning rate
    // keeps the weights effectively fixed.
    auto adapter_grads = [&](double lambda_seg) {
        auto model = make_model(ModelConfig::desk());
        auto config = TrainConfig::desk();
        config.learning_rate = 1e-12;
        config.weights.lambda_seg = lambda_seg;
        config.clip_norm = 1e12;
        auto optimizer = make_optimizer(model, config);
        TrainState state;
        train_step(model, *optimizer, batch, state, config, FocalParams{});
        std::vector<torch::Tensor> grads;
        for (auto& layer : model->lora_layers()) grads.push_back(layer->lora_b.grad().clone());
        return grads;
    };
    auto with_seg = adapter_grads(1.0);
    auto cls_only = adapter_grads(0.0);
    double diff = 0.0;
    for (std::size_t i = 0; i < with_seg.size(); ++i) diff += (with_seg[i] - cls_only[i]).abs().sum().item<double>();
    EXPECT_GT(diff, 1e-8);
}

TEST(TrainStep, EmptyBatchIsRejected) {
    auto model = make_model(ModelConfig::desk());
    auto config = TrainConfig::desk();
    auto optimizer = make_optimizer(model, config);
    TrainState state;
    EXPECT_THROW(train_step(model, *optimizer, {}, state, config, FocalParams{}), ConfigError);
}

TEST(TrainStep, TwoPassRecordsPostUpdateLoss) {
    torch::set_num_threads(1);
    auto model = make_model(ModelConfig::desk());
    auto config = TrainConfig::desk();
    config.two_pass = true;
    auto optimizer = make_optimizer(model, config);
    auto samples = in_memory_samples(3);
    std::vector<BatchItem> batch;
    for (auto& s : samples) batch.push_back({&s, true});
    TrainState state;
    auto stats = train_step(model, *optimizer, batch, state, config, FocalParams{});
    ASSERT_TRUE(stats.cls_loss_after.has_value());
    EXPECT_TRUE(std::isfinite(*stats.cls_loss_after));
}

class FitTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("fit");
        manifest_ = new DatasetManifest(build_dataset(adasam::testing::small_phantoms(24, 4, 4, 11), dir_->path()));
    }
    static void TearDownTestSuite() {
        delete manifest_;
        delete dir_;
    }
    static TempDir* dir_;
    static DatasetManifest* manifest_;
};

TempDir* FitTest::dir_ = nullptr;
DatasetManifest* FitTest::manifest_ = nullptr;

TEST_F(FitTest, OneEpochProducesReportAndCheckpoint) {
    auto model = make_model(ModelConfig::desk());
    auto config = TrainConfig::desk();
    config.epochs = 1;
    config.label_budget = 5;
    TempDir out("fit_out");
    int epochs_seen = 0;
    FitOptions options;
    options.out_dir = out.path();
    options.on_epoch = [&](const EpochEntry&) { ++epochs_seen; };
    auto result = fit(model, *manifest_, config, options);
    EXPECT_EQ(epochs_seen, 1);
    EXPECT_EQ(result.report.labeled_indices.size(), 5u);
    EXPECT_EQ(result.report.best_epoch, 1);
    EXPECT_GE(result.report.best_val_dsc, 0.0);
    EXPECT_TRUE(std::filesystem::exists(out / "checkpoint" / "config.json"));
    EXPECT_TRUE(std::filesystem::exists(out / "report.json"));
    ASSERT_TRUE(result.best_model);
}

TEST_F(FitTest, DeterministicForEqualSeeds) {
    auto config = TrainConfig::desk();
    config.epochs = 1;
    config.label_budget = 5;
    auto a = make_model(ModelConfig::desk());
    auto b = make_model(ModelConfig::desk());
    auto ra = fit(a, *manifest_, config);
    auto rb = fit(b, *manifest_, config);
    ASSERT_EQ(ra.report.steps.size(), rb.report.steps.size());
    for (std::size_t i = 0; i < ra.report.steps.size(); ++i) {
        EXPECT_EQ(ra.report.steps[i].total_loss, rb.report.steps[i].total_loss);
    }
    EXPECT_EQ(ra.report.labeled_ids, rb.report.labeled_ids);
}

TEST_F(FitTest, BudgetBeyondTrainSplitIsConfigError) {
    auto model = make_model(ModelConfig::desk());
    auto config = TrainConfig::desk();
    config.label_budget = 25;
    EXPECT_THROW(fit(model, *manifest_, config), ConfigError);
}

TEST_F(FitTest, BudgetZeroNeverTrainsTheDecoder) {
    auto model = make_model(ModelConfig::desk());
    std::vector<torch::Tensor> before;
    for (const auto& p : model->decoder->parameters()) before.push_back(p.detach().clone());
    auto config = TrainConfig::desk();
    config.epochs = 1;
    config.label_budget = 0;
    auto result = fit(model, *manifest_, config);
    for (const auto& s : result.report.steps) EXPECT_EQ(s.seg_count, 0);
    auto after = model->decoder->parameters();
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(torch::equal(before[i], after[i]));
}
