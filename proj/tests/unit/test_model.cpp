#include <gtest/gtest.h>

#include <random>

#include "adasam/checkpoint.hpp"
#include "adasam/error.hpp"
#include "adasam/model.hpp"
#include "fixtures.hpp"

using namespace adasam;
using adasam::testing::phantom_slices;
using adasam::testing::TempDir;

namespace {

/// Fills every LoRA B factor with noise, as if the adapters had been trained.
void perturb_adapters(AdaSam& model, std::uint64_t seed) {
    torch::NoGradGuard guard;
    torch::manual_seed(seed);
    for (auto& layer : model->lora_layers()) layer->lora_b.copy_(0.05 * torch::randn_like(layer->lora_b));
}

struct Outputs {
    torch::Tensor logits;
    torch::Tensor masks;
};

Outputs run(AdaSam& model, const ImageSlice& image, const BBoxPrompt& box) {
    auto features = encode_image(model, image);
    torch::NoGradGuard guard;
    return {model->class_logits(features), decode_mask(model, features, encode_prompt(model, box), image)};
}

double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) { return (a - b).abs().max().item<double>(); }

}  // namespace

TEST(LoraLinear, FreshAdapterIsExactNoOp) {
    torch::manual_seed(3);
    LoraLinear layer(16, 8, 4, 8.0);
    auto x = torch::randn({5, 16});
    auto with = layer->forward(x);
    layer->set_adapter_enabled(false);
    auto without = layer->forward(x);
    EXPECT_LE(max_abs_diff(with, without), 1e-6);
    EXPECT_EQ(layer->lora_b.abs().sum().item<double>(), 0.0);
}

TEST(LoraLinear, MergeFoldsScaledProduct) {
    torch::manual_seed(4);
    LoraLinear layer(6, 3, 2, 4.0);
    {
        torch::NoGradGuard guard;
        layer->lora_b.copy_(torch::randn_like(layer->lora_b));
    }
    auto x = torch::randn({4, 6});
    auto before = layer->forward(x).detach();
    auto expected_weight = (layer->base->weight + 2.0 * torch::matmul(layer->lora_b, layer->lora_a)).detach();
    layer->merge();
    EXPECT_LE(max_abs_diff(layer->base->weight, expected_weight), 1e-6);
    EXPECT_LE(max_abs_diff(layer->forward(x), before), 1e-5);
    EXPECT_THROW(layer->merge(), StateError);
}

TEST(LoraModel, ZeroInitAdaptersLeaveOutputsUnchanged) {
    auto model = make_model(ModelConfig::desk());
    model->eval();
    auto slices = phantom_slices(3);
    const auto box = BBoxPrompt{8, 8, 40, 40};
    for (const auto& [image, mask] : slices) {
        auto on = run(model, image, box);
        model->set_lora_enabled(false);
        auto off = run(model, image, box);
        model->set_lora_enabled(true);
        EXPECT_LE(max_abs_diff(on.logits, off.logits), 1e-6);
        EXPECT_LE(max_abs_diff(on.masks, off.masks), 1e-6);
    }
}

TEST(LoraModel, MergedModelMatchesAdapterModelOnTenSlices) {
    auto model = make_model(ModelConfig::desk());
    model->eval();
    perturb_adapters(model, 5);
    auto merged = clone_model(model);
    merged->eval();
    merge_lora(merged);
    EXPECT_TRUE(merged->lora_merged());
    auto slices = phantom_slices(10, 9);
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> corner(0, 30), extent(8, 33);
    for (const auto& [image, mask] : slices) {
        const int x0 = corner(rng), y0 = corner(rng);
        const BBoxPrompt box{x0, y0, x0 + extent(rng), y0 + extent(rng)};
        auto a = run(model, image, box);
        auto b = run(merged, image, box);
        EXPECT_LE(max_abs_diff(a.logits, b.logits), 1e-5);
        EXPECT_LE(max_abs_diff(a.masks, b.masks), 1e-5);
    }
    EXPECT_THROW(merge_lora(merged), StateError);
}

TEST(LoraModel, PerturbedAdaptersChangeOutputs) {
    auto model = make_model(ModelConfig::desk());
    model->eval();
    auto image = phantom_slices(1)[0].first;
    auto before = run(model, image, BBoxPrompt{4, 4, 60, 60});
    perturb_adapters(model, 6);
    auto after = run(model, image, BBoxPrompt{4, 4, 60, 60});
    EXPECT_GT(max_abs_diff(before.logits, after.logits), 1e-6);
}

TEST(LoraModel, TrainableCountGrowsWithRank) {
    std::int64_t previous = -1;
    std::int64_t total_r0 = 0;
    for (int r : {0, 1, 2, 4, 6, 8, 16}) {
        auto c = ModelConfig::desk();
        c.lora_rank = r;
        auto model = make_model(c);
        auto count = count_parameters(model);
        EXPECT_GT(count.trainable, previous) << "rank " << r;
        previous = count.trainable;
        if (r == 0) total_r0 = count.total;
        // Each adapted projection adds r * (in + out) parameters.
        const std::int64_t d = c.embed_dim;
        EXPECT_EQ(count.total - total_r0, static_cast<std::int64_t>(c.depth) * 2 * r * (d + d));
    }
}

TEST(LoraModel, TrainableFractionBelowFortyPercentAtRankEight) {
    ModelConfig c;  // full default size
    ASSERT_EQ(c.lora_rank, 8);
    auto model = make_model(c);
    auto count = count_parameters(model);
    const double fraction = static_cast<double>(count.trainable) / static_cast<double>(count.total);
    EXPECT_LT(fraction, 0.40);
    EXPECT_GT(fraction, 0.0);
}

TEST(LoraModel, BaseEncoderIsFrozen) {
    auto model = make_model(ModelConfig::desk());
    for (const auto& item : model->encoder->named_parameters(true)) {
        const bool adapter = item.key().find("lora_") != std::string::npos;
        EXPECT_EQ(item.value().requires_grad(), adapter) << item.key();
    }
    for (const auto& p : model->decoder->parameters()) EXPECT_TRUE(p.requires_grad());
    for (const auto& p : model->cls_head->parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(Model, ShapesAndFiniteness) {
    auto c = ModelConfig::desk();
    auto model = make_model(c);
    model->eval();
    auto image = phantom_slices(1)[0].first;
    auto features = encode_image(model, image);
    EXPECT_EQ(features.sizes(), (std::vector<int64_t>{1, c.embed_dim, c.grid(), c.grid()}));
    auto probs = classify(model, features);
    ASSERT_EQ(probs.probs.size(), 4u);
    double sum = 0;
    for (float p : probs.probs) {
        EXPECT_GE(p, 0.0f);
        sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-5);
    auto masks = decode_mask(model, features, encode_prompt(model, BBoxPrompt{10, 10, 30, 50}), image);
    EXPECT_EQ(masks.sizes(), (std::vector<int64_t>{1, c.n_labels, c.image_size, c.image_size}));
    EXPECT_TRUE(torch::isfinite(masks).all().item<bool>());
}

TEST(Model, BatchMatchesSingleSlices) {
    auto model = make_model(ModelConfig::desk());
    model->eval();
    auto slices = phantom_slices(3);
    std::vector<const ImageSlice*> ptrs;
    for (const auto& s : slices) ptrs.push_back(&s.first);
    torch::NoGradGuard guard;
    auto batch = model->encode(to_batch(ptrs, 64));
    for (int i = 0; i < 3; ++i) {
        auto single = model->encode(to_batch(slices[i].first, 64));
        EXPECT_LE(max_abs_diff(batch[i], single[0]), 1e-5);
    }
}

TEST(Model, DistinctBoxesGiveDistinctPromptEmbeddings) {
    auto model = make_model(ModelConfig::desk());
    auto a = encode_prompt(model, BBoxPrompt{0, 0, 32, 32});
    auto b = encode_prompt(model, BBoxPrompt{32, 32, 64, 64});
    auto c = encode_prompt(model, BBoxPrompt{0, 0, 32, 32});
    EXPECT_EQ(a.tokens.sizes(), (std::vector<int64_t>{1, 2, 64}));
    EXPECT_GT(max_abs_diff(a.tokens, b.tokens), 1e-3);
    EXPECT_EQ(max_abs_diff(a.tokens, c.tokens), 0.0);
    EXPECT_EQ(a.inside.sum().item<double>(), 32.0 * 32.0);
}

TEST(Model, RejectsDegenerateAndOutOfBoundsBoxes) {
    auto model = make_model(ModelConfig::desk());
    EXPECT_THROW(encode_prompt(model, BBoxPrompt{10, 10, 10, 20}), ValidationError);
    EXPECT_THROW(encode_prompt(model, BBoxPrompt{10, 20, 20, 5}), ValidationError);
    EXPECT_THROW(encode_prompt(model, BBoxPrompt{-1, 0, 20, 20}), ValidationError);
    EXPECT_THROW(encode_prompt(model, BBoxPrompt{0, 0, 65, 20}), ValidationError);
    EXPECT_NO_THROW(encode_prompt(model, BBoxPrompt::full_image(64, 64)));
}

TEST(Model, RejectsWrongImageSize) {
    auto model = make_model(ModelConfig::desk());
    ImageSlice wrong(32, 32);
    EXPECT_THROW(encode_image(model, wrong), ConfigError);
}

TEST(Model, ConfigValidation) {
    auto c = ModelConfig::desk();
    c.patch_size = 7;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ModelConfig::desk();
    c.lora_rank = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ModelConfig::desk();
    nlohmann::json j = c;
    EXPECT_EQ(j.get<ModelConfig>().embed_dim, c.embed_dim);
    EXPECT_DOUBLE_EQ(ModelConfig{}.effective_alpha(), 16.0);
}

TEST(Model, SameSeedSameWeights) {
    auto a = make_model(ModelConfig::desk());
    auto b = make_model(ModelConfig::desk());
    auto pb = b->named_parameters(true);
    for (const auto& item : a->named_parameters(true)) {
        EXPECT_TRUE(torch::equal(item.value(), pb[item.key()])) << item.key();
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir dir("ckpt");
    auto model = make_model(ModelConfig::desk());
    perturb_adapters(model, 8);
    save_checkpoint(model, dir.path(), {{"note", "x"}});
    auto loaded = load_checkpoint(dir.path());
    auto params = loaded->named_parameters(true);
    for (const auto& item : model->named_parameters(true)) {
        EXPECT_TRUE(torch::equal(item.value(), params[item.key()])) << item.key();
        EXPECT_EQ(item.value().requires_grad(), params[item.key()].requires_grad()) << item.key();
    }
    auto buffers = loaded->named_buffers(true);
    for (const auto& item : model->named_buffers(true)) {
        EXPECT_TRUE(torch::equal(item.value(), buffers[item.key()])) << item.key();
    }
    EXPECT_EQ(read_checkpoint_extra(dir.path()).at("note"), "x");
}

TEST(Checkpoint, PreservesMergeState) {
    TempDir dir("ckpt_merged");
    auto model = make_model(ModelConfig::desk());
    perturb_adapters(model, 9);
    merge_lora(model);
    save_checkpoint(model, dir.path());
    auto loaded = load_checkpoint(dir.path());
    EXPECT_TRUE(loaded->lora_merged());
    EXPECT_THROW(merge_lora(loaded), StateError);
    model->eval();
    loaded->eval();
    auto image = phantom_slices(1)[0].first;
    auto a = run(model, image, BBoxPrompt{5, 5, 50, 50});
    auto b = run(loaded, image, BBoxPrompt{5, 5, 50, 50});
    EXPECT_EQ(max_abs_diff(a.masks, b.masks), 0.0);
}

TEST(Checkpoint, MissingDirectoryIsIoError) {
    EXPECT_THROW(load_checkpoint("/nonexistent/adasam/ckpt"), IoError);
}
