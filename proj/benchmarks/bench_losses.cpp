#include <benchmark/benchmark.h>

#include <random>

#include "adasam/auto_prompt.hpp"
#include "adasam/losses.hpp"

using namespace adasam;

static void BM_FocalLoss(benchmark::State& state) {
    const auto batch = state.range(0);
    torch::manual_seed(1);
    auto probs = torch::softmax(torch::randn({batch, 4}), 1);
    auto targets = torch::randint(0, 4, {batch}, torch::kLong);
    FocalParams params;
    for (auto _ : state) benchmark::DoNotOptimize(focal_loss(probs, targets, params).sum().item<float>());
    state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_FocalLoss)->Arg(8)->Arg(64);

static void BM_DiceLoss(benchmark::State& state) {
    const auto side = state.range(0);
    torch::manual_seed(2);
    auto probs = torch::softmax(torch::randn({8, 3, side, side}), 1);
    auto targets = torch::randint(0, 3, {8, side, side}, torch::kLong);
    for (auto _ : state) benchmark::DoNotOptimize(dice_loss(probs, targets).sum().item<float>());
}
BENCHMARK(BM_DiceLoss)->Arg(64)->Arg(256);

static void BM_DiceLossBackward(benchmark::State& state) {
    torch::manual_seed(3);
    auto logits = torch::randn({8, 3, 64, 64}).set_requires_grad(true);
    auto targets = torch::randint(0, 3, {8, 64, 64}, torch::kLong);
    for (auto _ : state) {
        auto loss = dice_loss(torch::softmax(logits, 1), targets).sum();
        loss.backward();
        logits.mutable_grad().zero_();
    }
}
BENCHMARK(BM_DiceLossBackward);

static void BM_CamToBox(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    CamMap cam{side, side, std::vector<float>(static_cast<std::size_t>(side) * side)};
    for (auto& v : cam.values) v = u(rng);
    const Tau tau(0.5);
    for (auto _ : state) benchmark::DoNotOptimize(cam_to_bbox(threshold_cam(cam, tau), kDefaultPad));
}
BENCHMARK(BM_CamToBox)->Arg(64)->Arg(256);
