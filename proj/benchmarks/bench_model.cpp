#include <benchmark/benchmark.h>

#include "adasam/auto_prompt.hpp"
#include "adasam/model.hpp"
#include "adasam/phantom.hpp"

using namespace adasam;

namespace {

ImageSlice sample_slice() {
    PhantomConfig config;
    config.image_size = 64;
    config.n_train = 1;
    config.n_val = 0;
    config.n_test = 0;
    return generate_phantom_slice(config, 0).first;
}

}  // namespace

static void BM_Encode(benchmark::State& state) {
    torch::set_num_threads(1);
    auto model = make_model(ModelConfig::desk());
    model->eval();
    const auto image = sample_slice();
    for (auto _ : state) benchmark::DoNotOptimize(encode_image(model, image));
}
BENCHMARK(BM_Encode)->Unit(benchmark::kMillisecond);

static void BM_GradCam(benchmark::State& state) {
    torch::set_num_threads(1);
    auto model = make_model(ModelConfig::desk());
    model->eval();
    const auto image = sample_slice();
    for (auto _ : state) benchmark::DoNotOptimize(grad_cam(model, image, SliceClass{3}));
}
BENCHMARK(BM_GradCam)->Unit(benchmark::kMillisecond);

// Prompt generation plus decode: the full per-slice inference path.
static void BM_Segment(benchmark::State& state) {
    torch::set_num_threads(1);
    auto model = make_model(ModelConfig::desk());
    model->eval();
    const auto image = sample_slice();
    const Tau tau(kDefaultTau);
    for (auto _ : state) benchmark::DoNotOptimize(segment(model, image, tau));
}
BENCHMARK(BM_Segment)->Unit(benchmark::kMillisecond);

static void BM_MergeLora(benchmark::State& state) {
    auto model = make_model(ModelConfig::desk());
    for (auto _ : state) {
        state.PauseTiming();
        auto copy = clone_model(model);
        state.ResumeTiming();
        merge_lora(copy);
    }
}
BENCHMARK(BM_MergeLora)->Unit(benchmark::kMillisecond);
