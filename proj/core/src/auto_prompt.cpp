#include "adasam/auto_prompt.hpp"

#include <algorithm>
#include <limits>

#include "adasam/error.hpp"

namespace adasam {

namespace F = torch::nn::functional;

float CamMap::max() const {
    return values.empty() ? 0.0f : *std::max_element(values.begin(), values.end());
}

std::size_t BinaryMap::count() const {
    return static_cast<std::size_t>(std::count(active.begin(), active.end(), std::uint8_t{1}));
}

Tau::Tau(double value) : value_(value) {
    if (!(value > 0.0 && value < 1.0)) {
        throw ValidationError("tau must lie strictly inside (0, 1), got " + std::to_string(value));
    }
}

std::vector<CamMap> cams_from_gradients(const torch::Tensor& features, const torch::Tensor& grads,
                                        int out_height, int out_width) {
    torch::NoGradGuard guard;
    auto weights = grads.mean({2, 3}, /*keepdim=*/true);                       // (B, d, 1, 1)
    auto cam = torch::relu((weights * features).sum(1, /*keepdim=*/true));     // (B, 1, h, w)
    cam = F::interpolate(cam, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{out_height, out_width})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
    cam = cam.squeeze(1).contiguous();
    std::vector<CamMap> out;
    out.reserve(static_cast<std::size_t>(cam.size(0)));
    for (int64_t i = 0; i < cam.size(0); ++i) {
        auto m = cam[i];
        const float lo = m.min().item<float>();
        const float hi = m.max().item<float>();
        torch::Tensor norm;
        if (hi - lo > 1e-12f) {
            norm = (m - lo) / (hi - lo);
        } else if (hi > 0.0f) {
            norm = torch::ones_like(m);
        } else {
            norm = torch::zeros_like(m);
        }
        norm = norm.clamp(0.0, 1.0).contiguous();
        CamMap map;
        map.height = out_height;
        map.width = out_width;
        map.values.assign(norm.data_ptr<float>(), norm.data_ptr<float>() + norm.numel());
        out.push_back(std::move(map));
    }
    return out;
}

namespace {

std::vector<CamMap> cams_for_classes(AdaSam& model, const torch::Tensor& features,
                                     const torch::Tensor& classes) {
    torch::AutoGradMode enable(true);
    auto feats = features.detach().requires_grad_(true);
    auto selected = model->class_logits(feats).gather(1, classes.view({-1, 1})).sum();
    auto grads = torch::autograd::grad({selected}, {feats})[0];
    const int n = model->config().image_size;
    return cams_from_gradients(feats.detach(), grads, n, n);
}

}  // namespace

CamMap grad_cam(AdaSam& model, const ImageSlice& x, SliceClass c) {
    if (c.value < 0 || c.value >= model->config().n_classes) {
        throw ValidationError("class " + std::to_string(c.value) + " out of range");
    }
    auto features = encode_image(model, x);
    return cams_for_classes(model, features, torch::full({1}, c.value, torch::kLong)).front();
}

BinaryMap threshold_cam(const CamMap& cam, const Tau& tau) {
    BinaryMap bin;
    bin.height = cam.height;
    bin.width = cam.width;
    bin.active.assign(cam.values.size(), 0);
    const float peak = cam.max();
    if (!(peak > 0.0f)) return bin;
    const double cut = tau.value() * peak;
    for (std::size_t i = 0; i < cam.values.size(); ++i) {
        bin.active[i] = static_cast<double>(cam.values[i]) >= cut ? 1 : 0;
    }
    return bin;
}

namespace {

template <typename Pred>
std::optional<BBoxPrompt> tight_box(int height, int width, int pad, Pred&& is_active) {
    int x0 = width, y0 = height, x1 = -1, y1 = -1;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            if (is_active(y, x)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
        }
    }
    if (x1 < 0) return std::nullopt;
    pad = std::max(pad, 0);
    return BBoxPrompt{std::max(0, x0 - pad), std::max(0, y0 - pad), std::min(width, x1 + 1 + pad),
                      std::min(height, y1 + 1 + pad)};
}

}  // namespace

std::optional<BBoxPrompt> cam_to_bbox(const BinaryMap& bin, int pad) {
    return tight_box(bin.height, bin.width, pad, [&](int y, int x) { return bin.at(y, x); });
}

std::optional<BBoxPrompt> mask_to_bbox(const LabelMask& mask, int pad) {
    return tight_box(mask.height, mask.width, pad, [&](int y, int x) { return mask.at(y, x) != 0; });
}

namespace {

PromptResult prompt_from_features(AdaSam& model, const torch::Tensor& features, const Tau& tau, int pad) {
    PromptResult result;
    {
        torch::NoGradGuard guard;
        auto p = torch::softmax(model->class_logits(features), -1).select(0, 0).contiguous();
        result.probs.probs.assign(p.data_ptr<float>(), p.data_ptr<float>() + p.numel());
    }
    result.slice_class = SliceClass{result.probs.argmax()};
    if (result.slice_class.value == SliceClass::kNeither) return result;
    auto cam = cams_for_classes(model, features, torch::full({1}, result.slice_class.value, torch::kLong));
    result.box = cam_to_bbox(threshold_cam(cam.front(), tau), pad);
    return result;
}

}  // namespace

PromptResult generate_prompt(AdaSam& model, const ImageSlice& x, const Tau& tau, int pad) {
    auto features = encode_image(model, x);
    return prompt_from_features(model, features, tau, pad);
}

torch::Tensor class_label_offsets(SliceClass c, int n_labels) {
    constexpr float kOff = -1e4f;
    auto offsets = torch::zeros({n_labels});
    const bool vl = c.value == SliceClass::kVLOnly || c.value == SliceClass::kBoth;
    const bool vm = c.value == SliceClass::kVMOnly || c.value == SliceClass::kBoth;
    if (!vl) offsets[static_cast<int>(Label::kVL)] = kOff;
    if (!vm) offsets[static_cast<int>(Label::kVM)] = kOff;
    return offsets;
}

void gate_logits_by_class(torch::Tensor& logits, SliceClass c) {
    torch::NoGradGuard guard;
    logits.add_(class_label_offsets(c, static_cast<int>(logits.size(0))).view({-1, 1, 1}));
}

LabelMask logits_to_mask(const torch::Tensor& logits) {
    auto idx = logits.argmax(0).to(torch::kUInt8).contiguous();
    LabelMask mask(static_cast<int>(logits.size(1)), static_cast<int>(logits.size(2)));
    std::memcpy(mask.labels.data(), idx.data_ptr<std::uint8_t>(), mask.labels.size());
    return mask;
}

LabelMask segment(AdaSam& model, const ImageSlice& x, const Tau& tau, int pad, PromptResult* prompt_out) {
    auto features = encode_image(model, x);
    auto prompt = prompt_from_features(model, features, tau, pad);
    LabelMask mask(x.height, x.width);
    if (prompt.box) {
        auto logits = decode_mask(model, features, encode_prompt(model, *prompt.box), x).select(0, 0).clone();
        gate_logits_by_class(logits, prompt.slice_class);
        mask = logits_to_mask(logits);
    }
    if (prompt_out != nullptr) *prompt_out = std::move(prompt);
    return mask;
}

LabelMask segment_with_box(AdaSam& model, const ImageSlice& x, const BBoxPrompt& box) {
    auto features = encode_image(model, x);
    auto logits = decode_mask(model, features, encode_prompt(model, box), x).select(0, 0);
    return logits_to_mask(logits);
}

}  // namespace adasam
