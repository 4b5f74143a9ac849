#include "adasam/losses.hpp"

#include <cmath>

#include "adasam/error.hpp"

namespace adasam {

void FocalParams::validate(int n_classes) const {
    if (static_cast<int>(alpha.size()) != n_classes) {
        throw ConfigError("focal alpha must have one weight per class");
    }
    for (double a : alpha) {
        if (!(a > 0.0) || !std::isfinite(a)) throw ConfigError("focal alpha weights must be finite and > 0");
    }
    if (!(gamma_focus >= 0.0) || !std::isfinite(gamma_focus)) {
        throw ConfigError("focal gamma must be finite and >= 0");
    }
}

torch::Tensor focal_loss(const torch::Tensor& probs, const torch::Tensor& targets, const FocalParams& params) {
    params.validate(static_cast<int>(probs.size(1)));
    auto p = probs.clamp(kFocalClampLow, 1.0 - kFocalClampLow);
    auto k = torch::one_hot(targets, probs.size(1)).to(p.scalar_type());
    auto alpha = torch::tensor(params.alpha, p.options());
    auto terms = alpha * torch::pow(1.0 - p, params.gamma_focus) * k * torch::log(p);
    return -terms.sum(1);
}

double focal_loss(std::span<const float> probs, int target, const FocalParams& params) {
    auto p = torch::tensor(std::vector<float>(probs.begin(), probs.end())).unsqueeze(0);
    auto t = torch::full({1}, target, torch::kLong);
    return focal_loss(p, t, params).item<double>();
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& targets) {
    const auto n_labels = probs.size(1);
    auto onehot = torch::one_hot(targets, n_labels).permute({0, 3, 1, 2}).to(probs.scalar_type());
    auto fg_p = probs.slice(1, 1).flatten(2);   // (B, L-1, HW)
    auto fg_y = onehot.slice(1, 1).flatten(2);
    auto inter = (fg_p * fg_y).sum(2);
    auto p_sum = fg_p.sum(2);
    auto y_sum = fg_y.sum(2);
    auto per_label = 1.0 - 2.0 * inter / (p_sum + y_sum + kDiceEps);
    auto present = torch::logical_or(y_sum > 0, p_sum >= kDiceAbsentMass).to(probs.scalar_type()).detach();
    auto n_present = present.sum(1);
    auto total = (per_label * present).sum(1);
    return torch::where(n_present > 0, total / n_present.clamp_min(1.0), torch::zeros_like(total));
}

double dice_loss(const torch::Tensor& probs, const LabelMask& gt) {
    auto t = mask_to_tensor(gt).unsqueeze(0);
    auto p = probs.dim() == 3 ? probs.unsqueeze(0) : probs;
    return dice_loss(p, t).item<double>();
}

torch::Tensor mtl_loss(const torch::Tensor& cls_loss, const std::optional<torch::Tensor>& seg_loss,
                       const LossWeights& w) {
    if (!seg_loss) return cls_loss;
    return cls_loss + w.lambda_seg * *seg_loss;
}

double mtl_loss(double cls_loss, std::optional<double> seg_loss, const LossWeights& w) {
    return seg_loss ? cls_loss + w.lambda_seg * *seg_loss : cls_loss;
}

torch::Tensor mask_to_tensor(const LabelMask& mask) {
    auto t = torch::empty({mask.height, mask.width}, torch::kUInt8);
    std::memcpy(t.data_ptr<std::uint8_t>(), mask.labels.data(), mask.labels.size());
    return t.to(torch::kLong);
}

}  // namespace adasam
