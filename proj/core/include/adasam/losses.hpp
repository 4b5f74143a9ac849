#pragma once

#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "adasam/image.hpp"

namespace adasam {

/// Focal loss parameters: per-class weights alpha_c and focusing exponent.
struct FocalParams {
    std::vector<double> alpha{1.0, 1.0, 1.0, 1.0};
    double gamma_focus = 2.0;

    void validate(int n_classes) const;
};

/// Weight on the segmentation term of the multitask objective.
struct LossWeights {
    double lambda_seg = 1.0;
};

inline constexpr double kFocalClampLow = 1e-7;
inline constexpr double kDiceEps = 1e-6;
/// A label counts as absent from the prediction when its soft mass is below
/// half a pixel.
inline constexpr double kDiceAbsentMass = 0.5;

/// Per-sample focal loss: -sum_c alpha_c (1 - p_c)^gamma k_c log(p_c) with k
/// one-hot and p clamped to [1e-7, 1 - 1e-7]. probs: (B, C); targets: (B,) long.
/// Returns (B,). Differentiable in probs.
torch::Tensor focal_loss(const torch::Tensor& probs, const torch::Tensor& targets, const FocalParams& params);

/// Scalar convenience overload.
double focal_loss(std::span<const float> probs, int target, const FocalParams& params);

/// Soft Dice loss per sample: mean over foreground labels of
/// 1 - 2 sum(p*y) / (sum p + sum y + eps). Labels absent from both ground
/// truth and predicted mass are skipped; a sample with every label skipped
/// scores 0. probs: (B, L, H, W) softmax output; targets: (B, H, W) long.
/// Returns (B,).
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& targets);

/// Scalar convenience overload on a single probability map and mask.
double dice_loss(const torch::Tensor& probs, const LabelMask& gt);

/// cls + lambda * seg; the segmentation term is dropped when absent.
torch::Tensor mtl_loss(const torch::Tensor& cls_loss, const std::optional<torch::Tensor>& seg_loss,
                       const LossWeights& w);
double mtl_loss(double cls_loss, std::optional<double> seg_loss, const LossWeights& w);

/// (H, W) long tensor of labels.
torch::Tensor mask_to_tensor(const LabelMask& mask);

}  // namespace adasam
