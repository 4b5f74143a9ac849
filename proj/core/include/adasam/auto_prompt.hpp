#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "adasam/image.hpp"
#include "adasam/model.hpp"

namespace adasam {

/// Class activation map, H x W, values in [0, 1].
struct CamMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    float max() const;
};

struct BinaryMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> active;

    bool at(int y, int x) const { return active[static_cast<std::size_t>(y) * width + x] != 0; }
    std::size_t count() const;
};

/// Threshold as a fraction of the CAM maximum, strictly inside (0, 1).
class Tau {
public:
    explicit Tau(double value);
    double value() const { return value_; }

private:
    double value_;
};

inline constexpr double kDefaultTau = 0.5;
inline constexpr int kDefaultPad = 4;

/// CAM from raw (B, d, h, w) features and their gradients: ReLU of the
/// gradient-weighted channel sum, bilinearly upsampled to H x W and min-max
/// normalized per slice. An all-zero map stays all-zero.
std::vector<CamMap> cams_from_gradients(const torch::Tensor& features, const torch::Tensor& grads,
                                        int out_height, int out_width);

/// GradCAM for class c, tapped at the encoder output (the last block after
/// its final norm). Throws ValidationError for c outside [0, n_classes).
CamMap grad_cam(AdaSam& model, const ImageSlice& x, SliceClass c);

/// Active iff cam >= tau * max(cam). Empty iff cam is identically zero.
BinaryMap threshold_cam(const CamMap& cam, const Tau& tau);

/// Tight half-open box over active pixels, grown by pad on every side and
/// clipped to the image. nullopt when nothing is active.
std::optional<BBoxPrompt> cam_to_bbox(const BinaryMap& bin, int pad);

/// Tight box over all muscle pixels of a mask (used as the oracle prompt).
std::optional<BBoxPrompt> mask_to_bbox(const LabelMask& mask, int pad);

struct PromptResult {
    std::optional<BBoxPrompt> box;
    SliceClass slice_class;
    ClassProbs probs;
};

/// Classify, then CAM -> threshold -> box for the predicted class. Returns no
/// box when the predicted class is 0 or the CAM is empty.
PromptResult generate_prompt(AdaSam& model, const ImageSlice& x, const Tau& tau, int pad = kDefaultPad);

/// Additive per-label offsets of shape (n_labels): 0 for background and for
/// muscles the slice class includes, a large negative value for the rest.
torch::Tensor class_label_offsets(SliceClass c, int n_labels);

/// Suppresses, in place, the (n_labels, H, W) logits of labels that the slice
/// class says are absent.
void gate_logits_by_class(torch::Tensor& logits, SliceClass c);

/// Per-pixel argmax over (n_labels, H, W) logits; ties go to the lowest label.
LabelMask logits_to_mask(const torch::Tensor& logits);

/// Full self-prompted segmentation: prompt, decode, class-gated argmax. With
/// no prompt the prediction is all background.
LabelMask segment(AdaSam& model, const ImageSlice& x, const Tau& tau, int pad = kDefaultPad,
                  PromptResult* prompt_out = nullptr);

/// Decode with a caller-chosen box and plain argmax (no classifier involvement).
LabelMask segment_with_box(AdaSam& model, const ImageSlice& x, const BBoxPrompt& box);

}  // namespace adasam
