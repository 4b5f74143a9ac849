#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace adasam {

/// Grayscale slice, row-major, intensities in [0, 1].
struct ImageSlice {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    ImageSlice() = default;
    ImageSlice(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0.0f) {}

    float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return pixels.size(); }
};

/// Pixel labels for the two annotated muscles.
enum class Label : std::uint8_t { kBackground = 0, kVL = 1, kVM = 2 };

inline constexpr int kNumLabels = 3;

/// Per-pixel labels in {0, 1, 2}, same layout as ImageSlice.
struct LabelMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> labels;

    LabelMask() = default;
    LabelMask(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

    std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return labels.size(); }

    bool operator==(const LabelMask&) const = default;
};

/// Slice-level class: 0 neither muscle, 1 VL only, 2 VM only, 3 both.
struct SliceClass {
    int value = 0;

    static constexpr int kNeither = 0;
    static constexpr int kVLOnly = 1;
    static constexpr int kVMOnly = 2;
    static constexpr int kBoth = 3;
    static constexpr int kCount = 4;

    bool operator==(const SliceClass&) const = default;
};

/// Presence-set encoding of the slice class. Class 3 means both muscles are
/// present; a plain max over pixel labels could never produce it.
SliceClass derive_slice_class(const LabelMask& mask);

/// Throws ValidationError if any label is outside {0,1,2}.
void validate_mask(const LabelMask& mask);

// 8-bit grayscale PNG codec. Images are quantized as round(255 * v).
void save_image_png(const std::filesystem::path& path, const ImageSlice& image);
ImageSlice load_image_png(const std::filesystem::path& path);

// Masks store raw label values 0/1/2 as 8-bit gray.
void save_mask_png(const std::filesystem::path& path, const LabelMask& mask);
LabelMask load_mask_png(const std::filesystem::path& path);

/// RGB8 PNG, interleaved rows.
void save_rgb_png(const std::filesystem::path& path, int height, int width,
                  std::span<const std::uint8_t> rgb);

/// In-memory PNG encoding, used by the rating service and LLM client.
std::vector<std::uint8_t> encode_rgb_png(int height, int width, std::span<const std::uint8_t> rgb);

/// Colour overlay of a mask on an image (VL blue, VM green). With no image,
/// the mask is drawn on black.
std::vector<std::uint8_t> render_overlay_rgb(const ImageSlice* image, const LabelMask& mask);

}  // namespace adasam
