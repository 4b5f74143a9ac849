#include "adasam/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "adasam/error.hpp"

namespace adasam {

namespace {

struct DecodedGray {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;
};

DecodedGray read_gray8(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&image, path.string().c_str()) == 0) {
        throw IoError(std::string("cannot read png (") + image.message + ")", path.string());
    }
    image.format = PNG_FORMAT_GRAY;
    DecodedGray out;
    out.height = static_cast<int>(image.height);
    out.width = static_cast<int>(image.width);
    out.data.resize(PNG_IMAGE_SIZE(image));
    if (png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr) == 0) {
        std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot decode png (" + msg + ")", path.string());
    }
    return out;
}

void write_png(const std::filesystem::path& path, int height, int width, std::uint32_t format,
               const std::uint8_t* data) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = format;
    if (png_image_write_to_file(&image, path.string().c_str(), 0, data, 0, nullptr) == 0) {
        throw IoError(std::string("cannot write png (") + image.message + ")", path.string());
    }
}

}  // namespace

SliceClass derive_slice_class(const LabelMask& mask) {
    bool has_vl = false;
    bool has_vm = false;
    for (auto v : mask.labels) {
        has_vl = has_vl || v == static_cast<std::uint8_t>(Label::kVL);
        has_vm = has_vm || v == static_cast<std::uint8_t>(Label::kVM);
        if (has_vl && has_vm) break;
    }
    return SliceClass{(has_vl ? 1 : 0) + (has_vm ? 2 : 0)};
}

void validate_mask(const LabelMask& mask) {
    if (mask.labels.size() != static_cast<std::size_t>(mask.height) * mask.width) {
        throw ValidationError("mask storage does not match its shape");
    }
    for (auto v : mask.labels) {
        if (v >= kNumLabels) {
            throw ValidationError("mask label out of range: " + std::to_string(v));
        }
    }
}

void save_image_png(const std::filesystem::path& path, const ImageSlice& image) {
    std::vector<std::uint8_t> bytes(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
        bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    write_png(path, image.height, image.width, PNG_FORMAT_GRAY, bytes.data());
}

ImageSlice load_image_png(const std::filesystem::path& path) {
    auto raw = read_gray8(path);
    ImageSlice image(raw.height, raw.width);
    for (std::size_t i = 0; i < raw.data.size(); ++i) {
        image.pixels[i] = static_cast<float>(raw.data[i]) / 255.0f;
    }
    return image;
}

void save_mask_png(const std::filesystem::path& path, const LabelMask& mask) {
    validate_mask(mask);
    write_png(path, mask.height, mask.width, PNG_FORMAT_GRAY, mask.labels.data());
}

LabelMask load_mask_png(const std::filesystem::path& path) {
    auto raw = read_gray8(path);
    LabelMask mask(raw.height, raw.width);
    mask.labels = std::move(raw.data);
    validate_mask(mask);
    return mask;
}

void save_rgb_png(const std::filesystem::path& path, int height, int width,
                  std::span<const std::uint8_t> rgb) {
    if (rgb.size() != static_cast<std::size_t>(height) * width * 3) {
        throw ConfigError("rgb buffer does not match image shape");
    }
    write_png(path, height, width, PNG_FORMAT_RGB, rgb.data());
}

std::vector<std::uint8_t> encode_rgb_png(int height, int width, std::span<const std::uint8_t> rgb) {
    if (rgb.size() != static_cast<std::size_t>(height) * width * 3) {
        throw ConfigError("rgb buffer does not match image shape");
    }
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (png_image_write_to_memory(&image, nullptr, &size, 0, rgb.data(), 0, nullptr) == 0) {
        throw Error(std::string("png size query failed: ") + image.message);
    }
    std::vector<std::uint8_t> out(size);
    if (png_image_write_to_memory(&image, out.data(), &size, 0, rgb.data(), 0, nullptr) == 0) {
        throw Error(std::string("png encoding failed: ") + image.message);
    }
    out.resize(size);
    return out;
}

std::vector<std::uint8_t> render_overlay_rgb(const ImageSlice* image, const LabelMask& mask) {
    if (image != nullptr && (image->height != mask.height || image->width != mask.width)) {
        throw ConfigError("overlay image and mask shapes differ");
    }
    std::vector<std::uint8_t> rgb(mask.size() * 3, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        float base = image != nullptr ? std::clamp(image->pixels[i], 0.0f, 1.0f) * 255.0f : 0.0f;
        float r = base, g = base, b = base;
        // Half-transparent tint on labelled pixels.
        if (mask.labels[i] == static_cast<std::uint8_t>(Label::kVL)) {
            r = 0.5f * r;
            g = 0.5f * g;
            b = 0.5f * b + 127.5f;
        } else if (mask.labels[i] == static_cast<std::uint8_t>(Label::kVM)) {
            r = 0.5f * r;
            g = 0.5f * g + 127.5f;
            b = 0.5f * b;
        }
        if (image == nullptr && mask.labels[i] != 0) {
            r *= 2.0f;
            g *= 2.0f;
            b *= 2.0f;
        }
        rgb[3 * i + 0] = static_cast<std::uint8_t>(std::clamp(std::lround(r), 0L, 255L));
        rgb[3 * i + 1] = static_cast<std::uint8_t>(std::clamp(std::lround(g), 0L, 255L));
        rgb[3 * i + 2] = static_cast<std::uint8_t>(std::clamp(std::lround(b), 0L, 255L));
    }
    return rgb;
}

}  // namespace adasam
