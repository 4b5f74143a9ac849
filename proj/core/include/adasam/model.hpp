#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "adasam/image.hpp"

namespace adasam {

/// Architecture and LoRA settings. Defaults are the full mini model; see
/// desk() for the reduced preset used by the experiment harnesses.
struct ModelConfig {
    int image_size = 256;
    int patch_size = 16;
    int embed_dim = 192;
    int depth = 6;
    int heads = 6;
    int mlp_ratio = 4;
    int n_classes = 4;
    int n_labels = 3;
    int lora_rank = 8;
    /// <= 0 selects the conventional alpha = 2r.
    double lora_alpha = -1.0;
    int decoder_depth = 2;
    /// Fixed distance-decay attention bias in the encoder: head h subtracts
    /// locality * 2^-h * (token distance in patches) from its logits. 0
    /// disables it.
    double attn_locality = 2.0;
    /// Dense box prior added to foreground logits: +inside within the box,
    /// -outside beyond it.
    double box_prior_inside = 2.0;
    double box_prior_outside = 4.0;
    std::uint64_t seed = 0;

    int grid() const { return image_size / patch_size; }
    double effective_alpha() const { return lora_alpha > 0.0 ? lora_alpha : 2.0 * lora_rank; }

    void validate() const;

    /// 64x64 input, 8x8 patches, d = 64, depth 4. Trains in seconds on one core.
    static ModelConfig desk();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Axis-aligned box in half-open pixel coordinates [min, max).
struct BBoxPrompt {
    int x_min = 0;
    int y_min = 0;
    int x_max = 0;
    int y_max = 0;

    int width() const { return x_max - x_min; }
    int height() const { return y_max - y_min; }
    bool contains(int y, int x) const { return x >= x_min && x < x_max && y >= y_min && y < y_max; }
    bool operator==(const BBoxPrompt&) const = default;

    static BBoxPrompt full_image(int height, int width) { return {0, 0, width, height}; }
};

void to_json(nlohmann::json& j, const BBoxPrompt& b);
void from_json(const nlohmann::json& j, BBoxPrompt& b);

/// Throws ValidationError unless 0 <= min < max <= size on both axes.
void validate_box(const BBoxPrompt& box, int height, int width);

/// Class probabilities for one slice.
struct ClassProbs {
    std::vector<float> probs;

    /// Lowest index wins ties.
    int argmax() const;
};

/// Linear layer with an optional rank-r adapter: y = W x + b + (alpha/r) B A x.
/// A starts small-gaussian and B at zero, so a fresh adapter is an exact no-op.
class LoraLinearImpl : public torch::nn::Module {
public:
    LoraLinearImpl(int64_t in_features, int64_t out_features, int rank, double alpha);

    torch::Tensor forward(const torch::Tensor& x);

    /// Folds the adapter into the base weight. Throws StateError if already merged.
    void merge();
    bool merged() const { return merged_; }
    void set_merged_flag(bool merged) { merged_ = merged; }

    void set_adapter_enabled(bool enabled) { adapter_enabled_ = enabled; }
    int rank() const { return rank_; }
    double scaling() const { return scaling_; }

    torch::nn::Linear base{nullptr};
    torch::Tensor lora_a;  // r x in
    torch::Tensor lora_b;  // out x r

private:
    int rank_;
    double scaling_;
    bool merged_ = false;
    bool adapter_enabled_ = true;
};
TORCH_MODULE(LoraLinear);

/// Multi-head self-attention with LoRA on the query and value projections.
class EncoderAttentionImpl : public torch::nn::Module {
public:
    EncoderAttentionImpl(int dim, int heads, int rank, double alpha);
    /// bias: optional (heads, N, N) additive attention bias.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& bias = {});

    LoraLinear q{nullptr};
    torch::nn::Linear k{nullptr};
    LoraLinear v{nullptr};
    torch::nn::Linear proj{nullptr};

private:
    int heads_;
};
TORCH_MODULE(EncoderAttention);

class EncoderBlockImpl : public torch::nn::Module {
public:
    EncoderBlockImpl(int dim, int heads, int mlp_ratio, int rank, double alpha);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& bias = {});

    torch::nn::LayerNorm norm1{nullptr};
    EncoderAttention attn{nullptr};
    torch::nn::LayerNorm norm2{nullptr};
    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(EncoderBlock);

/// Patch-embedding vision transformer producing the d x h x w feature map.
class ImageEncoderImpl : public torch::nn::Module {
public:
    explicit ImageEncoderImpl(const ModelConfig& config);

    /// images: (B, 1, H, W) in [0, 1]. Returns (B, d, h, w).
    torch::Tensor forward(const torch::Tensor& images);

    torch::nn::Conv2d patch_embed{nullptr};
    torch::nn::ModuleList blocks{nullptr};
    torch::nn::LayerNorm norm{nullptr};
    torch::Tensor pos_embed;  // buffer, (1, hw, d)
    torch::Tensor attn_bias;  // buffer, (heads, hw, hw)

private:
    ModelConfig config_;
};
TORCH_MODULE(ImageEncoder);

/// Fixed multi-frequency sinusoidal encoding of normalized (x, y) in [0,1].
/// Shared by box corners and the dense image grid so they live in one space.
torch::Tensor sinusoidal_position_encoding(const torch::Tensor& xy, int dim);

/// Box prompt as two corner tokens plus its rasterized extent.
struct PromptEmbedding {
    torch::Tensor tokens;  // (B, 2, d)
    torch::Tensor inside;  // (B, 1, H, W), 1 inside the box
    std::vector<BBoxPrompt> boxes;
};

class PromptEncoderImpl : public torch::nn::Module {
public:
    explicit PromptEncoderImpl(const ModelConfig& config);

    PromptEmbedding forward(std::span<const BBoxPrompt> boxes);

    torch::Tensor corner_embed;  // (2, d): top-left, bottom-right

private:
    ModelConfig config_;
};
TORCH_MODULE(PromptEncoder);

/// Attention with an internal projection width of dim / downsample.
class DecoderAttentionImpl : public torch::nn::Module {
public:
    DecoderAttentionImpl(int dim, int heads, int downsample);
    torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);

    torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};

private:
    int heads_;
};
TORCH_MODULE(DecoderAttention);

/// Two-way block: token self-attention, token-to-image cross-attention,
/// token MLP, then image-to-token cross-attention.
class TwoWayBlockImpl : public torch::nn::Module {
public:
    TwoWayBlockImpl(int dim, int heads);
    std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor tokens, torch::Tensor image,
                                                    const torch::Tensor& token_pe,
                                                    const torch::Tensor& image_pe);

    DecoderAttention self_attn{nullptr}, token_to_image{nullptr}, image_to_token{nullptr};
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr}, norm4{nullptr};
    torch::nn::Linear mlp1{nullptr}, mlp2{nullptr};
};
TORCH_MODULE(TwoWayBlock);

class MaskDecoderImpl : public torch::nn::Module {
public:
    explicit MaskDecoderImpl(const ModelConfig& config);

    /// features: (B, d, h, w); images: (B, 1, H, W). Returns (B, n_labels, H, W).
    torch::Tensor forward(const torch::Tensor& features, const PromptEmbedding& prompt,
                          const torch::Tensor& images);

    torch::Tensor mask_tokens;  // (n_labels, d)
    torch::nn::ModuleList blocks{nullptr};
    torch::nn::LayerNorm final_norm{nullptr};
    torch::nn::ModuleList upsample{nullptr};
    torch::nn::Conv2d image_skip{nullptr};
    torch::nn::ModuleList hypernets{nullptr};
    torch::Tensor image_pe;  // buffer, (1, hw, d)

    int upsampled_channels() const { return up_channels_; }

private:
    ModelConfig config_;
    int up_channels_ = 0;
};
TORCH_MODULE(MaskDecoder);

/// Shared-trunk multitask model: encoder F(x), classification head,
/// box prompt encoder, and mask decoder.
class AdaSamImpl : public torch::nn::Module {
public:
    explicit AdaSamImpl(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }

    torch::Tensor encode(const torch::Tensor& images);
    /// Global-average-pooled features through the linear head, centered
    /// across classes.
    torch::Tensor class_logits(const torch::Tensor& features);
    PromptEmbedding encode_prompts(std::span<const BBoxPrompt> boxes);
    torch::Tensor decode(const torch::Tensor& features, const PromptEmbedding& prompt,
                         const torch::Tensor& images);

    /// Freezes every encoder weight except the LoRA factors.
    void freeze_base_encoder();
    void set_lora_enabled(bool enabled);
    std::vector<LoraLinear> lora_layers();
    bool lora_merged() const { return lora_merged_; }
    void set_lora_merged_flag(bool merged);

    ImageEncoder encoder{nullptr};
    torch::nn::Linear cls_head{nullptr};
    PromptEncoder prompt_encoder{nullptr};
    MaskDecoder decoder{nullptr};

    friend void merge_lora(AdaSamImpl& model);

private:
    ModelConfig config_;
    bool lora_merged_ = false;
};
TORCH_MODULE(AdaSam);

/// Builds a model with deterministic initialization from config.seed and a
/// frozen base encoder.
AdaSam make_model(const ModelConfig& config);

/// (B, 1, H, W) float tensor from slices. Throws ConfigError on size mismatch.
torch::Tensor to_batch(std::span<const ImageSlice* const> images, int expected_size);
torch::Tensor to_batch(const ImageSlice& image, int expected_size);

// Single-slice convenience wrappers. All run without autograd.
torch::Tensor encode_image(AdaSam& model, const ImageSlice& image);
ClassProbs classify(AdaSam& model, const torch::Tensor& features);
PromptEmbedding encode_prompt(AdaSam& model, const BBoxPrompt& box);
torch::Tensor decode_mask(AdaSam& model, const torch::Tensor& features, const PromptEmbedding& prompt,
                          const ImageSlice& image);

struct ParameterCount {
    int64_t total = 0;
    int64_t trainable = 0;
};

ParameterCount count_parameters(AdaSam& model);

/// Folds every adapter into its base weight: W <- W + (alpha/r) B A.
/// No-op for r = 0. Throws StateError when adapters were already merged.
void merge_lora(AdaSamImpl& model);
inline void merge_lora(AdaSam& model) { merge_lora(*model); }

/// Deep copy with identical weights and merge state.
AdaSam clone_model(AdaSam& model);

}  // namespace adasam
