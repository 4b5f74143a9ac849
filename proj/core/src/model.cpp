#include "adasam/model.hpp"

#include <bit>
#include <cmath>
#include <numbers>

#include "adasam/error.hpp"

namespace adasam {

namespace F = torch::nn::functional;

void ModelConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
        throw ConfigError("image_size must be a positive multiple of patch_size");
    }
    if (!std::has_single_bit(static_cast<unsigned>(patch_size))) {
        throw ConfigError("patch_size must be a power of two for the mask upsampler");
    }
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
        throw ConfigError("embed_dim must be divisible by heads");
    }
    if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be divisible by 4");
    if ((embed_dim / 2) % heads != 0) {
        throw ConfigError("embed_dim / 2 must be divisible by heads (decoder attention width)");
    }
    if (depth < 1 || decoder_depth < 1) throw ConfigError("depth and decoder_depth must be >= 1");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    if (n_classes != 4) throw ConfigError("n_classes must be 4 (presence-set slice classes)");
    if (n_labels != kNumLabels) throw ConfigError("n_labels must be 3 (background, VL, VM)");
    if (lora_rank < 0) throw ConfigError("lora_rank must be >= 0");
    if (attn_locality < 0.0) throw ConfigError("attn_locality must be >= 0");
    if (box_prior_inside < 0.0 || box_prior_outside < 0.0) {
        throw ConfigError("box prior magnitudes must be >= 0");
    }
}

ModelConfig ModelConfig::desk() {
    ModelConfig c;
    c.image_size = 64;
    c.patch_size = 8;
    c.embed_dim = 64;
    c.depth = 4;
    c.heads = 4;
    return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"image_size", c.image_size},
                       {"patch_size", c.patch_size},
                       {"embed_dim", c.embed_dim},
                       {"depth", c.depth},
                       {"heads", c.heads},
                       {"mlp_ratio", c.mlp_ratio},
                       {"n_classes", c.n_classes},
                       {"n_labels", c.n_labels},
                       {"lora_rank", c.lora_rank},
                       {"lora_alpha", c.lora_alpha},
                       {"decoder_depth", c.decoder_depth},
                       {"attn_locality", c.attn_locality},
                       {"box_prior_inside", c.box_prior_inside},
                       {"box_prior_outside", c.box_prior_outside},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("image_size").get_to(c.image_size);
    j.at("patch_size").get_to(c.patch_size);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("depth").get_to(c.depth);
    j.at("heads").get_to(c.heads);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("n_classes").get_to(c.n_classes);
    j.at("n_labels").get_to(c.n_labels);
    j.at("lora_rank").get_to(c.lora_rank);
    j.at("lora_alpha").get_to(c.lora_alpha);
    j.at("decoder_depth").get_to(c.decoder_depth);
    j.at("attn_locality").get_to(c.attn_locality);
    j.at("box_prior_inside").get_to(c.box_prior_inside);
    j.at("box_prior_outside").get_to(c.box_prior_outside);
    j.at("seed").get_to(c.seed);
}

void to_json(nlohmann::json& j, const BBoxPrompt& b) {
    j = nlohmann::json{{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max}};
}

void from_json(const nlohmann::json& j, BBoxPrompt& b) {
    j.at("x_min").get_to(b.x_min);
    j.at("y_min").get_to(b.y_min);
    j.at("x_max").get_to(b.x_max);
    j.at("y_max").get_to(b.y_max);
}

void validate_box(const BBoxPrompt& box, int height, int width) {
    if (box.x_min < 0 || box.y_min < 0 || box.x_max > width || box.y_max > height) {
        throw ValidationError("box lies outside the image bounds");
    }
    if (box.x_min >= box.x_max || box.y_min >= box.y_max) {
        throw ValidationError("degenerate box (zero area)");
    }
}

int ClassProbs::argmax() const {
    int best = 0;
    for (int i = 1; i < static_cast<int>(probs.size()); ++i) {
        if (probs[i] > probs[best]) best = i;
    }
    return best;
}

// --- LoRA -----------------------------------------------------------------

LoraLinearImpl::LoraLinearImpl(int64_t in_features, int64_t out_features, int rank, double alpha)
    : rank_(rank), scaling_(rank > 0 ? alpha / rank : 0.0) {
    base = register_module("base", torch::nn::Linear(in_features, out_features));
    if (rank_ > 0) {
        lora_a = register_parameter(
            "lora_a", torch::randn({rank_, in_features}) / std::sqrt(static_cast<double>(in_features)));
        lora_b = register_parameter("lora_b", torch::zeros({out_features, rank_}));
    }
}

torch::Tensor LoraLinearImpl::forward(const torch::Tensor& x) {
    auto y = base->forward(x);
    if (rank_ > 0 && adapter_enabled_ && !merged_) {
        y = y + scaling_ * torch::matmul(torch::matmul(x, lora_a.t()), lora_b.t());
    }
    return y;
}

void LoraLinearImpl::merge() {
    if (rank_ == 0) return;
    if (merged_) throw StateError("LoRA adapter already merged");
    torch::NoGradGuard guard;
    base->weight.add_(scaling_ * torch::matmul(lora_b, lora_a));
    merged_ = true;
}

// --- encoder ----------------------------------------------------------------

EncoderAttentionImpl::EncoderAttentionImpl(int dim, int heads, int rank, double alpha) : heads_(heads) {
    q = register_module("q", LoraLinear(dim, dim, rank, alpha));
    k = register_module("k", torch::nn::Linear(dim, dim));
    v = register_module("v", LoraLinear(dim, dim, rank, alpha));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
}

namespace {

torch::Tensor split_heads(const torch::Tensor& x, int heads) {
    auto b = x.size(0);
    auto n = x.size(1);
    auto c = x.size(2);
    return x.reshape({b, n, heads, c / heads}).transpose(1, 2);
}

torch::Tensor merge_heads(const torch::Tensor& x) {
    auto b = x.size(0);
    auto h = x.size(1);
    auto n = x.size(2);
    auto c = x.size(3);
    return x.transpose(1, 2).reshape({b, n, h * c});
}

torch::Tensor attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                        const torch::Tensor& bias = {}) {
    auto scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
    auto logits = torch::matmul(q, k.transpose(-2, -1)) * scale;
    if (bias.defined()) logits = logits + bias;
    return torch::matmul(torch::softmax(logits, -1), v);
}

}  // namespace

torch::Tensor EncoderAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& bias) {
    auto qh = split_heads(q->forward(x), heads_);
    auto kh = split_heads(k->forward(x), heads_);
    auto vh = split_heads(v->forward(x), heads_);
    return proj->forward(merge_heads(attention(qh, kh, vh, bias)));
}

EncoderBlockImpl::EncoderBlockImpl(int dim, int heads, int mlp_ratio, int rank, double alpha) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", EncoderAttention(dim, heads, rank, alpha));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", torch::nn::Linear(dim, dim * mlp_ratio));
    fc2 = register_module("fc2", torch::nn::Linear(dim * mlp_ratio, dim));
}

torch::Tensor EncoderBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& bias) {
    auto h = x + attn->forward(norm1->forward(x), bias);
    return h + fc2->forward(torch::gelu(fc1->forward(norm2->forward(h))));
}

torch::Tensor sinusoidal_position_encoding(const torch::Tensor& xy, int dim) {
    const int n_freq = dim / 4;
    auto freqs = torch::exp(torch::linspace(0.0, std::log(32.0), n_freq, xy.options()));
    auto two_pi = 2.0 * std::numbers::pi;
    auto ax = xy.select(-1, 0).unsqueeze(-1) * freqs * two_pi;
    auto ay = xy.select(-1, 1).unsqueeze(-1) * freqs * two_pi;
    return torch::cat({torch::sin(ax), torch::cos(ax), torch::sin(ay), torch::cos(ay)}, -1);
}

namespace {

/// Grid-cell centres of an h x w token grid as normalized (x, y), row-major.
torch::Tensor grid_centres(int h, int w) {
    auto ys = (torch::arange(h, torch::kFloat32) + 0.5) / h;
    auto xs = (torch::arange(w, torch::kFloat32) + 0.5) / w;
    auto mesh = torch::meshgrid({ys, xs}, "ij");
    return torch::stack({mesh[1].reshape({-1}), mesh[0].reshape({-1})}, -1);
}

torch::Tensor normalize_images(const torch::Tensor& images) { return (images - 0.5) * 4.0; }

/// (heads, N, N) bias -slope_h * euclidean patch distance, slope_h = locality * 2^-h.
torch::Tensor locality_bias(int grid, int heads, double locality) {
    auto centres = grid_centres(grid, grid) * grid;  // patch units
    auto dist = torch::cdist(centres, centres);      // (N, N)
    auto slopes = locality * torch::pow(2.0, -torch::arange(heads, torch::kFloat32));
    return -slopes.view({heads, 1, 1}) * dist.unsqueeze(0);
}

}  // namespace

ImageEncoderImpl::ImageEncoderImpl(const ModelConfig& config) : config_(config) {
    const int d = config.embed_dim;
    patch_embed = register_module(
        "patch_embed",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(1, d, config.patch_size).stride(config.patch_size)));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int i = 0; i < config.depth; ++i) {
        blocks->push_back(
            EncoderBlock(d, config.heads, config.mlp_ratio, config.lora_rank, config.effective_alpha()));
    }
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    pos_embed = register_buffer(
        "pos_embed",
        sinusoidal_position_encoding(grid_centres(config.grid(), config.grid()), d).unsqueeze(0));
    attn_bias = register_buffer("attn_bias", locality_bias(config.grid(), config.heads, config.attn_locality));
}

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& images) {
    const int g = config_.grid();
    auto x = patch_embed->forward(normalize_images(images));  // (B, d, g, g)
    x = x.flatten(2).transpose(1, 2) + pos_embed;
    for (const auto& block : *blocks) {
        x = block->as<EncoderBlock>()->forward(x, attn_bias);
    }
    x = norm->forward(x);
    return x.transpose(1, 2).reshape({x.size(0), config_.embed_dim, g, g});
}

// --- prompt encoder ---------------------------------------------------------

PromptEncoderImpl::PromptEncoderImpl(const ModelConfig& config) : config_(config) {
    corner_embed = register_parameter("corner_embed", torch::randn({2, config.embed_dim}) * 0.02);
}

PromptEmbedding PromptEncoderImpl::forward(std::span<const BBoxPrompt> boxes) {
    const int n = config_.image_size;
    const auto b = static_cast<int64_t>(boxes.size());
    auto corners = torch::empty({b, 2, 2});
    auto inside = torch::zeros({b, 1, n, n});
    auto acc = corners.accessor<float, 3>();
    for (int64_t i = 0; i < b; ++i) {
        const auto& box = boxes[static_cast<std::size_t>(i)];
        validate_box(box, n, n);
        acc[i][0][0] = static_cast<float>(box.x_min) / n;
        acc[i][0][1] = static_cast<float>(box.y_min) / n;
        acc[i][1][0] = static_cast<float>(box.x_max) / n;
        acc[i][1][1] = static_cast<float>(box.y_max) / n;
        inside[i][0]
            .slice(0, box.y_min, box.y_max)
            .slice(1, box.x_min, box.x_max)
            .fill_(1.0f);
    }
    PromptEmbedding out;
    out.tokens = sinusoidal_position_encoding(corners, config_.embed_dim) + corner_embed.unsqueeze(0);
    out.inside = inside;
    out.boxes.assign(boxes.begin(), boxes.end());
    return out;
}

// --- mask decoder -----------------------------------------------------------

DecoderAttentionImpl::DecoderAttentionImpl(int dim, int heads, int downsample) : heads_(heads) {
    const int inner = dim / downsample;
    q_proj = register_module("q_proj", torch::nn::Linear(dim, inner));
    k_proj = register_module("k_proj", torch::nn::Linear(dim, inner));
    v_proj = register_module("v_proj", torch::nn::Linear(dim, inner));
    out_proj = register_module("out_proj", torch::nn::Linear(inner, dim));
}

torch::Tensor DecoderAttentionImpl::forward(const torch::Tensor& q, const torch::Tensor& k,
                                            const torch::Tensor& v) {
    auto qh = split_heads(q_proj->forward(q), heads_);
    auto kh = split_heads(k_proj->forward(k), heads_);
    auto vh = split_heads(v_proj->forward(v), heads_);
    return out_proj->forward(merge_heads(attention(qh, kh, vh)));
}

TwoWayBlockImpl::TwoWayBlockImpl(int dim, int heads) {
    auto ln = [dim] { return torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})); };
    self_attn = register_module("self_attn", DecoderAttention(dim, heads, 2));
    token_to_image = register_module("token_to_image", DecoderAttention(dim, heads, 2));
    image_to_token = register_module("image_to_token", DecoderAttention(dim, heads, 2));
    norm1 = register_module("norm1", ln());
    norm2 = register_module("norm2", ln());
    norm3 = register_module("norm3", ln());
    norm4 = register_module("norm4", ln());
    mlp1 = register_module("mlp1", torch::nn::Linear(dim, 2 * dim));
    mlp2 = register_module("mlp2", torch::nn::Linear(2 * dim, dim));
}

std::pair<torch::Tensor, torch::Tensor> TwoWayBlockImpl::forward(torch::Tensor tokens, torch::Tensor image,
                                                                 const torch::Tensor& token_pe,
                                                                 const torch::Tensor& image_pe) {
    auto q = tokens + token_pe;
    tokens = norm1->forward(tokens + self_attn->forward(q, q, tokens));

    q = tokens + token_pe;
    auto k = image + image_pe;
    tokens = norm2->forward(tokens + token_to_image->forward(q, k, image));

    tokens = norm3->forward(tokens + mlp2->forward(torch::gelu(mlp1->forward(tokens))));

    q = image + image_pe;
    k = tokens + token_pe;
    image = norm4->forward(image + image_to_token->forward(q, k, tokens));
    return {tokens, image};
}

MaskDecoderImpl::MaskDecoderImpl(const ModelConfig& config) : config_(config) {
    const int d = config.embed_dim;
    mask_tokens = register_parameter("mask_tokens", torch::randn({config.n_labels, d}) * 0.02);
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int i = 0; i < config.decoder_depth; ++i) {
        blocks->push_back(TwoWayBlock(d, config.heads));
    }
    final_norm = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));

    upsample = register_module("upsample", torch::nn::ModuleList());
    int channels = d;
    for (int scale = config.patch_size; scale > 1; scale /= 2) {
        int next = std::max(channels / 2, 8);
        upsample->push_back(torch::nn::ConvTranspose2d(
            torch::nn::ConvTranspose2dOptions(channels, next, 2).stride(2)));
        channels = next;
    }
    up_channels_ = channels;
    image_skip = register_module(
        "image_skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, up_channels_, 3).padding(1)));

    hypernets = register_module("hypernets", torch::nn::ModuleList());
    for (int l = 0; l < config.n_labels; ++l) {
        auto mlp = torch::nn::Sequential(torch::nn::Linear(d, d), torch::nn::GELU(),
                                         torch::nn::Linear(d, up_channels_));
        {
            torch::NoGradGuard guard;
            auto last = mlp[2]->as<torch::nn::Linear>();
            last->weight.mul_(0.1);
            last->bias.zero_();
        }
        hypernets->push_back(mlp);
    }
    image_pe = register_buffer(
        "image_pe", sinusoidal_position_encoding(grid_centres(config.grid(), config.grid()), d).unsqueeze(0));
}

torch::Tensor MaskDecoderImpl::forward(const torch::Tensor& features, const PromptEmbedding& prompt,
                                       const torch::Tensor& images) {
    const auto b = features.size(0);
    const int g = config_.grid();
    const int d = config_.embed_dim;
    auto tokens = torch::cat({mask_tokens.unsqueeze(0).expand({b, -1, -1}), prompt.tokens}, 1);
    auto token_pe = tokens;
    auto image = features.flatten(2).transpose(1, 2);
    for (const auto& block : *blocks) {
        std::tie(tokens, image) = block->as<TwoWayBlock>()->forward(tokens, image, token_pe, image_pe);
    }
    tokens = final_norm->forward(tokens);

    auto up = image.transpose(1, 2).reshape({b, d, g, g});
    for (const auto& stage : *upsample) {
        up = torch::gelu(stage->as<torch::nn::ConvTranspose2d>()->forward(up));
    }
    up = up + image_skip->forward(normalize_images(images));

    std::vector<torch::Tensor> per_label;
    per_label.reserve(static_cast<std::size_t>(config_.n_labels));
    for (int l = 0; l < config_.n_labels; ++l) {
        auto w = hypernets[static_cast<std::size_t>(l)]->as<torch::nn::Sequential>()->forward(
            tokens.select(1, l));  // (B, C)
        per_label.push_back((w.unsqueeze(-1).unsqueeze(-1) * up).sum(1));
    }
    auto logits = torch::stack(per_label, 1);  // (B, L, H, W)

    auto prior = prompt.inside * config_.box_prior_inside - (1.0 - prompt.inside) * config_.box_prior_outside;
    auto fg = logits.slice(1, 1) + prior;
    return torch::cat({logits.slice(1, 0, 1), fg}, 1);
}

// --- full model -------------------------------------------------------------

AdaSamImpl::AdaSamImpl(const ModelConfig& config) : config_(config) {
    config_.validate();
    encoder = register_module("encoder", ImageEncoder(config_));
    cls_head = register_module("cls_head", torch::nn::Linear(config_.embed_dim, config_.n_classes));
    prompt_encoder = register_module("prompt_encoder", PromptEncoder(config_));
    decoder = register_module("decoder", MaskDecoder(config_));
}

torch::Tensor AdaSamImpl::encode(const torch::Tensor& images) { return encoder->forward(images); }

torch::Tensor AdaSamImpl::class_logits(const torch::Tensor& features) {
    auto logits = cls_head->forward(features.mean({2, 3}));
    return logits - logits.mean(-1, /*keepdim=*/true);
}

PromptEmbedding AdaSamImpl::encode_prompts(std::span<const BBoxPrompt> boxes) {
    return prompt_encoder->forward(boxes);
}

torch::Tensor AdaSamImpl::decode(const torch::Tensor& features, const PromptEmbedding& prompt,
                                 const torch::Tensor& images) {
    return decoder->forward(features, prompt, images);
}

void AdaSamImpl::freeze_base_encoder() {
    for (auto& item : encoder->named_parameters(true)) {
        const bool is_adapter = item.key().find("lora_") != std::string::npos;
        item.value().set_requires_grad(is_adapter);
    }
}

std::vector<LoraLinear> AdaSamImpl::lora_layers() {
    std::vector<LoraLinear> out;
    for (const auto& block : *encoder->blocks) {
        auto attn = block->as<EncoderBlock>()->attn;
        out.push_back(attn->q);
        out.push_back(attn->v);
    }
    return out;
}

void AdaSamImpl::set_lora_enabled(bool enabled) {
    for (auto& layer : lora_layers()) layer->set_adapter_enabled(enabled);
}

void AdaSamImpl::set_lora_merged_flag(bool merged) {
    lora_merged_ = merged;
    for (auto& layer : lora_layers()) layer->set_merged_flag(merged);
}

void merge_lora(AdaSamImpl& model) {
    if (model.config().lora_rank == 0) return;
    if (model.lora_merged_) throw StateError("LoRA adapters already merged into the base weights");
    for (auto& layer : model.lora_layers()) layer->merge();
    model.lora_merged_ = true;
}

AdaSam make_model(const ModelConfig& config) {
    config.validate();
    torch::manual_seed(config.seed);
    AdaSam model(config);
    model->freeze_base_encoder();
    return model;
}

AdaSam clone_model(AdaSam& model) {
    torch::NoGradGuard guard;
    AdaSam copy = make_model(model->config());
    auto src = model->named_parameters(true);
    for (auto& item : copy->named_parameters(true)) {
        item.value().copy_(src[item.key()]);
    }
    auto src_buf = model->named_buffers(true);
    for (auto& item : copy->named_buffers(true)) {
        item.value().copy_(src_buf[item.key()]);
    }
    copy->set_lora_merged_flag(model->lora_merged());
    if (!model->is_training()) copy->eval();
    return copy;
}

torch::Tensor to_batch(std::span<const ImageSlice* const> images, int expected_size) {
    auto out = torch::empty({static_cast<int64_t>(images.size()), 1, expected_size, expected_size});
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& img = *images[i];
        if (img.height != expected_size || img.width != expected_size) {
            throw ConfigError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                              ", model expects " + std::to_string(expected_size) + "x" +
                              std::to_string(expected_size));
        }
        std::memcpy(out[static_cast<int64_t>(i)].data_ptr<float>(), img.pixels.data(),
                    img.pixels.size() * sizeof(float));
    }
    return out;
}

torch::Tensor to_batch(const ImageSlice& image, int expected_size) {
    const ImageSlice* ptr = &image;
    return to_batch(std::span<const ImageSlice* const>(&ptr, 1), expected_size);
}

torch::Tensor encode_image(AdaSam& model, const ImageSlice& image) {
    torch::NoGradGuard guard;
    return model->encode(to_batch(image, model->config().image_size));
}

ClassProbs classify(AdaSam& model, const torch::Tensor& features) {
    torch::NoGradGuard guard;
    auto p = torch::softmax(model->class_logits(features), -1).select(0, 0).contiguous();
    ClassProbs out;
    out.probs.assign(p.data_ptr<float>(), p.data_ptr<float>() + p.numel());
    return out;
}

PromptEmbedding encode_prompt(AdaSam& model, const BBoxPrompt& box) {
    torch::NoGradGuard guard;
    return model->encode_prompts(std::span<const BBoxPrompt>(&box, 1));
}

torch::Tensor decode_mask(AdaSam& model, const torch::Tensor& features, const PromptEmbedding& prompt,
                          const ImageSlice& image) {
    torch::NoGradGuard guard;
    return model->decode(features, prompt, to_batch(image, model->config().image_size));
}

ParameterCount count_parameters(AdaSam& model) {
    ParameterCount count;
    for (const auto& p : model->parameters(true)) {
        count.total += p.numel();
        if (p.requires_grad()) count.trainable += p.numel();
    }
    return count;
}

}  // namespace adasam
