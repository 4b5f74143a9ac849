#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "adasam/auto_prompt.hpp"
#include "adasam/losses.hpp"
#include "adasam/model.hpp"
#include "adasam/phantom.hpp"

namespace adasam {

/// Label budget meaning "every training slice is labelled".
inline constexpr int kBudgetAll = -1;

struct TrainConfig {
    int epochs = 10;
    int batch_size = 8;
    double learning_rate = 1e-4;
    /// Number of segmentation-labelled training slices; kBudgetAll for all.
    int label_budget = kBudgetAll;
    std::uint64_t seed = 0;
    double tau = kDefaultTau;
    int pad = kDefaultPad;
    /// Empty alpha means inverse train-class frequency normalized to mean 1.
    std::vector<double> focal_alpha;
    double gamma_focus = 2.0;
    LossWeights weights;
    double clip_norm = 1.0;
    /// Labelled slices appended to every batch, drawn cyclically from the
    /// labelled pool (only while the pool is smaller than the train split).
    int labeled_per_batch = 2;
    /// Reuse each slice's prompt for the rest of the epoch instead of
    /// regenerating it from the current weights every step.
    bool cache_prompts = false;
    /// After each optimizer step, re-run the classifier on the batch and log
    /// the loss under the updated shared features.
    bool two_pass = false;
    /// Pin torch to one thread so repeated runs are bit-identical.
    bool deterministic = true;

    void validate(int train_size) const;

    /// Preset paired with ModelConfig::desk(): lr 1e-3, other fields default.
    static TrainConfig desk();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Labelled-slice selection: at least one slice of every present class
/// (rarest classes first when the budget is smaller than the class count),
/// remaining slots seeded-uniform without replacement. Indices refer to
/// `classes`, which holds the class of each training slice.
std::vector<int> select_labeled(const std::vector<SliceClass>& classes, int budget, std::uint64_t seed);

/// Overload on a manifest's train split.
std::vector<int> select_labeled(const DatasetManifest& manifest, int budget, std::uint64_t seed);

/// Inverse class frequency, normalized to mean 1 (zero counts treated as 1).
std::vector<double> inverse_frequency_alpha(const std::vector<SliceClass>& classes, int n_classes);

struct TrainState {
    std::int64_t step = 0;
    double last_cls = 0.0;
    double last_seg = 0.0;
    double last_total = 0.0;
    double last_accuracy = 0.0;
    std::vector<int> labeled;  // indices into the train split, fixed after selection
    std::mt19937_64 rng;
    std::int64_t fallback_prompts = 0;
    std::int64_t seg_samples = 0;
    std::map<std::string, BBoxPrompt> prompt_cache;
};

/// One element of a training batch.
struct BatchItem {
    const Sample* sample = nullptr;
    bool labeled = false;
};

struct StepStats {
    double cls_loss = 0.0;
    std::optional<double> seg_loss;
    double total_loss = 0.0;
    double accuracy = 0.0;
    int seg_count = 0;
    int fallback_count = 0;
    /// Classification loss on the same batch after the update (two_pass only).
    std::optional<double> cls_loss_after;
};

/// One multitask step: classify every slice, derive CAM box prompts from the
/// current weights, add Dice loss for labelled slices with a prompt (falling
/// back to the ground-truth box when the classifier yields none), and take
/// one optimizer step on focal + lambda * dice. Segmentation gradients flow
/// through the shared encoder's adapters into the features the classifier
/// reads. Throws NonFiniteLossError on NaN/Inf loss.
StepStats train_step(AdaSam& model, torch::optim::Optimizer& optimizer, const std::vector<BatchItem>& batch,
                     TrainState& state, const TrainConfig& config, const FocalParams& focal);

/// Adam over the trainable parameters.
std::unique_ptr<torch::optim::Adam> make_optimizer(AdaSam& model, const TrainConfig& config);

struct EpochEntry {
    int epoch = 0;
    double cls_loss = 0.0;
    double seg_loss = 0.0;
    double total_loss = 0.0;
    double train_accuracy = 0.0;
    double val_dsc = 0.0;
    std::int64_t seg_samples = 0;
    std::int64_t fallback_prompts = 0;
};

struct FitReport {
    std::vector<EpochEntry> epochs;
    std::vector<int> labeled_indices;
    std::vector<std::string> labeled_ids;
    std::vector<double> focal_alpha;
    int best_epoch = 0;
    double best_val_dsc = -1.0;
    std::vector<StepStats> steps;
    nlohmann::json to_json() const;
};

struct FitOptions {
    /// Where to write the best-val checkpoint and report.json; empty keeps
    /// everything in memory.
    std::filesystem::path out_dir;
    /// Called after each epoch (progress logging).
    std::function<void(const EpochEntry&)> on_epoch;
    nlohmann::json provenance = nlohmann::json::object();
};

struct FitResult {
    AdaSam best_model{nullptr};
    FitReport report;
};

/// Trains for config.epochs over the shuffled train split, scoring val DSC
/// after each epoch and keeping the best-val weights.
FitResult fit(AdaSam& model, const DatasetManifest& manifest, const TrainConfig& config,
              const FitOptions& options = {});

}  // namespace adasam
