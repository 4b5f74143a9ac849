#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adasam/metrics.hpp"
#include "adasam/model.hpp"
#include "adasam/phantom.hpp"
#include "adasam/training.hpp"

namespace adasam {

struct ExperimentGrid {
    std::vector<int> budgets{0, 5, 50, 100};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<int> ranks{2, 4, 6, 8};

    /// Throws ConfigError on an empty list, a negative budget, or a budget
    /// beyond the train split.
    void validate(int train_size) const;
};

void to_json(nlohmann::json& j, const ExperimentGrid& g);

/// Test-split DSC of one trained model under its own prompts and under the
/// full-image box.
struct BudgetCell {
    int budget = 0;
    std::uint64_t seed = 0;
    DscReport ada;
    DscReport baseline;
    double train_seconds = 0.0;
    int best_epoch = 0;
};

/// Across-seed avg(stdev) of the per-seed mean DSC values.
struct BudgetRow {
    int budget = 0;
    MeanStd ada_vl, ada_vm, ada_overall;
    MeanStd base_vl, base_vm, base_overall;
};

struct BudgetTable {
    std::vector<BudgetCell> cells;
    std::vector<BudgetRow> rows;

    /// Recomputes rows from cells, one per distinct budget in first-seen order.
    void summarize();
    nlohmann::json to_json() const;
    std::string to_markdown() const;
};

struct ExperimentOptions {
    /// Receives table.json (rewritten after every cell, so partial results
    /// survive a failure) and per-cell per-slice dumps. Empty: in memory only.
    std::filesystem::path out_dir;
    std::function<void(const BudgetCell&)> on_cell;
    nlohmann::json provenance = nlohmann::json::object();
};

/// One model per (budget, seed). Model and train seeds are both set to the
/// grid seed; train_config.label_budget is overridden per cell.
BudgetTable label_budget_experiment(const ExperimentGrid& grid, const DatasetManifest& manifest,
                                    const ModelConfig& model_config, const TrainConfig& train_config,
                                    const ExperimentOptions& options = {});

/// DSC the rank ablation reports for full-scale ADA-SAM on the MRI data,
/// kept as context next to the desk-scale numbers.
std::optional<double> reference_rank_dsc(int rank);

struct RankRow {
    int rank = 0;
    ParameterCount params;
    double trainable_fraction = 0.0;
    MeanStd vl, vm, overall;
    std::optional<double> reference_dsc;
};

struct RankTable {
    int budget = 0;
    std::vector<RankRow> rows;
    nlohmann::json to_json() const;
    std::string to_markdown() const;
};

/// Trains every rank at a fixed label budget over the given seeds.
RankTable lora_rank_ablation(const std::vector<int>& ranks, const std::vector<std::uint64_t>& seeds,
                             const DatasetManifest& manifest, const ModelConfig& model_config,
                             const TrainConfig& train_config, const ExperimentOptions& options = {});

/// Wall-clock latency of the full path (PNG load, prompt, decode) per slice.
struct TimingReport {
    std::vector<double> samples_ms;
    double mean_ms = 0.0;
    double median_ms = 0.0;
    double stdev_ms = 0.0;
    double min_ms = 0.0;
    double max_ms = 0.0;
    /// Mean latency of each repeat pass; their spread is the run-to-run variance.
    std::vector<double> repeat_means_ms;
    double repeat_variance_ms2 = 0.0;

    nlohmann::json to_json() const;
};

TimingReport timing_report(AdaSam& model, const std::vector<std::filesystem::path>& image_paths,
                           const Tau& tau, int pad = kDefaultPad, int repeats = 1);

}  // namespace adasam
