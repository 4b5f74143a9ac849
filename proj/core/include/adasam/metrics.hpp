#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adasam/auto_prompt.hpp"
#include "adasam/image.hpp"
#include "adasam/model.hpp"
#include "adasam/phantom.hpp"

namespace adasam {

/// 2|P & G| / (|P| + |G|) for one label. 1 when both are empty.
/// Throws ConfigError on shape mismatch.
double dsc(const LabelMask& pred, const LabelMask& gt, int label);

/// Mean and population standard deviation. Empty input gives {0, 0}.
struct MeanStd {
    double mean = 0.0;
    double stdev = 0.0;
    std::size_t n = 0;
};

MeanStd mean_std(const std::vector<double>& values);

void to_json(nlohmann::json& j, const MeanStd& m);
void from_json(const nlohmann::json& j, MeanStd& m);

/// DSC of one slice; a label is scored only when it appears in GT or prediction.
struct SliceScore {
    std::string id;
    std::optional<double> vl;
    std::optional<double> vm;
};

/// Per-label and overall DSC over a split. "Overall" is the unweighted mean
/// of every per-slice, per-present-label value; per_slice keeps the raw
/// values so other aggregations can be recomputed.
struct DscReport {
    MeanStd vl;
    MeanStd vm;
    MeanStd overall;
    std::vector<SliceScore> per_slice;

    /// Rebuilds the summary statistics from per_slice.
    static DscReport from_slices(std::vector<SliceScore> slices);

    nlohmann::json to_json() const;
    static DscReport from_json(const nlohmann::json& j);
};

SliceScore score_slice(const std::string& id, const LabelMask& pred, const LabelMask& gt);

using MaskPredictor = std::function<LabelMask(const Sample&)>;

DscReport evaluate_samples(const std::vector<Sample>& samples, const MaskPredictor& predict);

/// Self-prompted segmentation (prompt -> decode) of every slice in a split.
DscReport evaluate_split(AdaSam& model, const DatasetManifest& manifest, Split split, const Tau& tau,
                         int pad = kDefaultPad);

/// Same model prompted with the full-image box: the no-prompt baseline.
DscReport evaluate_split_full_box(AdaSam& model, const DatasetManifest& manifest, Split split);

}  // namespace adasam
