#include "adasam/metrics.hpp"

#include <cmath>

#include "adasam/error.hpp"

namespace adasam {

double dsc(const LabelMask& pred, const LabelMask& gt, int label) {
    if (pred.height != gt.height || pred.width != gt.width || pred.size() != gt.size()) {
        throw ConfigError("dsc: prediction and ground truth shapes differ");
    }
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool in_p = pred.labels[i] == label;
        const bool in_g = gt.labels[i] == label;
        p += in_p;
        g += in_g;
        both += in_p && in_g;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

MeanStd mean_std(const std::vector<double>& values) {
    MeanStd out;
    out.n = values.size();
    if (values.empty()) return out;
    double sum = 0.0;
    for (double v : values) sum += v;
    out.mean = sum / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) sq += (v - out.mean) * (v - out.mean);
    out.stdev = std::sqrt(sq / static_cast<double>(values.size()));
    return out;
}

void to_json(nlohmann::json& j, const MeanStd& m) {
    j = nlohmann::json{{"mean", m.mean}, {"stdev", m.stdev}, {"n", m.n}};
}

void from_json(const nlohmann::json& j, MeanStd& m) {
    j.at("mean").get_to(m.mean);
    j.at("stdev").get_to(m.stdev);
    j.at("n").get_to(m.n);
}

SliceScore score_slice(const std::string& id, const LabelMask& pred, const LabelMask& gt) {
    SliceScore s;
    s.id = id;
    auto present = [&](std::uint8_t label) {
        for (std::size_t i = 0; i < gt.size(); ++i) {
            if (gt.labels[i] == label || pred.labels[i] == label) return true;
        }
        return false;
    };
    if (present(static_cast<std::uint8_t>(Label::kVL))) s.vl = dsc(pred, gt, static_cast<int>(Label::kVL));
    if (present(static_cast<std::uint8_t>(Label::kVM))) s.vm = dsc(pred, gt, static_cast<int>(Label::kVM));
    return s;
}

DscReport DscReport::from_slices(std::vector<SliceScore> slices) {
    DscReport r;
    std::vector<double> vl, vm, all;
    for (const auto& s : slices) {
        if (s.vl) {
            vl.push_back(*s.vl);
            all.push_back(*s.vl);
        }
        if (s.vm) {
            vm.push_back(*s.vm);
            all.push_back(*s.vm);
        }
    }
    r.vl = mean_std(vl);
    r.vm = mean_std(vm);
    r.overall = mean_std(all);
    // Nothing to score anywhere means every slice was empty in both: perfect.
    if (vl.empty()) r.vl.mean = 1.0;
    if (vm.empty()) r.vm.mean = 1.0;
    if (all.empty()) r.overall.mean = 1.0;
    r.per_slice = std::move(slices);
    return r;
}

nlohmann::json DscReport::to_json() const {
    nlohmann::json slices = nlohmann::json::array();
    for (const auto& s : per_slice) {
        slices.push_back({{"id", s.id},
                          {"vl", s.vl ? nlohmann::json(*s.vl) : nlohmann::json(nullptr)},
                          {"vm", s.vm ? nlohmann::json(*s.vm) : nlohmann::json(nullptr)}});
    }
    return {{"vl", vl}, {"vm", vm}, {"overall", overall}, {"per_slice", std::move(slices)},
            {"aggregation", "overall = unweighted mean over (slice, label) pairs present in GT or prediction; "
                            "stdev is the population standard deviation"}};
}

DscReport DscReport::from_json(const nlohmann::json& j) {
    std::vector<SliceScore> slices;
    for (const auto& s : j.at("per_slice")) {
        SliceScore score;
        score.id = s.at("id").get<std::string>();
        if (!s.at("vl").is_null()) score.vl = s.at("vl").get<double>();
        if (!s.at("vm").is_null()) score.vm = s.at("vm").get<double>();
        slices.push_back(std::move(score));
    }
    return from_slices(std::move(slices));
}

DscReport evaluate_samples(const std::vector<Sample>& samples, const MaskPredictor& predict) {
    std::vector<SliceScore> scores;
    scores.reserve(samples.size());
    for (const auto& s : samples) {
        scores.push_back(score_slice(s.id, predict(s), s.mask));
    }
    return DscReport::from_slices(std::move(scores));
}

DscReport evaluate_split(AdaSam& model, const DatasetManifest& manifest, Split split, const Tau& tau, int pad) {
    model->eval();
    auto samples = load_split(manifest, split);
    return evaluate_samples(samples, [&](const Sample& s) { return segment(model, s.image, tau, pad); });
}

DscReport evaluate_split_full_box(AdaSam& model, const DatasetManifest& manifest, Split split) {
    model->eval();
    auto samples = load_split(manifest, split);
    return evaluate_samples(samples, [&](const Sample& s) {
        return segment_with_box(model, s.image, BBoxPrompt::full_image(s.image.height, s.image.width));
    });
}

}  // namespace adasam
