#include "adasam/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>

#include "adasam/error.hpp"

namespace adasam {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write", path.string());
    out << j.dump(2) << '\n';
}

/// Appends a run's mean unless the run had nothing to score.
void add_mean(std::vector<double>& v, const MeanStd& m) {
    if (m.n > 0) v.push_back(m.mean);
}

std::string fmt_ms(const MeanStd& m) {
    if (m.n == 0) return "-";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.3f(%.3f)", m.mean, m.stdev);
    return buf;
}

}  // namespace

void ExperimentGrid::validate(int train_size) const {
    if (budgets.empty() || seeds.empty() || ranks.empty()) {
        throw ConfigError("experiment grid lists must be nonempty");
    }
    for (int b : budgets) {
        if (b < 0 || b > train_size) {
            throw ConfigError("budget " + std::to_string(b) + " outside [0, " + std::to_string(train_size) + "]");
        }
    }
    for (int r : ranks) {
        if (r < 0) throw ConfigError("LoRA rank must be >= 0");
    }
}

void to_json(nlohmann::json& j, const ExperimentGrid& g) {
    j = nlohmann::json{{"budgets", g.budgets}, {"seeds", g.seeds}, {"ranks", g.ranks}};
}

void BudgetTable::summarize() {
    rows.clear();
    std::vector<int> order;
    for (const auto& c : cells) {
        if (std::find(order.begin(), order.end(), c.budget) == order.end()) order.push_back(c.budget);
    }
    for (int b : order) {
        std::vector<double> avl, avm, aall, bvl, bvm, ball;
        for (const auto& c : cells) {
            if (c.budget != b) continue;
            add_mean(avl, c.ada.vl);
            add_mean(avm, c.ada.vm);
            add_mean(aall, c.ada.overall);
            add_mean(bvl, c.baseline.vl);
            add_mean(bvm, c.baseline.vm);
            add_mean(ball, c.baseline.overall);
        }
        rows.push_back({b, mean_std(avl), mean_std(avm), mean_std(aall), mean_std(bvl), mean_std(bvm),
                        mean_std(ball)});
    }
}

nlohmann::json BudgetTable::to_json() const {
    nlohmann::json cj = nlohmann::json::array();
    for (const auto& c : cells) {
        cj.push_back({{"budget", c.budget},
                      {"seed", c.seed},
                      {"best_epoch", c.best_epoch},
                      {"train_seconds", c.train_seconds},
                      {"ada", {{"vl", c.ada.vl}, {"vm", c.ada.vm}, {"overall", c.ada.overall}}},
                      {"baseline",
                       {{"vl", c.baseline.vl}, {"vm", c.baseline.vm}, {"overall", c.baseline.overall}}}});
    }
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : rows) {
        rj.push_back({{"budget", r.budget},
                      {"ada", {{"vl", r.ada_vl}, {"vm", r.ada_vm}, {"overall", r.ada_overall}}},
                      {"baseline", {{"vl", r.base_vl}, {"vm", r.base_vm}, {"overall", r.base_overall}}}});
    }
    return {{"rows", std::move(rj)},
            {"cells", std::move(cj)},
            {"notes",
             "avg(stdev) across seeds of each run's test-split mean DSC; baseline = same model prompted "
             "with the full-image box and no class gating"}};
}

std::string BudgetTable::to_markdown() const {
    std::string s =
        "| budget | ADA-SAM VL | ADA-SAM VM | ADA-SAM overall | baseline VL | baseline VM | baseline overall |\n"
        "|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        s += "| " + std::to_string(r.budget) + " | " + fmt_ms(r.ada_vl) + " | " + fmt_ms(r.ada_vm) + " | " +
             fmt_ms(r.ada_overall) + " | " + fmt_ms(r.base_vl) + " | " + fmt_ms(r.base_vm) + " | " +
             fmt_ms(r.base_overall) + " |\n";
    }
    return s;
}

BudgetTable label_budget_experiment(const ExperimentGrid& grid, const DatasetManifest& manifest,
                                    const ModelConfig& model_config, const TrainConfig& train_config,
                                    const ExperimentOptions& options) {
    const int train_size = static_cast<int>(manifest.split(Split::kTrain).size());
    grid.validate(train_size);
    const Tau tau(train_config.tau);

    BudgetTable table;
    auto flush = [&] {
        if (options.out_dir.empty()) return;
        auto j = table.to_json();
        j["grid"] = grid;
        j["model_config"] = model_config;
        j["train_config"] = train_config;
        j["provenance"] = options.provenance;
        write_json(options.out_dir / "table.json", j);
    };

    for (int budget : grid.budgets) {
        for (auto seed : grid.seeds) {
            auto mc = model_config;
            mc.seed = seed;
            auto tc = train_config;
            tc.seed = seed;
            tc.label_budget = budget;

            BudgetCell cell;
            cell.budget = budget;
            cell.seed = seed;
            try {
                auto model = make_model(mc);
                const auto t0 = Clock::now();
                auto fitted = fit(model, manifest, tc);
                cell.train_seconds = seconds_since(t0);
                cell.best_epoch = fitted.report.best_epoch;
                cell.ada = evaluate_split(fitted.best_model, manifest, Split::kTest, tau, tc.pad);
                cell.baseline = evaluate_split_full_box(fitted.best_model, manifest, Split::kTest);
            } catch (...) {
                flush();
                throw;
            }
            if (!options.out_dir.empty()) {
                write_json(options.out_dir / "cells" /
                               ("budget" + std::to_string(budget) + "_seed" + std::to_string(seed) + ".json"),
                           {{"budget", budget},
                            {"seed", seed},
                            {"ada", cell.ada.to_json()},
                            {"baseline", cell.baseline.to_json()},
                            {"provenance", options.provenance}});
            }
            table.cells.push_back(std::move(cell));
            table.summarize();
            if (options.on_cell) options.on_cell(table.cells.back());
            flush();
        }
    }
    return table;
}

std::optional<double> reference_rank_dsc(int rank) {
    switch (rank) {
        case 2: return 0.84;
        case 4: return 0.85;
        case 6: return 0.86;
        case 8: return 0.91;
        default: return std::nullopt;
    }
}

nlohmann::json RankTable::to_json() const {
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : rows) {
        rj.push_back({{"rank", r.rank},
                      {"params_total", r.params.total},
                      {"params_trainable", r.params.trainable},
                      {"trainable_fraction", r.trainable_fraction},
                      {"vl", r.vl},
                      {"vm", r.vm},
                      {"overall", r.overall},
                      {"reference_dsc", r.reference_dsc ? nlohmann::json(*r.reference_dsc)
                                                        : nlohmann::json(nullptr)}});
    }
    return {{"budget", budget},
            {"rows", std::move(rj)},
            {"notes", "reference_dsc is the full-scale MRI result, recorded for context and not comparable"}};
}

std::string RankTable::to_markdown() const {
    std::string s = "| rank | trainable | total | fraction | overall DSC | reference DSC |\n|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        char frac[16];
        std::snprintf(frac, sizeof(frac), "%.4f", r.trainable_fraction);
        char ref[16] = "-";
        if (r.reference_dsc) std::snprintf(ref, sizeof(ref), "%.2f", *r.reference_dsc);
        s += "| " + std::to_string(r.rank) + " | " + std::to_string(r.params.trainable) + " | " +
             std::to_string(r.params.total) + " | " + frac + " | " + fmt_ms(r.overall) + " | " + ref + " |\n";
    }
    return s;
}

RankTable lora_rank_ablation(const std::vector<int>& ranks, const std::vector<std::uint64_t>& seeds,
                             const DatasetManifest& manifest, const ModelConfig& model_config,
                             const TrainConfig& train_config, const ExperimentOptions& options) {
    if (ranks.empty() || seeds.empty()) throw ConfigError("rank ablation needs ranks and seeds");
    const Tau tau(train_config.tau);
    RankTable table;
    table.budget = train_config.label_budget;
    for (int rank : ranks) {
        if (rank < 0) throw ConfigError("LoRA rank must be >= 0");
        RankRow row;
        row.rank = rank;
        row.reference_dsc = reference_rank_dsc(rank);
        std::vector<double> vl, vm, all;
        for (auto seed : seeds) {
            auto mc = model_config;
            mc.lora_rank = rank;
            mc.lora_alpha = -1.0;
            mc.seed = seed;
            auto tc = train_config;
            tc.seed = seed;
            auto model = make_model(mc);
            row.params = count_parameters(model);
            auto fitted = fit(model, manifest, tc);
            auto rep = evaluate_split(fitted.best_model, manifest, Split::kTest, tau, tc.pad);
            add_mean(vl, rep.vl);
            add_mean(vm, rep.vm);
            add_mean(all, rep.overall);
        }
        row.trainable_fraction =
            row.params.total > 0 ? static_cast<double>(row.params.trainable) / static_cast<double>(row.params.total)
                                 : 0.0;
        row.vl = mean_std(vl);
        row.vm = mean_std(vm);
        row.overall = mean_std(all);
        table.rows.push_back(row);
        if (!options.out_dir.empty()) {
            auto j = table.to_json();
            j["ranks"] = ranks;
            j["seeds"] = seeds;
            j["model_config"] = model_config;
            j["train_config"] = train_config;
            j["provenance"] = options.provenance;
            write_json(options.out_dir / "ablation.json", j);
        }
    }
    return table;
}

nlohmann::json TimingReport::to_json() const {
    return {{"n", samples_ms.size()},       {"mean_ms", mean_ms},
            {"median_ms", median_ms},       {"stdev_ms", stdev_ms},
            {"min_ms", min_ms},             {"max_ms", max_ms},
            {"repeat_means_ms", repeat_means_ms}, {"repeat_variance_ms2", repeat_variance_ms2},
            {"samples_ms", samples_ms}};
}

TimingReport timing_report(AdaSam& model, const std::vector<std::filesystem::path>& image_paths, const Tau& tau,
                           int pad, int repeats) {
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
    model->eval();
    TimingReport report;
    for (int r = 0; r < repeats; ++r) {
        std::vector<double> pass;
        for (const auto& path : image_paths) {
            const auto t0 = Clock::now();
            auto image = load_image_png(path);
            auto mask = segment(model, image, tau, pad);
            (void)mask;
            pass.push_back(seconds_since(t0) * 1000.0);
        }
        if (!pass.empty()) report.repeat_means_ms.push_back(mean_std(pass).mean);
        if (r == 0) report.samples_ms = pass;
    }
    if (report.samples_ms.empty()) return report;
    auto stats = mean_std(report.samples_ms);
    report.mean_ms = stats.mean;
    report.stdev_ms = stats.stdev;
    auto sorted = report.samples_ms;
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    report.median_ms = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    report.min_ms = sorted.front();
    report.max_ms = sorted.back();
    auto rs = mean_std(report.repeat_means_ms);
    report.repeat_variance_ms2 = rs.stdev * rs.stdev;
    return report;
}

}  // namespace adasam
