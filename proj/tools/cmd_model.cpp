#include <cstdio>
#include <iostream>
#include <memory>

#include "adasam/auto_prompt.hpp"
#include "adasam/checkpoint.hpp"
#include "adasam/error.hpp"
#include "adasam/experiments.hpp"
#include "adasam/metrics.hpp"
#include "adasam/phantom.hpp"
#include "adasam/provenance.hpp"
#include "adasam/training.hpp"
#include "common.hpp"

namespace adasam::cli {

namespace {

struct GenDataOptions {
    std::filesystem::path out;
    int n_train = 150;
    int n_val = 10;
    int n_test = 50;
    std::uint64_t seed = 0;
    double noise = 0.05;
    int size = 256;
};

struct TrainOptions {
    std::filesystem::path data;
    std::filesystem::path out;
    std::string preset = "full";
    std::string budget = "all";
    int epochs = 10;
    std::uint64_t seed = 0;
    double tau = kDefaultTau;
    int pad = kDefaultPad;
    double lambda_seg = 1.0;
    double gamma = 2.0;
    double lr = 0.0;
    int batch_size = 8;
    int rank = 8;
    bool two_pass = false;
    bool cache_prompts = false;
};

struct CkptOptions {
    std::filesystem::path ckpt;
    std::filesystem::path image;
    std::filesystem::path data;
    std::filesystem::path out;
    std::filesystem::path overlay;
    std::string split = "test";
    double tau = kDefaultTau;
    int pad = kDefaultPad;
    int repeats = 3;
};

struct ExperimentOptionsCli {
    std::filesystem::path data;
    std::filesystem::path out;
    std::string preset = "full";
    std::vector<std::string> grid;
    std::string ranks = "2,4,6,8";
    std::string seeds = "1";
    std::string budget = "5";
    int epochs = 10;
    double tau = kDefaultTau;
};

ModelConfig model_for(const std::string& preset, const DatasetManifest& manifest) {
    auto mc = model_preset(preset);
    mc.image_size = manifest.config.image_size;
    mc.validate();
    return mc;
}

TrainConfig train_for(const TrainOptions& o) {
    auto tc = train_preset(o.preset);
    tc.label_budget = parse_budget(o.budget);
    tc.epochs = o.epochs;
    tc.seed = o.seed;
    tc.tau = o.tau;
    tc.pad = o.pad;
    tc.weights.lambda_seg = o.lambda_seg;
    tc.gamma_focus = o.gamma;
    if (o.lr > 0.0) tc.learning_rate = o.lr;
    tc.batch_size = o.batch_size;
    tc.two_pass = o.two_pass;
    tc.cache_prompts = o.cache_prompts;
    return tc;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    auto values = parse_int_list(text);
    std::vector<std::uint64_t> seeds;
    if (values.size() == 1 && text.find(',') == std::string::npos) {
        if (values[0] < 1) throw ConfigError("seed count must be >= 1");
        for (int s = 1; s <= values[0]; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
        return seeds;
    }
    for (int v : values) {
        if (v < 0) throw ConfigError("seeds must be non-negative");
        seeds.push_back(static_cast<std::uint64_t>(v));
    }
    return seeds;
}

/// budgets=0,5,50,100 seeds=3 ranks=2,4 ; a bare count for seeds means 1..N.
ExperimentGrid parse_grid(const std::vector<std::string>& tokens) {
    ExperimentGrid grid;
    for (const auto& t : tokens) {
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError("grid entries look like key=value, got '" + t + "'");
        const auto key = t.substr(0, eq);
        const auto value = t.substr(eq + 1);
        if (key == "budgets") {
            grid.budgets = parse_int_list(value);
        } else if (key == "seeds") {
            grid.seeds = parse_seeds(value);
        } else if (key == "ranks") {
            grid.ranks = parse_int_list(value);
        } else {
            throw ConfigError("unknown grid key '" + key + "' (budgets|seeds|ranks)");
        }
    }
    return grid;
}

void add_gen_data(CLI::App& app, GlobalOptions& g) {
    auto o = std::make_shared<GenDataOptions>();
    auto* sub = app.add_subcommand("gen-data", "Generate a synthetic thigh-phantom dataset");
    sub->add_option("--out", o->out, "Output directory (default: ADASAM_DATA_DIR)");
    sub->add_option("--n-train", o->n_train, "Training slices")->capture_default_str();
    sub->add_option("--n-val", o->n_val, "Validation slices")->capture_default_str();
    sub->add_option("--n-test", o->n_test, "Test slices")->capture_default_str();
    sub->add_option("--seed", o->seed, "Generator seed")->capture_default_str();
    sub->add_option("--noise", o->noise, "Gaussian noise sigma")->capture_default_str();
    sub->add_option("--size", o->size, "Slice side length in pixels")->capture_default_str();
    sub->callback([o, &g] {
        const auto out = resolve_data_dir(g, "--out", o->out);
        PhantomConfig pc;
        pc.image_size = o->size;
        pc.n_train = o->n_train;
        pc.n_val = o->n_val;
        pc.n_test = o->n_test;
        pc.seed = o->seed;
        pc.noise_sigma = o->noise;
        pc.validate();
        log("generating " + std::to_string(pc.total()) + " slices of " + std::to_string(pc.image_size) + " px into " +
            out.string());
        auto manifest = build_dataset(pc, out);
        auto j = manifest.to_json();
        j["provenance"] = make_provenance({{"command", "gen-data"}, {"out", out.string()}, {"phantom", pc}});
        write_json(out / "manifest.json", j);
        std::map<std::string, int> counts;
        for (const auto& r : manifest.records) ++counts[to_string(r.split)];
        emit({{"manifest", (out / "manifest.json").string()}, {"splits", counts}, {"provenance", j["provenance"]}});
    });
}

void add_train(CLI::App& app, GlobalOptions& g) {
    auto o = std::make_shared<TrainOptions>();
    auto* sub = app.add_subcommand("train", "Train ADA-SAM on a phantom dataset");
    sub->add_option("--data", o->data, "Dataset directory (default: ADASAM_DATA_DIR)");
    sub->add_option("--out", o->out, "Output directory for checkpoint/ and report.json")->required();
    sub->add_option("--preset", o->preset, "Model and optimizer preset")
        ->check(CLI::IsMember({"full", "desk"}))
        ->capture_default_str();
    sub->add_option("--budget", o->budget, "Segmentation-labelled slices: 0|5|50|100|...|all")->capture_default_str();
    sub->add_option("--epochs", o->epochs, "Epochs")->capture_default_str();
    sub->add_option("--seed", o->seed, "Model and data-order seed")->capture_default_str();
    sub->add_option("--tau", o->tau, "CAM threshold as a fraction of its maximum")->capture_default_str();
    sub->add_option("--pad", o->pad, "Box padding in pixels")->capture_default_str();
    sub->add_option("--lambda-seg", o->lambda_seg, "Weight of the Dice term")->capture_default_str();
    sub->add_option("--gamma", o->gamma, "Focal loss focusing parameter")->capture_default_str();
    sub->add_option("--lr", o->lr, "Learning rate (default: preset)");
    sub->add_option("--batch-size", o->batch_size, "Batch size")->capture_default_str();
    sub->add_option("--rank", o->rank, "LoRA rank")->capture_default_str();
    sub->add_flag("--two-pass", o->two_pass, "Log the classifier loss again after each update");
    sub->add_flag("--cache-prompts", o->cache_prompts, "Reuse each slice's prompt within an epoch");
    sub->callback([o, &g] {
        const auto data = resolve_data_dir(g, "--data", o->data);
        const auto manifest = load_manifest(data);
        auto mc = model_for(o->preset, manifest);
        mc.lora_rank = o->rank;
        mc.seed = o->seed;
        const auto tc = train_for(*o);
        tc.validate(static_cast<int>(manifest.split(Split::kTrain).size()));
        const auto prov = make_provenance(
            {{"command", "train"}, {"data", data.string()}, {"model_config", mc}, {"train_config", tc}});
        auto model = make_model(mc);
        const auto params = count_parameters(model);
        log("model: " + std::to_string(params.total) + " parameters, " + std::to_string(params.trainable) +
            " trainable");
        FitOptions fo;
        fo.out_dir = o->out;
        fo.provenance = prov;
        fo.on_epoch = [](const EpochEntry& e) {
            char line[128];
            std::snprintf(line, sizeof(line), "epoch %3d  cls %.4f  seg %.4f  acc %.3f  val DSC %.4f", e.epoch,
                          e.cls_loss, e.seg_loss, e.train_accuracy, e.val_dsc);
            log(line);
        };
        auto result = fit(model, manifest, tc, fo);
        auto summary = result.report.to_json();
        summary.erase("steps");
        summary["checkpoint"] = (o->out / "checkpoint").string();
        summary["params"] = {{"total", params.total}, {"trainable", params.trainable}};
        summary["provenance"] = prov;
        emit(summary);
    });
}

void add_infer(CLI::App& app, GlobalOptions& g) {
    auto o = std::make_shared<CkptOptions>();
    auto* sub = app.add_subcommand("infer", "Segment one image, or a whole split into <out>/<id>.png");
    sub->add_option("--ckpt", o->ckpt, "Checkpoint (or training output) directory")->required();
    auto* image = sub->add_option("--image", o->image, "Single input PNG");
    auto* data = sub->add_option("--data", o->data, "Dataset directory for split mode");
    image->excludes(data);
    sub->add_option("--split", o->split, "Split for dataset mode")
        ->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
    sub->add_option("--out", o->out, "Mask PNG (single) or directory (split)")->required();
    sub->add_option("--tau", o->tau, "CAM threshold")->capture_default_str();
    sub->add_option("--pad", o->pad, "Box padding")->capture_default_str();
    sub->callback([o, &g] {
        const auto ckpt = checkpoint_dir(o->ckpt);
        auto model = load_checkpoint(ckpt);
        model->eval();
        const Tau tau(o->tau);
        nlohmann::json config = {{"command", "infer"}, {"ckpt", ckpt.string()}, {"tau", o->tau}, {"pad", o->pad}};
        if (!o->image.empty()) {
            config["image"] = o->image.string();
            PromptResult pr;
            const auto mask = segment(model, load_image_png(o->image), tau, o->pad, &pr);
            save_mask_png(o->out, mask);
            emit({{"mask", o->out.string()},
                  {"class", pr.slice_class.value},
                  {"box", pr.box ? nlohmann::json(*pr.box) : nlohmann::json(nullptr)},
                  {"provenance", make_provenance(config)}});
            return;
        }
        const auto data = resolve_data_dir(g, "--data", o->data);
        const auto manifest = load_manifest(data);
        config["data"] = data.string();
        config["split"] = o->split;
        nlohmann::json slices = nlohmann::json::array();
        for (const auto* rec : manifest.split(parse_split(o->split))) {
            PromptResult pr;
            const auto mask = segment(model, load_image_png(manifest.image_path(*rec)), tau, o->pad, &pr);
            save_mask_png(o->out / (rec->id + ".png"), mask);
            slices.push_back({{"id", rec->id},
                              {"class", pr.slice_class.value},
                              {"box", pr.box ? nlohmann::json(*pr.box) : nlohmann::json(nullptr)}});
        }
        const nlohmann::json index = {{"slices", slices}, {"provenance", make_provenance(config)}};
        write_json(o->out / "predictions.json", index);
        emit({{"out", o->out.string()}, {"count", slices.size()}, {"provenance", index["provenance"]}});
    });
}

void add_prompt(CLI::App& app, GlobalOptions&) {
    auto o = std::make_shared<CkptOptions>();
    auto* sub = app.add_subcommand("prompt", "Show the class and GradCAM box prompt for one image");
    sub->add_option("--ckpt", o->ckpt, "Checkpoint (or training output) directory")->required();
    sub->add_option("--image", o->image, "Input PNG")->required();
    sub->add_option("--tau", o->tau, "CAM threshold")->capture_default_str();
    sub->add_option("--pad", o->pad, "Box padding")->capture_default_str();
    sub->add_option("--overlay", o->overlay, "Write an RGB PNG with the box drawn in red");
    sub->callback([o] {
        const auto ckpt = checkpoint_dir(o->ckpt);
        auto model = load_checkpoint(ckpt);
        model->eval();
        const auto image = load_image_png(o->image);
        const auto pr = generate_prompt(model, image, Tau(o->tau), o->pad);
        if (!o->overlay.empty()) {
            auto rgb = render_overlay_rgb(&image, LabelMask(image.height, image.width));
            if (pr.box) {
                auto put = [&](int y, int x) {
                    const auto i = 3 * (static_cast<std::size_t>(y) * image.width + x);
                    rgb[i] = 255;
                    rgb[i + 1] = 0;
                    rgb[i + 2] = 0;
                };
                const auto& b = *pr.box;
                for (int x = b.x_min; x < b.x_max; ++x) {
                    put(b.y_min, x);
                    put(b.y_max - 1, x);
                }
                for (int y = b.y_min; y < b.y_max; ++y) {
                    put(y, b.x_min);
                    put(y, b.x_max - 1);
                }
            }
            save_rgb_png(o->overlay, image.height, image.width, rgb);
        }
        emit({{"class", pr.slice_class.value},
              {"probs", pr.probs.probs},
              {"box", pr.box ? nlohmann::json(*pr.box) : nlohmann::json(nullptr)},
              {"provenance", make_provenance({{"command", "prompt"},
                                              {"ckpt", ckpt.string()},
                                              {"image", o->image.string()},
                                              {"tau", o->tau},
                                              {"pad", o->pad}})}});
    });
}

void add_eval(CLI::App& app, GlobalOptions& g) {
    auto o = std::make_shared<CkptOptions>();
    auto* sub = app.add_subcommand("eval", "DSC of a checkpoint on a split, with the full-image-box baseline");
    sub->add_option("--ckpt", o->ckpt, "Checkpoint (or training output) directory")->required();
    sub->add_option("--data", o->data, "Dataset directory (default: ADASAM_DATA_DIR)");
    sub->add_option("--split", o->split, "Split")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    sub->add_option("--tau", o->tau, "CAM threshold")->capture_default_str();
    sub->add_option("--pad", o->pad, "Box padding")->capture_default_str();
    sub->add_option("--out", o->out, "Write the full report (with per-slice scores) here");
    sub->callback([o, &g] {
        const auto data = resolve_data_dir(g, "--data", o->data);
        const auto manifest = load_manifest(data);
        const auto ckpt = checkpoint_dir(o->ckpt);
        auto model = load_checkpoint(ckpt);
        model->eval();
        const auto split = parse_split(o->split);
        const auto ada = evaluate_split(model, manifest, split, Tau(o->tau), o->pad);
        const auto base = evaluate_split_full_box(model, manifest, split);
        auto j = ada.to_json();
        j["baseline"] = base.to_json();
        j["provenance"] = make_provenance({{"command", "eval"},
                                           {"ckpt", ckpt.string()},
                                           {"data", data.string()},
                                           {"split", o->split},
                                           {"tau", o->tau},
                                           {"pad", o->pad}});
        if (!o->out.empty()) write_json(o->out, j);
        emit({{"vl", ada.vl},
              {"vm", ada.vm},
              {"overall", ada.overall},
              {"baseline", {{"vl", base.vl}, {"vm", base.vm}, {"overall", base.overall}}},
              {"provenance", j["provenance"]}});
    });
}

void add_timing(CLI::App& app, GlobalOptions& g) {
    auto o = std::make_shared<CkptOptions>();
    auto* sub = app.add_subcommand("timing", "Per-slice latency of PNG load + prompt + decode");
    sub->add_option("--ckpt", o->ckpt, "Checkpoint (or training output) directory")->required();
    sub->add_option("--data", o->data, "Dataset directory (default: ADASAM_DATA_DIR)");
    sub->add_option("--split", o->split, "Split")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    sub->add_option("--repeats", o->repeats, "Passes over the split")->capture_default_str();
    sub->add_option("--tau", o->tau, "CAM threshold")->capture_default_str();
    sub->add_option("--out", o->out, "Write the report here");
    sub->callback([o, &g] {
        const auto data = resolve_data_dir(g, "--data", o->data);
        const auto manifest = load_manifest(data);
        const auto ckpt = checkpoint_dir(o->ckpt);
        auto model = load_checkpoint(ckpt);
        std::vector<std::filesystem::path> paths;
        for (const auto* rec : manifest.split(parse_split(o->split))) paths.push_back(manifest.image_path(*rec));
        auto j = timing_report(model, paths, Tau(o->tau), o->pad, o->repeats).to_json();
        j["provenance"] = make_provenance({{"command", "timing"},
                                           {"ckpt", ckpt.string()},
                                           {"data", data.string()},
                                           {"split", o->split},
                                           {"repeats", o->repeats}});
        if (!o->out.empty()) write_json(o->out, j);
        j.erase("samples_ms");
        emit(j);
    });
}

void add_experiment(CLI::App& app, GlobalOptions& g) {
    auto o = std::make_shared<ExperimentOptionsCli>();
    auto* sub = app.add_subcommand("experiment", "Label-budget sweep: ADA-SAM vs. the full-image-box baseline");
    sub->add_option("--data", o->data, "Dataset directory (default: ADASAM_DATA_DIR)");
    sub->add_option("--out", o->out, "Output directory for table.json, table.md and cells/")->required();
    sub->add_option("--grid", o->grid, "budgets=0,5,50,100 seeds=3")->expected(1, 3);
    sub->add_option("--preset", o->preset, "Model and optimizer preset")
        ->check(CLI::IsMember({"full", "desk"}))
        ->capture_default_str();
    sub->add_option("--epochs", o->epochs, "Epochs per run")->capture_default_str();
    sub->add_option("--tau", o->tau, "CAM threshold")->capture_default_str();
    sub->callback([o, &g] {
        const auto data = resolve_data_dir(g, "--data", o->data);
        const auto manifest = load_manifest(data);
        const auto grid = parse_grid(o->grid);
        const auto mc = model_for(o->preset, manifest);
        auto tc = train_preset(o->preset);
        tc.epochs = o->epochs;
        tc.tau = o->tau;
        ExperimentOptions eo;
        eo.out_dir = o->out;
        eo.provenance = make_provenance({{"command", "experiment"},
                                         {"data", data.string()},
                                         {"grid", grid},
                                         {"model_config", mc},
                                         {"train_config", tc}});
        eo.on_cell = [](const BudgetCell& c) {
            char line[128];
            std::snprintf(line, sizeof(line), "budget %3d seed %llu: ADA-SAM %.4f  baseline %.4f  (%.1f s)", c.budget,
                          static_cast<unsigned long long>(c.seed), c.ada.overall.mean, c.baseline.overall.mean,
                          c.train_seconds);
            log(line);
        };
        const auto table = label_budget_experiment(grid, manifest, mc, tc, eo);
        write_text(o->out / "table.md", table.to_markdown());
        std::cout << table.to_markdown();
    });
}

void add_ablate(CLI::App& app, GlobalOptions& g) {
    auto o = std::make_shared<ExperimentOptionsCli>();
    auto* sub = app.add_subcommand("ablate", "LoRA rank ablation at a fixed label budget");
    sub->add_option("--data", o->data, "Dataset directory (default: ADASAM_DATA_DIR)");
    sub->add_option("--out", o->out, "Output directory for ablation.json and ablation.md")->required();
    sub->add_option("--ranks", o->ranks, "Comma-separated ranks")->capture_default_str();
    sub->add_option("--seeds", o->seeds, "Seed count N (1..N) or comma list")->capture_default_str();
    sub->add_option("--budget", o->budget, "Label budget")->capture_default_str();
    sub->add_option("--preset", o->preset, "Model and optimizer preset")
        ->check(CLI::IsMember({"full", "desk"}))
        ->capture_default_str();
    sub->add_option("--epochs", o->epochs, "Epochs per run")->capture_default_str();
    sub->add_option("--tau", o->tau, "CAM threshold")->capture_default_str();
    sub->callback([o, &g] {
        const auto data = resolve_data_dir(g, "--data", o->data);
        const auto manifest = load_manifest(data);
        const auto ranks = parse_int_list(o->ranks);
        const auto seeds = parse_seeds(o->seeds);
        const auto mc = model_for(o->preset, manifest);
        auto tc = train_preset(o->preset);
        tc.epochs = o->epochs;
        tc.tau = o->tau;
        tc.label_budget = parse_budget(o->budget);
        ExperimentOptions eo;
        eo.out_dir = o->out;
        eo.provenance = make_provenance({{"command", "ablate"},
                                         {"data", data.string()},
                                         {"ranks", ranks},
                                         {"seeds", seeds},
                                         {"model_config", mc},
                                         {"train_config", tc}});
        const auto table = lora_rank_ablation(ranks, seeds, manifest, mc, tc, eo);
        write_text(o->out / "ablation.md", table.to_markdown());
        std::cout << table.to_markdown();
    });
}

}  // namespace

void register_model_commands(CLI::App& app, GlobalOptions& g) {
    add_gen_data(app, g);
    add_train(app, g);
    add_infer(app, g);
    add_prompt(app, g);
    add_eval(app, g);
    add_timing(app, g);
    add_experiment(app, g);
    add_ablate(app, g);
}

}  // namespace adasam::cli
