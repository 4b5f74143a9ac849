#include "adasam/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "adasam/checkpoint.hpp"
#include "adasam/error.hpp"
#include "adasam/metrics.hpp"
#include "adasam/random.hpp"

namespace adasam {

void TrainConfig::validate(int train_size) const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (label_budget != kBudgetAll && (label_budget < 0 || label_budget > train_size)) {
        throw ConfigError("label_budget " + std::to_string(label_budget) + " exceeds the train split size " +
                          std::to_string(train_size));
    }
    Tau{tau};
    if (pad < 0) throw ConfigError("pad must be >= 0");
    if (weights.lambda_seg < 0.0) throw ConfigError("lambda_seg must be >= 0");
    if (gamma_focus < 0.0) throw ConfigError("gamma must be >= 0");
    if (clip_norm <= 0.0) throw ConfigError("clip_norm must be > 0");
    if (labeled_per_batch < 0) throw ConfigError("labeled_per_batch must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate},
                       {"label_budget", c.label_budget == kBudgetAll ? nlohmann::json("all")
                                                                      : nlohmann::json(c.label_budget)},
                       {"seed", c.seed},
                       {"tau", c.tau},
                       {"pad", c.pad},
                       {"focal_alpha", c.focal_alpha},
                       {"gamma_focus", c.gamma_focus},
                       {"lambda_seg", c.weights.lambda_seg},
                       {"clip_norm", c.clip_norm},
                       {"labeled_per_batch", c.labeled_per_batch},
                       {"cache_prompts", c.cache_prompts},
                       {"two_pass", c.two_pass},
                       {"deterministic", c.deterministic}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    j.at("epochs").get_to(c.epochs);
    j.at("batch_size").get_to(c.batch_size);
    j.at("learning_rate").get_to(c.learning_rate);
    const auto& budget = j.at("label_budget");
    c.label_budget = budget.is_string() ? kBudgetAll : budget.get<int>();
    j.at("seed").get_to(c.seed);
    j.at("tau").get_to(c.tau);
    j.at("pad").get_to(c.pad);
    j.at("focal_alpha").get_to(c.focal_alpha);
    j.at("gamma_focus").get_to(c.gamma_focus);
    j.at("lambda_seg").get_to(c.weights.lambda_seg);
    j.at("clip_norm").get_to(c.clip_norm);
    j.at("labeled_per_batch").get_to(c.labeled_per_batch);
    j.at("cache_prompts").get_to(c.cache_prompts);
    j.at("two_pass").get_to(c.two_pass);
    j.at("deterministic").get_to(c.deterministic);
}

std::vector<int> select_labeled(const std::vector<SliceClass>& classes, int budget, std::uint64_t seed) {
    const int n = static_cast<int>(classes.size());
    if (budget == kBudgetAll || budget > n) budget = n;
    if (budget <= 0) return {};

    std::mt19937_64 rng(derive_seed(seed, 0x5E1EC7ULL));
    std::map<int, std::vector<int>> by_class;
    for (int i = 0; i < n; ++i) by_class[classes[i].value].push_back(i);

    std::vector<std::pair<int, int>> rarity;  // (count, class)
    for (const auto& [c, members] : by_class) rarity.emplace_back(static_cast<int>(members.size()), c);
    std::sort(rarity.begin(), rarity.end());

    std::vector<int> chosen;
    std::vector<char> taken(static_cast<std::size_t>(n), 0);
    for (const auto& [count, c] : rarity) {
        if (static_cast<int>(chosen.size()) >= budget) break;
        const auto& members = by_class[c];
        std::uniform_int_distribution<int> pick(0, count - 1);
        int idx = members[static_cast<std::size_t>(pick(rng))];
        chosen.push_back(idx);
        taken[static_cast<std::size_t>(idx)] = 1;
    }
    std::vector<int> rest;
    for (int i = 0; i < n; ++i) {
        if (!taken[static_cast<std::size_t>(i)]) rest.push_back(i);
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    for (int idx : rest) {
        if (static_cast<int>(chosen.size()) >= budget) break;
        chosen.push_back(idx);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

std::vector<int> select_labeled(const DatasetManifest& manifest, int budget, std::uint64_t seed) {
    std::vector<SliceClass> classes;
    for (const auto* r : manifest.split(Split::kTrain)) classes.push_back(r->slice_class);
    return select_labeled(classes, budget, seed);
}

std::vector<double> inverse_frequency_alpha(const std::vector<SliceClass>& classes, int n_classes) {
    std::vector<double> counts(static_cast<std::size_t>(n_classes), 0.0);
    for (const auto& c : classes) counts[static_cast<std::size_t>(c.value)] += 1.0;
    std::vector<double> alpha(counts.size());
    double sum = 0.0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        alpha[c] = 1.0 / std::max(counts[c], 1.0);
        sum += alpha[c];
    }
    for (auto& a : alpha) a *= static_cast<double>(alpha.size()) / sum;
    return alpha;
}

TrainConfig TrainConfig::desk() {
    TrainConfig c;
    c.learning_rate = 1e-3;
    return c;
}

std::unique_ptr<torch::optim::Adam> make_optimizer(AdaSam& model, const TrainConfig& config) {
    std::vector<torch::Tensor> params;
    for (const auto& p : model->parameters(true)) {
        if (p.requires_grad()) params.push_back(p);
    }
    return std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(config.learning_rate));
}

namespace {

torch::Tensor stack_masks(const std::vector<const LabelMask*>& masks) {
    std::vector<torch::Tensor> ts;
    ts.reserve(masks.size());
    for (const auto* m : masks) ts.push_back(mask_to_tensor(*m));
    return torch::stack(ts);
}

}  // namespace

StepStats train_step(AdaSam& model, torch::optim::Optimizer& optimizer, const std::vector<BatchItem>& batch,
                     TrainState& state, const TrainConfig& config, const FocalParams& focal) {
    if (batch.empty()) throw ConfigError("empty training batch");
    model->train();
    const int n = model->config().image_size;
    const auto b = static_cast<int64_t>(batch.size());

    std::vector<const ImageSlice*> image_ptrs;
    std::vector<int64_t> target_values;
    for (const auto& item : batch) {
        image_ptrs.push_back(&item.sample->image);
        target_values.push_back(item.sample->slice_class.value);
    }
    auto images = to_batch(image_ptrs, n);
    auto targets = torch::tensor(target_values, torch::kLong);

    auto features = model->encode(images);
    auto logits = model->class_logits(features);
    auto probs = torch::softmax(logits, -1);
    auto cls_loss = focal_loss(probs, targets, focal).mean();
    auto predicted = logits.detach().argmax(1);

    StepStats stats;
    stats.accuracy = predicted.eq(targets).to(torch::kFloat64).mean().item<double>();

    // Prompts for labelled slices: CAM of the predicted class, from the
    // current weights (or the epoch cache).
    std::vector<int64_t> seg_index;
    std::vector<BBoxPrompt> seg_boxes;
    std::vector<const LabelMask*> seg_masks;
    std::vector<torch::Tensor> seg_gates;
    std::vector<int64_t> need_cam;
    for (int64_t i = 0; i < b; ++i) {
        if (batch[static_cast<std::size_t>(i)].labeled) need_cam.push_back(i);
    }
    if (!need_cam.empty()) {
        std::vector<CamMap> cams;
        {
            auto idx = torch::tensor(need_cam, torch::kLong);
            auto feats = features.detach().index_select(0, idx).requires_grad_(true);
            auto cam_logits = model->class_logits(feats);
            auto chosen = cam_logits.gather(1, predicted.index_select(0, idx).view({-1, 1})).sum();
            auto grads = torch::autograd::grad({chosen}, {feats})[0];
            cams = cams_from_gradients(feats.detach(), grads, n, n);
        }
        const Tau tau(config.tau);
        for (std::size_t k = 0; k < need_cam.size(); ++k) {
            const int64_t i = need_cam[k];
            const Sample& s = *batch[static_cast<std::size_t>(i)].sample;
            std::optional<BBoxPrompt> box;
            SliceClass gate_class{static_cast<int>(predicted[i].item<int64_t>())};
            auto cached = config.cache_prompts ? state.prompt_cache.find(s.id) : state.prompt_cache.end();
            if (cached != state.prompt_cache.end()) {
                box = cached->second;
            } else if (predicted[i].item<int64_t>() != SliceClass::kNeither) {
                box = cam_to_bbox(threshold_cam(cams[k], tau), config.pad);
                if (box && config.cache_prompts) state.prompt_cache[s.id] = *box;
            }
            if (!box) {
                box = mask_to_bbox(s.mask, config.pad);
                if (!box) continue;  // nothing to segment and no prompt
                gate_class = s.slice_class;
                ++stats.fallback_count;
            }
            seg_index.push_back(i);
            seg_boxes.push_back(*box);
            seg_masks.push_back(&s.mask);
            seg_gates.push_back(class_label_offsets(gate_class, model->config().n_labels));
        }
    }

    std::optional<torch::Tensor> seg_loss;
    if (!seg_index.empty()) {
        auto idx = torch::tensor(seg_index, torch::kLong);
        auto prompt = model->encode_prompts(seg_boxes);
        auto mask_logits = model->decode(features.index_select(0, idx), prompt, images.index_select(0, idx));
        mask_logits = mask_logits + torch::stack(seg_gates).unsqueeze(-1).unsqueeze(-1);
        auto mask_probs = torch::softmax(mask_logits, 1);
        seg_loss = dice_loss(mask_probs, stack_masks(seg_masks)).mean();
        stats.seg_count = static_cast<int>(seg_index.size());
    }

    auto total = mtl_loss(cls_loss, seg_loss, config.weights);
    stats.cls_loss = cls_loss.item<double>();
    if (seg_loss) stats.seg_loss = seg_loss->item<double>();
    stats.total_loss = total.item<double>();
    if (!std::isfinite(stats.total_loss)) {
        throw NonFiniteLossError("non-finite loss at step " + std::to_string(state.step) +
                                 ": cls=" + std::to_string(stats.cls_loss) +
                                 " seg=" + (stats.seg_loss ? std::to_string(*stats.seg_loss) : "none"));
    }

    optimizer.zero_grad();
    total.backward();
    std::vector<torch::Tensor> trainable;
    for (const auto& group : optimizer.param_groups()) {
        for (const auto& p : group.params()) trainable.push_back(p);
    }
    torch::nn::utils::clip_grad_norm_(trainable, config.clip_norm);
    optimizer.step();

    if (config.two_pass) {
        torch::NoGradGuard guard;
        auto after = torch::softmax(model->class_logits(model->encode(images)), -1);
        stats.cls_loss_after = focal_loss(after, targets, focal).mean().item<double>();
    }

    ++state.step;
    state.last_cls = stats.cls_loss;
    state.last_seg = stats.seg_loss.value_or(0.0);
    state.last_total = stats.total_loss;
    state.last_accuracy = stats.accuracy;
    state.fallback_prompts += stats.fallback_count;
    state.seg_samples += stats.seg_count;
    return stats;
}

nlohmann::json FitReport::to_json() const {
    nlohmann::json ep = nlohmann::json::array();
    for (const auto& e : epochs) {
        ep.push_back({{"epoch", e.epoch},
                      {"cls_loss", e.cls_loss},
                      {"seg_loss", e.seg_loss},
                      {"total_loss", e.total_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_dsc", e.val_dsc},
                      {"seg_samples", e.seg_samples},
                      {"fallback_prompts", e.fallback_prompts}});
    }
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : steps) {
        nlohmann::json row = {{"cls", s.cls_loss}, {"total", s.total_loss}, {"acc", s.accuracy},
                              {"seg_count", s.seg_count}, {"fallback", s.fallback_count}};
        row["seg"] = s.seg_loss ? nlohmann::json(*s.seg_loss) : nlohmann::json(nullptr);
        if (s.cls_loss_after) row["cls_after"] = *s.cls_loss_after;
        st.push_back(std::move(row));
    }
    return {{"epochs", std::move(ep)},
            {"labeled_indices", labeled_indices},
            {"labeled_ids", labeled_ids},
            {"focal_alpha", focal_alpha},
            {"best_epoch", best_epoch},
            {"best_val_dsc", best_val_dsc},
            {"steps", std::move(st)}};
}

FitResult fit(AdaSam& model, const DatasetManifest& manifest, const TrainConfig& config,
              const FitOptions& options) {
    if (config.deterministic) torch::set_num_threads(1);
    auto train = load_split(manifest, Split::kTrain);
    auto val = load_split(manifest, Split::kVal);
    config.validate(static_cast<int>(train.size()));
    if (train.empty()) throw ConfigError("train split is empty");

    std::vector<SliceClass> classes;
    for (const auto& s : train) classes.push_back(s.slice_class);

    FocalParams focal;
    focal.alpha = config.focal_alpha.empty() ? inverse_frequency_alpha(classes, model->config().n_classes)
                                             : config.focal_alpha;
    focal.gamma_focus = config.gamma_focus;
    focal.validate(model->config().n_classes);

    TrainState state;
    state.rng.seed(derive_seed(config.seed, 0x7EA1ULL));
    state.labeled = select_labeled(classes, config.label_budget, config.seed);
    std::vector<char> is_labeled(train.size(), 0);
    for (int i : state.labeled) is_labeled[static_cast<std::size_t>(i)] = 1;

    FitResult result;
    result.report.labeled_indices = state.labeled;
    for (int i : state.labeled) result.report.labeled_ids.push_back(train[static_cast<std::size_t>(i)].id);
    result.report.focal_alpha = focal.alpha;

    auto optimizer = make_optimizer(model, config);
    const bool oversample = !state.labeled.empty() && state.labeled.size() < train.size() &&
                            config.labeled_per_batch > 0;
    std::vector<int> pool = state.labeled;
    std::size_t pool_pos = pool.size();

    const Tau tau(config.tau);
    if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        state.prompt_cache.clear();
        std::shuffle(order.begin(), order.end(), state.rng);
        EpochEntry entry;
        entry.epoch = epoch;
        double seg_sum = 0.0;
        int seg_steps = 0;
        int steps = 0;
        const auto fallback_before = state.fallback_prompts;
        const auto seg_before = state.seg_samples;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            std::vector<BatchItem> batch;
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            for (std::size_t k = start; k < end; ++k) {
                const auto idx = static_cast<std::size_t>(order[k]);
                batch.push_back({&train[idx], is_labeled[idx] != 0});
            }
            for (int e = 0; oversample && e < config.labeled_per_batch; ++e) {
                if (pool_pos >= pool.size()) {
                    std::shuffle(pool.begin(), pool.end(), state.rng);
                    pool_pos = 0;
                }
                batch.push_back({&train[static_cast<std::size_t>(pool[pool_pos++])], true});
            }
            auto stats = train_step(model, *optimizer, batch, state, config, focal);
            entry.cls_loss += stats.cls_loss;
            entry.total_loss += stats.total_loss;
            entry.train_accuracy += stats.accuracy;
            if (stats.seg_loss) {
                seg_sum += *stats.seg_loss;
                ++seg_steps;
            }
            ++steps;
            result.report.steps.push_back(stats);
        }
        entry.cls_loss /= steps;
        entry.total_loss /= steps;
        entry.train_accuracy /= steps;
        entry.seg_loss = seg_steps > 0 ? seg_sum / seg_steps : 0.0;
        entry.fallback_prompts = state.fallback_prompts - fallback_before;
        entry.seg_samples = state.seg_samples - seg_before;

        model->eval();
        const auto& scored = val.empty() ? train : val;
        entry.val_dsc = evaluate_samples(scored, [&](const Sample& s) {
                            return segment(model, s.image, tau, config.pad);
                        }).overall.mean;
        result.report.epochs.push_back(entry);
        if (options.on_epoch) options.on_epoch(entry);

        if (entry.val_dsc > result.report.best_val_dsc) {
            result.report.best_val_dsc = entry.val_dsc;
            result.report.best_epoch = epoch;
            result.best_model = clone_model(model);
            if (!options.out_dir.empty()) {
                save_checkpoint(result.best_model, options.out_dir / "checkpoint",
                                {{"train_config", config},
                                 {"epoch", epoch},
                                 {"val_dsc", entry.val_dsc},
                                 {"provenance", options.provenance}});
            }
        }
    }
    result.best_model->eval();

    if (!options.out_dir.empty()) {
        auto report = result.report.to_json();
        report["train_config"] = config;
        report["model_config"] = model->config();
        report["provenance"] = options.provenance;
        std::ofstream out(options.out_dir / "report.json", std::ios::binary);
        if (!out) throw IoError("cannot write training report", (options.out_dir / "report.json").string());
        out << report.dump(2) << '\n';
    }
    return result;
}

}  // namespace adasam
