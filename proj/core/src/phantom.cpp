#include "adasam/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "adasam/error.hpp"
#include "adasam/random.hpp"

namespace adasam {

namespace {

struct Ellipse {
    double cx, cy;  // normalized centre
    double a, b;    // normalized semi-axes
    double angle;   // radians

    bool contains(double u, double v) const {
        double du = u - cx;
        double dv = v - cy;
        double c = std::cos(angle);
        double s = std::sin(angle);
        double xr = c * du + s * dv;
        double yr = -s * du + c * dv;
        return (xr * xr) / (a * a) + (yr * yr) / (b * b) <= 1.0;
    }
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

void PhantomConfig::validate() const {
    if (image_size < 32) throw ConfigError("image_size must be >= 32");
    if (n_train < 0 || n_val < 0 || n_test < 0) throw ConfigError("slice counts must be >= 0");
    if (!(noise_sigma >= 0.0 && noise_sigma <= 1.0)) throw ConfigError("noise_sigma must be in [0,1]");
    double sum = 0.0;
    for (double f : class_mix) {
        if (!(f >= 0.0)) throw ConfigError("class_mix fractions must be >= 0");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("class_mix fractions must sum to 1");
}

void to_json(nlohmann::json& j, const PhantomConfig& c) {
    j = nlohmann::json{{"image_size", c.image_size}, {"n_train", c.n_train},
                       {"n_val", c.n_val},           {"n_test", c.n_test},
                       {"noise_sigma", c.noise_sigma}, {"class_mix", c.class_mix},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PhantomConfig& c) {
    j.at("image_size").get_to(c.image_size);
    j.at("n_train").get_to(c.n_train);
    j.at("n_val").get_to(c.n_val);
    j.at("n_test").get_to(c.n_test);
    j.at("noise_sigma").get_to(c.noise_sigma);
    j.at("class_mix").get_to(c.class_mix);
    j.at("seed").get_to(c.seed);
}

SliceClass phantom_target_class(const PhantomConfig& config, int index) {
    constexpr double kGolden = 0.61803398874989484820;
    double offset = static_cast<double>(splitmix64(config.seed ^ 0xC1A55ULL) >> 11) * 0x1.0p-53;
    double u = std::fmod(offset + kGolden * static_cast<double>(index), 1.0);
    double acc = 0.0;
    for (int c = 0; c < SliceClass::kCount; ++c) {
        acc += config.class_mix[c];
        if (u < acc) return SliceClass{c};
    }
    // Rounding at the top of the cumulative sum: last class with nonzero mass.
    for (int c = SliceClass::kCount - 1; c >= 0; --c) {
        if (config.class_mix[c] > 0.0) return SliceClass{c};
    }
    return SliceClass{0};
}

std::pair<ImageSlice, LabelMask> generate_phantom_slice(const PhantomConfig& config, int index) {
    config.validate();
    if (index < 0 || index >= config.total()) {
        throw ConfigError("phantom index " + std::to_string(index) + " out of range [0, " +
                          std::to_string(config.total()) + ")");
    }
    const int n = config.image_size;
    std::mt19937_64 rng(derive_seed(config.seed, static_cast<std::uint64_t>(index)));

    const SliceClass target = phantom_target_class(config, index);
    const bool has_vl = target.value == SliceClass::kVLOnly || target.value == SliceClass::kBoth;
    const bool has_vm = target.value == SliceClass::kVMOnly || target.value == SliceClass::kBoth;

    const double jx = uniform(rng, -0.02, 0.02);
    const double jy = uniform(rng, -0.02, 0.02);
    const Ellipse thigh{0.5 + jx, 0.5 + jy, 0.47, 0.45, 0.0};
    const Ellipse inner{0.5 + jx, 0.5 + jy, 0.42, 0.40, 0.0};
    const double fx = 0.5 + uniform(rng, -0.02, 0.02);
    const double fy = 0.56 + uniform(rng, -0.02, 0.02);
    const Ellipse bone{fx, fy, 0.075, 0.075, 0.0};
    const Ellipse marrow{fx, fy, 0.04, 0.04, 0.0};
    const std::array<Ellipse, 2> hamstrings{
        Ellipse{0.36 + uniform(rng, -0.02, 0.02), 0.77 + uniform(rng, -0.02, 0.02),
                uniform(rng, 0.08, 0.10), uniform(rng, 0.05, 0.065), uniform(rng, -0.4, 0.4)},
        Ellipse{0.63 + uniform(rng, -0.02, 0.02), 0.77 + uniform(rng, -0.02, 0.02),
                uniform(rng, 0.08, 0.10), uniform(rng, 0.05, 0.065), uniform(rng, -0.4, 0.4)},
    };
    // VL sits in the upper-right quadrant, VM in the upper-left; neither
    // crosses the image mid-lines for any jitter draw.
    const Ellipse vl{0.70 + uniform(rng, -0.025, 0.025), 0.32 + uniform(rng, -0.025, 0.025),
                     uniform(rng, 0.10, 0.12), uniform(rng, 0.07, 0.095), uniform(rng, -0.5, 0.5)};
    const Ellipse vm{0.31 + uniform(rng, -0.025, 0.025), 0.34 + uniform(rng, -0.025, 0.025),
                     uniform(rng, 0.09, 0.115), uniform(rng, 0.065, 0.09), uniform(rng, -0.5, 0.5)};

    struct Wave {
        double fu, fv, phase;
    };
    std::array<Wave, 3> texture{};
    for (auto& w : texture) {
        double f = uniform(rng, 1.0, 4.0);
        double th = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        w = Wave{f * std::cos(th), f * std::sin(th), uniform(rng, 0.0, 2.0 * std::numbers::pi)};
    }
    std::normal_distribution<double> gauss(0.0, 1.0);

    ImageSlice image(n, n);
    LabelMask mask(n, n);
    const double sigma = config.noise_sigma;
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double u = (x + 0.5) / n;
            const double v = (y + 0.5) / n;
            float level = PhantomLevels::kOutside;
            std::uint8_t label = 0;
            if (thigh.contains(u, v)) {
                level = inner.contains(u, v) ? PhantomLevels::kSoftTissue : PhantomLevels::kFat;
                for (const auto& h : hamstrings) {
                    if (h.contains(u, v)) level = PhantomLevels::kHamstring;
                }
                if (bone.contains(u, v)) {
                    level = marrow.contains(u, v) ? PhantomLevels::kMarrow : PhantomLevels::kBone;
                }
            }
            if (has_vl && vl.contains(u, v)) {
                level = PhantomLevels::kVL;
                label = static_cast<std::uint8_t>(Label::kVL);
            } else if (has_vm && vm.contains(u, v)) {
                level = PhantomLevels::kVM;
                label = static_cast<std::uint8_t>(Label::kVM);
            }
            double value = level;
            if (sigma > 0.0) {
                double t = 0.0;
                for (const auto& w : texture) {
                    t += std::sin(2.0 * std::numbers::pi * (w.fu * u + w.fv * v) + w.phase);
                }
                value += sigma * (0.8 * t / 3.0 + gauss(rng));
            }
            image.at(y, x) = static_cast<float>(std::clamp(value, 0.0, 1.0));
            mask.at(y, x) = label;
        }
    }
    return {std::move(image), std::move(mask)};
}

std::string to_string(Split split) {
    switch (split) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        case Split::kTest: return "test";
    }
    return "train";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::kTrain;
    if (s == "val") return Split::kVal;
    if (s == "test") return Split::kTest;
    throw ValidationError("unknown split tag: " + s);
}

std::vector<const ManifestRecord*> DatasetManifest::split(Split s) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records) {
        if (r.split == s) out.push_back(&r);
    }
    return out;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records) {
        recs.push_back({{"id", r.id},
                        {"image", r.image},
                        {"mask", r.mask},
                        {"class", r.slice_class.value},
                        {"split", adasam::to_string(r.split)}});
    }
    return {{"version", version}, {"config", config}, {"records", std::move(recs)}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, std::filesystem::path root) {
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kFormatVersion) {
        throw ValidationError("unsupported manifest version " + std::to_string(m.version));
    }
    m.config = j.at("config").get<PhantomConfig>();
    for (const auto& r : j.at("records")) {
        ManifestRecord rec;
        rec.id = r.at("id").get<std::string>();
        rec.image = r.at("image").get<std::string>();
        rec.mask = r.at("mask").get<std::string>();
        rec.slice_class = SliceClass{r.at("class").get<int>()};
        rec.split = parse_split(r.at("split").get<std::string>());
        m.records.push_back(std::move(rec));
    }
    m.root = std::move(root);
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open manifest for writing", file.string());
    out << manifest.to_json().dump(2) << '\n';
    if (!out) throw IoError("failed writing manifest", file.string());
}

DatasetManifest build_dataset(const PhantomConfig& config, const std::filesystem::path& out_dir) {
    config.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw IoError("cannot create dataset directory (" + ec.message() + ")", (out_dir / "images").string());
    std::filesystem::create_directories(out_dir / "masks", ec);
    if (ec) throw IoError("cannot create dataset directory (" + ec.message() + ")", (out_dir / "masks").string());

    const int total = config.total();
    std::vector<int> order(total);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(config.seed, 0x5B117ULL));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Split> split_of(total, Split::kTrain);
    for (int k = 0; k < total; ++k) {
        if (k < config.n_train) {
            split_of[order[k]] = Split::kTrain;
        } else if (k < config.n_train + config.n_val) {
            split_of[order[k]] = Split::kVal;
        } else {
            split_of[order[k]] = Split::kTest;
        }
    }

    DatasetManifest manifest;
    manifest.config = config;
    manifest.root = out_dir;
    manifest.records.reserve(total);
    for (int i = 0; i < total; ++i) {
        auto [image, mask] = generate_phantom_slice(config, i);
        char id[32];
        std::snprintf(id, sizeof(id), "s%05d", i);
        ManifestRecord rec;
        rec.id = id;
        rec.image = "images/" + rec.id + ".png";
        rec.mask = "masks/" + rec.id + ".png";
        rec.slice_class = derive_slice_class(mask);
        rec.split = split_of[i];
        save_image_png(out_dir / rec.image, image);
        save_mask_png(out_dir / rec.mask, mask);
        manifest.records.push_back(std::move(rec));
    }
    save_manifest(manifest, out_dir / "manifest.json");
    return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& dir_or_file) {
    std::filesystem::path file = dir_or_file;
    if (std::filesystem::is_directory(file)) file /= "manifest.json";
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open manifest", file.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed manifest (") + e.what() + ")", file.string());
    }
    auto manifest = DatasetManifest::from_json(j, file.parent_path());
    std::set<std::string> ids;
    for (const auto& r : manifest.records) {
        if (!ids.insert(r.id).second) throw ValidationError("duplicate slice id in manifest: " + r.id);
        if (!std::filesystem::exists(manifest.image_path(r))) {
            throw IoError("manifest image missing", manifest.image_path(r).string());
        }
        if (!std::filesystem::exists(manifest.mask_path(r))) {
            throw IoError("manifest mask missing", manifest.mask_path(r).string());
        }
    }
    return manifest;
}

std::vector<Sample> load_split(const DatasetManifest& manifest, Split split) {
    std::vector<Sample> out;
    for (const auto* r : manifest.split(split)) {
        Sample s;
        s.id = r->id;
        s.image = load_image_png(manifest.image_path(*r));
        s.mask = load_mask_png(manifest.mask_path(*r));
        s.slice_class = r->slice_class;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace adasam
