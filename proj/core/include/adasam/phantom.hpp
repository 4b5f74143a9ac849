#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "adasam/image.hpp"

namespace adasam {

/// Synthetic thigh phantom settings. class_mix is the target fraction of
/// slices with {neither, VL only, VM only, both} muscles.
struct PhantomConfig {
    int image_size = 256;
    int n_train = 150;
    int n_val = 10;
    int n_test = 50;
    double noise_sigma = 0.05;
    std::array<double, 4> class_mix{0.15, 0.20, 0.20, 0.45};
    std::uint64_t seed = 0;

    int total() const { return n_train + n_val + n_test; }

    /// Throws ConfigError when an invariant does not hold.
    void validate() const;
};

void to_json(nlohmann::json& j, const PhantomConfig& c);
void from_json(const nlohmann::json& j, PhantomConfig& c);

/// Slice class the generator targets for a given index. Classes are assigned
/// along a seeded golden-ratio sequence so that empirical frequencies track
/// class_mix closely even for short runs.
SliceClass phantom_target_class(const PhantomConfig& config, int index);

/// Deterministic in (config.seed, index). With noise_sigma == 0 the image is
/// piecewise constant and the VL/VM intensity levels occur only inside their
/// mask regions.
std::pair<ImageSlice, LabelMask> generate_phantom_slice(const PhantomConfig& config, int index);

/// Noise-free intensity levels of the phantom tissues.
struct PhantomLevels {
    static constexpr float kOutside = 0.0f;
    static constexpr float kSoftTissue = 0.25f;
    static constexpr float kFat = 0.85f;
    static constexpr float kBone = 0.95f;
    static constexpr float kMarrow = 0.40f;
    static constexpr float kHamstring = 0.52f;
    static constexpr float kVM = 0.58f;
    static constexpr float kVL = 0.64f;
};

enum class Split { kTrain, kVal, kTest };

std::string to_string(Split split);
Split parse_split(const std::string& s);

struct ManifestRecord {
    std::string id;
    std::string image;  // relative to the manifest directory
    std::string mask;
    SliceClass slice_class;
    Split split = Split::kTrain;
};

struct DatasetManifest {
    static constexpr int kFormatVersion = 1;

    int version = kFormatVersion;
    PhantomConfig config;
    std::vector<ManifestRecord> records;
    std::filesystem::path root;  // directory holding manifest.json; not serialized

    std::vector<const ManifestRecord*> split(Split s) const;
    std::filesystem::path image_path(const ManifestRecord& r) const { return root / r.image; }
    std::filesystem::path mask_path(const ManifestRecord& r) const { return root / r.mask; }

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j, std::filesystem::path root);
};

/// Writes images/, masks/ and manifest.json under out_dir. Splits are
/// contiguous blocks of a seeded shuffle of the slice indices.
DatasetManifest build_dataset(const PhantomConfig& config, const std::filesystem::path& out_dir);

/// Loads manifest.json from a dataset directory (or the file itself) and
/// checks that ids are unique and every path resolves.
DatasetManifest load_manifest(const std::filesystem::path& dir_or_file);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& file);

/// Loaded slice with its record.
struct Sample {
    std::string id;
    ImageSlice image;
    LabelMask mask;
    SliceClass slice_class;
};

std::vector<Sample> load_split(const DatasetManifest& manifest, Split split);

}  // namespace adasam
