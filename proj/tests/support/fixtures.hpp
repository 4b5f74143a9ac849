#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "adasam/image.hpp"
#include "adasam/phantom.hpp"

namespace adasam::testing {

/// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("adasam_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

inline PhantomConfig small_phantoms(int n_train, int n_val, int n_test, std::uint64_t seed = 7, int size = 64) {
    PhantomConfig c;
    c.image_size = size;
    c.n_train = n_train;
    c.n_val = n_val;
    c.n_test = n_test;
    c.seed = seed;
    return c;
}

/// Slices generated in memory, without touching disk.
inline std::vector<std::pair<ImageSlice, LabelMask>> phantom_slices(int n, std::uint64_t seed = 7, int size = 64) {
    auto config = small_phantoms(n, 0, 0, seed, size);
    std::vector<std::pair<ImageSlice, LabelMask>> out;
    for (int i = 0; i < n; ++i) out.push_back(generate_phantom_slice(config, i));
    return out;
}

}  // namespace adasam::testing
