#include "common.hpp"

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "adasam/error.hpp"

namespace adasam::cli {

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write", path.string());
    out << text;
    if (!out) throw IoError("write failed", path.string());
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open", path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed JSON (") + e.what() + ")", path.string());
    }
}

void emit(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

namespace {
bool g_quiet = false;
}  // namespace

void set_quiet(bool quiet) { g_quiet = quiet; }

void log(const std::string& message) {
    if (g_quiet) return;
    const auto now = std::time(nullptr);
    std::tm tm{};
    localtime_r(&now, &tm);
    char stamp[16];
    std::strftime(stamp, sizeof(stamp), "%H:%M:%S", &tm);
    std::cerr << '[' << stamp << "] " << message << std::endl;
}

std::filesystem::path resolve_data_dir(const GlobalOptions& g, const std::string& flag,
                                       const std::filesystem::path& parsed) {
    const bool on_command_line = std::any_of(g.argv.begin(), g.argv.end(), [&](const std::string& a) {
        return a == flag || a.rfind(flag + "=", 0) == 0;
    });
    if (on_command_line) return parsed;
    if (const char* env = std::getenv("ADASAM_DATA_DIR"); env != nullptr && *env != '\0') return env;
    if (parsed.empty()) throw ConfigError(flag + " is required (or set ADASAM_DATA_DIR)");
    return parsed;
}

int parse_budget(const std::string& text) {
    if (text == "all") return kBudgetAll;
    try {
        std::size_t used = 0;
        const int v = std::stoi(text, &used);
        if (used == text.size() && v >= 0) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("budget must be 'all' or a non-negative integer, got '" + text + "'");
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("expected a comma-separated integer list, got '" + text + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty integer list");
    return out;
}

ModelConfig model_preset(const std::string& name) {
    if (name == "full") return ModelConfig{};
    if (name == "desk") return ModelConfig::desk();
    throw ConfigError("unknown preset '" + name + "' (full|desk)");
}

TrainConfig train_preset(const std::string& name) {
    if (name == "full") return TrainConfig{};
    if (name == "desk") return TrainConfig::desk();
    throw ConfigError("unknown preset '" + name + "' (full|desk)");
}

std::filesystem::path checkpoint_dir(const std::filesystem::path& path) {
    if (std::filesystem::exists(path / "checkpoint" / "config.json")) return path / "checkpoint";
    return path;
}

}  // namespace adasam::cli
