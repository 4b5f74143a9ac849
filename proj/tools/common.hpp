#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "adasam/model.hpp"
#include "adasam/training.hpp"

namespace adasam::cli {

/// Options every subcommand can see.
struct GlobalOptions {
    std::vector<std::string> argv;
    bool quiet = false;
};

/// Writes pretty JSON with a trailing newline, creating parent directories.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
void write_text(const std::filesystem::path& path, const std::string& text);
nlohmann::json read_json(const std::filesystem::path& path);

/// Prints a JSON document to stdout.
void emit(const nlohmann::json& j);

/// Progress line on stderr, suppressed by --quiet.
void log(const std::string& message);
void set_quiet(bool quiet);

/// Data root: the flag when given on the command line, else ADASAM_DATA_DIR,
/// else the config-file or default value.
std::filesystem::path resolve_data_dir(const GlobalOptions& g, const std::string& flag,
                                       const std::filesystem::path& parsed);

/// "all" or a non-negative integer.
int parse_budget(const std::string& text);
std::vector<int> parse_int_list(const std::string& text);

/// "full" or "desk".
ModelConfig model_preset(const std::string& name);
TrainConfig train_preset(const std::string& name);

/// A training output directory or the checkpoint directory inside it.
std::filesystem::path checkpoint_dir(const std::filesystem::path& path);

void register_model_commands(CLI::App& app, GlobalOptions& g);
void register_segex_commands(CLI::App& app, GlobalOptions& g);

}  // namespace adasam::cli
