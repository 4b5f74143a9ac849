#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "adasam/model.hpp"

namespace adasam {

// Checkpoint directory layout:
//   config.json   model config plus LoRA merge state
//   index.json    tensor name -> {file, shape, dtype}
//   tensors/      one raw little-endian float32 blob per tensor
//
// Saving then loading reproduces every parameter and buffer bit-exactly.

void save_checkpoint(AdaSam& model, const std::filesystem::path& dir,
                     const nlohmann::json& extra = nlohmann::json::object());

AdaSam load_checkpoint(const std::filesystem::path& dir);

/// The "extra" object stored alongside the config (training provenance).
nlohmann::json read_checkpoint_extra(const std::filesystem::path& dir);

}  // namespace adasam
