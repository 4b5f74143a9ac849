#pragma once

#include <string>

#include <nlohmann/json.hpp>

namespace adasam {

/// Block embedded in every artifact: tool name, version, the resolved
/// configuration and the UTC creation time.
nlohmann::json make_provenance(const nlohmann::json& resolved_config);

/// Same block without the timestamp, for byte-stable artifacts.
nlohmann::json make_stable_provenance(const nlohmann::json& resolved_config);

/// Current UTC time as "YYYY-MM-DDTHH:MM:SSZ".
std::string utc_timestamp();

}  // namespace adasam
