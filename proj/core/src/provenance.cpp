#include "adasam/provenance.hpp"

#include <chrono>
#include <ctime>

#include "adasam/version.hpp"

namespace adasam {

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

nlohmann::json make_stable_provenance(const nlohmann::json& resolved_config) {
    return {{"tool", kToolName}, {"version", kVersion}, {"config", resolved_config}};
}

nlohmann::json make_provenance(const nlohmann::json& resolved_config) {
    auto p = make_stable_provenance(resolved_config);
    p["created_utc"] = utc_timestamp();
    return p;
}

}  // namespace adasam
