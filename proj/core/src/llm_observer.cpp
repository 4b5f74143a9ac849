#include "adasam/llm_observer.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "adasam/provenance.hpp"

namespace adasam::segex {

namespace {

std::string format_reply(const std::vector<std::string>& codes, const std::map<std::string, int>& scores) {
    std::string out;
    for (const auto& code : codes) {
        const auto& c = find_criterion(code);
        auto it = scores.find(code);
        out += code + ": " + std::to_string(it != scores.end() ? it->second : c.min_score()) + "\n";
    }
    return out;
}

}  // namespace

MockBackend::MockBackend(std::map<std::string, int> fixed)
    : responder_([fixed = std::move(fixed)](const LlmRequest& req, int) { return format_reply(req.criteria, fixed); }) {}

MockBackend::MockBackend(Responder responder) : responder_(std::move(responder)) {}

std::string MockBackend::complete(const LlmRequest& request) { return responder_(request, calls_++); }

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
    if (config_.base_url.empty() || config_.model.empty()) throw ConfigError("LLM backend needs a base URL and model");
}

std::string HttpBackend::complete(const LlmRequest& request) {
    const std::string png(request.png.begin(), request.png.end());
    nlohmann::json body = {
        {"model", config_.model},
        {"temperature", 0},
        {"messages",
         {{{"role", "system"}, {"content", request.system}},
          {{"role", "user"},
           {"content",
            {{{"type", "text"}, {"text", request.instruction}},
             {{"type", "image_url"},
              {"image_url", {{"url", "data:image/png;base64," + httplib::detail::base64_encode(png)}}}}}}}}}};

    httplib::Client client(config_.base_url);
    client.set_connection_timeout(config_.timeout_seconds);
    client.set_read_timeout(config_.timeout_seconds);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    auto res = client.Post(config_.path, headers, body.dump(), "application/json");
    if (!res) throw TransientBackendError("LLM request failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500) {
        throw TransientBackendError("LLM backend returned HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
        throw BackendUnavailableError("LLM backend rejected the request with HTTP " + std::to_string(res->status) +
                                      ": " + res->body.substr(0, 200));
    }
    try {
        return nlohmann::json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
        // A garbled envelope is handed to the parser as text and quarantined there.
        return res->body;
    }
}

const std::string& llm_system_prompt() {
    static const std::string kPrompt =
        "You are an experienced musculoskeletal radiologist reviewing segmentation masks of the "
        "vastus lateralis (VL, blue) and vastus medialis (VM, green) on axial knee MRI slices. "
        "You see only the mask drawn on a black background. Judge each mask on its own merits.";
    return kPrompt;
}

std::string llm_instruction(const std::vector<std::string>& codes) {
    std::ostringstream s;
    s << "Rate the segmentation mask in the attached image on the criteria below. "
         "Ordinal criteria use a 1-4 scale where 1 is the best case and 4 the worst. "
         "Binary criteria use 0 (no) or 1 (yes).\n\n";
    for (const auto& code : codes) {
        const auto& c = find_criterion(code);
        s << code << " (" << c.name << ", "
          << (c.kind == CriterionKind::kBinary ? "binary 0/1" : "ordinal 1-4") << "): " << c.question << "\n";
    }
    s << "\nReply with exactly one line per criterion in the form CODE: <integer>, in the order listed, "
         "and nothing else. Example:\n";
    for (const auto& code : codes) s << code << ": " << find_criterion(code).min_score() << "\n";
    return s.str();
}

std::optional<std::map<std::string, int>> parse_llm_reply(const std::string& reply,
                                                          const std::vector<std::string>& codes, std::string* why) {
    static const std::regex kLine(R"(^\s*\**\s*([A-Z]{2})\s*\**\s*:\s*\**\s*(-?\d+)\s*\**\s*$)");
    auto fail = [&](std::string reason) -> std::optional<std::map<std::string, int>> {
        if (why) *why = std::move(reason);
        return std::nullopt;
    };
    std::map<std::string, int> out;
    std::istringstream in(reply);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::smatch m;
        if (!std::regex_match(line, m, kLine)) continue;
        const std::string code = m[1];
        if (std::find(codes.begin(), codes.end(), code) == codes.end()) {
            return fail("unrequested criterion " + code);
        }
        if (out.count(code)) return fail("criterion " + code + " given twice");
        int value = 0;
        try {
            value = std::stoi(m[2]);
        } catch (const std::exception&) {
            return fail("unreadable score for " + code);
        }
        const auto& c = find_criterion(code);
        if (value < c.min_score() || value > c.max_score()) {
            return fail(code + " score " + std::to_string(value) + " out of scale");
        }
        out[code] = value;
    }
    std::vector<std::string> missing;
    for (const auto& code : codes) {
        if (!out.count(code)) missing.push_back(code);
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        return fail("missing " + list);
    }
    return out;
}

LlmObserveResult llm_observe(const SegExSession& session, LlmBackend& backend, const LlmObserveConfig& config) {
    const auto* observer = session.find_observer(config.observer_id);
    if (observer == nullptr) throw ConfigError("unknown observer '" + config.observer_id + "'");
    if (!observer->llm) throw ConfigError("observer '" + config.observer_id + "' is not an LLM observer");
    if (config.max_retries < 0) throw ConfigError("max_retries must be >= 0");

    std::vector<std::string> codes;
    for (const auto& code : session.criteria_for(*observer)) {
        if (std::find(config.skip.begin(), config.skip.end(), code) == config.skip.end()) codes.push_back(code);
    }
    if (codes.empty()) throw ConfigError("every criterion is skipped; nothing to ask");

    std::ofstream quarantine;
    if (!config.quarantine_path.empty()) {
        if (config.quarantine_path.has_parent_path()) {
            std::filesystem::create_directories(config.quarantine_path.parent_path());
        }
        quarantine.open(config.quarantine_path, std::ios::app);
        if (!quarantine) throw IoError("cannot open quarantine log", config.quarantine_path.string());
    }

    LlmRequest request;
    request.system = llm_system_prompt();
    request.instruction = llm_instruction(codes);
    request.criteria = codes;

    LlmObserveResult result;
    for (const auto& item : session.items) {
        request.png = render_item_png(session, item, false);
        std::vector<std::string> replies;
        std::string reason;
        std::optional<std::map<std::string, int>> scores;
        std::string last_transport_error;
        for (int attempt = 0; attempt <= config.max_retries && !scores; ++attempt) {
            if (attempt > 0 && config.backoff_ms > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(config.backoff_ms << (attempt - 1)));
            }
            try {
                replies.push_back(backend.complete(request));
                last_transport_error.clear();
            } catch (const TransientBackendError& e) {
                last_transport_error = e.what();
                continue;
            }
            scores = parse_llm_reply(replies.back(), codes, &reason);
        }
        if (scores) {
            ObserverRating r;
            r.observer_id = observer->id;
            r.item_id = item.item_id;
            r.scores = std::move(*scores);
            r.timestamp = utc_timestamp();
            result.ratings.push_back(std::move(r));
            continue;
        }
        if (replies.empty()) {
            throw BackendUnavailableError("LLM backend unreachable after " + std::to_string(config.max_retries + 1) +
                                          " attempts: " + last_transport_error);
        }
        QuarantinedItem q{item.item_id, reason.empty() ? last_transport_error : reason, replies};
        if (quarantine) {
            quarantine << nlohmann::json{{"item_id", q.item_id},
                                         {"observer_id", observer->id},
                                         {"backend", backend.name()},
                                         {"reason", q.reason},
                                         {"replies", q.replies},
                                         {"timestamp", utc_timestamp()}}
                              .dump()
                       << '\n';
            quarantine.flush();
        }
        result.quarantined.push_back(std::move(q));
    }
    return result;
}

}  // namespace adasam::segex
