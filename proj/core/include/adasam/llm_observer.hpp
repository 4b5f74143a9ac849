#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "adasam/error.hpp"
#include "adasam/segex.hpp"

namespace adasam::segex {

/// A backend failure worth retrying (timeout, 429, 5xx, dropped connection).
class TransientBackendError : public Error {
public:
    using Error::Error;
};

/// The backend stayed unreachable after every retry.
class BackendUnavailableError : public Error {
public:
    using Error::Error;
};

struct LlmRequest {
    std::string system;
    std::string instruction;
    std::vector<std::string> criteria;  // codes the reply must cover
    std::vector<std::uint8_t> png;      // mask-only render
};

class LlmBackend {
public:
    virtual ~LlmBackend() = default;
    /// Raw text reply. Throws TransientBackendError for retryable failures.
    virtual std::string complete(const LlmRequest& request) = 0;
    virtual std::string name() const = 0;
};

/// Deterministic stand-in. The default responder answers every requested
/// criterion with `fixed` (falling back to 1 for ordinal and 0 for binary).
class MockBackend : public LlmBackend {
public:
    using Responder = std::function<std::string(const LlmRequest&, int call)>;

    explicit MockBackend(std::map<std::string, int> fixed = {});
    explicit MockBackend(Responder responder);

    std::string complete(const LlmRequest& request) override;
    std::string name() const override { return "mock"; }
    int calls() const { return calls_; }

private:
    Responder responder_;
    int calls_ = 0;
};

/// OpenAI-compatible chat-completions endpoint with image input.
struct HttpBackendConfig {
    std::string base_url = "https://api.openai.com";  // scheme://host[:port]
    std::string path = "/v1/chat/completions";
    std::string model = "gpt-4o";
    std::string api_key;
    int timeout_seconds = 60;
};

class HttpBackend : public LlmBackend {
public:
    explicit HttpBackend(HttpBackendConfig config);
    std::string complete(const LlmRequest& request) override;
    std::string name() const override { return "http:" + config_.model; }

private:
    HttpBackendConfig config_;
};

/// Fixed system prompt shared by every request.
const std::string& llm_system_prompt();

/// Instruction enumerating the given criteria with their scales and the
/// one-line-per-criterion reply grammar "CODE: <integer>".
std::string llm_instruction(const std::vector<std::string>& criteria);

/// Parses a reply. Returns nullopt (with `why` filled) unless every requested
/// criterion appears exactly once, in scale, and no unrequested code appears.
std::optional<std::map<std::string, int>> parse_llm_reply(const std::string& reply,
                                                          const std::vector<std::string>& criteria,
                                                          std::string* why = nullptr);

struct LlmObserveConfig {
    std::string observer_id = "llm1";
    std::vector<std::string> skip = default_llm_skip();
    /// Retries after the first attempt, for transient errors and unparseable replies.
    int max_retries = 3;
    int backoff_ms = 0;
    /// JSONL of quarantined replies. Empty keeps them in memory only.
    std::filesystem::path quarantine_path;
};

struct QuarantinedItem {
    std::string item_id;
    std::string reason;
    std::vector<std::string> replies;
};

struct LlmObserveResult {
    std::vector<ObserverRating> ratings;
    std::vector<QuarantinedItem> quarantined;
};

/// Rates every item of the session as `config.observer_id`, which must be an
/// LLM observer. The criteria are the observer's list minus `skip`.
/// Throws BackendUnavailableError when transient failures outlast the retries;
/// replies that never parse are quarantined, never scored.
LlmObserveResult llm_observe(const SegExSession& session, LlmBackend& backend, const LlmObserveConfig& config);

}  // namespace adasam::segex
