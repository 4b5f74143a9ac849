#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "adasam/segex.hpp"

namespace adasam::segex {

struct ServiceOptions {
    /// Bearer of this token may read the unsealed report. Empty disables it.
    std::string admin_token;
    /// Sealed key consulted by the report route; the route answers 503 while
    /// the file is absent.
    std::filesystem::path key_path;
    std::optional<DscTable> dsc;
    /// Value of Access-Control-Allow-Origin. Empty omits CORS headers.
    std::string cors_origin = "*";
};

/// Transport-neutral request, so routing can be tested without sockets.
struct ApiRequest {
    std::string method;
    std::string path;
    std::map<std::string, std::string> headers;  // lower-case names
    std::map<std::string, std::string> query;
    std::string body;
};

struct ApiResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
    std::map<std::string, std::string> headers;
};

/// Routes:
///   GET  /api/health
///   GET  /api/session/{id}                  blinded item list for the caller
///   GET  /api/session/{id}/item/{k}/render  PNG; k is a queue position or item id
///   POST /api/session/{id}/rating           {item_id, muscle?, scores}
///   GET  /api/session/{id}/report           admin token only
/// Callers authenticate with the X-Observer-Token header or ?token=.
class RatingService {
public:
    RatingService(std::shared_ptr<SessionStore> store, ServiceOptions options);
    ~RatingService();
    RatingService(const RatingService&) = delete;
    RatingService& operator=(const RatingService&) = delete;

    ApiResponse handle(const ApiRequest& request) const;

    /// Binds and serves until stop(). Returns false if the bind failed.
    bool listen(const std::string& host, int port);
    /// Binds to an ephemeral port and returns it (or -1); serve with listen_after_bind().
    int bind_any_port(const std::string& host);
    bool listen_after_bind();
    void stop();
    void wait_until_ready() const;

    SessionStore& store() const { return *store_; }

private:
    struct Server;

    std::shared_ptr<SessionStore> store_;
    ServiceOptions options_;
    std::unique_ptr<Server> server_;
};

}  // namespace adasam::segex
