#include "adasam/segex_service.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <vector>

#include <httplib.h>

#include "adasam/error.hpp"

namespace adasam::segex {

namespace {

ApiResponse json_response(int status, const nlohmann::json& body) {
    ApiResponse r;
    r.status = status;
    r.body = body.dump();
    return r;
}

ApiResponse error_response(int status, const std::string& message) {
    return json_response(status, {{"error", message}});
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= path.size()) {
        auto end = path.find('/', start);
        if (end == std::string::npos) end = path.size();
        if (end > start) parts.push_back(path.substr(start, end - start));
        start = end + 1;
    }
    return parts;
}

std::string caller_token(const ApiRequest& req) {
    if (auto it = req.headers.find("x-observer-token"); it != req.headers.end()) return it->second;
    if (auto it = req.query.find("token"); it != req.query.end()) return it->second;
    return {};
}

const SessionItem* resolve_item(const SegExSession& s, const std::string& ref) {
    if (const auto* item = s.find_item(ref)) return item;
    std::size_t k = 0;
    auto [ptr, ec] = std::from_chars(ref.data(), ref.data() + ref.size(), k);
    if (ec != std::errc{} || ptr != ref.data() + ref.size() || k >= s.items.size()) return nullptr;
    return &s.items[k];
}

bool item_complete(const SegExSession& s, const Observer& o, const SessionItem& item) {
    const auto eff = effective_scores(s);
    const auto required = s.criteria_for(o);
    for (const auto& m : item.muscles) {
        auto it = eff.find({o.id, item.item_id, m});
        if (it == eff.end()) return false;
        for (const auto& c : required) {
            if (!it->second.count(c)) return false;
        }
    }
    return true;
}

}  // namespace

struct RatingService::Server {
    httplib::Server http;
};

RatingService::RatingService(std::shared_ptr<SessionStore> store, ServiceOptions options)
    : store_(std::move(store)), options_(std::move(options)), server_(std::make_unique<Server>()) {
    if (!store_) throw ConfigError("rating service needs a session store");
    auto adapt = [this](const httplib::Request& in, httplib::Response& out) {
        ApiRequest req;
        req.method = in.method;
        req.path = in.path;
        req.body = in.body;
        for (const auto& [k, v] : in.headers) {
            std::string key = k;
            std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
            req.headers[key] = v;
        }
        for (const auto& [k, v] : in.params) req.query[k] = v;
        auto res = handle(req);
        out.status = res.status;
        for (const auto& [k, v] : res.headers) out.set_header(k, v);
        out.set_content(res.body, res.content_type);
    };
    server_->http.Get(".*", adapt);
    server_->http.Post(".*", adapt);
    server_->http.Options(".*", adapt);
    server_->http.Put(".*", adapt);
    server_->http.Delete(".*", adapt);
}

RatingService::~RatingService() { stop(); }

ApiResponse RatingService::handle(const ApiRequest& req) const {
    ApiResponse res = [&]() -> ApiResponse {
        if (req.method == "OPTIONS") {
            ApiResponse r;
            r.status = 204;
            r.content_type = "text/plain";
            return r;
        }
        const auto parts = split_path(req.path);
        if (parts.size() == 2 && parts[0] == "api" && parts[1] == "health" && req.method == "GET") {
            return json_response(200, {{"status", "ok"}});
        }
        if (parts.size() < 3 || parts[0] != "api" || parts[1] != "session") {
            return error_response(404, "no such route");
        }
        const auto& session_id = parts[2];
        const bool matches = store_->read([&](const SegExSession& s) { return s.session_id == session_id; });
        if (!matches) return error_response(404, "unknown session");
        const auto token = caller_token(req);
        if (token.empty()) return error_response(401, "missing observer token");

        // Report: admin only.
        if (parts.size() == 4 && parts[3] == "report") {
            if (req.method != "GET") return error_response(405, "method not allowed");
            if (options_.admin_token.empty() || token != options_.admin_token) {
                return error_response(403, "report requires the admin token");
            }
            if (options_.key_path.empty() || !std::filesystem::exists(options_.key_path)) {
                return error_response(503, "sealed key file not present");
            }
            try {
                const auto key = load_key(options_.key_path);
                const auto snap = store_->snapshot();
                const auto report = aggregate(snap, key, options_.dsc ? &*options_.dsc : nullptr);
                return json_response(200, report.to_json());
            } catch (const ValidationError& e) {
                return error_response(409, e.what());
            } catch (const IoError& e) {
                return error_response(500, e.what());
            }
        }

        const auto observer = store_->read([&](const SegExSession& s) -> std::optional<Observer> {
            if (const auto* o = s.find_observer_by_token(token)) return *o;
            return std::nullopt;
        });
        if (!observer) return error_response(403, "invalid observer token");

        if (parts.size() == 3) {
            if (req.method != "GET") return error_response(405, "method not allowed");
            return json_response(200, store_->read([&](const SegExSession& s) { return observer_payload(s, *observer); }));
        }

        if (parts.size() == 6 && parts[3] == "item" && parts[5] == "render") {
            if (req.method != "GET") return error_response(405, "method not allowed");
            auto png = store_->read([&](const SegExSession& s) -> std::optional<std::vector<std::uint8_t>> {
                const auto* item = resolve_item(s, parts[4]);
                if (item == nullptr) return std::nullopt;
                return render_item_png(s, *item, observer->include_image());
            });
            if (!png) return error_response(404, "unknown item");
            ApiResponse r;
            r.content_type = "image/png";
            r.body.assign(png->begin(), png->end());
            r.headers["Cache-Control"] = "no-store";
            return r;
        }

        if (parts.size() == 4 && parts[3] == "rating") {
            if (req.method != "POST") return error_response(405, "method not allowed");
            nlohmann::json body;
            try {
                body = nlohmann::json::parse(req.body);
            } catch (const nlohmann::json::exception&) {
                return error_response(400, "body is not valid JSON");
            }
            if (!body.is_object()) return error_response(400, "body must be a JSON object");
            ObserverRating rating;
            try {
                if (body.contains("observer_id") && body.at("observer_id").get<std::string>() != observer->id) {
                    return error_response(403, "token does not belong to the named observer");
                }
                rating.observer_id = observer->id;
                rating.item_id = body.at("item_id").get<std::string>();
                if (body.contains("muscle") && !body.at("muscle").is_null()) {
                    rating.muscle = body.at("muscle").get<std::string>();
                }
                rating.scores = body.at("scores").get<std::map<std::string, int>>();
            } catch (const nlohmann::json::exception& e) {
                return error_response(400, std::string("malformed rating: ") + e.what());
            }
            try {
                const auto stored = store_->record(rating);
                const bool done = store_->read([&](const SegExSession& s) {
                    return item_complete(s, *observer, *s.find_item(stored.item_id));
                });
                return json_response(201, {{"item_id", stored.item_id},
                                           {"muscle", stored.muscle ? nlohmann::json(*stored.muscle)
                                                                    : nlohmann::json(nullptr)},
                                           {"timestamp", stored.timestamp},
                                           {"completed", done}});
            } catch (const ValidationError& e) {
                return error_response(422, e.what());
            } catch (const IoError& e) {
                return error_response(500, e.what());
            }
        }
        return error_response(404, "no such route");
    }();
    if (!options_.cors_origin.empty()) {
        res.headers["Access-Control-Allow-Origin"] = options_.cors_origin;
        res.headers["Access-Control-Allow-Headers"] = "Content-Type, X-Observer-Token";
        res.headers["Access-Control-Allow-Methods"] = "GET, POST, OPTIONS";
    }
    return res;
}

bool RatingService::listen(const std::string& host, int port) { return server_->http.listen(host, port); }

int RatingService::bind_any_port(const std::string& host) { return server_->http.bind_to_any_port(host); }

bool RatingService::listen_after_bind() { return server_->http.listen_after_bind(); }

void RatingService::stop() {
    if (server_ && server_->http.is_running()) server_->http.stop();
}

void RatingService::wait_until_ready() const { server_->http.wait_until_ready(); }

}  // namespace adasam::segex
