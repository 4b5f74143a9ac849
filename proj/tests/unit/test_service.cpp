#include <gtest/gtest.h>

#include <thread>

#include <httplib.h>

#include "adasam/segex.hpp"
#include "adasam/segex_service.hpp"
#include "fixtures.hpp"

using namespace adasam;
using namespace adasam::segex;
using adasam::testing::TempDir;
using nlohmann::json;

namespace {

/// Four items over two slices, two humans and one LLM observer, saved with its key.
class ServiceTest : public ::testing::Test {
protected:
    void SetUp() override {
        std::vector<SliceMasks> slices;
        for (int k = 0; k < 2; ++k) {
            SliceMasks s{"slice" + std::to_string(k), LabelMask(8, 8), LabelMask(8, 8), ImageSlice(8, 8)};
            for (int y = 2; y < 6; ++y) {
                s.gt.at(y, 2 + k) = 1;
                s.pred.at(y, 3) = 1;
            }
            slices.push_back(std::move(s));
        }
        auto built = build_session(std::move(slices), 17,
                                   {Observer{"h1", "tok-a", false, criterion_codes()},
                                    Observer{"h2", "tok-b", false, criterion_codes()},
                                    Observer{"llm1", "tok-c", true, {"MQ", "MB", "CN", "DC"}}});
        session_id = built.session.session_id;
        items = built.session.items;
        save_session(dir / "sess", built.session);
        key_path = default_key_path(dir / "sess");
        save_key(key_path, built.key);
        store = std::make_shared<SessionStore>(dir / "sess");
        service = std::make_unique<RatingService>(store, ServiceOptions{"admin-tok", key_path, std::nullopt, "*"});
    }

    ApiResponse call(const std::string& method, const std::string& path, const std::string& token = "",
                     const std::string& body = "") const {
        ApiRequest r{method, path, {}, {}, body};
        if (!token.empty()) r.headers["x-observer-token"] = token;
        return service->handle(r);
    }

    std::string base() const { return "/api/session/" + session_id; }

    static json full(int ordinal, int cn) {
        return {{"MQ", ordinal}, {"MB", ordinal}, {"CN", cn}, {"SD", ordinal}, {"DC", ordinal}};
    }

    TempDir dir{"svc"};
    std::string session_id;
    std::vector<SessionItem> items;
    std::filesystem::path key_path;
    std::shared_ptr<SessionStore> store;
    std::unique_ptr<RatingService> service;
};

}  // namespace

TEST_F(ServiceTest, HealthAndPreflight) {
    auto h = call("GET", "/api/health");
    EXPECT_EQ(h.status, 200);
    EXPECT_EQ(json::parse(h.body).at("status"), "ok");
    EXPECT_EQ(h.headers.at("Access-Control-Allow-Origin"), "*");
    auto pre = call("OPTIONS", base() + "/rating");
    EXPECT_EQ(pre.status, 204);
    EXPECT_NE(pre.headers.at("Access-Control-Allow-Headers").find("X-Observer-Token"), std::string::npos);
}

TEST_F(ServiceTest, CorsHeadersCanBeDisabled) {
    RatingService quiet(store, ServiceOptions{"", key_path, std::nullopt, ""});
    auto r = quiet.handle(ApiRequest{"GET", "/api/health", {}, {}, ""});
    EXPECT_TRUE(r.headers.empty());
}

TEST_F(ServiceTest, AuthenticationStatusCodes) {
    EXPECT_EQ(call("GET", "/api/session/000000000000", "tok-a").status, 404);
    EXPECT_EQ(call("GET", base()).status, 401);
    EXPECT_EQ(call("GET", base(), "wrong").status, 403);
    EXPECT_EQ(call("GET", base(), "tok-a").status, 200);
    EXPECT_EQ(call("GET", "/api/elsewhere", "tok-a").status, 404);
    EXPECT_EQ(call("DELETE", base(), "tok-a").status, 405);
    // The query parameter works as well as the header.
    ApiRequest q{"GET", base(), {}, {{"token", "tok-b"}}, ""};
    EXPECT_EQ(service->handle(q).status, 200);
}

TEST_F(ServiceTest, SessionPayloadIsBlindedAndPerObserver) {
    auto a = json::parse(call("GET", base(), "tok-a").body);
    auto c = json::parse(call("GET", base(), "tok-c").body);
    EXPECT_EQ(a.at("observer"), "h1");
    EXPECT_EQ(a.at("view"), "overlay");
    EXPECT_EQ(c.at("view"), "mask");
    EXPECT_EQ(a.at("total"), 4);
    EXPECT_EQ(a.at("criteria").size(), 5u);
    EXPECT_EQ(c.at("criteria").size(), 4u);
    EXPECT_TRUE(a.contains("polarity"));
    ASSERT_EQ(a.at("items").size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) {
        const auto& it = a.at("items")[k];
        EXPECT_EQ(it.at("position"), k);
        EXPECT_EQ(it.at("item_id"), items[k].item_id);
        EXPECT_EQ(it.at("completed"), false);
        EXPECT_EQ(it.at("render"), base() + "/item/" + std::to_string(k) + "/render");
    }
    for (const auto* tok : {"tok-a", "tok-b", "tok-c"}) {
        EXPECT_FALSE(contains_source_marker(call("GET", base(), tok).body)) << tok;
    }
}

TEST_F(ServiceTest, RenderByPositionOrId) {
    auto by_pos = call("GET", base() + "/item/1/render", "tok-a");
    auto by_id = call("GET", base() + "/item/" + items[1].item_id + "/render", "tok-a");
    EXPECT_EQ(by_pos.status, 200);
    EXPECT_EQ(by_pos.content_type, "image/png");
    EXPECT_EQ(by_pos.body, by_id.body);
    EXPECT_EQ(by_pos.body.substr(1, 3), "PNG");
    // The LLM observer gets the mask-only picture.
    EXPECT_NE(call("GET", base() + "/item/1/render", "tok-c").body, by_pos.body);
    EXPECT_EQ(call("GET", base() + "/item/9/render", "tok-a").status, 404);
    EXPECT_EQ(call("GET", base() + "/item/abc/render", "tok-a").status, 404);
}

TEST_F(ServiceTest, RatingSubmissionCodes) {
    const auto id = items[0].item_id;
    EXPECT_EQ(call("POST", base() + "/rating", "tok-a", "{not json").status, 400);
    EXPECT_EQ(call("POST", base() + "/rating", "tok-a", "[1,2]").status, 400);
    EXPECT_EQ(call("POST", base() + "/rating", "tok-a", json{{"item_id", id}}.dump()).status, 400);
    EXPECT_EQ(call("POST", base() + "/rating", "tok-a", json{{"item_id", id}, {"scores", {{"MQ", 5}}}}.dump()).status,
              422);
    EXPECT_EQ(call("POST", base() + "/rating", "tok-c", json{{"item_id", id}, {"scores", {{"SD", 1}}}}.dump()).status,
              422);
    EXPECT_EQ(call("POST", base() + "/rating", "tok-a",
                   json{{"observer_id", "h2"}, {"item_id", id}, {"scores", {{"MQ", 1}}}}.dump())
                  .status,
              403);
    EXPECT_EQ(call("GET", base() + "/rating", "tok-a").status, 405);

    auto partial = call("POST", base() + "/rating", "tok-a", json{{"item_id", id}, {"scores", {{"MQ", 2}}}}.dump());
    ASSERT_EQ(partial.status, 201);
    auto pj = json::parse(partial.body);
    EXPECT_EQ(pj.at("item_id"), id);
    EXPECT_TRUE(pj.at("muscle").is_null());
    EXPECT_FALSE(pj.at("timestamp").get<std::string>().empty());
    EXPECT_EQ(pj.at("completed"), false);
    auto done = call("POST", base() + "/rating", "tok-a",
                     json{{"observer_id", "h1"}, {"item_id", id}, {"muscle", "VL"}, {"scores", full(1, 0)}}.dump());
    ASSERT_EQ(done.status, 201);
    EXPECT_EQ(json::parse(done.body).at("completed"), true);
    EXPECT_EQ(store->snapshot().ratings.size(), 2u);
}

TEST_F(ServiceTest, ObserversOnlySeeTheirOwnProgress) {
    ASSERT_EQ(call("POST", base() + "/rating", "tok-a", json{{"item_id", items[2].item_id}, {"scores", full(2, 1)}}.dump())
                  .status,
              201);
    auto a = json::parse(call("GET", base(), "tok-a").body);
    auto b = json::parse(call("GET", base(), "tok-b").body);
    EXPECT_EQ(a.at("completed_count"), 1);
    EXPECT_EQ(a.at("items")[2].at("completed"), true);
    EXPECT_EQ(b.at("completed_count"), 0);
    EXPECT_EQ(b.dump().find("h1"), std::string::npos);
}

TEST_F(ServiceTest, ReportIsAdminOnlyAndNeedsTheKey) {
    EXPECT_EQ(call("GET", base() + "/report", "tok-a").status, 403);
    // No ratings yet.
    EXPECT_EQ(call("GET", base() + "/report", "admin-tok").status, 409);
    call("POST", base() + "/rating", "tok-a", json{{"item_id", items[0].item_id}, {"scores", full(2, 0)}}.dump());
    auto ok = call("GET", base() + "/report", "admin-tok");
    ASSERT_EQ(ok.status, 200);
    EXPECT_TRUE(json::parse(ok.body).at("rows").is_array());
    std::filesystem::rename(key_path, dir / "moved.sealed");
    EXPECT_EQ(call("GET", base() + "/report", "admin-tok").status, 503);
    RatingService no_admin(store, ServiceOptions{"", key_path, std::nullopt, "*"});
    EXPECT_EQ(no_admin.handle(ApiRequest{"GET", base() + "/report", {{"x-observer-token", ""}}, {}, ""}).status, 401);
    EXPECT_EQ(no_admin.handle(ApiRequest{"GET", base() + "/report", {{"x-observer-token", "x"}}, {}, ""}).status, 403);
}

TEST_F(ServiceTest, RealSocketFlowWithConcurrentObservers) {
    const int port = service->bind_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread server([&] { service->listen_after_bind(); });
    service->wait_until_ready();

    auto submit_all = [&](const std::string& token, int score) {
        httplib::Client client("127.0.0.1", port);
        client.set_default_headers({{"X-Observer-Token", token}});
        int created = 0;
        for (const auto& item : items) {
            auto r = client.Post(base() + "/rating", json{{"item_id", item.item_id}, {"scores", full(score, 1)}}.dump(),
                                 "application/json");
            if (r && r->status == 201) ++created;
        }
        return created;
    };
    int created_a = 0, created_b = 0;
    std::thread ta([&] { created_a = submit_all("tok-a", 2); });
    std::thread tb([&] { created_b = submit_all("tok-b", 3); });
    ta.join();
    tb.join();
    EXPECT_EQ(created_a, 4);
    EXPECT_EQ(created_b, 4);

    httplib::Client client("127.0.0.1", port);
    auto session = client.Get(base(), {{"X-Observer-Token", "tok-a"}});
    ASSERT_TRUE(session);
    EXPECT_EQ(json::parse(session->body).at("completed_count"), 4);
    auto png = client.Get(base() + "/item/0/render?token=tok-b");
    ASSERT_TRUE(png);
    EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
    auto report = client.Get(base() + "/report", {{"X-Observer-Token", "admin-tok"}});
    ASSERT_TRUE(report);
    ASSERT_EQ(report->status, 200);
    std::size_t complete_h1 = 0, complete_h2 = 0;
    const auto report_json = json::parse(report->body);
    for (const auto& row : report_json.at("rows")) {
        if (row.at("observer") == "h1") complete_h1 += row.at("complete").get<std::size_t>();
        if (row.at("observer") == "h2") complete_h2 += row.at("complete").get<std::size_t>();
    }
    EXPECT_EQ(complete_h1, 4u);
    EXPECT_EQ(complete_h2, 4u);

    service->stop();
    server.join();
    // Every accepted rating reached the log.
    EXPECT_EQ(load_session(dir / "sess").ratings.size(), 8u);
}
