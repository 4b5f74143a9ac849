#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "adasam/segex.hpp"

#ifndef ADASAM_FIXTURE_DIR
#error "ADASAM_FIXTURE_DIR must point at tests/fixtures"
#endif

namespace adasam::testing {

inline std::filesystem::path fixture_path(const std::string& name) {
    return std::filesystem::path(ADASAM_FIXTURE_DIR) / name;
}

inline nlohmann::json read_fixture(const std::string& name) {
    std::ifstream in(fixture_path(name));
    return nlohmann::json::parse(in);
}

struct RatingFixture {
    segex::SegExSession session;
    segex::SourceKey key;
    nlohmann::json expected;
};

/// Session, key and ratings of the committed six-rating fixture. Masks are
/// 4x4 placeholders with one VL pixel; aggregation never looks at them.
inline RatingFixture load_rating_fixture() {
    const auto j = read_fixture("segex_six_ratings.json");
    RatingFixture f;
    f.session.session_id = j.at("session_id").get<std::string>();
    f.session.range = j.at("range").get<segex::ScoreRange>();
    f.session.criteria = segex::criterion_codes();
    f.session.observers.push_back(j.at("observer").get<segex::Observer>());
    f.key.session_id = f.session.session_id;
    for (const auto& it : j.at("items")) {
        segex::SessionItem item;
        item.item_id = it.at("item_id").get<std::string>();
        item.slice_id = it.at("slice_id").get<std::string>();
        item.muscles = it.at("muscles").get<std::vector<std::string>>();
        item.mask = LabelMask(4, 4);
        item.mask.at(1, 1) = 1;
        f.session.items.push_back(std::move(item));
        f.key.sources[it.at("item_id").get<std::string>()] = segex::parse_source(it.at("key").get<std::string>());
    }
    int n = 0;
    for (const auto& r : j.at("ratings")) {
        segex::ObserverRating rating;
        rating.observer_id = f.session.observers[0].id;
        rating.item_id = r.at("item_id").get<std::string>();
        rating.scores = r.at("scores").get<std::map<std::string, int>>();
        rating.timestamp = "2026-01-01T00:00:0" + std::to_string(n++) + "Z";
        segex::record_rating(f.session, std::move(rating));
    }
    f.expected = j.at("expected");
    return f;
}

}  // namespace adasam::testing
