#include "adasam/segex.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "adasam/error.hpp"
#include "adasam/provenance.hpp"
#include "adasam/random.hpp"

namespace adasam::segex {

namespace {

constexpr int kSessionFormat = 1;
constexpr int kKeyFormat = 1;

std::string hex(std::uint64_t v, int digits) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf + 16 - digits);
}

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string muscle_name(Label label) { return label == Label::kVL ? "VL" : "VM"; }

std::vector<std::string> present_muscles(const LabelMask& a, const LabelMask& b) {
    bool vl = false, vm = false;
    for (const auto* m : {&a, &b}) {
        for (auto v : m->labels) {
            vl |= v == static_cast<std::uint8_t>(Label::kVL);
            vm |= v == static_cast<std::uint8_t>(Label::kVM);
        }
    }
    std::vector<std::string> out;
    if (vl) out.push_back(muscle_name(Label::kVL));
    if (vm) out.push_back(muscle_name(Label::kVM));
    return out;
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
    std::string s;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) s += sep;
        s += parts[i];
    }
    return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write", path.string());
    out << text;
    if (!out) throw IoError("write failed", path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open", path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed JSON (") + e.what() + ")", path.string());
    }
}

}  // namespace

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> kCriteria{
        {"MQ", "General mask quality", CriterionKind::kOrdinal,
         "What is the quality of the segmentation mask? Are there any gaps, rough edges, etc.?"},
        {"MB", "Mask boundaries", CriterionKind::kOrdinal,
         "How well do the masks encompass the muscles? Are there over-segmentations, under-segmentations, etc.?"},
        {"CN", "Correction needed", CriterionKind::kBinary, "Would a clinician need to modify the mask?"},
        {"SD", "Size difference", CriterionKind::kOrdinal,
         "How closely do the predicted masks match the size of the ground truth masks?"},
        {"DC", "Diagnostic confidence", CriterionKind::kOrdinal,
         "Confidence that the masks could be used for diagnostic volume assessment."},
    };
    return kCriteria;
}

std::vector<std::string> criterion_codes() {
    std::vector<std::string> out;
    for (const auto& c : criteria()) out.push_back(c.code);
    return out;
}

const Criterion& find_criterion(std::string_view code) {
    for (const auto& c : criteria()) {
        if (c.code == code) return c;
    }
    throw ValidationError("unknown criterion '" + std::string(code) + "'");
}

nlohmann::json criterion_to_json(const Criterion& c) {
    return {{"code", c.code},
            {"name", c.name},
            {"kind", c.kind == CriterionKind::kBinary ? "binary" : "ordinal"},
            {"question", c.question},
            {"min", c.min_score()},
            {"max", c.max_score()}};
}

void ScoreRange::validate() const {
    if (!(r_min < r_max)) throw ConfigError("score range needs r_min < r_max");
}

void to_json(nlohmann::json& j, const ScoreRange& r) { j = {{"r_min", r.r_min}, {"r_max", r.r_max}}; }

void from_json(const nlohmann::json& j, ScoreRange& r) {
    j.at("r_min").get_to(r.r_min);
    j.at("r_max").get_to(r.r_max);
}

double standardize(int score, const Criterion& criterion, const ScoreRange& range) {
    range.validate();
    if (score < criterion.min_score() || score > criterion.max_score()) {
        throw ValidationError("score " + std::to_string(score) + " outside " + criterion.code + " scale [" +
                              std::to_string(criterion.min_score()) + ", " +
                              std::to_string(criterion.max_score()) + "]");
    }
    if (criterion.kind == CriterionKind::kBinary) return score * range.r_max;
    const double t = static_cast<double>(score - criterion.min_score()) /
                     static_cast<double>(criterion.max_score() - criterion.min_score());
    return range.r_min + t * (range.r_max - range.r_min);
}

double e_avg(const std::map<std::string, double>& standardized, const std::vector<std::string>& required) {
    if (required.empty()) throw ValidationError("E_avg needs at least one criterion");
    std::vector<std::string> missing;
    double sum = 0.0;
    for (const auto& code : required) {
        auto it = standardized.find(code);
        if (it == standardized.end()) {
            missing.push_back(code);
        } else {
            sum += it->second;
        }
    }
    if (!missing.empty()) throw ValidationError("missing criteria: " + join(missing, ", "));
    return sum / static_cast<double>(required.size());
}

std::string source_code(Source s) { return s == Source::kGroundTruth ? "GT" : "P"; }

Source parse_source(std::string_view code) {
    if (code == "GT") return Source::kGroundTruth;
    if (code == "P") return Source::kPrediction;
    throw ValidationError("unknown mask origin code '" + std::string(code) + "'");
}

void to_json(nlohmann::json& j, const Observer& o) {
    j = {{"id", o.id}, {"token", o.token}, {"llm", o.llm}, {"criteria", o.criteria}};
}

void from_json(const nlohmann::json& j, Observer& o) {
    j.at("id").get_to(o.id);
    j.at("token").get_to(o.token);
    j.at("llm").get_to(o.llm);
    j.at("criteria").get_to(o.criteria);
}

void to_json(nlohmann::json& j, const ObserverRating& r) {
    j = {{"observer_id", r.observer_id},
         {"item_id", r.item_id},
         {"muscle", r.muscle ? nlohmann::json(*r.muscle) : nlohmann::json(nullptr)},
         {"scores", r.scores},
         {"timestamp", r.timestamp}};
}

void from_json(const nlohmann::json& j, ObserverRating& r) {
    j.at("observer_id").get_to(r.observer_id);
    j.at("item_id").get_to(r.item_id);
    r.muscle.reset();
    if (j.contains("muscle") && !j.at("muscle").is_null()) r.muscle = j.at("muscle").get<std::string>();
    j.at("scores").get_to(r.scores);
    r.timestamp = j.value("timestamp", std::string{});
}

const SessionItem* SegExSession::find_item(std::string_view item_id) const {
    for (const auto& it : items) {
        if (it.item_id == item_id) return &it;
    }
    return nullptr;
}

const Observer* SegExSession::find_observer(std::string_view observer_id) const {
    for (const auto& o : observers) {
        if (o.id == observer_id) return &o;
    }
    return nullptr;
}

const Observer* SegExSession::find_observer_by_token(std::string_view token) const {
    if (token.empty()) return nullptr;
    for (const auto& o : observers) {
        if (o.token == token) return &o;
    }
    return nullptr;
}

std::vector<std::string> SegExSession::criteria_for(const Observer& o) const {
    return o.criteria.empty() ? criteria : o.criteria;
}

std::string SourceKey::digest() const {
    std::string canon = session_id + "|";
    for (const auto& [item, src] : sources) canon += item + "=" + source_code(src) + ";";
    return hex(fnv1a(canon), 16);
}

std::filesystem::path default_key_path(const std::filesystem::path& session_dir) {
    auto dir = session_dir;
    if (!dir.has_filename()) dir = dir.parent_path();
    return dir.parent_path() / (dir.filename().string() + ".key.sealed");
}

void save_key(const std::filesystem::path& path, const SourceKey& key) {
    nlohmann::json entries = nlohmann::json::object();
    for (const auto& [item, src] : key.sources) entries[item] = source_code(src);
    nlohmann::json j = {{"format_version", kKeyFormat},
                        {"session_id", key.session_id},
                        {"entries", std::move(entries)},
                        {"digest", key.digest()}};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_text(path, j.dump(2) + "\n");
}

SourceKey load_key(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("sealed key file missing", path.string());
    auto j = read_json(path);
    SourceKey key;
    try {
        key.session_id = j.at("session_id").get<std::string>();
        for (const auto& [item, code] : j.at("entries").items()) {
            key.sources[item] = parse_source(code.get<std::string>());
        }
        if (j.at("digest").get<std::string>() != key.digest()) {
            throw ValidationError("sealed key digest mismatch (file altered?): " + path.string());
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed key file (") + e.what() + ")", path.string());
    }
    return key;
}

std::string random_token() {
    std::random_device rd;
    std::uint64_t hi = (static_cast<std::uint64_t>(rd()) << 32) | rd();
    std::uint64_t lo = (static_cast<std::uint64_t>(rd()) << 32) | rd();
    return hex(hi, 16) + hex(lo, 16);
}

std::vector<std::string> default_llm_skip() { return {"SD"}; }

std::vector<Observer> default_observers() {
    Observer human{"h1", random_token(), false, criterion_codes()};
    Observer llm{"llm1", random_token(), true, {}};
    const auto skip = default_llm_skip();
    for (const auto& code : criterion_codes()) {
        if (std::find(skip.begin(), skip.end(), code) == skip.end()) llm.criteria.push_back(code);
    }
    return {human, llm};
}

BuiltSession build_session(std::vector<SliceMasks> slices, std::uint64_t seed, std::vector<Observer> observers,
                           const ScoreRange& range) {
    range.validate();
    if (observers.empty()) throw ConfigError("a session needs at least one observer");
    std::set<std::string> ids, tokens;
    bool any_human = false;
    for (auto& o : observers) {
        if (o.id.empty() || !ids.insert(o.id).second) throw ConfigError("observer ids must be unique and nonempty");
        if (o.token.empty() || !tokens.insert(o.token).second) {
            throw ConfigError("observer tokens must be unique and nonempty");
        }
        if (o.criteria.empty()) o.criteria = criterion_codes();
        for (const auto& c : o.criteria) find_criterion(c);
        any_human |= !o.llm;
    }

    std::sort(slices.begin(), slices.end(),
              [](const SliceMasks& a, const SliceMasks& b) { return a.slice_id < b.slice_id; });
    std::string id_listing;
    for (std::size_t i = 0; i < slices.size(); ++i) {
        const auto& s = slices[i];
        if (i > 0 && slices[i - 1].slice_id == s.slice_id) {
            throw ValidationError("duplicate slice id '" + s.slice_id + "'");
        }
        if (s.gt.height != s.pred.height || s.gt.width != s.pred.width) {
            throw ValidationError("GT and prediction shapes differ for slice '" + s.slice_id + "'");
        }
        validate_mask(s.gt);
        validate_mask(s.pred);
        if (s.image && (s.image->height != s.gt.height || s.image->width != s.gt.width)) {
            throw ValidationError("image shape differs from mask for slice '" + s.slice_id + "'");
        }
        if (any_human && !s.image) {
            throw ConfigError("human observers need the underlying image for slice '" + s.slice_id + "'");
        }
        id_listing += s.slice_id + ";";
    }

    BuiltSession out;
    auto& session = out.session;
    session.seed = seed;
    session.range = range;
    session.criteria = criterion_codes();
    session.observers = std::move(observers);
    session.session_id = hex(derive_seed(seed, fnv1a(id_listing)), 10);
    out.key.session_id = session.session_id;

    struct Entry {
        std::size_t slice;
        Source source;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < slices.size(); ++i) {
        if (present_muscles(slices[i].gt, slices[i].pred).empty()) {
            out.skipped.push_back(slices[i].slice_id);
            continue;
        }
        entries.push_back({i, Source::kGroundTruth});
        entries.push_back({i, Source::kPrediction});
    }
    // Fisher-Yates on a splitmix stream: the order depends only on the seed.
    std::uint64_t state = derive_seed(seed, 0x5E55105EULL);
    for (std::size_t i = entries.size(); i > 1; --i) {
        state = splitmix64(state);
        std::swap(entries[i - 1], entries[state % i]);
    }

    std::set<std::string> used;
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const auto& e = entries[k];
        const auto& s = slices[e.slice];
        std::string item_id;
        for (std::uint64_t salt = 0; item_id.empty() || used.count(item_id); ++salt) {
            item_id = hex(derive_seed(derive_seed(seed, 0x17E3ULL + salt), k), 12);
        }
        used.insert(item_id);
        SessionItem item;
        item.item_id = item_id;
        item.slice_id = s.slice_id;
        item.muscles = present_muscles(s.gt, s.pred);
        item.mask = e.source == Source::kGroundTruth ? s.gt : s.pred;
        session.items.push_back(std::move(item));
        out.key.sources[item_id] = e.source;
        if (s.image && !session.images.count(s.slice_id)) session.images[s.slice_id] = *s.image;
    }
    session.provenance = make_stable_provenance(
        {{"seed", seed}, {"range", range}, {"n_slices", slices.size()}, {"skipped_empty", out.skipped}});
    return out;
}

std::vector<SliceMasks> load_slice_masks(const std::filesystem::path& gt_dir, const std::filesystem::path& pred_dir,
                                         const std::optional<std::filesystem::path>& image_dir) {
    auto stems = [](const std::filesystem::path& dir) {
        if (!std::filesystem::is_directory(dir)) throw IoError("not a directory", dir.string());
        std::set<std::string> out;
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (entry.is_regular_file() && entry.path().extension() == ".png") out.insert(entry.path().stem().string());
        }
        return out;
    };
    const auto gt_ids = stems(gt_dir);
    const auto pred_ids = stems(pred_dir);
    if (gt_ids != pred_ids) {
        std::vector<std::string> diff;
        std::set_symmetric_difference(gt_ids.begin(), gt_ids.end(), pred_ids.begin(), pred_ids.end(),
                                      std::back_inserter(diff));
        if (diff.size() > 5) diff.resize(5);
        throw ValidationError("GT and prediction slice ids differ (e.g. " + join(diff, ", ") + ")");
    }
    std::vector<SliceMasks> out;
    for (const auto& id : gt_ids) {
        SliceMasks s;
        s.slice_id = id;
        s.gt = load_mask_png(gt_dir / (id + ".png"));
        s.pred = load_mask_png(pred_dir / (id + ".png"));
        if (image_dir) s.image = load_image_png(*image_dir / (id + ".png"));
        out.push_back(std::move(s));
    }
    return out;
}

std::filesystem::path session_dir_of(const std::filesystem::path& dir_or_file) {
    if (std::filesystem::is_directory(dir_or_file)) return dir_or_file;
    return dir_or_file.has_parent_path() ? dir_or_file.parent_path() : std::filesystem::path(".");
}

void save_session(const std::filesystem::path& dir, const SegExSession& session) {
    std::filesystem::create_directories(dir / "masks");
    std::filesystem::create_directories(dir / "images");
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : session.items) {
        const auto rel = "masks/" + it.item_id + ".png";
        save_mask_png(dir / rel, it.mask);
        items.push_back({{"item_id", it.item_id}, {"slice_id", it.slice_id}, {"muscles", it.muscles}, {"mask", rel}});
    }
    nlohmann::json images = nlohmann::json::array();
    for (const auto& [slice, image] : session.images) {
        save_image_png(dir / "images" / (slice + ".png"), image);
        images.push_back(slice);
    }
    nlohmann::json j = {{"format_version", kSessionFormat},
                        {"session_id", session.session_id},
                        {"seed", session.seed},
                        {"range", session.range},
                        {"criteria", session.criteria},
                        {"observers", session.observers},
                        {"items", std::move(items)},
                        {"images", std::move(images)},
                        {"provenance", session.provenance}};
    write_text(dir / "session.json", j.dump(2) + "\n");
    std::string log;
    for (const auto& r : session.ratings) log += nlohmann::json(r).dump() + "\n";
    write_text(dir / "ratings.log", log);
}

SegExSession load_session(const std::filesystem::path& dir_or_file) {
    const auto dir = session_dir_of(dir_or_file);
    const auto file = dir / "session.json";
    auto j = read_json(file);
    SegExSession s;
    try {
        if (j.at("format_version").get<int>() != kSessionFormat) {
            throw ValidationError("unsupported session format in " + file.string());
        }
        j.at("session_id").get_to(s.session_id);
        j.at("seed").get_to(s.seed);
        j.at("range").get_to(s.range);
        j.at("criteria").get_to(s.criteria);
        j.at("observers").get_to(s.observers);
        for (const auto& it : j.at("items")) {
            SessionItem item;
            it.at("item_id").get_to(item.item_id);
            it.at("slice_id").get_to(item.slice_id);
            it.at("muscles").get_to(item.muscles);
            item.mask = load_mask_png(dir / it.at("mask").get<std::string>());
            s.items.push_back(std::move(item));
        }
        for (const auto& slice : j.at("images")) {
            const auto id = slice.get<std::string>();
            s.images[id] = load_image_png(dir / "images" / (id + ".png"));
        }
        s.provenance = j.value("provenance", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed session (") + e.what() + ")", file.string());
    }
    std::ifstream log(dir / "ratings.log", std::ios::binary);
    std::string line;
    for (int n = 1; log && std::getline(log, line); ++n) {
        if (line.empty()) continue;
        try {
            s.ratings.push_back(nlohmann::json::parse(line).get<ObserverRating>());
        } catch (const nlohmann::json::exception& e) {
            throw IoError("malformed rating at line " + std::to_string(n) + " (" + e.what() + ")",
                          (dir / "ratings.log").string());
        }
    }
    return s;
}

void validate_rating(const SegExSession& session, const ObserverRating& rating) {
    const auto* observer = session.find_observer(rating.observer_id);
    if (observer == nullptr) throw ValidationError("unknown observer '" + rating.observer_id + "'");
    const auto* item = session.find_item(rating.item_id);
    if (item == nullptr) throw ValidationError("unknown item '" + rating.item_id + "'");
    if (rating.muscle &&
        std::find(item->muscles.begin(), item->muscles.end(), *rating.muscle) == item->muscles.end()) {
        throw ValidationError("muscle '" + *rating.muscle + "' is not rated on item '" + rating.item_id + "'");
    }
    if (rating.scores.empty()) throw ValidationError("rating carries no scores");
    const auto allowed = session.criteria_for(*observer);
    for (const auto& [code, score] : rating.scores) {
        const auto& c = find_criterion(code);
        if (std::find(allowed.begin(), allowed.end(), code) == allowed.end()) {
            throw ValidationError("criterion " + code + " is not assigned to observer '" + observer->id + "'");
        }
        if (score < c.min_score() || score > c.max_score()) {
            throw ValidationError("score " + std::to_string(score) + " outside " + code + " scale [" +
                                  std::to_string(c.min_score()) + ", " + std::to_string(c.max_score()) + "]");
        }
    }
}

void record_rating(SegExSession& session, ObserverRating rating) {
    validate_rating(session, rating);
    if (rating.timestamp.empty()) rating.timestamp = utc_timestamp();
    session.ratings.push_back(std::move(rating));
}

std::map<RatingUnit, std::map<std::string, int>> effective_scores(const SegExSession& session) {
    std::map<RatingUnit, std::map<std::string, int>> out;
    for (const auto& r : session.ratings) {
        const auto* item = session.find_item(r.item_id);
        if (item == nullptr) continue;
        std::vector<std::string> muscles = r.muscle ? std::vector<std::string>{*r.muscle} : item->muscles;
        for (const auto& m : muscles) {
            auto& slot = out[{r.observer_id, r.item_id, m}];
            for (const auto& [code, score] : r.scores) slot[code] = score;
        }
    }
    return out;
}

namespace {

bool unit_complete(const std::map<std::string, int>* scores, const std::vector<std::string>& required) {
    if (scores == nullptr) return false;
    for (const auto& c : required) {
        if (!scores->count(c)) return false;
    }
    return true;
}

}  // namespace

nlohmann::json observer_payload(const SegExSession& session, const Observer& observer) {
    const auto eff = effective_scores(session);
    const auto required = session.criteria_for(observer);
    nlohmann::json crit = nlohmann::json::array();
    for (const auto& code : required) crit.push_back(criterion_to_json(find_criterion(code)));
    nlohmann::json items = nlohmann::json::array();
    std::size_t done = 0;
    for (std::size_t k = 0; k < session.items.size(); ++k) {
        const auto& item = session.items[k];
        bool complete = true;
        for (const auto& m : item.muscles) {
            auto it = eff.find({observer.id, item.item_id, m});
            complete &= unit_complete(it == eff.end() ? nullptr : &it->second, required);
        }
        done += complete;
        items.push_back({{"position", k},
                         {"item_id", item.item_id},
                         {"muscles", item.muscles},
                         {"render", "/api/session/" + session.session_id + "/item/" + std::to_string(k) + "/render"},
                         {"completed", complete}});
    }
    return {{"session_id", session.session_id},
            {"observer", observer.id},
            {"view", observer.include_image() ? "overlay" : "mask"},
            {"range", session.range},
            {"polarity", "lower is better: 1 is the best ordinal score; CN 1 means a correction is needed"},
            {"criteria", std::move(crit)},
            {"items", std::move(items)},
            {"total", session.items.size()},
            {"completed_count", done}};
}

bool contains_source_marker(std::string_view text) {
    static const std::regex kWord(R"(\bsource\b)", std::regex::icase);
    static const std::regex kGt(R"(\bGT\b)");
    static const std::regex kP(R"(\bP\b)");
    const std::string s(text);
    return std::regex_search(s, kWord) || std::regex_search(s, kGt) || std::regex_search(s, kP);
}

std::vector<std::uint8_t> render_item_png(const SegExSession& session, const SessionItem& item, bool include_image) {
    const ImageSlice* image = nullptr;
    if (include_image) {
        auto it = session.images.find(item.slice_id);
        if (it != session.images.end()) image = &it->second;
    }
    return encode_rgb_png(item.mask.height, item.mask.width, render_overlay_rgb(image, item.mask));
}

nlohmann::json SegExReport::to_json() const {
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json pc = nlohmann::json::object();
        for (const auto& [code, ms] : r.per_criterion) pc[code] = ms;
        rj.push_back({{"observer", r.observer_id},
                      {"mask_origin", r.source},
                      {"muscle", r.muscle},
                      {"criteria", std::move(pc)},
                      {"e_avg", r.e_avg},
                      {"complete", r.complete},
                      {"incomplete", r.incomplete},
                      {"unrated", r.unrated},
                      {"dsc", r.dsc ? nlohmann::json(*r.dsc) : nlohmann::json(nullptr)}});
    }
    nlohmann::json inc = nlohmann::json::array();
    for (const auto& u : incomplete) {
        inc.push_back({{"observer", u.observer_id}, {"item_id", u.item_id}, {"muscle", u.muscle}, {"missing", u.missing}});
    }
    return {{"session_id", session_id},
            {"range", range},
            {"polarity", "lower is better (1 = best); standardized CN is 0 (no correction) or r_max"},
            {"statistics", "avg(stdev) with population stdev over rated units; e_avg over complete units only"},
            {"rows", std::move(rj)},
            {"incomplete", std::move(inc)}};
}

DscTable dsc_table(const DscReport& report) {
    DscTable out;
    for (const auto& s : report.per_slice) {
        auto& row = out[s.id];
        if (s.vl) row["VL"] = *s.vl;
        if (s.vm) row["VM"] = *s.vm;
    }
    return out;
}

std::string SegExReport::to_markdown() const {
    auto fmt = [](const MeanStd& m) {
        if (m.n == 0) return std::string("-");
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.2f(%.2f)", m.mean, m.stdev);
        return std::string(buf);
    };
    const auto codes = criterion_codes();
    std::string s = "| observer | mask | muscle |";
    for (const auto& c : codes) s += " " + c + " |";
    s += " E_avg | DSC | complete | incomplete | unrated |\n|---|---|---|";
    for (std::size_t i = 0; i < codes.size() + 5; ++i) s += "---|";
    s += "\n";
    for (const auto& r : rows) {
        s += "| " + r.observer_id + " | " + r.source + " | " + r.muscle + " |";
        for (const auto& c : codes) {
            auto it = r.per_criterion.find(c);
            s += " " + (it == r.per_criterion.end() ? std::string("n/a") : fmt(it->second)) + " |";
        }
        s += " " + fmt(r.e_avg) + " | " + (r.dsc ? fmt(*r.dsc) : std::string("-")) + " | " +
             std::to_string(r.complete) + " | " + std::to_string(r.incomplete) + " | " + std::to_string(r.unrated) +
             " |\n";
    }
    char range[64];
    std::snprintf(range, sizeof(range), "%g, %g", this->range.r_min, this->range.r_max);
    s += "\nScores standardized to [" + std::string(range) + "]; lower is better.\n";
    return s;
}

SegExReport aggregate(const SegExSession& session, const SourceKey& key, const DscTable* dsc) {
    if (session.ratings.empty()) throw ValidationError("no ratings recorded; nothing to report");
    if (key.session_id != session.session_id) {
        throw ValidationError("key belongs to session '" + key.session_id + "', not '" + session.session_id + "'");
    }
    for (const auto& item : session.items) {
        if (!key.sources.count(item.item_id)) throw ValidationError("key has no entry for item " + item.item_id);
    }
    const auto eff = effective_scores(session);

    std::vector<std::string> muscles;
    for (const char* m : {"VL", "VM"}) {
        for (const auto& item : session.items) {
            if (std::find(item.muscles.begin(), item.muscles.end(), m) != item.muscles.end()) {
                muscles.push_back(m);
                break;
            }
        }
    }

    SegExReport report;
    report.session_id = session.session_id;
    report.range = session.range;
    for (const auto& observer : session.observers) {
        const auto required = session.criteria_for(observer);
        for (Source src : {Source::kGroundTruth, Source::kPrediction}) {
            for (const auto& muscle : muscles) {
                ReportRow row;
                row.observer_id = observer.id;
                row.source = source_code(src);
                row.muscle = muscle;
                std::map<std::string, std::vector<double>> per;
                std::vector<double> eavgs, dscs;
                for (const auto& item : session.items) {
                    if (key.sources.at(item.item_id) != src) continue;
                    if (std::find(item.muscles.begin(), item.muscles.end(), muscle) == item.muscles.end()) continue;
                    auto it = eff.find({observer.id, item.item_id, muscle});
                    if (it == eff.end()) {
                        ++row.unrated;
                        continue;
                    }
                    std::map<std::string, double> standardized;
                    for (const auto& code : required) {
                        auto sc = it->second.find(code);
                        if (sc == it->second.end()) continue;
                        const double v = standardize(sc->second, find_criterion(code), session.range);
                        standardized[code] = v;
                        per[code].push_back(v);
                    }
                    if (standardized.size() == required.size()) {
                        ++row.complete;
                        eavgs.push_back(e_avg(standardized, required));
                        if (dsc != nullptr && src == Source::kPrediction) {
                            auto ds = dsc->find(item.slice_id);
                            if (ds != dsc->end() && ds->second.count(muscle)) dscs.push_back(ds->second.at(muscle));
                        }
                    } else {
                        ++row.incomplete;
                        IncompleteUnit u{observer.id, item.item_id, muscle, {}};
                        for (const auto& code : required) {
                            if (!standardized.count(code)) u.missing.push_back(code);
                        }
                        report.incomplete.push_back(std::move(u));
                    }
                }
                for (const auto& code : required) row.per_criterion[code] = mean_std(per[code]);
                row.e_avg = mean_std(eavgs);
                if (dsc != nullptr && src == Source::kPrediction) row.dsc = mean_std(dscs);
                report.rows.push_back(std::move(row));
            }
        }
    }
    return report;
}

SessionStore::SessionStore(const std::filesystem::path& dir_or_file)
    : dir_(session_dir_of(dir_or_file)), session_(load_session(dir_or_file)) {}

SegExSession SessionStore::snapshot() const {
    std::shared_lock lock(mutex_);
    return session_;
}

ObserverRating SessionStore::record(ObserverRating rating) {
    std::unique_lock lock(mutex_);
    validate_rating(session_, rating);
    if (rating.timestamp.empty()) rating.timestamp = utc_timestamp();
    {
        std::ofstream log(dir_ / "ratings.log", std::ios::binary | std::ios::app);
        if (!log) throw IoError("cannot append rating", (dir_ / "ratings.log").string());
        log << nlohmann::json(rating).dump() << '\n';
        log.flush();
        if (!log) throw IoError("rating append failed", (dir_ / "ratings.log").string());
    }
    session_.ratings.push_back(rating);
    return rating;
}

}  // namespace adasam::segex
