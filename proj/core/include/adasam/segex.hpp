#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "adasam/image.hpp"
#include "adasam/metrics.hpp"

/// Expert assessment of segmentation masks: blinded sessions mixing ground
/// truth and predictions, observer ratings on five clinical criteria, score
/// standardization and per-observer aggregation.
namespace adasam::segex {

enum class CriterionKind { kOrdinal, kBinary };

struct Criterion {
    std::string code;  // MQ, MB, CN, SD, DC
    std::string name;
    CriterionKind kind = CriterionKind::kOrdinal;
    std::string question;

    int min_score() const { return kind == CriterionKind::kBinary ? 0 : 1; }
    int max_score() const { return kind == CriterionKind::kBinary ? 1 : 4; }
};

/// The five criteria in their fixed order. Ordinal scores run 1 (best) to 4.
const std::vector<Criterion>& criteria();
std::vector<std::string> criterion_codes();

/// Throws ValidationError for an unknown code.
const Criterion& find_criterion(std::string_view code);

nlohmann::json criterion_to_json(const Criterion& c);

/// Common scale every criterion is mapped onto.
struct ScoreRange {
    double r_min = 1.0;
    double r_max = 4.0;

    /// Throws ConfigError unless r_min < r_max.
    void validate() const;
    bool operator==(const ScoreRange&) const = default;
};

void to_json(nlohmann::json& j, const ScoreRange& r);
void from_json(const nlohmann::json& j, ScoreRange& r);

/// Ordinal 1..4 maps affinely onto [r_min, r_max]; binary 0/1 is multiplied
/// by r_max. Throws ValidationError on a raw score outside the criterion's scale.
double standardize(int score, const Criterion& criterion, const ScoreRange& range);

/// Mean of standardized scores over `required`. Throws ValidationError
/// naming every missing criterion.
double e_avg(const std::map<std::string, double>& standardized, const std::vector<std::string>& required);

enum class Source { kGroundTruth, kPrediction };

/// "GT" / "P". Only the sealed key and the unsealed report use these.
std::string source_code(Source s);
Source parse_source(std::string_view code);

struct Observer {
    std::string id;
    std::string token;
    /// LLM observers receive mask-only renders; humans get image + overlay.
    bool llm = false;
    /// Criteria this observer rates. Completeness is judged against this list.
    std::vector<std::string> criteria;

    bool include_image() const { return !llm; }
};

void to_json(nlohmann::json& j, const Observer& o);
void from_json(const nlohmann::json& j, Observer& o);

/// One blinded entry. The mask's source lives only in the SourceKey.
struct SessionItem {
    std::string item_id;
    std::string slice_id;
    /// Muscles rated for this item: labels present in the GT or prediction of its slice.
    std::vector<std::string> muscles;
    LabelMask mask;
};

/// Ratings keep the submission order; the effective score for a
/// (observer, item, muscle, criterion) is the last one written.
struct ObserverRating {
    std::string observer_id;
    std::string item_id;
    /// Empty applies the scores to every muscle of the item.
    std::optional<std::string> muscle;
    std::map<std::string, int> scores;
    std::string timestamp;

    bool operator==(const ObserverRating&) const = default;
};

void to_json(nlohmann::json& j, const ObserverRating& r);
void from_json(const nlohmann::json& j, ObserverRating& r);

struct SegExSession {
    std::string session_id;
    std::uint64_t seed = 0;
    ScoreRange range;
    std::vector<std::string> criteria;
    std::vector<SessionItem> items;
    std::vector<Observer> observers;
    /// Underlying slices for human overlays, keyed by slice id.
    std::map<std::string, ImageSlice> images;
    std::vector<ObserverRating> ratings;
    nlohmann::json provenance = nlohmann::json::object();

    const SessionItem* find_item(std::string_view item_id) const;
    const Observer* find_observer(std::string_view observer_id) const;
    const Observer* find_observer_by_token(std::string_view token) const;
    /// The criteria an observer must rate: its own list, else the session's.
    std::vector<std::string> criteria_for(const Observer& o) const;
};

/// Hidden item -> source mapping, stored apart from the session.
struct SourceKey {
    std::string session_id;
    std::map<std::string, Source> sources;

    /// FNV-1a 64 over the canonical "item=source;" listing, as 16 hex digits.
    std::string digest() const;
};

/// Sibling of the session directory: "<dir>.key.sealed".
std::filesystem::path default_key_path(const std::filesystem::path& session_dir);

void save_key(const std::filesystem::path& path, const SourceKey& key);
/// Throws IoError if missing and ValidationError if the digest does not match.
SourceKey load_key(const std::filesystem::path& path);

struct SliceMasks {
    std::string slice_id;
    LabelMask gt;
    LabelMask pred;
    std::optional<ImageSlice> image;
};

struct BuiltSession {
    SegExSession session;
    SourceKey key;
    /// Slices with no muscle in either mask; nothing to rate, so left out.
    std::vector<std::string> skipped;
};

/// Interleaves GT and prediction of every slice under a seeded shuffle and
/// assigns opaque item ids. Throws ValidationError on duplicate slice ids or
/// GT/prediction shape mismatch, and ConfigError when a human observer is
/// listed but a slice has no image.
BuiltSession build_session(std::vector<SliceMasks> slices, std::uint64_t seed, std::vector<Observer> observers,
                           const ScoreRange& range = {});

/// Loads `<dir>/<id>.png` masks from both directories (and images when given).
/// Throws ValidationError when the two id sets differ.
std::vector<SliceMasks> load_slice_masks(const std::filesystem::path& gt_dir,
                                         const std::filesystem::path& pred_dir,
                                         const std::optional<std::filesystem::path>& image_dir);

/// Criteria LLM observers skip by default: SD needs the reference size.
std::vector<std::string> default_llm_skip();

/// Default roster: human observer "h1" and LLM observer "llm1" (skipping SD),
/// each with a fresh token.
std::vector<Observer> default_observers();

/// Fresh observer token (hex, from the OS entropy source).
std::string random_token();

/// Layout: session.json, masks/<item>.png, images/<slice>.png, ratings.log.
/// Output is byte-stable for equal sessions.
void save_session(const std::filesystem::path& dir, const SegExSession& session);
/// Accepts the directory or its session.json.
SegExSession load_session(const std::filesystem::path& dir_or_file);
std::filesystem::path session_dir_of(const std::filesystem::path& dir_or_file);

/// Throws ValidationError for unknown observer/item/muscle/criterion, an
/// out-of-scale score, or an empty score map.
void validate_rating(const SegExSession& session, const ObserverRating& rating);

/// Validates and appends. Later writes win on aggregation.
void record_rating(SegExSession& session, ObserverRating rating);

struct RatingUnit {
    std::string observer_id;
    std::string item_id;
    std::string muscle;
    bool operator<(const RatingUnit& o) const {
        return std::tie(observer_id, item_id, muscle) < std::tie(o.observer_id, o.item_id, o.muscle);
    }
};

/// Last-write-wins replay of the rating log, fanned out to muscles.
std::map<RatingUnit, std::map<std::string, int>> effective_scores(const SegExSession& session);

/// Payload an observer sees: item ids, render links, criteria and own
/// completion flags. Never carries sources, slice ids or other observers.
nlohmann::json observer_payload(const SegExSession& session, const Observer& observer);

/// True if the serialized text matches any source marker
/// (\bsource\b case-insensitive, \bGT\b, \bP\b).
bool contains_source_marker(std::string_view text);

/// PNG bytes for one item: overlay on the slice for humans, mask only otherwise.
std::vector<std::uint8_t> render_item_png(const SegExSession& session, const SessionItem& item, bool include_image);

struct ReportRow {
    std::string observer_id;
    std::string source;  // "GT" / "P"
    std::string muscle;  // "VL" / "VM"
    std::map<std::string, MeanStd> per_criterion;
    MeanStd e_avg;
    std::size_t complete = 0;
    std::size_t incomplete = 0;
    std::size_t unrated = 0;
    std::optional<MeanStd> dsc;
};

struct IncompleteUnit {
    std::string observer_id;
    std::string item_id;
    std::string muscle;
    std::vector<std::string> missing;
};

struct SegExReport {
    std::string session_id;
    ScoreRange range;
    std::vector<ReportRow> rows;
    std::vector<IncompleteUnit> incomplete;
    nlohmann::json to_json() const;
    /// One line per row: per-criterion and E_avg avg(stdev), counts, DSC.
    std::string to_markdown() const;
};

/// Per-slice DSC by muscle ("VL"/"VM"), joined into the prediction rows.
using DscTable = std::map<std::string, std::map<std::string, double>>;

/// Per-slice values of an evaluation report, keyed by slice id.
DscTable dsc_table(const DscReport& report);

/// Groups effective scores by observer x source x muscle. Rows cover every
/// roster observer, both sources and every muscle present in the session.
/// Per-criterion avg(stdev) uses every rated unit; E_avg only complete ones.
/// Throws ValidationError when the session has no ratings or the key does
/// not belong to it.
SegExReport aggregate(const SegExSession& session, const SourceKey& key, const DscTable* dsc = nullptr);

/// Thread-safe handle on a saved session: concurrent readers, one writer.
/// Every accepted rating is appended to ratings.log before it is visible.
class SessionStore {
public:
    explicit SessionStore(const std::filesystem::path& dir_or_file);

    SegExSession snapshot() const;
    /// Validates, stamps the time if empty, persists, then applies.
    ObserverRating record(ObserverRating rating);

    template <typename Fn>
    auto read(Fn&& fn) const {
        std::shared_lock lock(mutex_);
        return fn(session_);
    }

    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
    mutable std::shared_mutex mutex_;
    SegExSession session_;
};

}  // namespace adasam::segex
