#include <cstdlib>
#include <iostream>
#include <memory>
#include <sstream>

#include "adasam/error.hpp"
#include "adasam/llm_observer.hpp"
#include "adasam/phantom.hpp"
#include "adasam/provenance.hpp"
#include "adasam/segex.hpp"
#include "adasam/segex_service.hpp"
#include "common.hpp"

namespace adasam::cli {

namespace {

using namespace adasam::segex;

std::vector<std::string> split_codes(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        find_criterion(item);
        out.push_back(item);
    }
    return out;
}

std::vector<Observer> load_observers(const std::filesystem::path& path) {
    auto j = read_json(path);
    std::vector<Observer> out;
    for (const auto& e : j) {
        Observer o;
        o.id = e.at("id").get<std::string>();
        o.llm = e.value("llm", false);
        o.token = e.value("token", std::string{});
        if (o.token.empty()) o.token = random_token();
        if (e.contains("criteria")) o.criteria = e.at("criteria").get<std::vector<std::string>>();
        out.push_back(std::move(o));
    }
    return out;
}

std::optional<DscTable> load_dsc(const std::filesystem::path& path) {
    if (path.empty()) return std::nullopt;
    return dsc_table(DscReport::from_json(read_json(path)));
}

struct BuildOptions {
    std::filesystem::path gt, pred, images, data, out, key, observers;
    std::string split = "test";
    std::uint64_t seed = 0;
    std::vector<double> range{1.0, 4.0};
    std::string llm_skip = "SD";
};

void add_build(CLI::App& segex, GlobalOptions& g) {
    auto o = std::make_shared<BuildOptions>();
    auto* sub = segex.add_subcommand("build", "Build a blinded session mixing GT and predicted masks");
    auto* gt = sub->add_option("--gt", o->gt, "Directory of ground-truth <id>.png masks");
    sub->add_option("--pred", o->pred, "Directory of predicted <id>.png masks")->required();
    sub->add_option("--images", o->images, "Directory of <id>.png slices (needed for human observers)");
    auto* data = sub->add_option("--data", o->data, "Dataset directory: GT masks and images of --split");
    gt->excludes(data);
    sub->add_option("--split", o->split, "Split used with --data")
        ->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
    sub->add_option("--seed", o->seed, "Shuffle seed")->capture_default_str();
    sub->add_option("--out", o->out, "Session directory")->required();
    sub->add_option("--key", o->key, "Sealed key file (default: <out>.key.sealed)");
    sub->add_option("--observers", o->observers, "JSON roster [{id, llm, token?, criteria?}]");
    sub->add_option("--range", o->range, "r_min r_max")->expected(2)->capture_default_str();
    sub->add_option("--llm-skip", o->llm_skip, "Criteria the default LLM observer skips")->capture_default_str();
    sub->callback([o, &g] {
        std::vector<SliceMasks> slices;
        nlohmann::json inputs;
        if (!o->data.empty() || o->gt.empty()) {
            const auto data = resolve_data_dir(g, "--data", o->data);
            const auto manifest = load_manifest(data);
            for (const auto* rec : manifest.split(parse_split(o->split))) {
                const auto pred_path = o->pred / (rec->id + ".png");
                if (!std::filesystem::exists(pred_path)) {
                    throw ValidationError("prediction missing for slice '" + rec->id + "': " + pred_path.string());
                }
                slices.push_back({rec->id, load_mask_png(manifest.mask_path(*rec)), load_mask_png(pred_path),
                                  load_image_png(manifest.image_path(*rec))});
            }
            inputs = {{"data", data.string()}, {"split", o->split}, {"pred", o->pred.string()}};
        } else {
            std::optional<std::filesystem::path> images;
            if (!o->images.empty()) images = o->images;
            slices = load_slice_masks(o->gt, o->pred, images);
            inputs = {{"gt", o->gt.string()}, {"pred", o->pred.string()}, {"images", o->images.string()}};
        }

        std::vector<Observer> roster;
        if (!o->observers.empty()) {
            roster = load_observers(o->observers);
        } else {
            roster = default_observers();
            const auto skip = split_codes(o->llm_skip);
            for (auto& obs : roster) {
                if (!obs.llm) continue;
                obs.criteria.clear();
                for (const auto& c : criterion_codes()) {
                    if (std::find(skip.begin(), skip.end(), c) == skip.end()) obs.criteria.push_back(c);
                }
            }
        }
        const ScoreRange range{o->range.at(0), o->range.at(1)};
        auto built = build_session(std::move(slices), o->seed, roster, range);
        built.session.provenance["inputs"] = inputs;
        save_session(o->out, built.session);
        const auto key_path = o->key.empty() ? default_key_path(o->out) : o->key;
        save_key(key_path, built.key);

        nlohmann::json observers = nlohmann::json::array();
        for (const auto& obs : built.session.observers) observers.push_back(obs);
        emit({{"session", (o->out / "session.json").string()},
              {"session_id", built.session.session_id},
              {"items", built.session.items.size()},
              {"skipped_empty", built.skipped},
              {"key", key_path.string()},
              {"observers", observers},
              {"provenance", make_provenance({{"command", "segex build"},
                                              {"seed", o->seed},
                                              {"range", range},
                                              {"inputs", inputs}})}});
    });
}

struct ServeOptions {
    std::filesystem::path session, key, dsc;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string admin_token;
    std::string cors = "*";
};

void add_serve(CLI::App& segex, GlobalOptions&) {
    auto o = std::make_shared<ServeOptions>();
    auto* sub = segex.add_subcommand("serve", "Serve a session to observers over HTTP");
    sub->add_option("--session", o->session, "Session directory or session.json")->required();
    sub->add_option("--port", o->port, "Port (0 picks a free one)")->capture_default_str();
    sub->add_option("--host", o->host, "Bind address")->capture_default_str();
    sub->add_option("--key", o->key, "Sealed key for the report route (default: <session>.key.sealed)");
    sub->add_option("--admin-token", o->admin_token, "Token for the report route (default: random)");
    sub->add_option("--dsc", o->dsc, "Evaluation report whose per-slice DSC joins the report");
    sub->add_option("--cors-origin", o->cors, "Access-Control-Allow-Origin value; empty disables")
        ->capture_default_str();
    sub->callback([o] {
        auto store = std::make_shared<SessionStore>(o->session);
        ServiceOptions so;
        so.admin_token = o->admin_token.empty() ? random_token() : o->admin_token;
        so.key_path = o->key.empty() ? default_key_path(store->dir()) : o->key;
        so.dsc = load_dsc(o->dsc);
        so.cors_origin = o->cors;
        const auto session_id = store->read([](const SegExSession& s) { return s.session_id; });
        RatingService service(store, so);
        int port = o->port;
        if (port == 0) {
            port = service.bind_any_port(o->host);
            if (port < 0) throw IoError("cannot bind", o->host);
        }
        emit({{"url", "http://" + o->host + ":" + std::to_string(port) + "/api/session/" + session_id},
              {"session_id", session_id},
              {"port", port},
              {"admin_token", so.admin_token},
              {"key", so.key_path.string()}});
        log("serving session " + session_id + " on " + o->host + ":" + std::to_string(port));
        const bool ok = o->port == 0 ? service.listen_after_bind() : service.listen(o->host, port);
        if (!ok) throw IoError("cannot listen on port " + std::to_string(port), o->host);
    });
}

struct ReportOptions {
    std::filesystem::path session, key, dsc, out;
    std::string format = "json";
};

void add_report(CLI::App& segex, GlobalOptions&) {
    auto o = std::make_shared<ReportOptions>();
    auto* sub = segex.add_subcommand("report", "Unseal sources and aggregate the ratings");
    sub->add_option("--session", o->session, "Session directory or session.json")->required();
    sub->add_option("--key", o->key, "Sealed key file (default: <session>.key.sealed)");
    sub->add_option("--dsc", o->dsc, "Evaluation report whose per-slice DSC joins the prediction rows");
    sub->add_option("--out", o->out, "Write the JSON report here");
    sub->add_option("--format", o->format, "Stdout format")
        ->check(CLI::IsMember({"json", "markdown"}))
        ->capture_default_str();
    sub->callback([o] {
        const auto session = load_session(o->session);
        const auto key_path = o->key.empty() ? default_key_path(session_dir_of(o->session)) : o->key;
        const auto key = load_key(key_path);
        const auto dsc = load_dsc(o->dsc);
        const auto report = aggregate(session, key, dsc ? &*dsc : nullptr);
        auto j = report.to_json();
        j["provenance"] = make_provenance({{"command", "segex report"},
                                           {"session", o->session.string()},
                                           {"key", key_path.string()},
                                           {"dsc", o->dsc.string()}});
        if (!o->out.empty()) write_json(o->out, j);
        if (o->format == "markdown") {
            std::cout << report.to_markdown();
        } else {
            emit(j);
        }
    });
}

struct LlmOptions {
    std::filesystem::path session, quarantine;
    std::string backend = "mock";
    std::string observer = "llm1";
    std::string skip = "SD";
    std::vector<std::string> mock_scores;
    std::string model = "gpt-4o";
    std::string base_url = "https://api.openai.com";
    std::string api_key_env = "OPENAI_API_KEY";
    int retries = 3;
    int timeout = 60;
};

void add_llm(CLI::App& segex, GlobalOptions&) {
    auto o = std::make_shared<LlmOptions>();
    auto* sub = segex.add_subcommand("llm", "Rate every item with an LLM observer (mask-only renders)");
    sub->add_option("--session", o->session, "Session directory or session.json")->required();
    sub->add_option("--backend", o->backend, "mock or live")->check(CLI::IsMember({"mock", "live"}))->capture_default_str();
    sub->add_option("--observer", o->observer, "LLM observer id")->capture_default_str();
    sub->add_option("--skip", o->skip, "Comma-separated criteria not asked for")->capture_default_str();
    sub->add_option("--mock-score", o->mock_scores, "Fixed mock reply, e.g. MQ=2 (repeatable)");
    sub->add_option("--model", o->model, "Live model name")->capture_default_str();
    sub->add_option("--base-url", o->base_url, "OpenAI-compatible endpoint root")->capture_default_str();
    sub->add_option("--api-key-env", o->api_key_env, "Environment variable holding the API key")
        ->capture_default_str();
    sub->add_option("--retries", o->retries, "Retries per item")->capture_default_str();
    sub->add_option("--timeout", o->timeout, "Live request timeout in seconds")->capture_default_str();
    sub->add_option("--quarantine", o->quarantine, "Quarantine log (default: <session>/llm_quarantine.jsonl)");
    sub->callback([o] {
        SessionStore store(o->session);
        std::unique_ptr<LlmBackend> backend;
        if (o->backend == "mock") {
            std::map<std::string, int> fixed;
            for (const auto& kv : o->mock_scores) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw ConfigError("--mock-score expects CODE=value, got '" + kv + "'");
                find_criterion(kv.substr(0, eq));
                fixed[kv.substr(0, eq)] = std::stoi(kv.substr(eq + 1));
            }
            backend = std::make_unique<MockBackend>(fixed);
        } else {
            HttpBackendConfig hc;
            hc.model = o->model;
            hc.base_url = o->base_url;
            hc.timeout_seconds = o->timeout;
            if (const char* key = std::getenv(o->api_key_env.c_str())) hc.api_key = key;
            backend = std::make_unique<HttpBackend>(hc);
        }
        LlmObserveConfig lc;
        lc.observer_id = o->observer;
        lc.skip = split_codes(o->skip);
        lc.max_retries = o->retries;
        lc.backoff_ms = o->backend == "live" ? 500 : 0;
        lc.quarantine_path = o->quarantine.empty() ? store.dir() / "llm_quarantine.jsonl" : o->quarantine;
        const auto result = llm_observe(store.snapshot(), *backend, lc);
        for (const auto& r : result.ratings) store.record(r);
        nlohmann::json quarantined = nlohmann::json::array();
        for (const auto& q : result.quarantined) quarantined.push_back({{"item_id", q.item_id}, {"reason", q.reason}});
        emit({{"observer", o->observer},
              {"backend", backend->name()},
              {"rated", result.ratings.size()},
              {"quarantined", quarantined},
              {"quarantine_log", lc.quarantine_path.string()},
              {"provenance", make_provenance({{"command", "segex llm"},
                                              {"session", o->session.string()},
                                              {"backend", o->backend},
                                              {"skip", lc.skip},
                                              {"retries", o->retries}})}});
    });
}

}  // namespace

void register_segex_commands(CLI::App& app, GlobalOptions& g) {
    auto* segex = app.add_subcommand("segex", "Expert assessment sessions: build, serve, report, llm");
    segex->require_subcommand(1);
    add_build(*segex, g);
    add_serve(*segex, g);
    add_report(*segex, g);
    add_llm(*segex, g);
}

}  // namespace adasam::cli
