#include <iostream>

#include "adasam/error.hpp"
#include "adasam/version.hpp"
#include "common.hpp"

namespace {

int report_error(const char* kind, const std::string& message, int code) {
    std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    adasam::cli::GlobalOptions g;
    g.argv.assign(argv, argv + argc);

    CLI::App app{"ADA-SAM: self-prompting multitask segmentation and SegEx expert assessment", "adasam"};
    app.set_version_flag("--version", std::string(adasam::kToolName) + " " + adasam::kVersion);
    app.set_config("--config", "", "TOML config file; keys mirror flag names, one table per subcommand");
    app.add_flag("-q,--quiet", g.quiet, "Only print results and errors");
    app.require_subcommand(1);
    app.fallthrough();

    adasam::cli::register_model_commands(app, g);
    adasam::cli::register_segex_commands(app, g);

    app.parse_complete_callback([&g] { adasam::cli::set_quiet(g.quiet); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    } catch (const adasam::ConfigError& e) {
        return report_error("config", e.what(), 2);
    } catch (const adasam::ValidationError& e) {
        return report_error("validation", e.what(), 1);
    } catch (const adasam::IoError& e) {
        return report_error("io", e.what(), 1);
    } catch (const adasam::Error& e) {
        return report_error("runtime", e.what(), 1);
    } catch (const std::exception& e) {
        return report_error("internal", e.what(), 1);
    }
    return 0;
}
