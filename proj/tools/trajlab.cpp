// Command-line front end: synth-data | train | predict | eval | bench.

#include <CLI11.hpp>

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "trajlab/config.hpp"
#include "trajlab/pipeline.hpp"

namespace {

enum ExitCode : int {
    kOk = 0,
    kInternal = 1,
    kUsage = 2,
    kMissingInput = 3,
    kCheckpoint = 4,
    kData = 5,
    kTraining = 6,
};

constexpr const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  internal error\n"
    "  2  usage or configuration error (bad flag, unknown config key, invalid value)\n"
    "  3  missing input (config file, dataset directory, checkpoint)\n"
    "  4  checkpoint unreadable or inconsistent with the configuration\n"
    "  5  malformed data (trajectory, grid or anchor file; empty split)\n"
    "  6  training diverged (non-finite loss or gradient)\n"
    "\nEnvironment: TRAJLAB_SEED overrides run.seed.";

int fail(int code, const std::string& what) {
    std::cerr << "error: " << what << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Goal-conditioned diffusion trajectory prediction with tree sampling"};
    app.footer(kExitCodes);
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("-c,--config", config_path, "Sectioned key=value config file");
    app.add_option("--set", overrides, "Override a config value, section.key=value (repeatable)");

    struct Command {
        const char* name;
        const char* help;
    };
    const Command commands[] = {
        {"synth-data", "Generate a synthetic multi-goal dataset directory"},
        {"train", "Train the model; writes the checkpoint and metrics.csv"},
        {"predict", "Write predictions.json for the held-out scene"},
        {"eval", "Write best-of-N ADE/FDE for the held-out scene to eval.csv"},
        {"bench", "Compare samplers; writes bench.csv"},
    };
    for (const Command& c : commands) app.add_subcommand(c.name, c.help);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        if (app.exit(e) == 0) return kOk;
        return kUsage;
    }

    trajlab::RunConfig cfg;
    try {
        if (!config_path.empty()) cfg.load(config_path);
        cfg.apply_environment();
        for (const std::string& o : overrides) cfg.apply_override(o);
    } catch (const trajlab::ConfigError& e) {
        return fail(kUsage, e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(kMissingInput, e.what());
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        if (command == "synth-data") {
            trajlab::run_synth_data(cfg, std::cerr);
        } else if (command == "train") {
            trajlab::run_train(cfg, std::cerr);
        } else if (command == "predict") {
            trajlab::run_predict(cfg, std::cerr);
        } else if (command == "eval") {
            trajlab::run_eval(cfg, std::cerr);
        } else if (command == "bench") {
            trajlab::run_bench(cfg, std::cerr);
        }
    } catch (const trajlab::ConfigError& e) {
        return fail(kUsage, e.what());
    } catch (const trajlab::MissingInputError& e) {
        return fail(kMissingInput, e.what());
    } catch (const trajlab::nn::CheckpointError& e) {
        return fail(kCheckpoint, e.what());
    } catch (const trajlab::DataError& e) {
        return fail(kData, e.what());
    } catch (const trajlab::GridFileError& e) {
        return fail(kData, e.what());
    } catch (const trajlab::TrainingError& e) {
        return fail(kTraining, e.what());
    } catch (const std::invalid_argument& e) {
        return fail(kUsage, e.what());
    } catch (const std::exception& e) {
        return fail(kInternal, e.what());
    }
    return kOk;
}
