// Command-line pipeline driver. Each subcommand runs one stage against a
// run directory; stages verify upstream artifacts through their manifests.
//
//   ustad simulate --config run.cfg
//   ustad tokenize --config run.cfg
//   ustad train    --config run.cfg
//   ustad score    --config run.cfg
//   ustad evaluate --config run.cfg
//   ustad report   --config run.cfg
//
// Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 schema mismatch,
// 5 numeric failure.

#include <chrono>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ustad/pipeline.hpp"

namespace {

int dispatch(const std::string& stage, const std::string& config_path) {
    using namespace ustad::cli;
    std::string error;
    const int rc = run_stage_catching(stage, [&] {
        const RunConfig cfg = load_config(config_path);
        const auto t0 = std::chrono::steady_clock::now();
        if (stage == "simulate") run_simulate(cfg);
        else if (stage == "tokenize") run_tokenize(cfg);
        else if (stage == "train") run_train(cfg);
        else if (stage == "score") run_score(cfg);
        else if (stage == "evaluate") run_evaluate(cfg);
        else if (stage == "report") run_report(cfg);
        else throw ConfigError("unknown stage: " + stage);
        const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << "[ustad] " << stage << " done in " << dt << " s -> " << cfg.out_dir.string()
                  << "\n";
    }, &error);
    if (rc != 0) std::cerr << "[ustad] " << stage << " failed (" << rc << "): " << error << "\n";
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"uncertainty-aware mobility modeling and anomaly scoring pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    for (const auto& stage :
         {"simulate", "tokenize", "train", "score", "evaluate", "report"}) {
        auto* sub = app.add_subcommand(stage);
        sub->add_option("--config", config_path, "run configuration file")->required();
    }

    CLI11_PARSE(app, argc, argv);
    return dispatch(app.get_subcommands().front()->get_name(), config_path);
}
