#include <CLI11.hpp>
#include <cstdint>
#include <string>

#include "taskspace/pipeline.hpp"

using namespace taskspace;

int main(int argc, char** argv) {
    CLI::App app{"linguistic task space toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int jobs = -1;
    app.add_option("--config", config_path, "run config JSON");
    app.add_option("--out", out_dir, "output directory override");
    app.add_option("--seed", seed, "master seed override")->each([&](const std::string&) {
        seed_set = true;
    });
    app.add_option("--jobs", jobs, "parallel probe jobs");

    auto* generate = app.add_subcommand("generate", "emit the synthetic task suite");
    auto* ingest = app.add_subcommand("ingest", "ingest BLiMP-format records");
    auto* pretrain = app.add_subcommand("pretrain", "pretrain the LM, writing checkpoints");
    std::string resume_path;
    pretrain->add_option("--resume", resume_path, "continue from a saved checkpoint");
    auto* probe = app.add_subcommand("probe", "similarity probing over checkpoints");
    std::string selector = "final";
    bool gradient_only = false;
    probe->add_option("--checkpoint", selector, "final | all | <epoch>");
    probe->add_flag("--gradient-only", gradient_only, "skip tuning, emit gradient dumps only");
    auto* analyze = app.add_subcommand("analyze", "build task spaces, controls and correlations");
    auto* report = app.add_subcommand("report", "render the run report");

    CLI11_PARSE(app, argc, argv);

    return run_command([&]() -> int {
        RunConfig config = config_path.empty() ? RunConfig::defaults()
                                               : RunConfig::from_json_file(config_path);
        if (seed_set) config.seed = seed;
        if (!out_dir.empty()) config.out_dir = out_dir;
        if (jobs >= 0) config.jobs = jobs;
        config.validate();

        if (generate->parsed()) return cmd_generate(config);
        if (ingest->parsed()) return cmd_ingest(config);
        if (pretrain->parsed()) return cmd_pretrain(config, resume_path);
        if (probe->parsed()) return cmd_probe(config, selector, gradient_only);
        if (analyze->parsed()) return cmd_analyze(config);
        if (report->parsed()) return cmd_report(config);
        return kExitConfig;
    });
}
