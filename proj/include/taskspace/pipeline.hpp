#pragma once

#include <functional>
#include <string>

#include "taskspace/analytics.hpp"
#include "taskspace/corpus.hpp"
#include "taskspace/model.hpp"
#include "taskspace/probing.hpp"

namespace taskspace {

inline constexpr const char* kToolVersion = "0.1.0";

// Documented exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitPartialProbe = 3;
inline constexpr int kExitMissingArtifact = 4;

/// One structured config drives every command; all randomness flows from the
/// single seed through named substreams, so stages are independently
/// reproducible.
struct RunConfig {
    std::uint64_t seed = 1;
    int jobs = 1;
    std::string out_dir = "runs/default";

    SuiteSpec suite;
    std::string ingest_path;  // non-empty: cmd_ingest reads BLiMP-format records here
    std::size_t corpus_sentences = 10000;
    double valid_fraction = 0.1;
    double filler_fraction = 0.5;
    std::size_t heldout_sentences = 512;  // perplexity slice for tuning logs

    LmConfig model;          // vocab_size is always overwritten from the suite
    PretrainHyper pretrain;  // seed is always the master seed
    FtgdHyper probe;

    static RunConfig defaults();
    static RunConfig from_json(const std::string& text);
    static RunConfig from_json_file(const std::string& path);
    std::string canonical_json() const;
    std::uint64_t hash() const;
    void validate() const;
};

int cmd_generate(const RunConfig& config);
int cmd_ingest(const RunConfig& config);
int cmd_pretrain(const RunConfig& config, const std::string& resume_path = "");
int cmd_probe(const RunConfig& config, const std::string& selector = "final",
              bool gradient_only = false);
int cmd_analyze(const RunConfig& config);
int cmd_report(const RunConfig& config);

/// Runs a command body, mapping thrown Errors onto the documented exit codes.
int run_command(const std::function<int()>& body);

// Paths under out_dir, shared between commands and tests.
std::string suite_dir(const RunConfig& config);
std::string corpus_dir(const RunConfig& config);
std::string checkpoints_dir(const RunConfig& config);
std::string probe_dir(const RunConfig& config, std::int64_t epoch);
std::string analysis_dir(const RunConfig& config);
std::string report_dir(const RunConfig& config);

/// Loads the suite exported by cmd_generate / cmd_ingest.
TaskSuite load_suite(const RunConfig& config);

/// Epochs with a checkpoint file on disk, ascending.
std::vector<std::int64_t> list_checkpoint_epochs(const RunConfig& config);
std::string checkpoint_path(const RunConfig& config, std::int64_t epoch);

}  // namespace taskspace
