#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taskspace/ftgd.hpp"
#include "taskspace/space.hpp"

namespace taskspace {

/// Floor/ceiling-corrected transfer: positive changes are normalized by the
/// maximally possible increase (1 - pre), negative ones by the maximally
/// possible decrease (pre). Result lies in [-1, 1].
double normalize_transfer(double pre, double post);

struct TransferRecord {
    std::string source;
    std::string target;
    double pre_acc = 0.0;
    double post_acc = 0.0;
    double normalized = 0.0;
};

/// Step-0 gradient differentials per task, aligned with the suite task
/// order. nullopt marks a task that was skipped (empty subspace) or whose
/// tuning failed.
struct TaskGradients {
    std::vector<std::string> task_ids;
    std::vector<std::optional<SparseDifferential>> diffs;
};

struct TaskRunInfo {
    std::string task_id;
    bool failed = false;
    std::string error;
    FtgdRunLog log;
    std::size_t subspace_size = 0;
    double param_fraction = 0.0;
    double mass_fraction = 0.0;
};

struct ProbeHyper {
    FtgdHyper ftgd;
    int jobs = 1;  // parallel per-source-task row jobs; results merge by task id
};

struct ProbeManifest {
    std::uint64_t checkpoint_hash = 0;
    std::vector<std::string> task_ids;
    ProbeHyper hyper;
    std::vector<double> eval1;  // shared pre-tuning accuracy per task
    std::vector<TaskRunInfo> runs;
    std::size_t evaluations = 0;  // N + N^2 when nothing fails
    std::size_t tuning_runs = 0;
};

struct TransferProbeResult {
    TaskSpace tts;
    ProbeManifest manifest;
    TaskGradients gradients;  // step-0 differentials per source task
    std::vector<TransferRecord> records;
};

/// Similarity probing over one checkpoint: eval1 once on the untouched
/// model, one FTGD clone per task, re-evaluation of every tuned clone on
/// every task. TTS[i][j] is the normalized transfer onto task j after tuning
/// task i; evaluation uses eval splits only. A failed tuning marks its row
/// missing and the run continues.
TransferProbeResult transfer_probe(const LmCheckpoint& ckpt, const TaskSuite& suite,
                                   const ProbeHyper& hyper,
                                   std::span<const TokenSeq> heldout = {});

struct GradientProbeResult {
    TaskGradients gradients;
    std::vector<std::string> skipped;  // empty-subspace tasks, excluded downstream
};

/// Tuning-free probe: one step-0 differential and subspace per task, no
/// parameter updates. Cheap enough to run across a checkpoint series.
GradientProbeResult gradient_probe(const LmCheckpoint& ckpt, const TaskSuite& suite,
                                   double epsilon);

}  // namespace taskspace
