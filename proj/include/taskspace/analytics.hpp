#pragma once

#include <span>
#include <string>
#include <vector>

#include "taskspace/probing.hpp"
#include "taskspace/space.hpp"

namespace taskspace {

/// Jaccard similarity of task subspaces: |A n B| / |A u B|. Diagonal 1;
/// a cell with both subspaces absent/empty is missing.
TaskSpace jaccard_space(const TaskGradients& gradients);

/// Cosine of g_delta vectors restricted to the subspace intersection.
/// An empty intersection yields 0 (unrelated tasks do not interact); a
/// zero-norm restriction yields 0 with a warning. With union_zero_fill the
/// norms run over each task's full subspace instead (ablation).
TaskSpace cosine_space(const TaskGradients& gradients, bool union_zero_fill = false);

/// Elementwise product J_sim x CS. Task orders must match exactly.
TaskSpace weighted_space(const TaskSpace& jaccard, const TaskSpace& cosine);

/// Binary same-phenomenon clustering; diagonal 1.
HypothesisSpace phenomenon_hypothesis(const TaskSuite& suite);

/// Pairwise vocabulary overlap |V_A n V_B| normalized by the maximum
/// overlap over distinct task pairs. V is the support of the train-split
/// vocabulary distribution.
TaskSpace nvo_control(const TaskSuite& suite);

/// 1-Wasserstein distance between train-split vocabulary distributions
/// along a fixed 1-D token ordering (global corpus frequency, ties by id,
/// unit spacing), computed as the L1 distance of the CDFs.
TaskSpace wasserstein_control(const TaskSuite& suite);

struct CorrelateOptions {
    int permutations = 1000;
    std::uint64_t seed = 0x5ca1ab1e;
    /// Entries compared: auto = upper triangle when both spaces have
    /// symmetric metrics, full off-diagonal otherwise.
    enum class Entries { automatic, upper_triangle, off_diagonal } entries = Entries::automatic;
};

struct Correlation {
    double r = 0.0;
    double abs_r = 0.0;  // reported for distance hypotheses (WD)
    double p_perm = 1.0;
    std::size_t n_entries = 0;
    std::vector<double> null_rs;  // sorted permutation nulls

    /// q-quantile of the permutation null (q in [0,1]).
    double null_quantile(double q) const;
};

/// Pearson r over off-diagonal entries (missing cells excluded pairwise)
/// plus a label-permutation p-value. Errors when fewer than 3 valid entry
/// pairs remain or task orders differ.
Correlation correlate_spaces(const TaskSpace& x, const TaskSpace& y,
                             const CorrelateOptions& opts = {});

struct WithinPhenomenonStats {
    struct Group {
        std::string phenomenon;
        double mean = 0.0;
        double stddev = 0.0;  // population convention
        std::size_t n_cells = 0;
    };
    std::vector<Group> groups;  // phenomena with >= 2 paradigms only
    double within_mean = 0.0;
    double across_mean = 0.0;
};

/// Off-diagonal within-phenomenon cells aggregated per phenomenon, plus
/// global within/across means for trend plots.
WithinPhenomenonStats within_phenomenon_stats(const TaskSpace& space, const TaskSuite& suite);

struct SeriesRecord {
    std::int64_t epoch = 0;
    double mean_subspace_size = 0.0;
    double within_jsim = 0.0;
    double across_jsim = 0.0;
    double within_cs = 0.0;
    double across_cs = 0.0;
    double r_phenomenon = 0.0;  // r(GTS_CS, phenomenon hypothesis)
    double r_stability = 0.0;   // r(GTS_CS at t, GTS_CS at final checkpoint)
    std::size_t probed_tasks = 0;
};

/// Tuning-free checkpoint-series analysis via gradient_probe per checkpoint.
/// The final checkpoint's cosine space is the stability reference.
std::vector<SeriesRecord> checkpoint_series(std::span<const LmCheckpoint> ckpts,
                                            const TaskSuite& suite, double epsilon);

/// Same analysis over already-computed per-checkpoint gradients (ordered by
/// epoch); lets the CLI reuse saved dumps without re-probing.
std::vector<SeriesRecord> series_from_gradients(
    std::span<const std::pair<std::int64_t, TaskGradients>> per_epoch, const TaskSuite& suite);

}  // namespace taskspace
