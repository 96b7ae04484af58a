#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "taskspace/corpus.hpp"
#include "taskspace/model.hpp"

namespace taskspace {

/// g+ from the grammatical batch, g- from the ungrammatical counterparts,
/// g_delta their elementwise difference. All three share the canonical flat
/// parameter indexing. The batch is always the paradigm's full train split;
/// losses are token-level means, so the epsilon threshold has a
/// batch-size-independent meaning.
struct GradientDifferential {
    GradientVector g_plus;
    GradientVector g_minus;
    GradientVector g_delta;
    std::string paradigm_id;
    std::uint64_t checkpoint_hash = 0;
};

/// Parameter indices with |g_delta| strictly above the threshold that
/// selected them.
struct ParamSubspace {
    std::vector<std::size_t> indices;  // sorted, unique
    double epsilon = 0.0;
    std::string paradigm_id;
};

struct FtgdHyper {
    double lr = 0.1;
    double epsilon = 1e-3;
    int max_steps = 20;
    /// Ablation switch: reselect the subspace from each step's differential
    /// instead of freezing the step-0 subspace.
    bool reselect_each_step = false;
};

struct FtgdRunLog {
    double pre_accuracy = 0.0;
    double pre_perplexity = 0.0;  // 0 when no held-out corpus was supplied
    std::vector<double> step_accuracy;
    std::vector<double> step_perplexity;
    std::string stop_reason;  // "converged" | "max_steps"
    int steps = 0;
};

GradientDifferential make_differential(GradientVector g_plus, GradientVector g_minus,
                                       std::string paradigm_id, std::uint64_t checkpoint_hash);

/// Differentials over the paradigm's full train split (one batch). Dropout
/// is disabled on this path; the result is deterministic.
GradientDifferential gradient_differential(const LmModel& model,
                                           const std::vector<double>& params,
                                           const Paradigm& paradigm,
                                           std::uint64_t checkpoint_hash);

/// Indices where |g_delta| > epsilon (strict). Errors when the subspace
/// comes out empty (probing cannot proceed; try a smaller epsilon).
ParamSubspace select_subspace(const GradientDifferential& gd, double epsilon);

struct GradientMassStats {
    double param_fraction = 0.0;  // |subspace| / |theta|
    double mass_fraction = 0.0;   // L1 mass inside the subspace / total L1
    struct Bin {
        double lo = 0.0;  // |g_delta| in [lo, hi); lo == 0 collects underflow
        double hi = 0.0;
        std::size_t count = 0;
    };
    std::vector<Bin> histogram;  // log-spaced decades
};

GradientMassStats gradient_mass_stats(const GradientDifferential& gd, const ParamSubspace& sub);

/// True = stop: at least five recorded steps and current <= mean(last five).
bool stopping_rule(const std::vector<double>& history, double current);

/// SGD restricted to the subspace; parameters outside it are untouched.
void masked_sgd_step(std::vector<double>& params, const GradientVector& grads,
                     const std::vector<std::size_t>& subspace, double lr);

struct FtgdResult {
    LmCheckpoint tuned;
    FtgdRunLog log;
    GradientDifferential initial_differential;
    ParamSubspace initial_subspace;
};

/// Fine-tuning via gradient differentials: each step recomputes g_delta on
/// the full train batch and applies SGD only inside the step-0 subspace.
/// Stops per stopping_rule or after max_steps. Per-step accuracy is measured
/// on the paradigm's eval split; per-step perplexity on `heldout` when given.
FtgdResult ftgd_tune(const LmCheckpoint& ckpt, const Paradigm& paradigm, const FtgdHyper& hyper,
                     std::span<const TokenSeq> heldout = {});

struct FullGradResult {
    LmCheckpoint tuned;
    FtgdRunLog log;
};

/// Baseline: the identical loop, but every step updates all parameters with
/// the unmasked g+ of the grammatical batch.
FullGradResult full_gradient_tune(const LmCheckpoint& ckpt, const Paradigm& paradigm,
                                  const FtgdHyper& hyper,
                                  std::span<const TokenSeq> heldout = {});

/// On-disk form consumed by the analytics module: the subspace indices and
/// g_delta restricted to them, plus enough header data to recompute mass and
/// size fractions.
struct SparseDifferential {
    std::string paradigm_id;
    std::uint64_t checkpoint_hash = 0;
    double epsilon = 0.0;
    std::size_t total_params = 0;
    double total_l1 = 0.0;
    std::vector<std::size_t> indices;
    std::vector<double> values;
};

SparseDifferential sparsify(const GradientDifferential& gd, const ParamSubspace& sub);
void save_sparse_differential(const SparseDifferential& sd, const std::string& path);
SparseDifferential load_sparse_differential(const std::string& path);

}  // namespace taskspace
