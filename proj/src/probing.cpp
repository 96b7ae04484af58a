#include "taskspace/probing.hpp"

#include <atomic>
#include <thread>

#include "taskspace/common.hpp"

namespace taskspace {

double normalize_transfer(double pre, double post) {
    if (!(pre >= 0.0 && pre <= 1.0 && post >= 0.0 && post <= 1.0))
        fail(Errc::invalid_argument, "normalize_transfer: accuracies must lie in [0,1]");
    if (post > pre) {
        const double room = 1.0 - pre;
        return room > 0.0 ? (post - pre) / room : 0.0;
    }
    if (post < pre) return pre > 0.0 ? (post - pre) / pre : 0.0;
    return 0.0;
}

namespace {

struct RowResult {
    bool failed = false;
    std::string error;
    FtgdRunLog log;
    std::optional<SparseDifferential> diff;
    std::size_t subspace_size = 0;
    double param_fraction = 0.0;
    double mass_fraction = 0.0;
    std::vector<double> post_acc;  // per target task
};

}  // namespace

TransferProbeResult transfer_probe(const LmCheckpoint& ckpt, const TaskSuite& suite,
                                   const ProbeHyper& hyper, std::span<const TokenSeq> heldout) {
    if (suite.paradigms.empty()) fail(Errc::empty_input, "transfer_probe: empty suite");
    if (ckpt.params.empty()) fail(Errc::invalid_argument, "transfer_probe: checkpoint has no params");
    const std::size_t n = suite.paradigms.size();

    TransferProbeResult result;
    result.manifest.checkpoint_hash = ckpt.hash();
    result.manifest.task_ids = suite.task_ids();
    result.manifest.hyper = hyper;
    result.tts = TaskSpace::make(suite.task_ids(), "transfer");
    result.gradients.task_ids = suite.task_ids();
    result.gradients.diffs.resize(n);

    std::atomic<std::size_t> evaluations{0};

    // eval1: computed once on the untouched checkpoint and shared across rows
    LmModel model(ckpt.config);
    std::vector<double> eval1(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        eval1[j] = pair_accuracy(ckpt, suite.paradigms[j].eval_pairs(), suite.paradigms[j].id)
                       .accuracy;
        evaluations.fetch_add(1);
    }
    result.manifest.eval1 = eval1;

    std::vector<RowResult> rows(n);
    auto run_row = [&](std::size_t i) {
        RowResult& row = rows[i];
        try {
            FtgdResult tuned = ftgd_tune(ckpt, suite.paradigms[i], hyper.ftgd, heldout);
            row.log = tuned.log;
            row.diff = sparsify(tuned.initial_differential, tuned.initial_subspace);
            GradientMassStats stats =
                gradient_mass_stats(tuned.initial_differential, tuned.initial_subspace);
            row.subspace_size = tuned.initial_subspace.indices.size();
            row.param_fraction = stats.param_fraction;
            row.mass_fraction = stats.mass_fraction;
            row.post_acc.resize(n);
            for (std::size_t j = 0; j < n; ++j) {
                row.post_acc[j] = pair_accuracy(tuned.tuned, suite.paradigms[j].eval_pairs(),
                                                suite.paradigms[j].id)
                                      .accuracy;
                evaluations.fetch_add(1);
            }
        } catch (const Error& e) {
            row.failed = true;
            row.error = e.what();
        }
    };

    const int jobs = std::max(1, hyper.jobs);
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) run_row(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        const int n_workers = std::min<int>(jobs, static_cast<int>(n));
        workers.reserve(static_cast<std::size_t>(n_workers));
        for (int w = 0; w < n_workers; ++w)
            workers.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) run_row(i);
            });
        for (auto& t : workers) t.join();
    }

    for (std::size_t i = 0; i < n; ++i) {
        RowResult& row = rows[i];
        TaskRunInfo info;
        info.task_id = suite.paradigms[i].id;
        info.failed = row.failed;
        info.error = row.error;
        info.log = row.log;
        info.subspace_size = row.subspace_size;
        info.param_fraction = row.param_fraction;
        info.mass_fraction = row.mass_fraction;
        result.manifest.runs.push_back(std::move(info));
        if (row.failed) {
            log_warn("transfer_probe: tuning failed for " + suite.paradigms[i].id + ": " +
                     row.error);
            continue;  // row stays missing
        }
        result.manifest.tuning_runs += 1;
        result.gradients.diffs[i] = std::move(row.diff);
        for (std::size_t j = 0; j < n; ++j) {
            const double cell = normalize_transfer(eval1[j], row.post_acc[j]);
            result.tts.set(i, j, cell);
            result.records.push_back({suite.paradigms[i].id, suite.paradigms[j].id, eval1[j],
                                      row.post_acc[j], cell});
        }
    }
    result.manifest.evaluations = evaluations.load();
    return result;
}

GradientProbeResult gradient_probe(const LmCheckpoint& ckpt, const TaskSuite& suite,
                                   double epsilon) {
    if (suite.paradigms.empty()) fail(Errc::empty_input, "gradient_probe: empty suite");
    GradientProbeResult result;
    result.gradients.task_ids = suite.task_ids();
    result.gradients.diffs.resize(suite.paradigms.size());
    LmModel model(ckpt.config);
    const std::uint64_t hash = ckpt.hash();
    for (std::size_t i = 0; i < suite.paradigms.size(); ++i) {
        const Paradigm& par = suite.paradigms[i];
        GradientDifferential gd = gradient_differential(model, ckpt.params, par, hash);
        try {
            ParamSubspace sub = select_subspace(gd, epsilon);
            result.gradients.diffs[i] = sparsify(gd, sub);
        } catch (const Error& e) {
            if (e.code() != Errc::empty_subspace) throw;
            log_warn("gradient_probe: " + par.id + " excluded (empty subspace at epsilon=" +
                     format_double(epsilon) + ")");
            result.skipped.push_back(par.id);
        }
    }
    return result;
}

}  // namespace taskspace
