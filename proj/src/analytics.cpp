#include "taskspace/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "taskspace/common.hpp"
#include "taskspace/rng.hpp"

namespace taskspace {

TaskSpace TaskSpace::make(std::vector<std::string> ids, std::string metric_tag, double fill) {
    TaskSpace s;
    s.task_ids = std::move(ids);
    s.metric = std::move(metric_tag);
    s.cells.assign(s.task_ids.size() * s.task_ids.size(), fill);
    return s;
}

namespace {

std::size_t intersection_size(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::size_t count = 0, i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) ++i;
        else if (b[j] < a[i]) ++j;
        else { ++count; ++i; ++j; }
    }
    return count;
}

}  // namespace

TaskSpace jaccard_space(const TaskGradients& gradients) {
    const std::size_t n = gradients.task_ids.size();
    if (n < 2) fail(Errc::insufficient_data, "jaccard_space: need at least 2 tasks");
    TaskSpace space = TaskSpace::make(gradients.task_ids, "jaccard");
    for (std::size_t i = 0; i < n; ++i) {
        if (gradients.diffs[i]) space.set(i, i, 1.0);
        for (std::size_t j = i + 1; j < n; ++j) {
            if (!gradients.diffs[i] || !gradients.diffs[j]) continue;
            const auto& a = gradients.diffs[i]->indices;
            const auto& b = gradients.diffs[j]->indices;
            const std::size_t inter = intersection_size(a, b);
            const std::size_t uni = a.size() + b.size() - inter;
            if (uni == 0) continue;  // both empty: cell stays missing
            const double v = static_cast<double>(inter) / static_cast<double>(uni);
            space.set(i, j, v);
            space.set(j, i, v);
        }
    }
    return space;
}

TaskSpace cosine_space(const TaskGradients& gradients, bool union_zero_fill) {
    const std::size_t n = gradients.task_ids.size();
    if (n < 2) fail(Errc::insufficient_data, "cosine_space: need at least 2 tasks");
    TaskSpace space = TaskSpace::make(gradients.task_ids, "cosine");
    auto full_norm = [](const SparseDifferential& sd) {
        double s = 0.0;
        for (double v : sd.values) s += v * v;
        return std::sqrt(s);
    };
    for (std::size_t i = 0; i < n; ++i) {
        if (gradients.diffs[i]) space.set(i, i, 1.0);
        for (std::size_t j = i + 1; j < n; ++j) {
            if (!gradients.diffs[i] || !gradients.diffs[j]) continue;
            const SparseDifferential& a = *gradients.diffs[i];
            const SparseDifferential& b = *gradients.diffs[j];
            double dot = 0.0, na = 0.0, nb = 0.0;
            std::size_t ia = 0, ib = 0, overlap = 0;
            while (ia < a.indices.size() && ib < b.indices.size()) {
                if (a.indices[ia] < b.indices[ib]) ++ia;
                else if (b.indices[ib] < a.indices[ia]) ++ib;
                else {
                    dot += a.values[ia] * b.values[ib];
                    na += a.values[ia] * a.values[ia];
                    nb += b.values[ib] * b.values[ib];
                    ++overlap; ++ia; ++ib;
                }
            }
            double v = 0.0;
            if (overlap > 0) {
                const double norm_a = union_zero_fill ? full_norm(a) : std::sqrt(na);
                const double norm_b = union_zero_fill ? full_norm(b) : std::sqrt(nb);
                if (norm_a == 0.0 || norm_b == 0.0) {
                    log_warn("cosine_space: zero-norm restricted differential for (" +
                             a.paradigm_id + ", " + b.paradigm_id + "), cell set to 0");
                } else {
                    v = dot / (norm_a * norm_b);
                }
            }
            space.set(i, j, v);
            space.set(j, i, v);
        }
    }
    return space;
}

TaskSpace weighted_space(const TaskSpace& jaccard, const TaskSpace& cosine) {
    if (jaccard.task_ids != cosine.task_ids)
        fail(Errc::ordering_mismatch, "weighted_space: task orderings differ");
    TaskSpace space = TaskSpace::make(jaccard.task_ids, "jaccard_x_cosine");
    for (std::size_t k = 0; k < space.cells.size(); ++k)
        space.cells[k] = jaccard.cells[k] * cosine.cells[k];  // NaN propagates
    return space;
}

HypothesisSpace phenomenon_hypothesis(const TaskSuite& suite) {
    const std::size_t n = suite.paradigms.size();
    HypothesisSpace space = TaskSpace::make(suite.task_ids(), "hypothesis");
    space.source = "clustering_by_phenomenon";
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            space.set(i, j,
                      suite.paradigms[i].phenomenon == suite.paradigms[j].phenomenon ? 1.0 : 0.0);
    return space;
}

namespace {

std::vector<std::vector<std::size_t>> train_vocab_supports(const TaskSuite& suite) {
    std::vector<std::vector<std::size_t>> supports;
    supports.reserve(suite.paradigms.size());
    for (const Paradigm& p : suite.paradigms) {
        std::vector<double> dist = vocab_distribution(suite, p);
        std::vector<std::size_t> support;
        for (std::size_t t = 0; t < dist.size(); ++t)
            if (dist[t] > 0.0) support.push_back(t);
        supports.push_back(std::move(support));
    }
    return supports;
}

}  // namespace

TaskSpace nvo_control(const TaskSuite& suite) {
    const std::size_t n = suite.paradigms.size();
    if (n < 2) fail(Errc::insufficient_data, "nvo_control: need at least 2 tasks");
    const auto supports = train_vocab_supports(suite);
    std::vector<std::size_t> overlap(n * n, 0);
    std::size_t max_overlap = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const std::size_t o = intersection_size(supports[i], supports[j]);
            overlap[i * n + j] = o;
            overlap[j * n + i] = o;
            max_overlap = std::max(max_overlap, o);
        }
    TaskSpace space = TaskSpace::make(suite.task_ids(), "nvo");
    if (max_overlap == 0) {
        log_warn("nvo_control: no vocabulary overlap between any task pair; all cells missing");
        return space;
    }
    for (std::size_t i = 0; i < n; ++i) {
        space.set(i, i, 1.0);
        for (std::size_t j = 0; j < n; ++j)
            if (i != j)
                space.set(i, j, static_cast<double>(overlap[i * n + j]) /
                                    static_cast<double>(max_overlap));
    }
    return space;
}

TaskSpace wasserstein_control(const TaskSuite& suite) {
    const std::size_t n = suite.paradigms.size();
    if (n < 2) fail(Errc::insufficient_data, "wasserstein_control: need at least 2 tasks");

    std::vector<std::vector<double>> dists;
    dists.reserve(n);
    for (const Paradigm& p : suite.paradigms) dists.push_back(vocab_distribution(suite, p));
    const std::size_t vocab = dists[0].size();

    // fixed 1-D ordering: global corpus frequency descending, ties by id
    std::vector<double> global(vocab, 0.0);
    for (const auto& d : dists)
        for (std::size_t t = 0; t < vocab; ++t) global[t] += d[t];
    std::vector<std::size_t> order(vocab);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&global](std::size_t a, std::size_t b) { return global[a] > global[b]; });

    TaskSpace space = TaskSpace::make(suite.task_ids(), "wasserstein");
    for (std::size_t i = 0; i < n; ++i) {
        space.set(i, i, 0.0);
        for (std::size_t j = i + 1; j < n; ++j) {
            double cdf_a = 0.0, cdf_b = 0.0, wd = 0.0;
            for (std::size_t k = 0; k < vocab; ++k) {
                cdf_a += dists[i][order[k]];
                cdf_b += dists[j][order[k]];
                if (k + 1 < vocab) wd += std::abs(cdf_a - cdf_b);  // unit spacing
            }
            space.set(i, j, wd);
            space.set(j, i, wd);
        }
    }
    return space;
}

namespace {

struct EntrySelection {
    std::vector<std::pair<std::size_t, std::size_t>> positions;
};

EntrySelection select_entries(const TaskSpace& x, const TaskSpace& y,
                              CorrelateOptions::Entries mode) {
    const std::size_t n = x.size();
    bool upper = false;
    switch (mode) {
        case CorrelateOptions::Entries::automatic:
            upper = x.symmetric_metric() && y.symmetric_metric();
            break;
        case CorrelateOptions::Entries::upper_triangle: upper = true; break;
        case CorrelateOptions::Entries::off_diagonal: upper = false; break;
    }
    EntrySelection sel;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = upper ? i + 1 : 0; j < n; ++j)
            if (i != j) sel.positions.emplace_back(i, j);
    return sel;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        mx += xs[k];
        my += ys[k];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const double dx = xs[k] - mx, dy = ys[k] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        fail(Errc::insufficient_data, "pearson: zero variance in entries");
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace

double Correlation::null_quantile(double q) const {
    if (null_rs.empty()) fail(Errc::insufficient_data, "null_quantile: no permutation nulls");
    const double pos = q * static_cast<double>(null_rs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, null_rs.size() - 1);
    const double w = pos - std::floor(pos);
    return null_rs[lo] * (1.0 - w) + null_rs[hi] * w;
}

Correlation correlate_spaces(const TaskSpace& x, const TaskSpace& y,
                             const CorrelateOptions& opts) {
    if (x.task_ids != y.task_ids)
        fail(Errc::ordering_mismatch, "correlate_spaces: task orderings differ");
    const EntrySelection sel = select_entries(x, y, opts.entries);

    auto gather = [&](const std::vector<std::size_t>& perm, std::vector<double>& xs,
                      std::vector<double>& ys) {
        xs.clear();
        ys.clear();
        for (auto [i, j] : sel.positions) {
            const double xv = x.at(i, j);
            const double yv = y.at(perm[i], perm[j]);
            if (std::isnan(xv) || std::isnan(yv)) continue;
            xs.push_back(xv);
            ys.push_back(yv);
        }
    };

    const std::size_t n = x.size();
    std::vector<std::size_t> identity(n);
    std::iota(identity.begin(), identity.end(), std::size_t{0});
    std::vector<double> xs, ys;
    gather(identity, xs, ys);
    if (xs.size() < 3)
        fail(Errc::insufficient_data, "correlate_spaces: fewer than 3 valid entry pairs");

    Correlation c;
    c.r = pearson(xs, ys);
    c.abs_r = std::abs(c.r);
    c.n_entries = xs.size();

    if (opts.permutations > 0) {
        Rng rng(opts.seed);
        std::vector<std::size_t> perm = identity;
        std::size_t at_least = 0;
        c.null_rs.reserve(static_cast<std::size_t>(opts.permutations));
        for (int k = 0; k < opts.permutations; ++k) {
            rng.shuffle(perm);
            gather(perm, xs, ys);
            double rk;
            try {
                rk = xs.size() >= 3 ? pearson(xs, ys) : 0.0;
            } catch (const Error&) {
                rk = 0.0;  // degenerate permutation (zero variance)
            }
            c.null_rs.push_back(rk);
            if (std::abs(rk) >= c.abs_r) ++at_least;
        }
        c.p_perm = (1.0 + static_cast<double>(at_least)) /
                   (static_cast<double>(opts.permutations) + 1.0);
        std::sort(c.null_rs.begin(), c.null_rs.end());
    }
    return c;
}

WithinPhenomenonStats within_phenomenon_stats(const TaskSpace& space, const TaskSuite& suite) {
    if (space.task_ids != suite.task_ids())
        fail(Errc::ordering_mismatch, "within_phenomenon_stats: space/suite orderings differ");
    const std::size_t n = space.size();
    const bool upper = space.symmetric_metric();

    auto cells_for = [&](auto&& want) {
        std::vector<double> vals;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = upper ? i + 1 : 0; j < n; ++j) {
                if (i == j || space.missing(i, j)) continue;
                if (want(i, j)) vals.push_back(space.at(i, j));
            }
        return vals;
    };
    auto mean_of = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        return v.empty() ? 0.0 : m / static_cast<double>(v.size());
    };

    WithinPhenomenonStats stats;
    for (const std::string& ph : suite.phenomena()) {
        std::size_t members = 0;
        for (const Paradigm& p : suite.paradigms)
            if (p.phenomenon == ph) ++members;
        if (members < 2) continue;  // no within cells exist
        std::vector<double> vals = cells_for([&](std::size_t i, std::size_t j) {
            return suite.paradigms[i].phenomenon == ph && suite.paradigms[j].phenomenon == ph;
        });
        if (vals.empty()) continue;
        const double m = mean_of(vals);
        double var = 0.0;
        for (double v : vals) var += (v - m) * (v - m);
        var /= static_cast<double>(vals.size());  // population convention
        stats.groups.push_back({ph, m, std::sqrt(var), vals.size()});
    }
    stats.within_mean = mean_of(cells_for([&](std::size_t i, std::size_t j) {
        return suite.paradigms[i].phenomenon == suite.paradigms[j].phenomenon;
    }));
    stats.across_mean = mean_of(cells_for([&](std::size_t i, std::size_t j) {
        return suite.paradigms[i].phenomenon != suite.paradigms[j].phenomenon;
    }));
    return stats;
}

namespace {

// undefined correlations (degenerate spaces) surface as NaN in series CSVs
double guarded_r(const TaskSpace& x, const TaskSpace& y, const CorrelateOptions& opts) {
    try {
        return correlate_spaces(x, y, opts).r;
    } catch (const Error&) {
        return std::nan("");
    }
}

}  // namespace

std::vector<SeriesRecord> series_from_gradients(
    std::span<const std::pair<std::int64_t, TaskGradients>> per_epoch, const TaskSuite& suite) {
    if (per_epoch.empty()) fail(Errc::empty_input, "series_from_gradients: no entries");
    const HypothesisSpace hyp = phenomenon_hypothesis(suite);
    CorrelateOptions no_perm;
    no_perm.permutations = 0;

    std::vector<TaskSpace> cs_spaces;
    std::vector<SeriesRecord> records;
    for (const auto& [epoch, gradients] : per_epoch) {
        SeriesRecord rec;
        rec.epoch = epoch;
        double size_sum = 0.0;
        std::size_t probed = 0;
        for (const auto& d : gradients.diffs)
            if (d) {
                size_sum += static_cast<double>(d->indices.size());
                ++probed;
            }
        rec.probed_tasks = probed;
        rec.mean_subspace_size = probed ? size_sum / static_cast<double>(probed) : 0.0;
        TaskSpace js = jaccard_space(gradients);
        TaskSpace cs = cosine_space(gradients);
        WithinPhenomenonStats jw = within_phenomenon_stats(js, suite);
        WithinPhenomenonStats cw = within_phenomenon_stats(cs, suite);
        rec.within_jsim = jw.within_mean;
        rec.across_jsim = jw.across_mean;
        rec.within_cs = cw.within_mean;
        rec.across_cs = cw.across_mean;
        rec.r_phenomenon = guarded_r(cs, hyp, no_perm);
        cs_spaces.push_back(std::move(cs));
        records.push_back(rec);
    }
    const TaskSpace& final_cs = cs_spaces.back();
    for (std::size_t t = 0; t < records.size(); ++t) {
        records[t].r_stability =
            t + 1 == records.size() ? 1.0 : guarded_r(cs_spaces[t], final_cs, no_perm);
    }
    return records;
}

std::vector<SeriesRecord> checkpoint_series(std::span<const LmCheckpoint> ckpts,
                                            const TaskSuite& suite, double epsilon) {
    if (ckpts.empty()) fail(Errc::empty_input, "checkpoint_series: no checkpoints");
    for (const LmCheckpoint& c : ckpts)
        if (!(c.config == ckpts.front().config))
            fail(Errc::architecture_mismatch,
                 "checkpoint_series: checkpoints use different architectures");
    std::vector<std::pair<std::int64_t, TaskGradients>> per_epoch;
    per_epoch.reserve(ckpts.size());
    for (const LmCheckpoint& ckpt : ckpts) {
        GradientProbeResult probe = gradient_probe(ckpt, suite, epsilon);
        per_epoch.emplace_back(ckpt.epoch, std::move(probe.gradients));
    }
    return series_from_gradients(per_epoch, suite);
}

}  // namespace taskspace
