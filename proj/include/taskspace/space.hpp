#pragma once

#include <cmath>
#include <string>
#include <vector>

namespace taskspace {

/// Labeled N x N real matrix over an ordered task list. NaN marks a missing
/// cell (failed probe or undefined value); missing is never imputed.
/// metric is one of: transfer | jaccard | cosine | jaccard_x_cosine |
/// hypothesis | nvo | wasserstein.
struct TaskSpace {
    std::vector<std::string> task_ids;
    std::vector<double> cells;  // row-major N*N
    std::string metric;
    std::string source;  // free-form provenance (manifest path, hypothesis name)

    static TaskSpace make(std::vector<std::string> ids, std::string metric_tag,
                          double fill = std::nan(""));

    std::size_t size() const { return task_ids.size(); }
    double at(std::size_t i, std::size_t j) const { return cells[i * size() + j]; }
    void set(std::size_t i, std::size_t j, double v) { cells[i * size() + j] = v; }
    bool missing(std::size_t i, std::size_t j) const { return std::isnan(at(i, j)); }

    /// True when the metric is symmetric by construction (everything except
    /// transfer spaces).
    bool symmetric_metric() const { return metric != "transfer"; }
};

/// Synthetic binary similarity matrix encoding an expected generalization
/// pattern (diagonal 1, symmetric).
using HypothesisSpace = TaskSpace;

}  // namespace taskspace
