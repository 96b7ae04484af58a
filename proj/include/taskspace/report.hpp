#pragma once

#include <string>

#include "taskspace/analytics.hpp"

namespace taskspace {

/// CSV with a header row and column of task ids; missing cells are empty.
/// Values use shortest round-trip formatting, so write/read is exact and
/// output bytes are stable across runs.
std::string space_to_csv(const TaskSpace& space);
TaskSpace space_from_csv(const std::string& text, std::string metric);
void write_space_csv(const TaskSpace& space, const std::string& path);
TaskSpace read_space_csv(const std::string& path, std::string metric);

enum class HeatmapScale {
    diverging,   // signed metrics, centered at 0
    sequential,  // [0,1] metrics
};

/// Deterministic text SVG; byte-identical for identical inputs.
std::string svg_heatmap(const TaskSpace& space, HeatmapScale scale, const std::string& title);
void write_svg_heatmap(const TaskSpace& space, HeatmapScale scale, const std::string& title,
                       const std::string& path);

}  // namespace taskspace
