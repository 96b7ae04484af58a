#include "taskspace/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>

#include "taskspace/common.hpp"

namespace taskspace {

std::string space_to_csv(const TaskSpace& space) {
    std::string out = "task";
    for (const auto& id : space.task_ids) out += "," + id;
    out += "\n";
    const std::size_t n = space.size();
    for (std::size_t i = 0; i < n; ++i) {
        out += space.task_ids[i];
        for (std::size_t j = 0; j < n; ++j) {
            out += ",";
            if (!space.missing(i, j)) out += format_double(space.at(i, j));
        }
        out += "\n";
    }
    return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            fields.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return fields;
}

}  // namespace

TaskSpace space_from_csv(const std::string& text, std::string metric) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= text.size(); ++i) {
        if (i == text.size() || text[i] == '\n') {
            if (i > start) lines.push_back(text.substr(start, i - start));
            start = i + 1;
        }
    }
    if (lines.empty()) fail(Errc::io_error, "space_from_csv: empty input");
    std::vector<std::string> header = split_csv_line(lines[0]);
    if (header.size() < 2) fail(Errc::io_error, "space_from_csv: malformed header");
    std::vector<std::string> ids(header.begin() + 1, header.end());
    TaskSpace space = TaskSpace::make(ids, std::move(metric));
    if (lines.size() != ids.size() + 1)
        fail(Errc::io_error, "space_from_csv: row count does not match header");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::vector<std::string> row = split_csv_line(lines[i + 1]);
        if (row.size() != ids.size() + 1 || row[0] != ids[i])
            fail(Errc::io_error, "space_from_csv: malformed row " + std::to_string(i + 1));
        for (std::size_t j = 0; j < ids.size(); ++j) {
            const std::string& cell = row[j + 1];
            if (cell.empty()) continue;  // missing
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (ec != std::errc{} || ptr != cell.data() + cell.size())
                fail(Errc::io_error, "space_from_csv: bad number '" + cell + "'");
            space.set(i, j, v);
        }
    }
    return space;
}

void write_space_csv(const TaskSpace& space, const std::string& path) {
    write_text_file(path, space_to_csv(space));
}

TaskSpace read_space_csv(const std::string& path, std::string metric) {
    return space_from_csv(read_text_file(path), std::move(metric));
}

namespace {

struct Rgb {
    int r, g, b;
};

std::string hex_color(Rgb c) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c.r, c.g, c.b);
    return buf;
}

Rgb lerp(Rgb a, Rgb b, double t) {
    auto mix = [t](int x, int y) { return static_cast<int>(std::lround(x + (y - x) * t)); };
    return {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)};
}

// diverging blue-white-red; sequential white-blue
std::string cell_color(double v, HeatmapScale scale) {
    constexpr Rgb kBlue{33, 102, 172}, kWhite{247, 247, 247}, kRed{178, 24, 43};
    if (scale == HeatmapScale::diverging) {
        const double t = std::clamp(v, -1.0, 1.0);
        return t < 0.0 ? hex_color(lerp(kWhite, kBlue, -t)) : hex_color(lerp(kWhite, kRed, t));
    }
    return hex_color(lerp(kWhite, kBlue, std::clamp(v, 0.0, 1.0)));
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string svg_heatmap(const TaskSpace& space, HeatmapScale scale, const std::string& title) {
    const std::size_t n = space.size();
    const int cell = 26;
    const int left = 150, top = 120;
    const int width = left + cell * static_cast<int>(n) + 20;
    const int height = top + cell * static_cast<int>(n) + 20;

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
           "\" height=\"" + std::to_string(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"10\" y=\"20\" font-family=\"monospace\" font-size=\"14\">" +
           xml_escape(title) + "</text>\n";
    for (std::size_t j = 0; j < n; ++j) {
        const int x = left + static_cast<int>(j) * cell + cell / 2;
        svg += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(top - 6) +
               "\" font-family=\"monospace\" font-size=\"9\" text-anchor=\"start\" transform=\"rotate(-60 " +
               std::to_string(x) + " " + std::to_string(top - 6) + ")\">" +
               xml_escape(space.task_ids[j]) + "</text>\n";
    }
    for (std::size_t i = 0; i < n; ++i) {
        const int y = top + static_cast<int>(i) * cell + cell / 2 + 4;
        svg += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" + std::to_string(y) +
               "\" font-family=\"monospace\" font-size=\"9\" text-anchor=\"end\">" +
               xml_escape(space.task_ids[i]) + "</text>\n";
        for (std::size_t j = 0; j < n; ++j) {
            const int x = left + static_cast<int>(j) * cell;
            const int yy = top + static_cast<int>(i) * cell;
            const bool miss = space.missing(i, j);
            const std::string color = miss ? "#bbbbbb" : cell_color(space.at(i, j), scale);
            svg += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(yy) +
                   "\" width=\"" + std::to_string(cell) + "\" height=\"" + std::to_string(cell) +
                   "\" fill=\"" + color + "\" stroke=\"#ffffff\"><title>" +
                   xml_escape(space.task_ids[i]) + " x " + xml_escape(space.task_ids[j]) + ": " +
                   (miss ? "missing" : format_double(space.at(i, j))) + "</title></rect>\n";
        }
    }
    svg += "</svg>\n";
    return svg;
}

void write_svg_heatmap(const TaskSpace& space, HeatmapScale scale, const std::string& title,
                       const std::string& path) {
    write_text_file(path, svg_heatmap(space, scale, title));
}

}  // namespace taskspace
