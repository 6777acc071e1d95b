#include "mvseq/svg.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace mvseq {

namespace {

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

std::string render_heatmap(const std::vector<double>& values, int64_t rows, int64_t cols,
                           const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels) {
    if (rows < 1 || cols < 1 || values.size() != static_cast<size_t>(rows * cols))
        throw std::invalid_argument("render_heatmap: empty or inconsistent matrix");
    for (double v : values)
        if (!std::isfinite(v)) throw std::invalid_argument("render_heatmap: non-finite value");

    double mn = values[0], mx = values[0];
    for (double v : values) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }

    const int cell = 22, margin_left = 64, margin_top = 28, footer = 26;
    int64_t width = margin_left + cols * cell + 8;
    int64_t height = margin_top + rows * cell + footer;

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
           std::to_string(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

    for (int64_t c = 0; c < cols && c < static_cast<int64_t>(col_labels.size()); ++c)
        svg += "<text x=\"" + std::to_string(margin_left + c * cell + cell / 2) + "\" y=\"" +
               std::to_string(margin_top - 8) + "\" font-size=\"10\" text-anchor=\"middle\">" +
               col_labels[static_cast<size_t>(c)] + "</text>\n";
    for (int64_t r = 0; r < rows && r < static_cast<int64_t>(row_labels.size()); ++r)
        svg += "<text x=\"" + std::to_string(margin_left - 6) + "\" y=\"" +
               std::to_string(margin_top + r * cell + cell / 2 + 4) + "\" font-size=\"10\" text-anchor=\"end\">" +
               row_labels[static_cast<size_t>(r)] + "</text>\n";

    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
            double v = values[static_cast<size_t>(r * cols + c)];
            double t = mx > mn ? (v - mn) / (mx - mn) : 0.5;
            int red = static_cast<int>(std::lround(255.0 + (31.0 - 255.0) * t));
            int green = static_cast<int>(std::lround(255.0 + (119.0 - 255.0) * t));
            int blue = static_cast<int>(std::lround(255.0 + (180.0 - 255.0) * t));
            svg += "<rect class=\"cell\" x=\"" + std::to_string(margin_left + c * cell) + "\" y=\"" +
                   std::to_string(margin_top + r * cell) + "\" width=\"" + std::to_string(cell) + "\" height=\"" +
                   std::to_string(cell) + "\" fill=\"rgb(" + std::to_string(red) + "," + std::to_string(green) + "," +
                   std::to_string(blue) + ")\" stroke=\"#ccc\" stroke-width=\"0.5\"/>\n";
        }

    svg += "<text x=\"" + std::to_string(margin_left) + "\" y=\"" + std::to_string(margin_top + rows * cell + 16) +
           "\" font-size=\"10\">min=" + fmt(mn) + " max=" + fmt(mx) + "</text>\n";
    svg += "</svg>\n";
    return svg;
}

}  // namespace mvseq
