#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mvseq {

// Standalone SVG heatmap: one rect per cell on a linear color scale with the
// min/max printed below the grid. Identical input yields identical bytes.
std::string render_heatmap(const std::vector<double>& values, int64_t rows, int64_t cols,
                           const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels);

}  // namespace mvseq
