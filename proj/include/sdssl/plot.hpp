#pragma once

#include "sdssl/common.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace sdssl {

struct Series {
  std::string name;
  std::vector<Real> x;
  std::vector<Real> y;
};

/// Minimal standalone SVG line chart with axes, ticks and a legend.
std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace sdssl
