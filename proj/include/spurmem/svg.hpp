#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace spurmem::svg {

struct Series {
  std::string name;
  std::vector<double> values;  // one per category
  std::vector<double> errors;  // optional whiskers, same length as values
};

struct BarChart {
  std::string title;
  std::string y_label;
  std::vector<std::string> categories;
  std::vector<Series> series;
  std::optional<double> y_min;
  std::optional<double> y_max;
  // Shade series from light to dark in one hue instead of distinct colours.
  bool gradated = false;
};

std::string render(const BarChart& chart);

struct Heatmap {
  std::string title;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<double> values;  // row-major
};

std::string render(const Heatmap& map);

std::string escape(const std::string& text);

// Write via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace spurmem::svg
