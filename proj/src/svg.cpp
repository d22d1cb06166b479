#include "spurmem/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "spurmem/error.hpp"

namespace spurmem::svg {

namespace {

constexpr const char* kPalette[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string gradated_colour(std::size_t i, std::size_t n) {
  const double t = n <= 1 ? 1.0 : static_cast<double>(i) / static_cast<double>(n - 1);
  const int r = static_cast<int>(std::lround(190 - 150 * t));
  const int g = static_cast<int>(std::lround(210 - 130 * t));
  const int b = static_cast<int>(std::lround(240 - 90 * t));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

// Sequential light-yellow to dark-red ramp.
std::string heat_colour(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(255 - 75 * t));
  const int g = static_cast<int>(std::lround(245 - 225 * t));
  const int b = static_cast<int>(std::lround(200 - 170 * t));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string render(const BarChart& chart) {
  const std::size_t nc = chart.categories.size();
  const std::size_t ns = chart.series.size();
  for (const auto& s : chart.series) {
    if (s.values.size() != nc) throw DimensionError("bar chart series '" + s.name + "' length differs from categories");
    if (!s.errors.empty() && s.errors.size() != nc)
      throw DimensionError("bar chart series '" + s.name + "' has a mismatched error vector");
  }

  double lo = 0.0;
  double hi = 0.0;
  for (const auto& s : chart.series)
    for (std::size_t i = 0; i < nc; ++i) {
      const double e = s.errors.empty() ? 0.0 : s.errors[i];
      if (std::isfinite(s.values[i])) {
        lo = std::min(lo, s.values[i] - e);
        hi = std::max(hi, s.values[i] + e);
      }
    }
  if (chart.y_min) lo = *chart.y_min;
  if (chart.y_max) hi = *chart.y_max;
  if (hi <= lo) hi = lo + 1.0;

  const double left = 70, right = 160, top = 40, bottom = 50;
  const double plot_w = std::max(200.0, 90.0 * static_cast<double>(nc) * std::max<double>(1.0, ns / 2.0));
  const double plot_h = 260;
  const double width = left + plot_w + right;
  const double height = top + plot_h + bottom;
  auto y_of = [&](double v) { return top + plot_h * (1.0 - (v - lo) / (hi - lo)); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << num(width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(chart.title)
    << "</text>\n";

  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    const double y = y_of(v);
    o << "<line x1=\"" << num(left) << "\" y1=\"" << num(y) << "\" x2=\"" << num(left + plot_w) << "\" y2=\"" << num(y)
      << "\" stroke=\"#dddddd\"/>\n";
    o << "<text x=\"" << num(left - 6) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << label_num(v)
      << "</text>\n";
  }
  o << "<text transform=\"translate(16," << num(top + plot_h / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(chart.y_label) << "</text>\n";

  const double slot = plot_w / static_cast<double>(std::max<std::size_t>(nc, 1));
  const double bar_w = ns ? slot * 0.8 / static_cast<double>(ns) : 0.0;
  const double y0 = y_of(std::clamp(0.0, lo, hi));
  for (std::size_t c = 0; c < nc; ++c) {
    const double x0 = left + slot * static_cast<double>(c) + slot * 0.1;
    for (std::size_t s = 0; s < ns; ++s) {
      const double v = chart.series[s].values[c];
      if (!std::isfinite(v)) continue;
      const double x = x0 + bar_w * static_cast<double>(s);
      const double yv = y_of(std::clamp(v, lo, hi));
      const std::string colour =
          chart.gradated ? gradated_colour(s, ns) : kPalette[s % (sizeof kPalette / sizeof kPalette[0])];
      o << "<rect x=\"" << num(x) << "\" y=\"" << num(std::min(yv, y0)) << "\" width=\"" << num(bar_w * 0.95)
        << "\" height=\"" << num(std::abs(y0 - yv)) << "\" fill=\"" << colour << "\"><title>"
        << escape(chart.series[s].name + " " + chart.categories[c] + ": " + label_num(v)) << "</title></rect>\n";
      if (!chart.series[s].errors.empty()) {
        const double e = chart.series[s].errors[c];
        const double xm = x + bar_w * 0.475;
        o << "<line x1=\"" << num(xm) << "\" y1=\"" << num(y_of(std::clamp(v - e, lo, hi))) << "\" x2=\"" << num(xm)
          << "\" y2=\"" << num(y_of(std::clamp(v + e, lo, hi))) << "\" stroke=\"black\"/>\n";
      }
    }
    o << "<text x=\"" << num(x0 + slot * 0.4) << "\" y=\"" << num(top + plot_h + 18) << "\" text-anchor=\"middle\">"
      << escape(chart.categories[c]) << "</text>\n";
  }
  o << "<line x1=\"" << num(left) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(left + plot_w) << "\" y2=\"" << num(y0)
    << "\" stroke=\"black\"/>\n";

  for (std::size_t s = 0; s < ns; ++s) {
    const double y = top + 10 + 18.0 * static_cast<double>(s);
    const std::string colour =
        chart.gradated ? gradated_colour(s, ns) : kPalette[s % (sizeof kPalette / sizeof kPalette[0])];
    o << "<rect x=\"" << num(left + plot_w + 15) << "\" y=\"" << num(y - 10) << "\" width=\"12\" height=\"12\" fill=\""
      << colour << "\"/>\n";
    o << "<text x=\"" << num(left + plot_w + 32) << "\" y=\"" << num(y) << "\">" << escape(chart.series[s].name)
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string render(const Heatmap& map) {
  const std::size_t nr = map.row_labels.size();
  const std::size_t nc = map.col_labels.size();
  if (map.values.size() != nr * nc) throw DimensionError("heatmap values do not match the label grid");
  double hi = 0.0;
  for (double v : map.values)
    if (std::isfinite(v)) hi = std::max(hi, v);
  if (hi <= 0.0) hi = 1.0;

  const double cell = 56, left = 110, top = 50;
  const double width = left + cell * static_cast<double>(nc) + 30;
  const double height = top + cell * static_cast<double>(nr) + 40;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << num(width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(map.title)
    << "</text>\n";
  for (std::size_t c = 0; c < nc; ++c)
    o << "<text x=\"" << num(left + cell * (static_cast<double>(c) + 0.5)) << "\" y=\"" << num(top - 6)
      << "\" text-anchor=\"middle\">" << escape(map.col_labels[c]) << "</text>\n";
  for (std::size_t r = 0; r < nr; ++r) {
    const double y = top + cell * static_cast<double>(r);
    o << "<text x=\"" << num(left - 8) << "\" y=\"" << num(y + cell / 2 + 4) << "\" text-anchor=\"end\">"
      << escape(map.row_labels[r]) << "</text>\n";
    for (std::size_t c = 0; c < nc; ++c) {
      const double v = map.values[r * nc + c];
      const double x = left + cell * static_cast<double>(c);
      o << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(cell) << "\" height=\"" << num(cell)
        << "\" fill=\"" << heat_colour(std::isfinite(v) ? v / hi : 0.0) << "\" stroke=\"white\"/>\n";
      o << "<text x=\"" << num(x + cell / 2) << "\" y=\"" << num(y + cell / 2 + 4) << "\" text-anchor=\"middle\">"
        << label_num(v) << "</text>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace spurmem::svg
