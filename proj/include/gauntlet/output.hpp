#pragma once

// CSV rows and dependency-free SVG polyline charts. Every number is printed
// with a fixed format so that outputs are byte-stable across runs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "gauntlet/error.hpp"

namespace gauntlet {

inline std::string fmt(double v, int precision = 6) {
  if (!std::isfinite(v)) return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  std::string s(buf);
  if (s[0] == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);  // no "-0.000"
  return s;
}

inline std::string fmt_g(double v) {
  if (!std::isfinite(v)) return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Quotes a field when it contains a comma, quote or newline.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { row(header); }

  CsvWriter& row(const std::vector<std::string>& fields) {
    if (fields.size() != columns_) throw Error("csv: row has " + std::to_string(fields.size()) + " fields, expected " +
                                               std::to_string(columns_));
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) text_ += ',';
      text_ += csv_field(fields[i]);
    }
    text_ += '\n';
    return *this;
  }

  const std::string& str() const noexcept { return text_; }

 private:
  std::size_t columns_;
  std::string text_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  bool markers = false;  // draw point markers instead of only the line
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  /// Optional horizontal reference line (e.g. the detection threshold).
  std::optional<double> reference_y;
  std::string reference_label;
};

namespace detail {
inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}
}  // namespace detail

inline std::string render_svg(const ChartSpec& chart) {
  constexpr double W = 720, H = 420, L = 70, R = 170, T = 40, B = 50;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : chart.series) {
    for (double v : s.x) {
      if (std::isfinite(v)) x0 = std::min(x0, v), x1 = std::max(x1, v);
    }
    for (double v : s.y) {
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
  }
  if (chart.reference_y) y0 = std::min(y0, *chart.reference_y), y1 = std::max(y1, *chart.reference_y);
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"420\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"720\" height=\"420\" fill=\"white\"/>\n";
  s += "<text x=\"" + fmt(W / 2 - R / 2, 1) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" +
       detail::xml_escape(chart.title) + "</text>\n";
  s += "<line x1=\"" + fmt(L, 1) + "\" y1=\"" + fmt(H - B, 1) + "\" x2=\"" + fmt(W - R, 1) + "\" y2=\"" + fmt(H - B, 1) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(L, 1) + "\" y1=\"" + fmt(T, 1) + "\" x2=\"" + fmt(L, 1) + "\" y2=\"" + fmt(H - B, 1) +
       "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    s += "<text x=\"" + fmt(px(xv), 1) + "\" y=\"" + fmt(H - B + 16, 1) + "\" text-anchor=\"middle\">" + fmt_g(std::round(xv * 100) / 100) + "</text>\n";
    s += "<text x=\"" + fmt(L - 6, 1) + "\" y=\"" + fmt(py(yv) + 4, 1) + "\" text-anchor=\"end\">" + fmt_g(std::round(yv * 100) / 100) + "</text>\n";
  }
  s += "<text x=\"" + fmt((L + W - R) / 2, 1) + "\" y=\"" + fmt(H - 12, 1) + "\" text-anchor=\"middle\">" +
       detail::xml_escape(chart.x_label) + "</text>\n";
  s += "<text x=\"16\" y=\"" + fmt((T + H - B) / 2, 1) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       fmt((T + H - B) / 2, 1) + ")\">" + detail::xml_escape(chart.y_label) + "</text>\n";
  if (chart.reference_y) {
    s += "<line x1=\"" + fmt(L, 1) + "\" y1=\"" + fmt(py(*chart.reference_y), 1) + "\" x2=\"" + fmt(W - R, 1) + "\" y2=\"" +
         fmt(py(*chart.reference_y), 1) + "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    s += "<text x=\"" + fmt(W - R + 4, 1) + "\" y=\"" + fmt(py(*chart.reference_y) + 4, 1) + "\" fill=\"gray\">" +
         detail::xml_escape(chart.reference_label) + "</text>\n";
  }
  for (std::size_t k = 0; k < chart.series.size(); ++k) {
    const auto& ser = chart.series[k];
    const char* color = kColors[k % 10];
    std::string points;
    for (std::size_t i = 0; i < std::min(ser.x.size(), ser.y.size()); ++i) {
      if (!std::isfinite(ser.x[i]) || !std::isfinite(ser.y[i])) continue;
      if (!points.empty()) points += ' ';
      points += fmt(px(ser.x[i]), 1) + "," + fmt(py(ser.y[i]), 1);
      if (ser.markers) {
        s += "<circle cx=\"" + fmt(px(ser.x[i]), 1) + "\" cy=\"" + fmt(py(ser.y[i]), 1) + "\" r=\"2.5\" fill=\"" + color + "\"/>\n";
      }
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";
    const double ly = T + 14.0 * static_cast<double>(k);
    s += "<line x1=\"" + fmt(W - R + 8, 1) + "\" y1=\"" + fmt(ly, 1) + "\" x2=\"" + fmt(W - R + 28, 1) + "\" y2=\"" + fmt(ly, 1) +
         "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + fmt(W - R + 32, 1) + "\" y=\"" + fmt(ly + 4, 1) + "\">" + detail::xml_escape(ser.label) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace gauntlet
