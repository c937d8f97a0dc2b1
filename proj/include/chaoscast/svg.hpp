#pragma once

// Minimal standalone SVG line and scatter plots. CSV files remain the
// canonical artifacts; these are rendered from the same numbers.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "chaoscast/checkpoint.hpp"

namespace chaoscast::svg {

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::string color = "#1f77b4";
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool scatter = false;
  int width = 640;
  int height = 420;
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace detail

inline std::string render(const std::vector<Series>& series, const PlotOptions& opt) {
  const double left = 70, right = 20, top = 36, bottom = 50;
  const double pw = opt.width - left - right, ph = opt.height - top - bottom;
  auto tx = [&](double v) { return opt.log_x ? std::log10(v) : v; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      const double xv = tx(s.x[i]);
      if (!std::isfinite(xv) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, xv);
      x1 = std::max(x1, xv);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double v) { return left + (tx(v) - x0) / (x1 - x0) * pw; };
  auto py = [&](double v) { return top + (1.0 - (v - y0) / (y1 - y0)) * ph; };
  using detail::num;

  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(opt.width) +
                    "\" height=\"" + std::to_string(opt.height) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + num(opt.width / 2.0) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
         detail::escape(opt.title) + "</text>\n";
  out += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    const double gx = left + pw * i / 4.0, gy = top + ph * (1.0 - i / 4.0);
    const double label_x = opt.log_x ? std::pow(10.0, fx) : fx;
    out += "<text x=\"" + num(gx) + "\" y=\"" + num(top + ph + 16) + "\" text-anchor=\"middle\">" +
           detail::tick(label_x) + "</text>\n";
    out += "<text x=\"" + num(left - 6) + "\" y=\"" + num(gy + 4) + "\" text-anchor=\"end\">" + detail::tick(fy) +
           "</text>\n";
  }
  out += "<text x=\"" + num(left + pw / 2) + "\" y=\"" + num(opt.height - 10.0) + "\" text-anchor=\"middle\">" +
         detail::escape(opt.x_label) + "</text>\n";
  out += "<text transform=\"translate(16," + num(top + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
         detail::escape(opt.y_label) + "</text>\n";

  double legend_y = top + 14;
  for (const auto& s : series) {
    if (opt.scatter) {
      for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
        if (std::isfinite(tx(s.x[i])) && std::isfinite(s.y[i]))
          out += "<circle cx=\"" + num(px(s.x[i])) + "\" cy=\"" + num(py(s.y[i])) + "\" r=\"0.8\" fill=\"" +
                 s.color + "\" fill-opacity=\"0.5\"/>\n";
    } else {
      std::string pts;
      for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
        if (std::isfinite(tx(s.x[i])) && std::isfinite(s.y[i])) pts += num(px(s.x[i])) + "," + num(py(s.y[i])) + " ";
      out += "<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    }
    if (!s.label.empty()) {
      out += "<text x=\"" + num(left + pw - 8) + "\" y=\"" + num(legend_y) + "\" text-anchor=\"end\" fill=\"" +
             s.color + "\">" + detail::escape(s.label) + "</text>\n";
      legend_y += 14;
    }
  }
  out += "</svg>\n";
  return out;
}

inline void write(const std::filesystem::path& path, const std::vector<Series>& series, const PlotOptions& opt) {
  write_file_atomic(path, render(series, opt));
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
  return colors[i % 7];
}

}  // namespace chaoscast::svg
