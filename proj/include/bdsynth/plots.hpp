#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

// Minimal SVG charts for run reports. Fixed 480x300 canvas, no external assets.

namespace bdsynth::plots {

struct Series {
  std::string label;
  std::vector<double> values;
  std::string color;
};

namespace detail {

constexpr double kW = 480, kH = 300, kL = 50, kR = 20, kT = 30, kB = 40;

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

inline std::string open(const std::string& title) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"300\" font-family=\"sans-serif\" font-size=\"11\">\n"
         "<rect width=\"480\" height=\"300\" fill=\"white\"/>\n"
         "<text x=\"240\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" + escape(title) + "</text>\n";
}

inline std::string axes(double x0, double x1, double y0, double y1, const std::string& xlabel, const std::string& ylabel) {
  std::string s;
  s += "<line x1=\"" + fmt(kL) + "\" y1=\"" + fmt(kH - kB) + "\" x2=\"" + fmt(kW - kR) + "\" y2=\"" + fmt(kH - kB) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(kL) + "\" y1=\"" + fmt(kT) + "\" x2=\"" + fmt(kL) + "\" y2=\"" + fmt(kH - kB) + "\" stroke=\"black\"/>\n";
  s += "<text x=\"" + fmt(kL) + "\" y=\"" + fmt(kH - kB + 14) + "\" text-anchor=\"middle\">" + fmt(x0) + "</text>\n";
  s += "<text x=\"" + fmt(kW - kR) + "\" y=\"" + fmt(kH - kB + 14) + "\" text-anchor=\"middle\">" + fmt(x1) + "</text>\n";
  s += "<text x=\"" + fmt(kL - 4) + "\" y=\"" + fmt(kH - kB) + "\" text-anchor=\"end\">" + fmt(y0) + "</text>\n";
  s += "<text x=\"" + fmt(kL - 4) + "\" y=\"" + fmt(kT + 4) + "\" text-anchor=\"end\">" + fmt(y1) + "</text>\n";
  s += "<text x=\"" + fmt((kL + kW - kR) / 2) + "\" y=\"" + fmt(kH - 8) + "\" text-anchor=\"middle\">" + escape(xlabel) + "</text>\n";
  s += "<text x=\"12\" y=\"" + fmt((kT + kH - kB) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 12 " +
       fmt((kT + kH - kB) / 2) + ")\">" + escape(ylabel) + "</text>\n";
  return s;
}

inline std::string legend(const std::vector<Series>& series) {
  std::string s;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kT + 6 + 14.0 * static_cast<double>(i);
    s += "<rect x=\"" + fmt(kW - kR - 110) + "\" y=\"" + fmt(y - 8) + "\" width=\"10\" height=\"10\" fill=\"" + series[i].color + "\"/>\n";
    s += "<text x=\"" + fmt(kW - kR - 96) + "\" y=\"" + fmt(y) + "\">" + escape(series[i].label) + "</text>\n";
  }
  return s;
}

}  // namespace detail

/// Overlaid histograms with shared bins.
inline std::string histogram(const std::string& title, const std::vector<Series>& series, int bins, const std::string& xlabel) {
  using namespace detail;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series)
    for (double v : s.values) lo = std::min(lo, v), hi = std::max(hi, v);
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi <= lo) hi = lo + 1;
  std::vector<std::vector<double>> freq;
  double top = 0;
  for (const auto& s : series) {
    std::vector<double> f(bins, 0.0);
    for (double v : s.values) {
      int b = static_cast<int>((v - lo) / (hi - lo) * bins);
      f[std::clamp(b, 0, bins - 1)] += 1.0 / static_cast<double>(std::max<std::size_t>(1, s.values.size()));
    }
    for (double v : f) top = std::max(top, v);
    freq.push_back(std::move(f));
  }
  if (top <= 0) top = 1;
  std::string out = open(title) + axes(lo, hi, 0, top, xlabel, "fraction");
  const double bw = (kW - kL - kR) / bins;
  for (std::size_t si = 0; si < series.size(); ++si)
    for (int b = 0; b < bins; ++b) {
      const double h = freq[si][b] / top * (kH - kT - kB);
      out += "<rect x=\"" + fmt(kL + b * bw) + "\" y=\"" + fmt(kH - kB - h) + "\" width=\"" + fmt(bw) + "\" height=\"" + fmt(h) +
             "\" fill=\"" + series[si].color + "\" fill-opacity=\"0.5\"/>\n";
    }
  return out + legend(series) + "</svg>\n";
}

/// One bar per label, with an optional horizontal reference line.
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& labels, const std::vector<double>& values,
                             const std::string& ylabel, double reference = NAN) {
  using namespace detail;
  double top = std::isfinite(reference) ? reference : 0;
  for (double v : values)
    if (std::isfinite(v)) top = std::max(top, v);
  if (top <= 0) top = 1;
  top *= 1.1;
  std::string out = open(title) + axes(0, static_cast<double>(values.size()), 0, top, "", ylabel);
  const double bw = (kW - kL - kR) / std::max<std::size_t>(1, values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::isfinite(values[i]) ? values[i] : top;
    const double h = v / top * (kH - kT - kB);
    out += "<rect x=\"" + fmt(kL + i * bw + bw * 0.15) + "\" y=\"" + fmt(kH - kB - h) + "\" width=\"" + fmt(bw * 0.7) +
           "\" height=\"" + fmt(h) + "\" fill=\"#4477aa\"/>\n";
    out += "<text x=\"" + fmt(kL + (i + 0.5) * bw) + "\" y=\"" + fmt(kH - kB + 26) + "\" text-anchor=\"middle\">" +
           escape(labels.at(i)) + "</text>\n";
  }
  if (std::isfinite(reference)) {
    const double y = kH - kB - reference / top * (kH - kT - kB);
    out += "<line x1=\"" + fmt(kL) + "\" y1=\"" + fmt(y) + "\" x2=\"" + fmt(kW - kR) + "\" y2=\"" + fmt(y) +
           "\" stroke=\"#cc3311\" stroke-dasharray=\"4 3\"/>\n";
  }
  return out + "</svg>\n";
}

/// Polylines over shared x values.
inline std::string line_chart(const std::string& title, const std::vector<double>& x, const std::vector<Series>& series,
                              const std::string& xlabel, const std::string& ylabel, double y_max = 1.0) {
  using namespace detail;
  const double x0 = x.empty() ? 0 : x.front(), x1 = x.empty() || x.back() <= x0 ? x0 + 1 : x.back();
  std::string out = open(title) + axes(x0, x1, 0, y_max, xlabel, ylabel);
  for (const auto& s : series) {
    std::string pts;
    for (std::size_t i = 0; i < x.size() && i < s.values.size(); ++i) {
      if (!std::isfinite(s.values[i])) continue;
      const double px = kL + (x[i] - x0) / (x1 - x0) * (kW - kL - kR);
      const double py = kH - kB - s.values[i] / y_max * (kH - kT - kB);
      pts += fmt(px) + "," + fmt(py) + " ";
    }
    out += "<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
  }
  return out + legend(series) + "</svg>\n";
}

}  // namespace bdsynth::plots
