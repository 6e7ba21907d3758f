#pragma once

// Minimal SVG charts written as plain text.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace pcon::svg {

struct Series {
  std::string name;
  std::vector<double> y;
};

namespace detail {

inline std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

inline std::string num(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

inline const char* palette(std::size_t i) {
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};
  return colours[i % 6];
}

constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 20, kTop = 40, kBottom = 50;

inline std::string frame(const std::string& title, const std::string& xlabel, const std::string& ylabel, double lo,
                         double hi) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << escape(title) << "</text>\n"
    << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << escape(xlabel) << "</text>\n"
    << "<text x=\"14\" y=\"" << kH / 2 << "\" transform=\"rotate(-90 14 " << kH / 2
    << ")\" text-anchor=\"middle\" font-size=\"12\">" << escape(ylabel) << "</text>\n"
    << "<text x=\"" << kLeft - 6 << "\" y=\"" << kH - kBottom << "\" text-anchor=\"end\" font-size=\"10\">" << num(lo)
    << "</text>\n"
    << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << num(hi)
    << "</text>\n";
  return s.str();
}

}  // namespace detail

/// Line chart over x = 1..n for each series.
inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series) {
  using namespace detail;
  double lo = INFINITY, hi = -INFINITY;
  std::size_t n = 1;
  for (const auto& s : series) {
    for (double v : s.y)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    n = std::max(n, s.y.size());
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi == lo) hi = lo + 1;
  std::ostringstream out;
  out << frame(title, xlabel, ylabel, lo, hi);
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  for (std::size_t k = 0; k < series.size(); ++k) {
    out << "<polyline fill=\"none\" stroke=\"" << palette(k) << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[k].y.size(); ++i) {
      const double x = kLeft + (n == 1 ? 0.5 : double(i) / double(n - 1)) * pw;
      const double y = kTop + (1.0 - (series[k].y[i] - lo) / (hi - lo)) * ph;
      out << num(x) << ',' << num(y) << ' ';
    }
    out << "\"/>\n<text x=\"" << kW - kRight - 4 << "\" y=\"" << kTop + 14 * double(k + 1)
        << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << palette(k) << "\">" << escape(series[k].name)
        << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

/// Vertical bars, one per (label, value) pair.
inline std::string bar_chart(const std::string& title, const std::string& ylabel,
                             const std::vector<std::pair<std::string, double>>& bars) {
  using namespace detail;
  double hi = 0;
  for (const auto& b : bars) hi = std::max(hi, b.second);
  if (hi <= 0) hi = 1;
  std::ostringstream out;
  out << frame(title, "", ylabel, 0, hi);
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  const double slot = pw / double(std::max<std::size_t>(bars.size(), 1));
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double h = std::max(0.0, bars[i].second) / hi * ph;
    const double x = kLeft + slot * double(i) + slot * 0.15;
    out << "<rect x=\"" << num(x) << "\" y=\"" << num(kTop + ph - h) << "\" width=\"" << num(slot * 0.7)
        << "\" height=\"" << num(h) << "\" fill=\"" << palette(i) << "\"/>\n"
        << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << num(kTop + ph - h - 4)
        << "\" text-anchor=\"middle\" font-size=\"11\">" << num(bars[i].second) << "</text>\n"
        << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << num(kH - kBottom + 16)
        << "\" text-anchor=\"middle\" font-size=\"11\">" << escape(bars[i].first) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace pcon::svg
