#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "brr/config.hpp"
#include "brr/error.hpp"
#include "brr/evaluation.hpp"

namespace brr {

struct ResultRow {
  std::string learner, divergence, scheme;
  std::size_t m = 1;
  std::size_t replicate = 0;
  bool failed = false;
  double abs_bias = 0.0, mae = 0.0, rmse = 0.0, runtime = 0.0;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

/// Parses CSV text in the results schema; a header mismatch names the column.
inline std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("results CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  const auto& expected = csv_columns();
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (i >= header.size()) throw ParseError("results CSV: missing column '" + expected[i] + "'");
    if (header[i] != expected[i])
      throw ParseError("results CSV: expected column '" + expected[i] + "' at position " + std::to_string(i + 1) +
                       ", found '" + header[i] + "'");
  }
  if (header.size() > expected.size()) throw ParseError("results CSV: unexpected column '" + header[expected.size()] + "'");
  std::vector<ResultRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != expected.size())
      throw ParseError("results CSV line " + std::to_string(line_no) + ": expected " + std::to_string(expected.size()) +
                       " fields");
    ResultRow r;
    r.learner = f[0];
    r.divergence = f[1];
    r.scheme = f[2];
    auto num = [&](std::size_t col) {
      try {
        return parse_real(expected[col], f[col]);
      } catch (const ConfigError&) {
        throw ParseError("results CSV line " + std::to_string(line_no) + ": column '" + expected[col] +
                         "' is not a number");
      }
    };
    r.m = static_cast<std::size_t>(num(3));
    r.replicate = static_cast<std::size_t>(num(4));
    r.failed = f[5] == kFailedMarker;
    if (!r.failed) {
      r.abs_bias = num(5);
      r.mae = num(6);
      r.rmse = num(7);
    }
    r.runtime = num(8);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace detail {

inline std::string fixed(double v, int precision = 2) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, precision);
  return std::string(buf, r.ptr);
}

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

}  // namespace detail

/// Three panels (absolute bias, MAE, RMSE) of lower medians against m, one
/// series per learner/divergence/scheme. Output bytes depend only on the rows.
inline std::string plot_svg(const std::vector<ResultRow>& rows) {
  using Key = std::tuple<std::string, std::string, std::string>;
  std::map<Key, std::map<std::size_t, std::vector<const ResultRow*>>> series;
  for (const auto& r : rows)
    if (!r.failed) series[{r.learner, r.divergence, r.scheme}][r.m].push_back(&r);
  if (series.empty()) throw Error("plot: no successful rows to plot");

  struct Point {
    double m, v[3];
  };
  std::vector<std::pair<std::string, std::vector<Point>>> lines;
  double m_min = 1e300, m_max = -1e300, v_max[3] = {0, 0, 0};
  for (const auto& [key, by_m] : series) {
    std::vector<Point> pts;
    for (const auto& [m, rs] : by_m) {
      std::vector<double> ab, mae, rmse;
      for (const auto* r : rs) {
        ab.push_back(r->abs_bias);
        mae.push_back(r->mae);
        rmse.push_back(r->rmse);
      }
      Point p{static_cast<double>(m), {lower_median(ab), lower_median(mae), lower_median(rmse)}};
      m_min = std::min(m_min, p.m);
      m_max = std::max(m_max, p.m);
      for (int k = 0; k < 3; ++k) v_max[k] = std::max(v_max[k], p.v[k]);
      pts.push_back(p);
    }
    const auto& [l, d, s] = key;
    lines.emplace_back(l + "-" + d + " " + s, std::move(pts));
  }

  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                  "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const double W = 300, H = 240, left = 50, top = 30, pw = 230, ph = 170;
  const int legend_rows = static_cast<int>(lines.size());
  const double total_h = H + 20 + 14.0 * legend_rows;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fixed(3 * W, 0) << "\" height=\""
    << detail::fixed(total_h, 0) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  const char* titles[] = {"absolute bias", "MAE", "RMSE"};
  const double span_m = m_max > m_min ? m_max - m_min : 1.0;
  for (int k = 0; k < 3; ++k) {
    const double ox = k * W;
    const double vmax = v_max[k] > 0 ? v_max[k] * 1.05 : 1.0;
    auto X = [&](double m) { return ox + left + (m_max > m_min ? (m - m_min) / span_m * pw : pw / 2); };
    auto Y = [&](double v) { return top + ph - v / vmax * ph; };
    o << "<g>\n<text x=\"" << detail::fixed(ox + left + pw / 2) << "\" y=\"18\" text-anchor=\"middle\">" << titles[k]
      << "</text>\n";
    o << "<rect x=\"" << detail::fixed(ox + left) << "\" y=\"" << detail::fixed(top) << "\" width=\""
      << detail::fixed(pw) << "\" height=\"" << detail::fixed(ph) << "\" fill=\"none\" stroke=\"#000\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double v = vmax * t / 4.0;
      o << "<text x=\"" << detail::fixed(ox + left - 4) << "\" y=\"" << detail::fixed(Y(v) + 4)
        << "\" text-anchor=\"end\">" << detail::fixed(v, 3) << "</text>\n";
    }
    std::vector<double> ms;
    for (const auto& [name, pts] : lines)
      for (const auto& p : pts) ms.push_back(p.m);
    std::sort(ms.begin(), ms.end());
    ms.erase(std::unique(ms.begin(), ms.end()), ms.end());
    for (double m : ms)
      o << "<text x=\"" << detail::fixed(X(m)) << "\" y=\"" << detail::fixed(top + ph + 14)
        << "\" text-anchor=\"middle\">" << detail::fixed(m, 0) << "</text>\n";
    o << "<text x=\"" << detail::fixed(ox + left + pw / 2) << "\" y=\"" << detail::fixed(top + ph + 28)
      << "\" text-anchor=\"middle\">m</text>\n";
    for (std::size_t s = 0; s < lines.size(); ++s) {
      const char* color = palette[s % 10];
      const auto& pts = lines[s].second;
      if (pts.size() > 1) {
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
        for (std::size_t i = 0; i < pts.size(); ++i)
          o << (i ? " " : "") << detail::fixed(X(pts[i].m)) << "," << detail::fixed(Y(pts[i].v[k]));
        o << "\"/>\n";
      }
      for (const auto& p : pts)
        o << "<circle cx=\"" << detail::fixed(X(p.m)) << "\" cy=\"" << detail::fixed(Y(p.v[k])) << "\" r=\"2.5\" fill=\""
          << color << "\"/>\n";
    }
    o << "</g>\n";
  }
  for (std::size_t s = 0; s < lines.size(); ++s) {
    const double y = H + 10 + 14.0 * static_cast<double>(s);
    o << "<rect x=\"" << detail::fixed(left) << "\" y=\"" << detail::fixed(y - 8) << "\" width=\"10\" height=\"10\" fill=\""
      << palette[s % 10] << "\"/>\n<text x=\"" << detail::fixed(left + 16) << "\" y=\"" << detail::fixed(y)
      << "\">" << detail::xml_escape(lines[s].first) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Reads a results CSV and writes `<output_path>` as SVG.
inline void plot_summary(const std::string& csv_path, const std::string& output_path) {
  const auto rows = parse_results_csv(read_text_file(csv_path));
  if (rows.empty()) throw Error("plot: results CSV has no rows");
  std::ofstream out(output_path, std::ios::binary);
  if (!out) throw Error("cannot write '" + output_path + "'");
  out << plot_svg(rows);
}

}  // namespace brr
