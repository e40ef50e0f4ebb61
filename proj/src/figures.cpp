#include "multipath/figures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "multipath/errors.hpp"

namespace multipath {

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string header(double width, double height, const std::string& title) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) + "\" height=\"" +
         fmt(height) + "\" viewBox=\"0 0 " + fmt(width) + " " + fmt(height) + "\">\n"
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
         "<text x=\"" + fmt(width / 2) + "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
         xml_escape(title) + "</text>\n";
}

}  // namespace

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      if (cells.size() != t.header.size())
        throw FormatError("csv: row has " + std::to_string(cells.size()) + " cells, header has " +
                          std::to_string(t.header.size()));
      t.rows.push_back(std::move(cells));
    }
  }
  if (first) throw FormatError("csv: empty table");
  return t;
}

std::string to_csv(const CsvTable& table) {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
    out += "\n";
  };
  line(table.header);
  for (const auto& r : table.rows) line(r);
  return out;
}

std::string xml_escape(const std::string& text) {
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

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series) {
  const double w = 640, h = 420, left = 70, right = 170, top = 40, bottom = 60;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const Series& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  const auto py = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };

  std::string out = header(w, h, title);
  out += "<g stroke=\"black\" fill=\"none\">\n";
  out += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(h - bottom) + "\" x2=\"" + fmt(w - right) +
         "\" y2=\"" + fmt(h - bottom) + "\"/>\n";
  out += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(top) + "\" x2=\"" + fmt(left) + "\" y2=\"" +
         fmt(h - bottom) + "\"/>\n</g>\n";
  out += "<g font-family=\"sans-serif\" font-size=\"10\">\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    out += "<text x=\"" + fmt(px(xv)) + "\" y=\"" + fmt(h - bottom + 15) +
           "\" text-anchor=\"middle\">" + tick(xv) + "</text>\n";
    out += "<text x=\"" + fmt(left - 6) + "\" y=\"" + fmt(py(yv) + 3) + "\" text-anchor=\"end\">" +
           tick(yv) + "</text>\n";
  }
  out += "<text x=\"" + fmt((left + w - right) / 2) + "\" y=\"" + fmt(h - 15) +
         "\" text-anchor=\"middle\">" + xml_escape(x_label) + "</text>\n";
  out += "<text x=\"15\" y=\"" + fmt((top + h - bottom) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 15 " +
         fmt((top + h - bottom) / 2) + ")\">" + xml_escape(y_label) + "</text>\n</g>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    std::string points;
    for (std::size_t i = 0; i < series[s].x.size(); ++i)
      points += (i ? " " : "") + fmt(px(series[s].x[i])) + "," + fmt(py(series[s].y[i]));
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" points=\"" + points + "\"/>\n";
    for (std::size_t i = 0; i < series[s].x.size(); ++i)
      out += "<circle cx=\"" + fmt(px(series[s].x[i])) + "\" cy=\"" + fmt(py(series[s].y[i])) +
             "\" r=\"3\" fill=\"" + color + "\"/>\n";
    out += "<text x=\"" + fmt(w - right + 10) + "\" y=\"" + fmt(top + 15 + 15.0 * s) +
           "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" + color + "\">" +
           xml_escape(series[s].name) + "</text>\n";
  }
  return out + "</svg>\n";
}

std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& column_labels,
                        const std::vector<std::vector<double>>& values) {
  const double cell_w = 60, left = 80, top = 50;
  const double cell_h = values.empty() ? 10 : std::max(2.0, std::min(16.0, 400.0 / values.size()));
  const double w = left + cell_w * column_labels.size() + 20;
  const double h = top + cell_h * values.size() + 30;
  std::string out = header(w, h, title);
  out += "<g font-family=\"sans-serif\" font-size=\"10\">\n";
  for (std::size_t c = 0; c < column_labels.size(); ++c)
    out += "<text x=\"" + fmt(left + cell_w * (c + 0.5)) + "\" y=\"" + fmt(top - 6) +
           "\" text-anchor=\"middle\">" + xml_escape(column_labels[c]) + "</text>\n";
  const std::size_t label_every = std::max<std::size_t>(1, values.size() / 20);
  for (std::size_t r = 0; r < values.size(); ++r) {
    if (r % label_every == 0 && r < row_labels.size())
      out += "<text x=\"" + fmt(left - 6) + "\" y=\"" + fmt(top + cell_h * (r + 0.8)) +
             "\" text-anchor=\"end\">" + xml_escape(row_labels[r]) + "</text>\n";
    for (std::size_t c = 0; c < values[r].size(); ++c) {
      const double v = std::clamp(values[r][c], 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255 * (1 - v)));
      out += "<rect x=\"" + fmt(left + cell_w * c) + "\" y=\"" + fmt(top + cell_h * r) +
             "\" width=\"" + fmt(cell_w) + "\" height=\"" + fmt(cell_h) + "\" fill=\"rgb(" +
             std::to_string(shade) + "," + std::to_string(shade) + ",255)\"/>\n";
    }
  }
  return out + "</g>\n</svg>\n";
}

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values) {
  const double left = 140, top = 40, bar_h = 18, span = 400;
  const double w = left + span + 80, h = top + bar_h * 1.4 * labels.size() + 20;
  double vmax = 0;
  for (double v : values) vmax = std::max(vmax, v);
  if (vmax <= 0) vmax = 1;
  std::string out = header(w, h, title);
  out += "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = top + bar_h * 1.4 * i;
    const double len = span * values[i] / vmax;
    out += "<text x=\"" + fmt(left - 6) + "\" y=\"" + fmt(y + bar_h * 0.75) +
           "\" text-anchor=\"end\">" + xml_escape(labels[i]) + "</text>\n";
    out += "<rect x=\"" + fmt(left) + "\" y=\"" + fmt(y) + "\" width=\"" + fmt(len) +
           "\" height=\"" + fmt(bar_h) + "\" fill=\"#1f77b4\"/>\n";
    out += "<text x=\"" + fmt(left + len + 4) + "\" y=\"" + fmt(y + bar_h * 0.75) + "\">" +
           tick(values[i]) + "</text>\n";
  }
  return out + "</g>\n</svg>\n";
}

}  // namespace multipath
