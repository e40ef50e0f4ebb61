#pragma once

#include <string>
#include <vector>

namespace multipath {

/// Minimal CSV table: header plus rows of cells (no quoting support needed
/// for the files this project writes).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;
};

CsvTable parse_csv(const std::string& text);
std::string to_csv(const CsvTable& table);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Scatter-and-line chart.
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series);
/// Grid of cells shaded by value in [0,1]; rows top to bottom.
std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& column_labels,
                        const std::vector<std::vector<double>>& values);
/// One horizontal bar per label.
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values);

std::string xml_escape(const std::string& text);

}  // namespace multipath
