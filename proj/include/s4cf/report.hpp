// CSV tables and self-contained SVG charts.
#pragma once

#include "s4cf/train.hpp"

#include <string>
#include <vector>

namespace s4cf::report {

/// Quotes a field when it contains a comma, quote or line break.
std::string csv_escape(const std::string& field);
std::string csv_line(const std::vector<std::string>& fields);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column index or -1.
    int column(const std::string& name) const;
    std::string to_string() const;
};

/// RFC 4180 parsing (quoted fields, doubled quotes, CRLF or LF).
CsvTable parse_csv(const std::string& text);

class CsvFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reads a loss-history CSV; throws CsvFormatError naming the file and every
/// missing column.
std::vector<train::LossReport> read_history_csv(const std::string& path);

std::string xml_escape(const std::string& s);

struct LineSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

struct LinePlotOptions {
    std::string title;
    std::string x_label = "epoch";
    std::string y_label = "loss";
    bool log_y = true;
    int width = 720;
    int height = 440;
};

/// One <polyline> per series plus a legend entry each. On a log axis,
/// non-positive values are dropped from their polyline.
std::string svg_line_plot(const std::vector<LineSeries>& series, const LinePlotOptions& options);

struct BarGroup {
    std::string label;
    std::vector<double> values;
};

struct BarChartOptions {
    std::string title;
    std::string y_label = "RMSE";
    std::vector<std::string> series_names;  // one per bar in a group
    int width = 720;
    int height = 440;
};

/// One <g class="group"> per group, each holding one <rect class="bar"> per value.
std::string svg_grouped_bars(const std::vector<BarGroup>& groups, const BarChartOptions& options);

}  // namespace s4cf::report
