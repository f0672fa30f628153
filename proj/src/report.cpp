#include "s4cf/report.hpp"

#include "s4cf/util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace s4cf::report {

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string csv_line(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += csv_escape(fields[i]);
    }
    out += '\n';
    return out;
}

int CsvTable::column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

std::string CsvTable::to_string() const {
    std::string out = csv_line(header);
    for (const auto& r : rows) out += csv_line(r);
    return out;
}

CsvTable parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> record;
    std::string field;
    bool quoted = false;
    bool field_started = false;
    auto end_field = [&] {
        record.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_record = [&] {
        end_field();
        records.push_back(std::move(record));
        record.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"' && !field_started && field.empty()) {
            quoted = true;
            field_started = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\n') {
            end_record();
        } else if (c == '\r') {
            if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
            end_record();
        } else {
            field += c;
            field_started = true;
        }
    }
    if (quoted) throw CsvFormatError("unterminated quoted field");
    if (field_started || !field.empty() || !record.empty()) end_record();

    CsvTable t;
    if (records.empty()) return t;
    t.header = std::move(records.front());
    for (std::size_t i = 1; i < records.size(); ++i) {
        if (records[i].size() != t.header.size()) {
            throw CsvFormatError("row " + std::to_string(i) + " has " + std::to_string(records[i].size()) +
                                 " fields, header has " + std::to_string(t.header.size()));
        }
        t.rows.push_back(std::move(records[i]));
    }
    return t;
}

std::vector<train::LossReport> read_history_csv(const std::string& path) {
    CsvTable t;
    try {
        t = parse_csv(read_file(path));
    } catch (const CsvFormatError& e) {
        throw CsvFormatError(path + ": " + e.what());
    }
    const char* required[] = {"epoch", "loss_y", "loss_a", "loss_total", "nrmse",
                              "rmse_treated", "rmse_untreated", "wall_seconds"};
    std::string missing;
    for (const char* name : required) {
        if (t.column(name) < 0) missing += std::string(missing.empty() ? "" : ", ") + name;
    }
    if (!missing.empty()) throw CsvFormatError(path + ": missing column(s): " + missing);
    std::vector<train::LossReport> out;
    auto num = [&](const std::vector<std::string>& row, const char* name) {
        const std::string& s = row[static_cast<std::size_t>(t.column(name))];
        try {
            return std::stod(s);
        } catch (const std::exception&) {
            throw CsvFormatError(path + ": column " + name + " is not numeric: '" + s + "'");
        }
    };
    for (const auto& row : t.rows) {
        train::LossReport r;
        r.epoch = static_cast<int>(num(row, "epoch"));
        r.loss_y = num(row, "loss_y");
        r.loss_a = num(row, "loss_a");
        r.loss_total = num(row, "loss_total");
        r.loss_sum = r.loss_y + r.loss_a;
        r.nrmse = num(row, "nrmse");
        r.rmse_treated = num(row, "rmse_treated");
        r.rmse_untreated = num(row, "rmse_untreated");
        r.wall_seconds = num(row, "wall_seconds");
        out.push_back(r);
    }
    return out;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
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

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string color(std::size_t i) { return kPalette[i % (sizeof(kPalette) / sizeof(kPalette[0]))]; }

std::string num(double v) {
    std::ostringstream s;
    s.precision(6);
    s << v;
    return s.str();
}

std::string px(double v) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(2);
    s << v;
    return s.str();
}

struct Frame {
    double left = 70, right = 170, top = 40, bottom = 50;
    int width, height;
    double plot_w() const { return width - left - right; }
    double plot_h() const { return height - top - bottom; }
};

std::vector<double> nice_ticks(double lo, double hi, int target = 5) {
    if (!(hi > lo)) return {lo};
    const double raw = (hi - lo) / target;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        step = m * mag;
        if (step >= raw) break;
    }
    std::vector<double> ticks;
    for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * step; t += step) ticks.push_back(t);
    return ticks;
}

std::string header(int w, int h, const std::string& title) {
    std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + std::to_string(w / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
         xml_escape(title) + "</text>\n";
    return s;
}

}  // namespace

std::string svg_line_plot(const std::vector<LineSeries>& series, const LinePlotOptions& o) {
    Frame f;
    f.width = o.width;
    f.height = o.height;
    auto ty = [&](double v) { return o.log_y ? std::log10(v) : v; };
    auto usable = [&](double v) { return std::isfinite(v) && (!o.log_y || v > 0.0); };

    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!usable(s.y[i]) || !std::isfinite(s.x[i])) continue;
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, ty(s.y[i]));
            ymax = std::max(ymax, ty(s.y[i]));
        }
    }
    if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    auto sx = [&](double x) { return f.left + (x - xmin) / (xmax - xmin) * f.plot_w(); };
    auto sy = [&](double y) { return f.top + (ymax - y) / (ymax - ymin) * f.plot_h(); };

    std::string s = header(f.width, f.height, o.title);
    s += "<g class=\"axes\" stroke=\"black\" fill=\"none\">\n";
    s += "<line x1=\"" + px(f.left) + "\" y1=\"" + px(f.top + f.plot_h()) + "\" x2=\"" + px(f.left + f.plot_w()) +
         "\" y2=\"" + px(f.top + f.plot_h()) + "\"/>\n";
    s += "<line x1=\"" + px(f.left) + "\" y1=\"" + px(f.top) + "\" x2=\"" + px(f.left) + "\" y2=\"" +
         px(f.top + f.plot_h()) + "\"/>\n</g>\n";

    s += "<g class=\"ticks\" text-anchor=\"middle\">\n";
    for (double t : nice_ticks(xmin, xmax)) {
        s += "<text x=\"" + px(sx(t)) + "\" y=\"" + px(f.top + f.plot_h() + 16) + "\">" + num(t) + "</text>\n";
    }
    std::vector<double> yt;
    if (o.log_y) {
        for (double e = std::ceil(ymin); e <= ymax; e += 1.0) yt.push_back(e);
        if (yt.size() < 2) yt = nice_ticks(ymin, ymax);
    } else {
        yt = nice_ticks(ymin, ymax);
    }
    for (double t : yt) {
        const std::string label = o.log_y ? num(std::pow(10.0, t)) : num(t);
        s += "<text x=\"" + px(f.left - 6) + "\" y=\"" + px(sy(t) + 4) + "\" text-anchor=\"end\">" + label +
             "</text>\n";
        s += "<line x1=\"" + px(f.left) + "\" y1=\"" + px(sy(t)) + "\" x2=\"" + px(f.left + f.plot_w()) +
             "\" y2=\"" + px(sy(t)) + "\" stroke=\"#dddddd\"/>\n";
    }
    s += "</g>\n";
    s += "<text x=\"" + px(f.left + f.plot_w() / 2) + "\" y=\"" + px(f.height - 10.0) +
         "\" text-anchor=\"middle\">" + xml_escape(o.x_label) + "</text>\n";
    const std::string ylab = o.y_label + (o.log_y ? " (log scale)" : "");
    s += "<text transform=\"translate(16," + px(f.top + f.plot_h() / 2) +
         ") rotate(-90)\" text-anchor=\"middle\">" + xml_escape(ylab) + "</text>\n";

    s += "<g class=\"series\" fill=\"none\" stroke-width=\"1.5\">\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& ser = series[k];
        std::string pts;
        for (std::size_t i = 0; i < ser.x.size() && i < ser.y.size(); ++i) {
            if (!usable(ser.y[i]) || !std::isfinite(ser.x[i])) continue;
            if (!pts.empty()) pts += ' ';
            pts += px(sx(ser.x[i])) + "," + px(sy(ty(ser.y[i])));
        }
        s += "<polyline class=\"line\" stroke=\"" + color(k) + "\" points=\"" + pts + "\"/>\n";
    }
    s += "</g>\n";

    s += "<g class=\"legend\">\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const double y = f.top + 8 + 16.0 * static_cast<double>(k);
        const double x = f.left + f.plot_w() + 14;
        s += "<g class=\"legend-entry\"><line x1=\"" + px(x) + "\" y1=\"" + px(y) + "\" x2=\"" + px(x + 18) +
             "\" y2=\"" + px(y) + "\" stroke=\"" + color(k) + "\" stroke-width=\"2\"/><text x=\"" + px(x + 24) +
             "\" y=\"" + px(y + 4) + "\">" + xml_escape(series[k].label) + "</text></g>\n";
    }
    s += "</g>\n</svg>\n";
    return s;
}

std::string svg_grouped_bars(const std::vector<BarGroup>& groups, const BarChartOptions& o) {
    Frame f;
    f.width = o.width;
    f.height = o.height;
    f.bottom = 80;
    double ymax = 0.0;
    std::size_t bars = o.series_names.size();
    for (const auto& g : groups) {
        bars = std::max(bars, g.values.size());
        for (double v : g.values)
            if (std::isfinite(v)) ymax = std::max(ymax, v);
    }
    if (!(ymax > 0.0)) ymax = 1.0;
    ymax *= 1.05;
    auto sy = [&](double v) { return f.top + (ymax - v) / ymax * f.plot_h(); };

    std::string s = header(f.width, f.height, o.title);
    s += "<g class=\"axes\" stroke=\"black\" fill=\"none\">\n";
    s += "<line x1=\"" + px(f.left) + "\" y1=\"" + px(f.top + f.plot_h()) + "\" x2=\"" + px(f.left + f.plot_w()) +
         "\" y2=\"" + px(f.top + f.plot_h()) + "\"/>\n";
    s += "<line x1=\"" + px(f.left) + "\" y1=\"" + px(f.top) + "\" x2=\"" + px(f.left) + "\" y2=\"" +
         px(f.top + f.plot_h()) + "\"/>\n</g>\n";
    s += "<g class=\"ticks\">\n";
    for (double t : nice_ticks(0.0, ymax)) {
        s += "<text x=\"" + px(f.left - 6) + "\" y=\"" + px(sy(t) + 4) + "\" text-anchor=\"end\">" + num(t) +
             "</text>\n";
    }
    s += "</g>\n";
    s += "<text transform=\"translate(16," + px(f.top + f.plot_h() / 2) +
         ") rotate(-90)\" text-anchor=\"middle\">" + xml_escape(o.y_label) + "</text>\n";

    const double slot = groups.empty() ? f.plot_w() : f.plot_w() / static_cast<double>(groups.size());
    const double bar_w = bars ? 0.8 * slot / static_cast<double>(bars) : 0.0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double x0 = f.left + slot * static_cast<double>(g) + 0.1 * slot;
        s += "<g class=\"group\">\n";
        for (std::size_t b = 0; b < groups[g].values.size(); ++b) {
            const double v = std::isfinite(groups[g].values[b]) ? std::max(0.0, groups[g].values[b]) : 0.0;
            s += "<rect class=\"bar\" x=\"" + px(x0 + bar_w * static_cast<double>(b)) + "\" y=\"" + px(sy(v)) +
                 "\" width=\"" + px(bar_w) + "\" height=\"" + px(f.top + f.plot_h() - sy(v)) + "\" fill=\"" +
                 color(b) + "\"><title>" + xml_escape(groups[g].label) + ": " + num(groups[g].values[b]) +
                 "</title></rect>\n";
        }
        const double cx = x0 + 0.4 * slot;
        const double cy = f.top + f.plot_h() + 14;
        s += "<text x=\"" + px(cx) + "\" y=\"" + px(cy) + "\" text-anchor=\"end\" transform=\"rotate(-35 " +
             px(cx) + " " + px(cy) + ")\">" + xml_escape(groups[g].label) + "</text>\n";
        s += "</g>\n";
    }
    s += "<g class=\"legend\">\n";
    for (std::size_t b = 0; b < o.series_names.size(); ++b) {
        const double y = f.top + 8 + 16.0 * static_cast<double>(b);
        const double x = f.left + f.plot_w() + 14;
        s += "<g class=\"legend-entry\"><rect x=\"" + px(x) + "\" y=\"" + px(y - 6) + "\" width=\"12\" height=\"12\" fill=\"" +
             color(b) + "\"/><text x=\"" + px(x + 18) + "\" y=\"" + px(y + 4) + "\">" +
             xml_escape(o.series_names[b]) + "</text></g>\n";
    }
    s += "</g>\n</svg>\n";
    return s;
}

}  // namespace s4cf::report
