#include "doctest.h"
#include "xml_check.hpp"

#include "s4cf/report.hpp"
#include "s4cf/util.hpp"

#include <filesystem>
#include <fstream>

using namespace s4cf::report;
using testing::check_xml;
using testing::count_occurrences;

namespace {

std::vector<LineSeries> make_series(int count, int epochs) {
    std::vector<LineSeries> out;
    for (int s = 0; s < count; ++s) {
        LineSeries l;
        l.label = std::to_string(s) + "-" + std::to_string(2 * s);
        for (int e = 1; e <= epochs; ++e) {
            l.x.push_back(e);
            l.y.push_back(1.0 / (e + s));
        }
        out.push_back(l);
    }
    return out;
}

}  // namespace

TEST_CASE("csv escaping") {
    CHECK(csv_escape("plain") == "plain");
    CHECK(csv_escape("a,b") == "\"a,b\"");
    CHECK(csv_escape("say \"hi\"") == "\"say \"\"hi\"\"\"");
    CHECK(csv_escape("two\nlines") == "\"two\nlines\"");
    CHECK(csv_line({"x", "y,z", ""}) == "x,\"y,z\",\n");
}

TEST_CASE("csv parsing") {
    const CsvTable t = parse_csv("a,b,c\r\n1,\"x,y\",\"q\"\"q\"\n,,\"multi\nline\"\n");
    REQUIRE(t.header == std::vector<std::string>{"a", "b", "c"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0] == std::vector<std::string>{"1", "x,y", "q\"q"});
    CHECK(t.rows[1] == std::vector<std::string>{"", "", "multi\nline"});
    CHECK(t.column("b") == 1);
    CHECK(t.column("missing") == -1);

    CHECK(parse_csv("h\nlast").rows.size() == 1);
    CHECK_THROWS_AS(parse_csv("a,b\n\"open"), CsvFormatError);
    CHECK_THROWS_AS(parse_csv("a,b\n1,2,3\n"), CsvFormatError);

    // Anything we write parses back to the same fields.
    CsvTable w;
    w.header = {"k", "v"};
    w.rows = {{"a\"b", "1,2"}, {"", "\r\n"}, {"x", "y"}};
    const CsvTable back = parse_csv(w.to_string());
    CHECK(back.header == w.header);
    CHECK(back.rows == w.rows);
}

TEST_CASE("history csv round-trip") {
    std::vector<s4cf::train::LossReport> h(3);
    for (int i = 0; i < 3; ++i) {
        h[i].epoch = i + 1;
        h[i].loss_y = 0.1 / (i + 1);
        h[i].loss_a = 0.69;
        h[i].loss_total = h[i].loss_y - 0.5 * h[i].loss_a;
        h[i].nrmse = 0.01 * (i + 1);
        h[i].rmse_treated = 1.0 / 3.0;
        h[i].rmse_untreated = 2.0 / 7.0;
        h[i].wall_seconds = 0.25;
    }
    const auto dir = std::filesystem::temp_directory_path() / "s4cf_report_test";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "history.csv").string();
    s4cf::atomic_write(path, s4cf::train::history_csv(h));
    const auto back = read_history_csv(path);
    REQUIRE(back.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(back[i].epoch == h[i].epoch);
        CHECK(back[i].loss_y == h[i].loss_y);
        CHECK(back[i].loss_total == h[i].loss_total);
        CHECK(back[i].rmse_treated == h[i].rmse_treated);
    }

    s4cf::atomic_write(path, "epoch,loss_y\n1,0.5\n");
    try {
        read_history_csv(path);
        FAIL("expected a format error");
    } catch (const CsvFormatError& e) {
        const std::string msg = e.what();
        CHECK(msg.find(path) != std::string::npos);
        CHECK(msg.find("loss_a") != std::string::npos);
        CHECK(msg.find("wall_seconds") != std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("xml escaping") {
    CHECK(xml_escape("a<b & \"c\" 'd'>") == "a&lt;b &amp; &quot;c&quot; &apos;d&apos;&gt;");
}

TEST_CASE("line plot with one series") {
    const std::string svg = svg_line_plot(make_series(1, 5), {});
    const auto x = check_xml(svg);
    INFO(x.error);
    CHECK(x.ok);
    CHECK(x.root == "svg");
    CHECK(count_occurrences(svg, "<polyline") == 1);
    CHECK(count_occurrences(svg, "class=\"legend-entry\"") == 1);
    CHECK(svg.find("0-0") != std::string::npos);
    CHECK(svg.find("http://www.w3.org/2000/svg") != std::string::npos);
    CHECK(svg.find("href") == std::string::npos);
}

TEST_CASE("line plot with a 25-run grid") {
    auto series = make_series(25, 10);
    series[3].label = "κ<5 & \"γ\"";
    for (bool log_y : {true, false}) {
        LinePlotOptions o;
        o.log_y = log_y;
        o.title = "loss & more";
        const std::string svg = svg_line_plot(series, o);
        const auto x = check_xml(svg);
        INFO(x.error);
        CHECK(x.ok);
        CHECK(count_occurrences(svg, "<polyline") == 25);
        CHECK(count_occurrences(svg, "class=\"legend-entry\"") == 25);
    }
}

TEST_CASE("log axis drops non-positive values") {
    LineSeries s;
    s.label = "neg";
    s.x = {1, 2, 3, 4};
    s.y = {1.0, -0.5, 0.0, 0.25};
    const std::string log_svg = svg_line_plot({s}, {});
    CHECK(check_xml(log_svg).ok);
    const auto pts = log_svg.find("points=\"");
    REQUIRE(pts != std::string::npos);
    const auto end = log_svg.find('"', pts + 8);
    const std::string list = log_svg.substr(pts + 8, end - pts - 8);
    CHECK(count_occurrences(list, ",") == 2);

    LinePlotOptions lin;
    lin.log_y = false;
    CHECK(check_xml(svg_line_plot({s}, lin)).ok);
    CHECK(check_xml(svg_line_plot({}, {})).ok);
}

TEST_CASE("grouped bars") {
    std::vector<BarGroup> groups;
    for (int g = 0; g < 4; ++g) groups.push_back({"run " + std::to_string(g), {0.1 * (g + 1), 0.05}});
    BarChartOptions o;
    o.series_names = {"treated", "untreated"};
    const std::string svg = svg_grouped_bars(groups, o);
    const auto x = check_xml(svg);
    INFO(x.error);
    CHECK(x.ok);
    CHECK(count_occurrences(svg, "class=\"group\"") == 4);
    CHECK(count_occurrences(svg, "class=\"bar\"") == 8);
    CHECK(svg.find("treated") != std::string::npos);
    CHECK(check_xml(svg_grouped_bars({}, o)).ok);
}

TEST_CASE("the checker rejects malformed documents") {
    CHECK_FALSE(check_xml("<svg><g></svg>").ok);
    CHECK_FALSE(check_xml("<svg a=1></svg>").ok);
    CHECK_FALSE(check_xml("<svg>a & b</svg>").ok);
    CHECK_FALSE(check_xml("<a/><b/>").ok);
    CHECK(check_xml("<?xml version=\"1.0\"?>\n<svg><!-- c --><g x='1'/></svg>\n").ok);
}
