#include "fme/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fme/error.hpp"

namespace fme::svg {

namespace {

constexpr double kWidth = 800, kHeight = 600;
constexpr double kLeft = 70, kRight = 30, kTop = 50, kBottom = 60;

struct Extent {
    double lo = 0, hi = 1;
    double map(double v, double a, double b) const {
        if (hi == lo) return (a + b) / 2;
        return a + (v - lo) / (hi - lo) * (b - a);
    }
};

Extent span(const std::vector<Series>& series, bool use_x) {
    Extent e{1e300, -1e300};
    for (const auto& s : series)
        for (double v : (use_x ? s.x : s.y)) {
            e.lo = std::min(e.lo, v);
            e.hi = std::max(e.hi, v);
        }
    if (e.lo > e.hi) return {0, 1};
    if (e.lo == e.hi) {
        e.lo -= 0.5;
        e.hi += 0.5;
    }
    return e;
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

void open_chart(std::ostringstream& os, const std::string& title, const std::string& x_label,
                const std::string& y_label, const Extent& ex, const Extent& ey) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 600\">\n";
    os << "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
    os << "<text x=\"400\" y=\"28\" text-anchor=\"middle\" font-size=\"18\">" << title
       << "</text>\n";
    os << "<text x=\"400\" y=\"585\" text-anchor=\"middle\" font-size=\"13\">" << x_label
       << "</text>\n";
    os << "<text x=\"18\" y=\"300\" text-anchor=\"middle\" font-size=\"13\" "
          "transform=\"rotate(-90 18 300)\">"
       << y_label << "</text>\n";
    // frame and ticks
    os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << (kWidth - kLeft - kRight)
       << "\" height=\"" << (kHeight - kTop - kBottom)
       << "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double fx = kLeft + i * (kWidth - kLeft - kRight) / 5;
        const double fy = kHeight - kBottom - i * (kHeight - kTop - kBottom) / 5;
        const double vx = ex.lo + i * (ex.hi - ex.lo) / 5;
        const double vy = ey.lo + i * (ey.hi - ey.lo) / 5;
        os << "<line x1=\"" << fx << "\" y1=\"" << (kHeight - kBottom) << "\" x2=\"" << fx
           << "\" y2=\"" << (kHeight - kBottom + 5) << "\" stroke=\"#444\"/>\n";
        os << "<text x=\"" << fx << "\" y=\"" << (kHeight - kBottom + 20)
           << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt(vx) << "</text>\n";
        os << "<line x1=\"" << (kLeft - 5) << "\" y1=\"" << fy << "\" x2=\"" << kLeft << "\" y2=\""
           << fy << "\" stroke=\"#444\"/>\n";
        os << "<text x=\"" << (kLeft - 9) << "\" y=\"" << (fy + 4)
           << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(vy) << "</text>\n";
    }
}

void legend(std::ostringstream& os, const std::vector<Series>& series) {
    double y = kTop + 14;
    for (const auto& s : series) {
        if (s.name.empty()) continue;
        os << "<rect x=\"" << (kWidth - kRight - 150) << "\" y=\"" << (y - 9)
           << "\" width=\"12\" height=\"12\" fill=\"" << s.color << "\"/>\n";
        os << "<text x=\"" << (kWidth - kRight - 132) << "\" y=\"" << (y + 2)
           << "\" font-size=\"12\">" << s.name << "</text>\n";
        y += 18;
    }
}

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series) {
    const Extent ex = span(series, true), ey = span(series, false);
    std::ostringstream os;
    open_chart(os, title, x_label, y_label, ex, ey);
    for (const auto& s : series) {
        if (s.x.empty()) continue;
        os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < s.x.size(); ++i)
            os << fmt(ex.map(s.x[i], kLeft, kWidth - kRight)) << ","
               << fmt(ey.map(s.y[i], kHeight - kBottom, kTop)) << " ";
        os << "\"/>\n";
    }
    legend(os, series);
    os << "</svg>\n";
    return os.str();
}

std::string scatter_chart(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series) {
    const Extent ex = span(series, true), ey = span(series, false);
    std::ostringstream os;
    open_chart(os, title, x_label, y_label, ex, ey);
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i)
            os << "<circle cx=\"" << fmt(ex.map(s.x[i], kLeft, kWidth - kRight)) << "\" cy=\""
               << fmt(ey.map(s.y[i], kHeight - kBottom, kTop)) << "\" r=\"3\" fill=\"" << s.color
               << "\" fill-opacity=\"0.7\"/>\n";
    legend(os, series);
    os << "</svg>\n";
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << content;
}

}  // namespace fme::svg
