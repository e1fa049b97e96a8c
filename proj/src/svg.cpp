#include "desklm/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace desklm {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string fmt_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

struct Range {
    double lo = 0.0;
    double hi = 1.0;
};

Range data_range(const std::vector<ChartSeries>& series, bool y_axis, bool log_scale) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            double v = y_axis ? y : x;
            if (log_scale) {
                if (v <= 0.0) {
                    continue;
                }
                v = std::log10(v);
            }
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (!std::isfinite(lo)) {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    return {lo, hi};
}

}  // namespace

std::string render_chart(const std::vector<ChartPanel>& panels, int width, int panel_height) {
    const double ml = 64, mr = 16, mt = 30, mb = 40;
    std::ostringstream out;
    int total_height = panel_height * static_cast<int>(panels.size());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << total_height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    out << "<rect width=\"" << width << "\" height=\"" << total_height << "\" fill=\"white\"/>\n";

    for (size_t pi = 0; pi < panels.size(); ++pi) {
        const auto& panel = panels[pi];
        const double top = static_cast<double>(pi) * panel_height;
        const double x0 = ml, x1 = width - mr;
        const double y0 = top + panel_height - mb, y1 = top + mt;
        Range xr = data_range(panel.series, false, false);
        Range yr = data_range(panel.series, true, panel.log_y);

        auto sx = [&](double x) { return x0 + (x - xr.lo) / (xr.hi - xr.lo) * (x1 - x0); };
        auto sy = [&](double y) {
            double v = panel.log_y ? std::log10(std::max(y, 1e-300)) : y;
            return y0 - (v - yr.lo) / (yr.hi - yr.lo) * (y0 - y1);
        };

        out << "<g>\n";
        out << "<text x=\"" << fmt((x0 + x1) / 2) << "\" y=\"" << fmt(top + 16)
            << "\" text-anchor=\"middle\" font-size=\"13\">" << panel.title << "</text>\n";
        out << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(y1) << "\" width=\"" << fmt(x1 - x0)
            << "\" height=\"" << fmt(y0 - y1) << "\" fill=\"none\" stroke=\"#444\"/>\n";

        const int n_ticks = 5;
        for (int t = 0; t <= n_ticks; ++t) {
            double fx = xr.lo + (xr.hi - xr.lo) * t / n_ticks;
            double px = sx(fx);
            out << "<line x1=\"" << fmt(px) << "\" y1=\"" << fmt(y0) << "\" x2=\"" << fmt(px)
                << "\" y2=\"" << fmt(y0 + 4) << "\" stroke=\"#444\"/>\n";
            out << "<text x=\"" << fmt(px) << "\" y=\"" << fmt(y0 + 16)
                << "\" text-anchor=\"middle\">" << fmt_tick(fx) << "</text>\n";
            double fy = yr.lo + (yr.hi - yr.lo) * t / n_ticks;
            double py = y0 - (fy - yr.lo) / (yr.hi - yr.lo) * (y0 - y1);
            double label_val = panel.log_y ? std::pow(10.0, fy) : fy;
            out << "<line x1=\"" << fmt(x0 - 4) << "\" y1=\"" << fmt(py) << "\" x2=\"" << fmt(x0)
                << "\" y2=\"" << fmt(py) << "\" stroke=\"#444\"/>\n";
            out << "<text x=\"" << fmt(x0 - 6) << "\" y=\"" << fmt(py + 3)
                << "\" text-anchor=\"end\">" << fmt_tick(label_val) << "</text>\n";
        }
        out << "<text x=\"" << fmt((x0 + x1) / 2) << "\" y=\"" << fmt(top + panel_height - 8)
            << "\" text-anchor=\"middle\">" << panel.x_label << "</text>\n";
        out << "<text x=\"14\" y=\"" << fmt((y0 + y1) / 2) << "\" text-anchor=\"middle\" "
            << "transform=\"rotate(-90 14 " << fmt((y0 + y1) / 2) << ")\">" << panel.y_label
            << "</text>\n";

        int legend_i = 0;
        for (const auto& s : panel.series) {
            if (s.points.empty()) {
                continue;
            }
            out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.2\" "
                << "points=\"";
            bool first = true;
            for (const auto& [x, y] : s.points) {
                if (!first) {
                    out << ' ';
                }
                first = false;
                out << fmt(sx(x)) << ',' << fmt(sy(y));
            }
            out << "\"/>\n";
            if (!s.label.empty()) {
                double lx = x1 - 150, ly = y1 + 14 + 14 * legend_i++;
                out << "<line x1=\"" << fmt(lx) << "\" y1=\"" << fmt(ly - 3) << "\" x2=\""
                    << fmt(lx + 18) << "\" y2=\"" << fmt(ly - 3) << "\" stroke=\"" << s.color
                    << "\" stroke-width=\"1.2\"/>\n";
                out << "<text x=\"" << fmt(lx + 22) << "\" y=\"" << fmt(ly) << "\">" << s.label
                    << "</text>\n";
            }
        }
        out << "</g>\n";
    }
    out << "</svg>\n";
    return out.str();
}

}  // namespace desklm
