#pragma once

#include <string>
#include <utility>
#include <vector>

namespace desklm {

struct ChartSeries {
    std::string label;
    std::string color = "#1f6fb2";
    std::vector<std::pair<double, double>> points;
};

struct ChartPanel {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_y = false;
    std::vector<ChartSeries> series;
};

// Renders stacked panels as one standalone SVG document. Output is
// byte-deterministic for identical inputs.
std::string render_chart(const std::vector<ChartPanel>& panels, int width = 720,
                         int panel_height = 280);

}  // namespace desklm
