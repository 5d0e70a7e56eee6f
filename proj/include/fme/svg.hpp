#pragma once

#include <string>
#include <vector>

// Minimal built-in SVG writer for the report renderings: line charts for
// ROC/PR curves and scatter plots for PCA embeddings. 800x600 viewBox,
// auto-scaled axes, no external dependencies.

namespace fme::svg {

struct Series {
    std::string name;
    std::string color;  // any SVG color string
    std::vector<double> x, y;
};

std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series);

std::string scatter_chart(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series);

void write_file(const std::string& path, const std::string& content);

}  // namespace fme::svg
