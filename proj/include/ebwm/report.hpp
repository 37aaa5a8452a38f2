#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ebwm/common.hpp"

namespace ebwm {

struct MetricsPoint {
    int64_t step = 0;
    std::string split;
    double loss = 0.0;
    double flops = 0.0;
};

struct MetricsFile {
    std::string flops_convention;
    std::vector<MetricsPoint> points;
};

inline MetricsFile parse_metrics_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("report: cannot open '" + path + "'");
    MetricsFile out;
    std::string line;
    std::vector<std::string> header;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto pos = line.find("flops_convention:");
            if (pos != std::string::npos) {
                out.flops_convention = line.substr(pos + 17);
            }
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (header.empty()) {
            header = cells;
            continue;
        }
        if (cells.size() < header.size()) cells.resize(header.size());
        MetricsPoint p;
        for (size_t i = 0; i < header.size(); ++i) {
            if (header[i] == "step" && !cells[i].empty()) p.step = std::stoll(cells[i]);
            if (header[i] == "split") p.split = cells[i];
            if (header[i] == "loss" && !cells[i].empty()) p.loss = std::stod(cells[i]);
            if (header[i] == "cumulative_flops" && !cells[i].empty()) {
                p.flops = std::stod(cells[i]);
            }
        }
        out.points.push_back(std::move(p));
    }
    if (out.points.empty()) throw Error("report: no data rows in '" + path + "'");
    return out;
}

namespace detail {

struct Series {
    std::string name;
    std::string color;
    std::vector<std::pair<double, double>> xy;
};

inline void write_svg_plot(const std::string& path, const std::string& title,
                           const std::string& x_label, const std::vector<Series>& series) {
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series) {
        for (auto [x, y] : s.xy) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (xmax <= xmin) xmax = xmin + 1;
    if (ymax <= ymin) ymax = ymin + 1;
    const double W = 720, H = 440, L = 70, R = 20, T = 40, B = 50;
    auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto sy = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("report: cannot open '" + path + "'");
    os << strf("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" "
               "viewBox=\"0 0 %g %g\">\n",
               W, H, W, H);
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << strf("<text x=\"%g\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">%s</text>\n",
               L, title.c_str());
    os << strf("<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L,
               H - B, W - R, H - B);
    os << strf("<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, T, L,
               H - B);
    for (int i = 0; i <= 4; ++i) {
        const double fx = xmin + (xmax - xmin) * i / 4.0;
        const double fy = ymin + (ymax - ymin) * i / 4.0;
        os << strf("<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"11\" "
                   "text-anchor=\"middle\">%.3g</text>\n",
                   sx(fx), H - B + 18, fx);
        os << strf("<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"11\" "
                   "text-anchor=\"end\">%.3g</text>\n",
                   L - 6, sy(fy) + 4, fy);
    }
    os << strf("<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"12\" "
               "text-anchor=\"middle\">%s</text>\n",
               (L + W - R) / 2, H - 12, x_label.c_str());
    double legend_y = T + 6;
    for (const auto& s : series) {
        if (s.xy.empty()) continue;
        std::string pts;
        for (auto [x, y] : s.xy) {
            pts += strf("%g,%g ", sx(x), sy(y));
        }
        os << strf("<polyline fill=\"none\" stroke=\"%s\" stroke-width=\"1.5\" points=\"%s\"/>\n",
                   s.color.c_str(), pts.c_str());
        os << strf("<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"12\" "
                   "fill=\"%s\">%s</text>\n",
                   W - R - 120.0, legend_y, s.color.c_str(), s.name.c_str());
        legend_y += 16;
    }
    os << "</svg>\n";
}

}  // namespace detail

// Emits loss-vs-steps and loss-vs-flops plots plus a one-line summary of the
// minimum losses seen per split.
inline std::string write_report(const std::string& metrics_path, const std::string& out_dir) {
    MetricsFile mf = parse_metrics_csv(metrics_path);
    detail::Series train_steps{"train", "#1f77b4", {}};
    detail::Series val_steps{"val", "#d62728", {}};
    detail::Series train_flops{"train", "#1f77b4", {}};
    detail::Series val_flops{"val", "#d62728", {}};
    double min_train = 1e300, min_val = 1e300;
    int64_t min_train_step = -1, min_val_step = -1;
    for (const auto& p : mf.points) {
        if (!std::isfinite(p.loss)) continue;
        if (p.split == "train") {
            train_steps.xy.push_back({static_cast<double>(p.step), p.loss});
            train_flops.xy.push_back({p.flops, p.loss});
            if (p.loss < min_train) {
                min_train = p.loss;
                min_train_step = p.step;
            }
        } else if (p.split == "val") {
            val_steps.xy.push_back({static_cast<double>(p.step), p.loss});
            val_flops.xy.push_back({p.flops, p.loss});
            if (p.loss < min_val) {
                min_val = p.loss;
                min_val_step = p.step;
            }
        }
    }
    detail::write_svg_plot(out_dir + "/loss_vs_steps.svg", "loss vs steps", "step",
                           {train_steps, val_steps});
    detail::write_svg_plot(out_dir + "/loss_vs_flops.svg", "loss vs cumulative FLOPs",
                           "cumulative FLOPs", {train_flops, val_flops});
    std::string summary = strf("min train loss %.6g at step %lld", min_train,
                               static_cast<long long>(min_train_step));
    if (min_val_step >= 0) {
        summary += strf("; min val loss %.6g at step %lld", min_val,
                        static_cast<long long>(min_val_step));
    }
    return summary;
}

}  // namespace ebwm
