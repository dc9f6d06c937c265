#ifndef BFDA_PLOT_HPP
#define BFDA_PLOT_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "io.hpp"
#include "pipeline.hpp"

/**
 * @file plot.hpp
 * @brief SVG figures rendered from pipeline artifacts. Plots only read tables; they never recompute results.
 */

namespace bfda::plot {

inline constexpr const char* color_L = "#c0392b";
inline constexpr const char* color_C = "#2471a3";
inline constexpr const char* set_colors[3] = {"#7d3c98", "#117a65", "#d35400"};

inline std::string fmt(double v, const char* spec = "%.2f") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

using Points = std::vector<std::pair<double, double>>;

class Svg {
public:
    Svg(double width, double height) : w_(width), h_(height) {}

    void line(double x1, double y1, double x2, double y2, const std::string& stroke, const std::string& extra = "") {
        body_ << "<line x1=\"" << fmt(x1) << "\" y1=\"" << fmt(y1) << "\" x2=\"" << fmt(x2) << "\" y2=\"" << fmt(y2) << "\" stroke=\"" << stroke << "\"" << extra
              << "/>\n";
    }

    void polyline(const Points& pts, const std::string& stroke, const std::string& extra = "") {
        body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\"" << extra << " points=\"";
        for (std::size_t i = 0; i < pts.size(); ++i) body_ << (i ? " " : "") << fmt(pts[i].first) << ',' << fmt(pts[i].second);
        body_ << "\"/>\n";
    }

    void rect(double x, double y, double w, double h, const std::string& fill, const std::string& extra = "") {
        body_ << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(w) << "\" height=\"" << fmt(h) << "\" fill=\"" << fill << "\"" << extra
              << "/>\n";
    }

    void text(double x, double y, const std::string& s, const std::string& anchor = "middle", int size = 11) {
        body_ << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" font-size=\"" << size << "\" text-anchor=\"" << anchor << "\">" << s << "</text>\n";
    }

    std::string str() const {
        std::ostringstream out;
        out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(w_, "%.0f") << "\" height=\"" << fmt(h_, "%.0f") << "\" viewBox=\"0 0 " << fmt(w_, "%.0f")
            << ' ' << fmt(h_, "%.0f") << "\" font-family=\"sans-serif\">\n"
            << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
            << body_.str() << "</svg>\n";
        return out.str();
    }

private:
    double w_, h_;
    std::ostringstream body_;
};

/** Axes box mapping data coordinates into an SVG rectangle. */
struct Panel {
    double x0, y0, w, h;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;

    double px(double x) const { return x0 + (x - xmin) / (xmax - xmin) * w; }
    double py(double y) const { return y0 + h - (y - ymin) / (ymax - ymin) * h; }

    void fit_y(const std::vector<double>& values, double pad = 0.05) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (double v : values) {
            if (!std::isfinite(v)) continue;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (!std::isfinite(lo)) lo = 0, hi = 1;
        if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
        const double m = pad * (hi - lo);
        ymin = lo - m;
        ymax = hi + m;
    }

    void frame(Svg& svg, const std::string& title, const std::string& xlabel = "s") const {
        svg.rect(x0, y0, w, h, "none", " stroke=\"#444\"");
        svg.text(x0 + w / 2, y0 - 8, title, "middle", 12);
        svg.text(x0 + w / 2, y0 + h + 30, xlabel);
        for (int t = 0; t <= 4; ++t) {
            const double xv = xmin + (xmax - xmin) * t / 4, yv = ymin + (ymax - ymin) * t / 4;
            svg.line(px(xv), y0 + h, px(xv), y0 + h + 4, "#444");
            svg.text(px(xv), y0 + h + 16, fmt(xv, "%.3g"), "middle", 10);
            svg.line(x0 - 4, py(yv), x0, py(yv), "#444");
            svg.text(x0 - 6, py(yv) + 3, fmt(yv, "%.3g"), "end", 10);
        }
    }

    Points map(const std::vector<double>& x, const std::vector<double>& y, std::size_t max_points = 400) const {
        Points pts;
        const std::size_t stride = std::max<std::size_t>(1, x.size() / max_points);
        for (std::size_t i = 0; i < x.size(); i += stride) pts.emplace_back(px(x[i]), py(std::clamp(y[i], ymin, ymax)));
        if (!x.empty() && (x.size() - 1) % stride) pts.emplace_back(px(x.back()), py(std::clamp(y.back(), ymin, ymax)));
        return pts;
    }
};

/** Rows of a CSV artifact as header-keyed columns of strings. */
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw IoError("table has no column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline std::filesystem::path require(const std::filesystem::path& root, const std::string& rel) {
    const auto p = root / rel;
    if (!std::filesystem::is_regular_file(p)) throw IoError("missing artifact " + rel);
    return p;
}

inline Table read_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty table " + path.string());
    t.header = io::split(line);
    while (std::getline(in, line)) {
        if (!line.empty()) t.rows.push_back(io::split(line));
    }
    return t;
}

inline std::vector<double> column_where(const Table& t, const std::string& col, const std::string& key_col, const std::string& key) {
    const auto c = t.column(col), k = t.column(key_col);
    std::vector<double> out;
    for (const auto& r : t.rows)
        if (r[k] == key) out.push_back(io::parse_double(r[c]));
    return out;
}

/** Four panels: unaligned logit, aligned logit, warps, warp CLR; colored by group. */
inline std::string samples_svg(const StageCurves& sc) {
    Svg svg(1000, 820);
    const std::vector<double> s(sc.grid.points().begin(), sc.grid.points().end());
    const Eigen::MatrixXd* sets[4] = {&sc.unaligned_logit.values, &sc.aligned_logit.values, &sc.warps, &sc.warp_clr.values};
    const char* titles[4] = {"Unaligned logit curves", "Aligned logit curves", "Warping functions", "CLR-transformed warps"};
    for (int p = 0; p < 4; ++p) {
        Panel panel{70.0 + (p % 2) * 480.0, 50.0 + (p / 2) * 390.0, 400, 300};
        const auto& m = *sets[p];
        panel.fit_y(std::vector<double>(m.data(), m.data() + m.size()));
        panel.frame(svg, titles[p]);
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            std::vector<double> y(m.cols());
            for (Eigen::Index j = 0; j < m.cols(); ++j) y[static_cast<std::size_t>(j)] = m(i, j);
            const bool L = sc.labels[static_cast<std::size_t>(i)] == Group::L;
            svg.polyline(panel.map(s, y), L ? color_L : color_C, " stroke-width=\"1\" stroke-opacity=\"0.7\"");
        }
    }
    svg.text(400, 805, "lesion (L)", "end");
    svg.line(410, 801, 440, 801, color_L, " stroke-width=\"2\"");
    svg.text(560, 805, "control (C)", "end");
    svg.line(570, 801, 600, 801, color_C, " stroke-width=\"2\"");
    return svg.str();
}

/** Rows joint / phase / amplitude by columns of components; mean dotted, minus dashed, plus solid. */
inline std::string modes_svg(const Table& modes) {
    std::vector<std::string> comps;
    const auto kc = modes.column("component");
    for (const auto& r : modes.rows)
        if (std::find(comps.begin(), comps.end(), r[kc]) == comps.end()) comps.push_back(r[kc]);
    Svg svg(60 + 420.0 * std::max<std::size_t>(1, comps.size()), 1100);
    const char* kinds[3] = {"joint", "phase", "amplitude"};
    for (std::size_t c = 0; c < comps.size(); ++c) {
        const auto s = column_where(modes, "s", "component", comps[c]);
        const double pve = column_where(modes, "pve", "component", comps[c]).front();
        const auto mean = column_where(modes, "mean_prob", "component", comps[c]);
        for (int r = 0; r < 3; ++r) {
            Panel panel{70.0 + static_cast<double>(c) * 420.0, 50.0 + r * 350.0, 340, 260};
            panel.ymin = 0;
            panel.ymax = 1;
            const std::string pve_text = std::isfinite(pve) ? fmt(100 * pve, "%.1f") + "%" : "undefined";
            panel.frame(svg, std::string(kinds[r]) + ", component " + comps[c] + " (PVE " + pve_text + ")");
            const auto lo = column_where(modes, std::string(kinds[r]) + "_minus", "component", comps[c]);
            const auto hi = column_where(modes, std::string(kinds[r]) + "_plus", "component", comps[c]);
            svg.polyline(panel.map(s, mean), "#222", " stroke-dasharray=\"2,2\"");
            svg.polyline(panel.map(s, lo), "#2471a3", " stroke-dasharray=\"6,3\" stroke-width=\"1.5\"");
            svg.polyline(panel.map(s, hi), "#c0392b", " stroke-width=\"1.5\"");
        }
    }
    return svg.str();
}

/** Adjusted (solid) and unadjusted (dashed) p-value functions of the three curve sets, with the alpha line. */
inline std::string pvalues_svg(const Table& iwt) {
    Svg svg(760, 480);
    Panel panel{70, 40, 520, 360};
    panel.ymin = 0;
    panel.ymax = 1;
    panel.frame(svg, "Interval-wise p-value functions");
    double alpha = 0.05;
    if (!iwt.rows.empty()) alpha = io::parse_double(iwt.rows.front()[iwt.column("alpha")]);
    svg.line(panel.px(0), panel.py(alpha), panel.px(1), panel.py(alpha), "#888", " class=\"threshold\" data-value=\"" + io::num(alpha) + "\"");
    for (int k = 0; k < 3; ++k) {
        const std::string name = to_string(all_curve_sets[k]);
        const auto s = column_where(iwt, "s", "curve_set", name);
        const auto adj = column_where(iwt, "adjusted", "curve_set", name);
        const auto un = column_where(iwt, "unadjusted", "curve_set", name);
        svg.polyline(panel.map(s, adj), set_colors[k], " class=\"series\" data-series=\"" + name + " adjusted\" stroke-width=\"2\"");
        svg.polyline(panel.map(s, un), set_colors[k], " class=\"series\" data-series=\"" + name + " unadjusted\" stroke-dasharray=\"5,3\"");
        svg.line(610, 80 + 22.0 * k, 640, 80 + 22.0 * k, set_colors[k], " stroke-width=\"2\"");
        svg.text(646, 84 + 22.0 * k, name, "start");
    }
    svg.text(610, 160, "solid: corrected", "start", 10);
    svg.text(610, 176, "dashed: uncorrected", "start", 10);
    return svg.str();
}

/** Histogram of permuted global statistics per curve set, with the observed statistic marked. */
inline std::string histograms_svg(const Table& global, const Table& perm) {
    Svg svg(1260, 420);
    for (int k = 0; k < 3; ++k) {
        const std::string name = to_string(all_curve_sets[k]);
        const auto T = column_where(perm, "T", "curve_set", name);
        const double obs = column_where(global, "T_observed", "curve_set", name).front();
        const double p = column_where(global, "p_value", "curve_set", name).front();
        double hi = obs;
        for (double t : T) hi = std::max(hi, t);
        if (!(hi > 0)) hi = 1;
        constexpr int bins = 30;
        std::vector<int> counts(bins, 0);
        for (double t : T) ++counts[static_cast<std::size_t>(std::min(bins - 1, static_cast<int>(t / hi * bins)))];
        Panel panel{60.0 + k * 410.0, 40, 340, 300};
        panel.xmin = 0;
        panel.xmax = hi * 1.05;
        panel.ymin = 0;
        panel.ymax = std::max(1, *std::max_element(counts.begin(), counts.end())) * 1.1;
        panel.frame(svg, name + " (p = " + fmt(p, "%.3f") + ")", "T");
        for (int b = 0; b < bins; ++b) {
            const double left = hi * b / bins, right = hi * (b + 1) / bins;
            svg.rect(panel.px(left), panel.py(counts[static_cast<std::size_t>(b)]), panel.px(right) - panel.px(left), panel.py(0) - panel.py(counts[static_cast<std::size_t>(b)]),
                     "#aab7b8", " stroke=\"white\" stroke-width=\"0.5\"");
        }
        svg.line(panel.px(obs), panel.y0, panel.px(obs), panel.y0 + panel.h, "#c0392b",
                 " class=\"observed\" stroke-width=\"2\" data-curve-set=\"" + name + "\" data-value=\"" + io::num(obs) + "\"");
        svg.text(panel.px(obs) + 4, panel.y0 + 14, "T = " + fmt(obs, "%.6g"), "start", 10);
    }
    return svg.str();
}

/** Figures for every successful stage listed in the manifest; returns paths relative to `root`. */
inline std::vector<std::string> render_plots(const std::filesystem::path& root) {
    const auto manifest = nlohmann::json::parse(io::read_file(require(root, manifest_name)));
    std::vector<std::string> written;
    for (const auto& st : manifest.at("stages")) {
        if (st.at("status") != "ok") continue;
        const std::string stage = stage_name(parse_delay(st.at("delay").get<int>()));
        std::ifstream reg_in(require(root, stage + "/" + artifact::registration));
        const auto sc = read_stage_curves(reg_in);
        const auto modes = read_table(require(root, stage + "/" + artifact::modes));
        const auto iwt = read_table(require(root, stage + "/" + artifact::iwt));
        const auto global = read_table(require(root, stage + "/" + artifact::global_tests));
        const auto perm = read_table(require(root, stage + "/" + artifact::permutation_statistics));
        const std::pair<std::string, std::string> figs[] = {{"samples.svg", samples_svg(sc)},
                                                           {"modes.svg", modes_svg(modes)},
                                                           {"pvalues.svg", pvalues_svg(iwt)},
                                                           {"histograms.svg", histograms_svg(global, perm)}};
        for (const auto& [name, content] : figs) {
            io::write_file_atomic(root / stage / name, content);
            written.push_back(stage + "/" + name);
        }
    }
    return written;
}

}

#endif
