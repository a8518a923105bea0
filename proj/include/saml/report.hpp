// Report assembly: CSV tables and standalone SVG figures, computed only from the files of a
// results directory (records/*.json, runs/*.loss.csv).
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "saml/experiment.hpp"

namespace saml {

namespace report_detail {

inline std::string fmt(double v, int digits = 4) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '&') out += "&amp;";
        else out += c;
    }
    return out;
}

inline const char* arm_colour(std::size_t i) {
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
    return palette[i % 7];
}

/// Arms in canonical order first, then any unknown names alphabetically.
inline std::vector<std::string> arms_of(const std::vector<EvalRecord>& records) {
    std::set<std::string> present;
    for (const auto& r : records) present.insert(r.arm);
    std::vector<std::string> out;
    for (Arm a : all_arms())
        if (present.erase(to_string(a))) out.push_back(to_string(a));
    out.insert(out.end(), present.begin(), present.end());
    return out;
}

struct Plot {
    double width = 640, height = 400, left = 60, right = 160, top = 40, bottom = 50;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    std::ostringstream svg;

    double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
    double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }

    void begin(const std::string& title, const std::string& xlabel, const std::string& ylabel) {
        svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
            << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
            << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
            << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
            << "</text>\n"
            << "<line x1=\"" << px(x0) << "\" y1=\"" << py(y0) << "\" x2=\"" << px(x1) << "\" y2=\"" << py(y0)
            << "\" stroke=\"black\"/>\n"
            << "<line x1=\"" << px(x0) << "\" y1=\"" << py(y0) << "\" x2=\"" << px(x0) << "\" y2=\"" << py(y1)
            << "\" stroke=\"black\"/>\n"
            << "<text x=\"" << (px(x0) + px(x1)) / 2 << "\" y=\"" << height - 12 << "\" text-anchor=\"middle\">"
            << escape(xlabel) << "</text>\n"
            << "<text x=\"14\" y=\"" << (py(y0) + py(y1)) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
            << (py(y0) + py(y1)) / 2 << ")\">" << escape(ylabel) << "</text>\n";
        for (int i = 0; i <= 4; ++i) {
            const double y = y0 + (y1 - y0) * i / 4.0;
            svg << "<text x=\"" << left - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fmt(y, 2)
                << "</text>\n";
        }
    }
    void xtick(double x, const std::string& label) {
        svg << "<text x=\"" << px(x) << "\" y=\"" << py(y0) + 16 << "\" text-anchor=\"middle\">" << escape(label)
            << "</text>\n";
    }
    void series(const std::vector<std::pair<double, double>>& pts, const char* colour, bool markers) {
        if (pts.empty()) return;
        svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : pts) svg << fmt(px(x), 2) << "," << fmt(py(y), 2) << " ";
        svg << "\"/>\n";
        if (markers)
            for (const auto& [x, y] : pts)
                svg << "<circle cx=\"" << fmt(px(x), 2) << "\" cy=\"" << fmt(py(y), 2) << "\" r=\"3\" fill=\"" << colour
                    << "\"/>\n";
    }
    void legend(std::size_t i, const std::string& label, const char* colour) {
        const double y = top + 10 + 18 * static_cast<double>(i), x = width - right + 12;
        svg << "<rect x=\"" << x << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"12\" fill=\"" << colour << "\"/>\n"
            << "<text x=\"" << x + 18 << "\" y=\"" << y + 1 << "\">" << escape(label) << "</text>\n";
    }
    std::string finish() {
        svg << "</svg>\n";
        return svg.str();
    }
};

inline void set_range(Plot& p, double lo, double hi) {
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    p.y0 = lo - pad;
    p.y1 = hi + pad;
}

}  // namespace report_detail

/// One row per record, ordered by (held-out, arm, seed, sources).
inline std::string results_csv(std::vector<EvalRecord> records) {
    std::sort(records.begin(), records.end(), [](const EvalRecord& a, const EvalRecord& b) {
        return std::tie(a.held_out_domain, a.arm, a.seed, a.source_domains) <
               std::tie(b.held_out_domain, b.arm, b.seed, b.source_domains);
    });
    using report_detail::fmt;
    std::string out = "held_out_domain,arm,seed,source_domains,dice_mean,dice_std,asd_mean,asd_std,n_undefined_asd,ipq_mean\n";
    for (const auto& r : records) {
        std::string src;
        for (int d : r.source_domains) src += (src.empty() ? "" : " ") + std::to_string(d);
        out += std::to_string(r.held_out_domain) + "," + r.arm + "," + std::to_string(r.seed) + "," + src + "," +
               fmt(r.dice_mean()) + "," + fmt(r.dice_std()) + "," + fmt(r.asd_mean()) + "," + fmt(r.asd_std()) + "," +
               std::to_string(r.n_undefined_asd()) + "," + fmt(r.ipq_mean()) + "\n";
    }
    return out;
}

/// Held-out domain of the domain-count curve: the one scored from the most distinct source counts
/// (ties: highest id).
inline int curve_target(const std::vector<EvalRecord>& records) {
    std::map<int, std::set<std::size_t>> counts;
    for (const auto& r : records) counts[r.held_out_domain].insert(r.source_domains.size());
    int best = -1;
    std::size_t most = 0;
    for (const auto& [d, c] : counts)
        if (c.size() >= most) {
            best = d;
            most = c.size();
        }
    return best;
}

/// arm -> source count -> median over seeds of held-out Dice, for one target domain.
inline std::map<std::string, std::map<std::size_t, double>> sweep_medians(const std::vector<EvalRecord>& records,
                                                                          int target) {
    std::map<std::string, std::map<std::size_t, std::vector<double>>> raw;
    for (const auto& r : records)
        if (r.held_out_domain == target) raw[r.arm][r.source_domains.size()].push_back(r.dice_mean());
    std::map<std::string, std::map<std::size_t, double>> out;
    for (auto& [arm, by_k] : raw)
        for (auto& [k, v] : by_k) out[arm][k] = median(v);
    return out;
}

inline std::string sweep_csv(const std::vector<EvalRecord>& records) {
    const int target = curve_target(records);
    std::map<std::string, std::map<std::size_t, std::size_t>> n;
    for (const auto& r : records)
        if (r.held_out_domain == target) ++n[r.arm][r.source_domains.size()];
    std::string out = "target_domain,arm,source_count,n_seeds,dice_median\n";
    const auto med = sweep_medians(records, target);
    for (const auto& arm : report_detail::arms_of(records)) {
        if (!med.count(arm)) continue;
        for (const auto& [k, v] : med.at(arm))
            out += std::to_string(target) + "," + arm + "," + std::to_string(k) + "," + std::to_string(n[arm][k]) +
                   "," + report_detail::fmt(v) + "\n";
    }
    return out;
}

struct TableCell {
    double dice = std::nan("");
    double asd = std::nan("");
};

/// arm -> held-out domain (or -1 for the average) -> per-domain seed medians of leave-one-out records;
/// the average column is the median over seeds of the per-seed domain average.
inline std::map<std::string, std::map<int, TableCell>> loo_table(const std::vector<EvalRecord>& records) {
    const auto ids = domains_of(records);
    std::map<std::string, std::map<int, std::pair<std::vector<double>, std::vector<double>>>> raw;
    for (const auto& r : records)
        if (is_leave_one_out(r, ids)) {
            raw[r.arm][r.held_out_domain].first.push_back(r.dice_mean());
            if (!std::isnan(r.asd_mean())) raw[r.arm][r.held_out_domain].second.push_back(r.asd_mean());
        }
    std::map<std::string, std::map<int, TableCell>> out;
    for (const auto& [arm, by_domain] : raw) {
        for (const auto& [d, v] : by_domain) out[arm][d] = {median(v.first), median(v.second)};
        out[arm][-1] = {median_of(per_seed_average(records, arm, [](const EvalRecord& r) { return r.dice_mean(); })),
                        median_of(per_seed_average(records, arm, [](const EvalRecord& r) { return r.asd_mean(); }))};
    }
    return out;
}

inline std::string table_svg(const std::vector<EvalRecord>& records) {
    using report_detail::escape;
    using report_detail::fmt;
    const auto table = loo_table(records);
    const auto arms = report_detail::arms_of(records);
    std::vector<int> cols;
    for (const auto& [arm, row] : table)
        for (const auto& [d, c] : row)
            if (d >= 0 && std::find(cols.begin(), cols.end(), d) == cols.end()) cols.push_back(d);
    std::sort(cols.begin(), cols.end());
    cols.push_back(-1);
    const double cw = 110, rh = 24, first = 120;
    const double width = first + cw * static_cast<double>(cols.size()) + 20;
    const double height = 70 + rh * static_cast<double>(arms.size() + 1);
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"10\" y=\"20\" font-size=\"14\">Leave-one-domain-out: held-out Dice % / ASD px (median over "
         "seeds)</text>\n";
    double y = 50;
    s << "<text x=\"10\" y=\"" << y << "\" font-weight=\"bold\">arm</text>\n";
    for (std::size_t j = 0; j < cols.size(); ++j)
        s << "<text x=\"" << first + cw * static_cast<double>(j) << "\" y=\"" << y << "\" font-weight=\"bold\">"
          << (cols[j] < 0 ? std::string("Average") : "domain " + std::to_string(cols[j])) << "</text>\n";
    s << "<line x1=\"10\" y1=\"" << y + 6 << "\" x2=\"" << width - 10 << "\" y2=\"" << y + 6
      << "\" stroke=\"black\"/>\n";
    for (const auto& arm : arms) {
        y += rh;
        s << "<text x=\"10\" y=\"" << y << "\">" << escape(arm) << "</text>\n";
        const auto it = table.find(arm);
        for (std::size_t j = 0; j < cols.size(); ++j) {
            std::string text = "-";
            if (it != table.end() && it->second.count(cols[j])) {
                const auto& c = it->second.at(cols[j]);
                text = fmt(c.dice, 2) + " / " + fmt(c.asd, 2);
            }
            s << "<text x=\"" << first + cw * static_cast<double>(j) << "\" y=\"" << y << "\">" << text << "</text>\n";
        }
    }
    s << "</svg>\n";
    return s.str();
}

inline std::string curve_svg(const std::vector<EvalRecord>& records) {
    const int target = curve_target(records);
    const auto med = sweep_medians(records, target);
    report_detail::Plot p;
    std::size_t kmin = SIZE_MAX, kmax = 0;
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& [arm, by_k] : med)
        for (const auto& [k, v] : by_k) {
            kmin = std::min(kmin, k);
            kmax = std::max(kmax, k);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    p.x0 = static_cast<double>(kmin) - 0.5;
    p.x1 = static_cast<double>(kmax) + 0.5;
    report_detail::set_range(p, lo, hi);
    p.begin("Held-out Dice on domain " + std::to_string(target) + " vs number of source domains",
            "source domains", "Dice % (median over seeds)");
    for (std::size_t k = kmin; k <= kmax; ++k) p.xtick(static_cast<double>(k), std::to_string(k));
    std::size_t i = 0;
    for (const auto& arm : report_detail::arms_of(records)) {
        const auto it = med.find(arm);
        if (it == med.end()) continue;
        std::vector<std::pair<double, double>> pts;
        for (const auto& [k, v] : it->second) pts.emplace_back(static_cast<double>(k), v);
        p.series(pts, report_detail::arm_colour(i), true);
        p.legend(i, arm, report_detail::arm_colour(i));
        ++i;
    }
    return p.finish();
}

/// Total training loss per arm, averaged over every loss CSV of that arm; empty when there are none.
inline std::string losses_svg(const std::filesystem::path& runs_dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(runs_dir)) return {};
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(runs_dir))
        if (e.path().string().ends_with(".loss.csv")) files.push_back(e.path());
    if (files.empty()) return {};
    std::sort(files.begin(), files.end());
    std::map<std::string, std::map<std::size_t, std::pair<double, std::size_t>>> sums;
    for (const auto& f : files) {
        const std::string name = f.filename().string();
        const auto stem = name.substr(0, name.size() - std::string(".loss.csv").size());
        // key: h<h>_src<ids>_<arm>_s<seed>
        const auto first = stem.find('_', stem.find("_src") + 1), last = stem.rfind("_s");
        if (first == std::string::npos || last == std::string::npos || last <= first) continue;
        const std::string arm = stem.substr(first + 1, last - first - 1);
        std::istringstream in(read_file(f));
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            std::size_t it = 0;
            double total = 0;
            if (std::sscanf(line.c_str(), "%zu,%*f,%*f,%*f,%*f,%lf", &it, &total) != 2) continue;
            auto& [s, n] = sums[arm][it];
            s += total;
            ++n;
        }
    }
    report_detail::Plot p;
    std::size_t imax = 1;
    double lo = INFINITY, hi = -INFINITY;
    std::map<std::string, std::vector<std::pair<double, double>>> curves;
    for (const auto& [arm, by_it] : sums)
        for (const auto& [it, sn] : by_it) {
            const double v = sn.first / static_cast<double>(sn.second);
            curves[arm].emplace_back(static_cast<double>(it), v);
            imax = std::max(imax, it);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    p.x0 = 0;
    p.x1 = static_cast<double>(imax);
    report_detail::set_range(p, lo, hi);
    p.begin("Training objective (mean over runs)", "iteration", "total loss");
    p.xtick(0, "0");
    p.xtick(static_cast<double>(imax), std::to_string(imax));
    std::size_t i = 0;
    std::vector<std::string> order;
    for (Arm a : all_arms())
        if (curves.count(to_string(a))) order.push_back(to_string(a));
    for (const auto& [arm, c] : curves)
        if (std::find(order.begin(), order.end(), arm) == order.end()) order.push_back(arm);
    for (const auto& arm : order) {
        p.series(curves[arm], report_detail::arm_colour(i), false);
        p.legend(i, arm, report_detail::arm_colour(i));
        ++i;
    }
    return p.finish();
}

inline std::string summary_md(const std::vector<EvalRecord>& records) {
    using report_detail::fmt;
    std::ostringstream s;
    const auto table = loo_table(records);
    s << "# Results\n\n" << records.size() << " evaluation records.\n\n";
    if (!table.empty()) {
        s << "## Leave-one-domain-out (median over seeds of the per-seed average)\n\n| arm | Dice % | ASD px | IPQ |\n"
             "|---|---|---|---|\n";
        for (const auto& arm : report_detail::arms_of(records))
            if (table.count(arm)) {
                const double ipq = median_of(per_seed_average(records, arm, prediction_ipq));
                s << "| " << arm << " | " << fmt(table.at(arm).at(-1).dice, 2) << " | "
                  << fmt(table.at(arm).at(-1).asd, 3) << " | " << fmt(ipq, 3) << " |\n";
            }
        s << "\n";
    }
    const int target = curve_target(records);
    const auto med = sweep_medians(records, target);
    s << "## Held-out Dice on domain " << target << " by number of source domains\n\n";
    for (const auto& arm : report_detail::arms_of(records))
        if (med.count(arm)) {
            s << "- " << arm << ":";
            for (const auto& [k, v] : med.at(arm)) s << " " << k << "→" << fmt(v, 2);
            s << "\n";
        }
    return s.str();
}

struct ReportFiles {
    std::vector<std::filesystem::path> written;
};

/// Builds every report artifact from `results_dir`; throws IoError when there are no records.
inline ReportFiles write_report(const std::filesystem::path& results_dir, const std::filesystem::path& out_dir) {
    const auto records = load_records(results_dir);
    if (records.empty()) throw IoError("no evaluation records in " + (results_dir / "records").string());
    std::filesystem::create_directories(out_dir);
    ReportFiles f;
    const auto put = [&](const std::string& name, const std::string& text) {
        if (text.empty()) return;
        write_file_atomic(out_dir / name, text);
        f.written.push_back(out_dir / name);
    };
    put("results.csv", results_csv(records));
    put("sweep.csv", sweep_csv(records));
    put("summary.md", summary_md(records));
    put("table.svg", table_svg(records));
    put("curve.svg", curve_svg(records));
    put("losses.svg", losses_svg(results_dir / "runs"));
    return f;
}

}  // namespace saml
