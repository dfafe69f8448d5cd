#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pnca/errors.hpp"
#include "pnca/harness.hpp"

namespace fs = std::filesystem;

namespace pnca {

namespace {

std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

struct Group {
    std::vector<double> accuracies;  // fractions
    double r_pct = -1.0;
    std::string signature;
};

// accuracy-vs-n_c curves, one polyline per method
std::string render_svg(const std::vector<ReportRow>& rows) {
    std::vector<int> ncs;
    std::vector<std::string> methods;
    double lo = 100.0, hi = 0.0;
    for (const auto& r : rows) {
        if (std::find(ncs.begin(), ncs.end(), r.n_c) == ncs.end()) ncs.push_back(r.n_c);
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
            methods.push_back(r.method);
        lo = std::min(lo, r.mean_pct - r.std_pct);
        hi = std::max(hi, r.mean_pct + r.std_pct);
    }
    std::sort(ncs.begin(), ncs.end());
    std::sort(methods.begin(), methods.end());
    lo = std::max(0.0, std::floor(lo - 2.0));
    hi = std::min(100.0, std::ceil(hi + 2.0));
    if (hi - lo < 5.0) hi = lo + 5.0;

    const double width = 640, height = 420;
    const double ml = 60, mr = 150, mt = 30, mb = 50;
    const double pw = width - ml - mr, ph = height - mt - mb;
    auto x_of = [&](int nc) {
        const auto it = std::find(ncs.begin(), ncs.end(), nc);
        const double i = static_cast<double>(it - ncs.begin());
        return ncs.size() == 1 ? ml + pw / 2 : ml + pw * i / (ncs.size() - 1);
    };
    auto y_of = [&](double pct) { return mt + ph * (1.0 - (pct - lo) / (hi - lo)); };

    static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                     "#ff7f0e", "#8c564b"};
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << ml << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">"
        << "Accuracy (%) vs per-class training examples</text>\n";

    // axes and grid
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << (mt + ph) << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << (mt + ph) << "\" x2=\"" << (ml + pw)
        << "\" y2=\"" << (mt + ph) << "\" stroke=\"black\"/>\n";
    for (int tick = 0; tick <= 4; ++tick) {
        const double pct = lo + (hi - lo) * tick / 4.0;
        const double y = y_of(pct);
        svg << "<line x1=\"" << ml << "\" y1=\"" << y << "\" x2=\"" << (ml + pw) << "\" y2=\""
            << y << "\" stroke=\"#dddddd\"/>\n"
            << "<text x=\"" << (ml - 8) << "\" y=\"" << (y + 4)
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
            << fmt2(pct) << "</text>\n";
    }
    for (int nc : ncs)
        svg << "<text x=\"" << x_of(nc) << "\" y=\"" << (mt + ph + 18)
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << nc
            << "</text>\n";
    svg << "<text x=\"" << (ml + pw / 2) << "\" y=\"" << (height - 12)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">N_c</text>\n";

    for (std::size_t m = 0; m < methods.size(); ++m) {
        const char* color = kPalette[m % 6];
        std::ostringstream points;
        for (int nc : ncs)
            for (const auto& r : rows)
                if (r.method == methods[m] && r.n_c == nc)
                    points << x_of(nc) << "," << y_of(r.mean_pct) << " ";
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\""
            << points.str() << "\"/>\n";
        for (int nc : ncs)
            for (const auto& r : rows)
                if (r.method == methods[m] && r.n_c == nc) {
                    svg << "<circle cx=\"" << x_of(nc) << "\" cy=\"" << y_of(r.mean_pct)
                        << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
                    // std whiskers
                    if (r.std_pct > 0.0)
                        svg << "<line x1=\"" << x_of(nc) << "\" y1=\""
                            << y_of(r.mean_pct - r.std_pct) << "\" x2=\"" << x_of(nc)
                            << "\" y2=\"" << y_of(r.mean_pct + r.std_pct) << "\" stroke=\""
                            << color << "\" stroke-width=\"1\"/>\n";
                }
        const double ly = mt + 16 + 18 * static_cast<double>(m);
        svg << "<line x1=\"" << (ml + pw + 12) << "\" y1=\"" << ly << "\" x2=\""
            << (ml + pw + 34) << "\" y2=\"" << ly << "\" stroke=\"" << color
            << "\" stroke-width=\"2\"/>\n"
            << "<text x=\"" << (ml + pw + 40) << "\" y=\"" << (ly + 4)
            << "\" font-family=\"sans-serif\" font-size=\"11\">" << methods[m] << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace

ExperimentReport make_report(const std::string& runs_dir) {
    if (!fs::exists(runs_dir)) throw ReportError("runs directory does not exist: " + runs_dir);
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(runs_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".json")
            files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ReportError("no run records under " + runs_dir);

    std::map<std::pair<int, std::string>, Group> groups;
    for (const auto& f : files) {
        RunRecord rec = load_run_record(f);
        if (rec.task != "finetune") continue;  // pretrain records carry no test accuracy
        if (!rec.abort_reason.empty() || rec.final_test_accuracy < 0.0) continue;
        auto& g = groups[{rec.n_c, rec.method}];
        if (!g.signature.empty() && g.signature != rec.group_signature)
            throw ReportError("run records in group (n_c=" + std::to_string(rec.n_c) +
                              ", method=" + rec.method +
                              ") have incompatible configurations; refusing to aggregate");
        g.signature = rec.group_signature;
        g.r_pct = rec.r_pct;
        g.accuracies.push_back(rec.final_test_accuracy);
    }
    if (groups.empty()) throw ReportError("no usable finetune records under " + runs_dir);

    ExperimentReport report;
    for (const auto& [key, g] : groups) {
        ReportRow row;
        row.n_c = key.first;
        row.method = key.second;
        row.r_pct = g.r_pct;
        row.runs = static_cast<int>(g.accuracies.size());
        double mean = 0;
        for (double a : g.accuracies) mean += a;
        mean /= static_cast<double>(g.accuracies.size());
        double var = 0;
        for (double a : g.accuracies) var += (a - mean) * (a - mean);
        const double stddev =
            g.accuracies.size() > 1 ? std::sqrt(var / (static_cast<double>(g.accuracies.size()) - 1.0))
                                    : 0.0;
        row.mean_pct = 100.0 * mean;
        row.std_pct = 100.0 * stddev;
        report.rows.push_back(row);
    }
    std::sort(report.rows.begin(), report.rows.end(), [](const ReportRow& a, const ReportRow& b) {
        return a.n_c != b.n_c ? a.n_c < b.n_c : a.method < b.method;
    });

    // csv
    std::ostringstream csv;
    csv << "n_c,r_pct,method,runs,mean_accuracy_pct,std_accuracy_pct\n";
    for (const auto& r : report.rows)
        csv << r.n_c << "," << fmt2(r.r_pct) << "," << r.method << "," << r.runs << ","
            << fmt2(r.mean_pct) << "," << fmt2(r.std_pct) << "\n";
    report.csv = csv.str();

    // aligned text, Table 1/2 shape
    std::ostringstream text;
    char line[128];
    std::snprintf(line, sizeof line, "%6s %8s %-16s %5s %16s\n", "N_c", "R%", "Method", "Runs",
                  "Accuracy (%)");
    text << line;
    text << std::string(55, '-') << "\n";
    int prev_nc = -1;
    for (const auto& r : report.rows) {
        const std::string acc = fmt2(r.mean_pct) + " +/- " + fmt2(r.std_pct);
        std::snprintf(line, sizeof line, "%6s %8s %-16s %5d %16s\n",
                      r.n_c != prev_nc ? std::to_string(r.n_c).c_str() : "",
                      r.n_c != prev_nc ? fmt2(r.r_pct).c_str() : "", r.method.c_str(), r.runs,
                      acc.c_str());
        text << line;
        prev_nc = r.n_c;
    }
    report.text = text.str();

    report.svg = render_svg(report.rows);
    return report;
}

void write_report_files(const ExperimentReport& report, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream(fs::path(out_dir) / "report.csv") << report.csv;
    std::ofstream(fs::path(out_dir) / "report.txt") << report.text;
    std::ofstream(fs::path(out_dir) / "curves.svg") << report.svg;
}

}  // namespace pnca
