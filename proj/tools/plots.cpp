#include "plots.hpp"

#include "aegan/error.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

namespace plots {
namespace {

constexpr int kPanelW = 420;
constexpr int kPanelH = 360;
constexpr int kLegendH = 40;
constexpr int kMarginL = 60;
constexpr int kMarginR = 15;
constexpr int kMarginT = 35;
constexpr int kMarginB = 45;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

const cv::Scalar kBlack(0, 0, 0);
const cv::Scalar kGrey(200, 200, 200);

cv::Scalar color(std::size_t i) {
    static const cv::Scalar palette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44},
                                         {40, 39, 214},  {189, 103, 148}, {75, 86, 140}};
    return palette[i % std::size(palette)];
}

std::string fmt(double v) {
    char buf[32];
    if (v == 0.0) return "0";
    const double a = std::abs(v);
    std::snprintf(buf, sizeof buf, a >= 100 ? "%.0f" : a >= 10 ? "%.1f" : a >= 1 ? "%.2f" : "%.3f", v);
    return buf;
}

void text(cv::Mat& img, const std::string& s, cv::Point at, double scale = 0.45, bool centered = false) {
    int base = 0;
    const auto size = cv::getTextSize(s, cv::FONT_HERSHEY_SIMPLEX, scale, 1, &base);
    if (centered) at.x -= size.width / 2;
    cv::putText(img, s, at, cv::FONT_HERSHEY_SIMPLEX, scale, kBlack, 1, cv::LINE_AA);
}

struct Axis {
    double lo = 0;
    double hi = 1;
};

Axis axis_for(double lo, double hi) {
    lo = std::min(lo, 0.0);
    hi = std::max(hi, 0.0);
    if (hi - lo < 1e-12) hi = lo + 1.0;
    const double pad = 0.08 * (hi - lo);
    return {lo < 0 ? lo - pad : 0.0, hi > 0 ? hi + pad : 0.0};
}

cv::Rect panel_frame(int index) {
    return {index * kPanelW + kMarginL, kLegendH + kMarginT, kPanelW - kMarginL - kMarginR,
            kPanelH - kMarginT - kMarginB};
}

void draw_y_axis(cv::Mat& img, const cv::Rect& f, const Axis& ax, const std::string& title) {
    auto y_of = [&](double v) { return f.y + f.height - int(std::lround((v - ax.lo) / (ax.hi - ax.lo) * f.height)); };
    for (int i = 0; i <= 4; ++i) {
        const double v = ax.lo + (ax.hi - ax.lo) * i / 4.0;
        const int y = y_of(v);
        cv::line(img, {f.x, y}, {f.x + f.width, y}, kGrey, 1);
        text(img, fmt(v), {f.x - kMarginL + 4, y + 4}, 0.4);
    }
    cv::line(img, {f.x, y_of(0.0)}, {f.x + f.width, y_of(0.0)}, kBlack, 1);
    cv::line(img, {f.x, f.y}, {f.x, f.y + f.height}, kBlack, 1);
    text(img, title, {f.x + f.width / 2, f.y - 12}, 0.55, true);
}

void legend(cv::Mat& img, const std::vector<std::string>& labels) {
    int x = 15;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        cv::rectangle(img, cv::Rect(x, 14, 14, 14), color(i), cv::FILLED);
        text(img, labels[i], {x + 20, 26}, 0.5);
        int base = 0;
        x += 40 + cv::getTextSize(labels[i], cv::FONT_HERSHEY_SIMPLEX, 0.5, 1, &base).width;
    }
}

// values[series][group]; NaN leaves a gap.
void bar_panel(cv::Mat& img, int index, const std::string& title, const std::vector<std::string>& groups,
               const std::vector<std::vector<double>>& values) {
    double lo = 0, hi = 0;
    for (const auto& s : values)
        for (double v : s)
            if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    const Axis ax = axis_for(lo, hi);
    const cv::Rect f = panel_frame(index);
    draw_y_axis(img, f, ax, title);
    auto y_of = [&](double v) { return f.y + f.height - int(std::lround((v - ax.lo) / (ax.hi - ax.lo) * f.height)); };

    const double group_w = double(f.width) / std::max<std::size_t>(groups.size(), 1);
    const double bar_w = 0.8 * group_w / std::max<std::size_t>(values.size(), 1);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const double gx = f.x + gi * group_w + 0.1 * group_w;
        for (std::size_t si = 0; si < values.size(); ++si) {
            const double v = values[si][gi];
            if (!std::isfinite(v)) continue;
            const int x0 = int(gx + si * bar_w);
            const int x1 = std::max(x0 + 1, int(gx + (si + 1) * bar_w) - 1);
            const int y0 = y_of(0.0), y1 = y_of(v);
            cv::rectangle(img, cv::Point(x0, std::min(y0, y1)), cv::Point(x1, std::max(y0, y1)), color(si),
                          cv::FILLED);
        }
        text(img, groups[gi], {int(f.x + (gi + 0.5) * group_w), f.y + f.height + 20}, 0.45, true);
    }
}

struct BoxStats {
    double min, q1, median, q3, max;
};

double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * (v.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - i;
    return i + 1 < v.size() ? v[i] * (1 - frac) + v[i + 1] * frac : v[i];
}

BoxStats box_stats(const std::vector<double>& v) {
    return {*std::min_element(v.begin(), v.end()), quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75),
            *std::max_element(v.begin(), v.end())};
}

void box_panel(cv::Mat& img, int index, const std::string& title, const std::vector<std::string>& labels,
               const std::vector<std::vector<double>>& samples) {
    double lo = 0, hi = 0;
    for (const auto& s : samples)
        for (double v : s) lo = std::min(lo, v), hi = std::max(hi, v);
    const Axis ax = axis_for(lo, hi);
    const cv::Rect f = panel_frame(index);
    draw_y_axis(img, f, ax, title);
    auto y_of = [&](double v) { return f.y + f.height - int(std::lround((v - ax.lo) / (ax.hi - ax.lo) * f.height)); };
    const double slot = double(f.width) / std::max<std::size_t>(samples.size(), 1);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const int cx = int(f.x + (i + 0.5) * slot);
        text(img, labels[i], {cx, f.y + f.height + 20}, 0.45, true);
        if (samples[i].empty()) continue;
        const auto b = box_stats(samples[i]);
        const int half = int(0.25 * slot);
        cv::line(img, {cx, y_of(b.min)}, {cx, y_of(b.q1)}, kBlack, 1);
        cv::line(img, {cx, y_of(b.q3)}, {cx, y_of(b.max)}, kBlack, 1);
        cv::line(img, {cx - half / 2, y_of(b.min)}, {cx + half / 2, y_of(b.min)}, kBlack, 1);
        cv::line(img, {cx - half / 2, y_of(b.max)}, {cx + half / 2, y_of(b.max)}, kBlack, 1);
        cv::rectangle(img, cv::Point(cx - half, y_of(b.q3)), cv::Point(cx + half, y_of(b.q1)), color(i), cv::FILLED);
        cv::rectangle(img, cv::Point(cx - half, y_of(b.q3)), cv::Point(cx + half, y_of(b.q1)), kBlack, 1);
        cv::line(img, {cx - half, y_of(b.median)}, {cx + half, y_of(b.median)}, kBlack, 2);
    }
}

cv::Mat canvas(int panels) { return cv::Mat(kLegendH + kPanelH, panels * kPanelW, CV_8UC3, cv::Scalar(255, 255, 255)); }

void save(const cv::Mat& img, const std::filesystem::path& path) {
    if (!cv::imwrite(path.string(), img)) throw aegan::IoError("cannot write " + path.string());
}

std::vector<std::string> labels_of(const std::vector<Series>& series) {
    std::vector<std::string> out;
    for (const auto& s : series) out.push_back(s.label);
    return out;
}

std::vector<int> all_drfs(const std::vector<Series>& series) {
    std::vector<int> drfs;
    for (const auto& s : series)
        for (const auto& [d, t] : s.report.per_drf)
            if (std::find(drfs.begin(), drfs.end(), d) == drfs.end()) drfs.push_back(d);
    std::sort(drfs.begin(), drfs.end());
    return drfs;
}

std::vector<std::string> drf_labels(const std::vector<int>& drfs) {
    std::vector<std::string> out;
    for (int d : drfs) out.push_back("DRF " + std::to_string(d));
    return out;
}

} // namespace

void metrics_by_drf(const std::vector<Series>& series, const std::filesystem::path& path) {
    const auto drfs = all_drfs(series);
    cv::Mat img = canvas(3);
    legend(img, labels_of(series));
    const std::pair<const char*, double aegan::MetricTriple::*> metrics[] = {
        {"PSNR (dB)", &aegan::MetricTriple::psnr},
        {"SSIM", &aegan::MetricTriple::ssim},
        {"NRMSE (%)", &aegan::MetricTriple::nrmse}};
    for (int m = 0; m < 3; ++m) {
        std::vector<std::vector<double>> values;
        for (const auto& s : series) {
            std::vector<double> row;
            for (int d : drfs) {
                const auto it = s.report.per_drf.find(d);
                row.push_back(it == s.report.per_drf.end() ? kNaN : it->second.*metrics[m].second);
            }
            values.push_back(row);
        }
        bar_panel(img, m, metrics[m].first, drf_labels(drfs), values);
    }
    save(img, path);
}

void weighted_scores(const std::vector<Series>& series, const std::filesystem::path& path) {
    cv::Mat img = canvas(3);
    legend(img, labels_of(series));
    const std::pair<const char*, double aegan::MetricTriple::*> metrics[] = {
        {"weighted PSNR (dB)", &aegan::MetricTriple::psnr},
        {"weighted SSIM", &aegan::MetricTriple::ssim},
        {"weighted NRMSE (%)", &aegan::MetricTriple::nrmse}};
    for (int m = 0; m < 3; ++m) {
        std::vector<std::vector<double>> values;
        for (const auto& s : series) {
            const auto& r = s.report;
            values.push_back({r.weighted_as_tables ? (*r.weighted_as_tables).*metrics[m].second : kNaN,
                              r.weighted_as_equation ? (*r.weighted_as_equation).*metrics[m].second : kNaN});
        }
        bar_panel(img, m, metrics[m].first, {"as_tables", "as_equation"}, values);
    }
    save(img, path);
}

void ssp_comparison(const std::vector<Series>& series, const std::filesystem::path& path) {
    const auto drfs = all_drfs(series);
    cv::Mat img = canvas(2);
    legend(img, labels_of(series));
    const std::pair<const char*, double aegan::MetricTriple::*> metrics[] = {
        {"PSNR gain over input (dB)", &aegan::MetricTriple::psnr}, {"SSIM gain over input", &aegan::MetricTriple::ssim}};
    for (int m = 0; m < 2; ++m) {
        std::vector<std::vector<double>> values;
        for (const auto& s : series) {
            std::map<int, std::pair<double, int>> acc;
            for (const auto& row : s.report.rows) {
                auto& [sum, n] = acc[row.drf];
                sum += row.synthesized.*metrics[m].second - row.input.*metrics[m].second;
                ++n;
            }
            std::vector<double> v;
            for (int d : drfs) {
                const auto it = acc.find(d);
                v.push_back(it == acc.end() ? kNaN : it->second.first / it->second.second);
            }
            values.push_back(v);
        }
        bar_panel(img, m, metrics[m].first, drf_labels(drfs), values);
    }
    save(img, path);
}

void roi_error_box(const std::vector<Series>& series, const std::filesystem::path& path) {
    cv::Mat img = canvas(2);
    legend(img, labels_of(series));
    std::vector<std::vector<double>> max_err, mean_err;
    for (const auto& s : series) {
        max_err.emplace_back();
        mean_err.emplace_back();
        for (const auto& r : s.report.roi) {
            max_err.back().push_back(r.max_error_pct);
            mean_err.back().push_back(r.mean_error_pct);
        }
    }
    box_panel(img, 0, "SUVmax error (%)", labels_of(series), max_err);
    box_panel(img, 1, "SUVmean error (%)", labels_of(series), mean_err);
    save(img, path);
}

} // namespace plots
