#include "aegan/metrics.hpp"

#include "aegan/error.hpp"
#include "aegan/rng.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace aegan {

using nlohmann::json;

namespace {

void require_same_grid(const Volume& ref, const Volume& pred, const char* metric) {
    if (!(ref.shape == pred.shape))
        throw ArgumentError(std::string(metric) + ": shapes differ, " + to_string(ref.shape) + " vs " +
                            to_string(pred.shape));
}

double range_of(const Volume& v) {
    return static_cast<double>(v.voxels.maxCoeff()) - static_cast<double>(v.voxels.minCoeff());
}

double mse(const Volume& ref, const Volume& pred) {
    return (ref.voxels.cast<double>() - pred.voxels.cast<double>()).square().mean();
}

} // namespace

double psnr(const Volume& ref, const Volume& pred) {
    require_same_grid(ref, pred, "psnr");
    const double m = mse(ref, pred);
    if (m == 0.0) return kInfinitePsnr;
    const double peak = range_of(ref);
    if (!(peak > 0.0)) throw UndefinedMetricError("psnr: reference has zero range");
    return 20.0 * std::log10(peak / std::sqrt(m));
}

double nrmse(const Volume& ref, const Volume& pred) {
    require_same_grid(ref, pred, "nrmse");
    const double r = range_of(ref);
    if (!(r > 0.0)) throw UndefinedMetricError("nrmse: reference has zero range");
    return 100.0 * std::sqrt(mse(ref, pred)) / r;
}

namespace {

/// Summed-volume table with a zero border: S(x+1, y+1, z+1) = sum over [0..x]x[0..y]x[0..z].
class IntegralVolume {
public:
    IntegralVolume(const Eigen::ArrayXd& v, Extent3 shape)
        : sx_(shape.x + 1), sy_(shape.y + 1), data_(Eigen::ArrayXd::Zero(sx_ * sy_ * (shape.z + 1))) {
        for (Index z = 0; z < shape.z; ++z)
            for (Index y = 0; y < shape.y; ++y)
                for (Index x = 0; x < shape.x; ++x) {
                    const double s = v[(z * shape.y + y) * shape.x + x];
                    at(x + 1, y + 1, z + 1) = s + at(x, y + 1, z + 1) + at(x + 1, y, z + 1) + at(x + 1, y + 1, z) -
                                              at(x, y, z + 1) - at(x, y + 1, z) - at(x + 1, y, z) + at(x, y, z);
                }
    }

    /// Sum over the w^3 box starting at (x, y, z).
    double box(Index x, Index y, Index z, Index w) const {
        const Index X = x + w, Y = y + w, Z = z + w;
        return at(X, Y, Z) - at(x, Y, Z) - at(X, y, Z) - at(X, Y, z) + at(x, y, Z) + at(x, Y, z) + at(X, y, z) -
               at(x, y, z);
    }

private:
    double& at(Index x, Index y, Index z) { return data_[(z * sy_ + y) * sx_ + x]; }
    double at(Index x, Index y, Index z) const { return data_[(z * sy_ + y) * sx_ + x]; }

    Index sx_, sy_;
    Eigen::ArrayXd data_;
};

} // namespace

double ssim(const Volume& ref, const Volume& pred, const SsimOptions& opts) {
    require_same_grid(ref, pred, "ssim");
    const Index w = opts.window;
    if (w < 1) throw ArgumentError("ssim window must be >= 1");
    for (int d = 0; d < 3; ++d)
        if (ref.shape[d] < w)
            throw ArgumentError("ssim: volume " + to_string(ref.shape) + " is smaller than the " + std::to_string(w) +
                                "^3 window");
    const double range = opts.data_range.value_or(range_of(ref));
    if (!(range > 0.0)) throw UndefinedMetricError("ssim: zero dynamic range");
    const double c1 = std::pow(opts.k1 * range, 2);
    const double c2 = std::pow(opts.k2 * range, 2);

    const Eigen::ArrayXd x = ref.voxels.cast<double>();
    const Eigen::ArrayXd y = pred.voxels.cast<double>();
    const IntegralVolume sx(x, ref.shape), sy(y, ref.shape), sxx(x * x, ref.shape), syy(y * y, ref.shape),
        sxy(x * y, ref.shape);
    const double n = static_cast<double>(w * w * w);

    double total = 0.0;
    Index count = 0;
    for (Index z = 0; z + w <= ref.shape.z; ++z)
        for (Index yy = 0; yy + w <= ref.shape.y; ++yy)
            for (Index xx = 0; xx + w <= ref.shape.x; ++xx) {
                const double mx = sx.box(xx, yy, z, w) / n;
                const double my = sy.box(xx, yy, z, w) / n;
                const double vx = sxx.box(xx, yy, z, w) / n - mx * mx;
                const double vy = syy.box(xx, yy, z, w) / n - my * my;
                const double cxy = sxy.box(xx, yy, z, w) / n - mx * my;
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
    return total / static_cast<double>(count);
}

std::string to_string(WeightOrdering o) { return o == WeightOrdering::AsTables ? "as_tables" : "as_equation"; }

double weighted_score(const std::map<int, double>& per_drf, WeightOrdering ordering) {
    static constexpr double kWeights[5] = {0.35, 0.25, 0.20, 0.15, 0.05};
    static constexpr int kTables[5] = {4, 10, 20, 50, 100};
    static constexpr int kEquation[5] = {100, 50, 20, 10, 4};
    const int* order = ordering == WeightOrdering::AsTables ? kTables : kEquation;
    double s = 0.0;
    for (int i = 0; i < 5; ++i) {
        const auto it = per_drf.find(order[i]);
        if (it == per_drf.end()) throw ArgumentError("weighted score needs DRF " + std::to_string(order[i]));
        s += kWeights[i] * it->second;
    }
    return s;
}

void RoiSphere::validate(const Volume& v) const {
    if (!(diameter_mm >= 19.0 && diameter_mm <= 21.0))
        throw GeometryError("ROI diameter " + std::to_string(diameter_mm) + " mm is outside 20 +- 1 mm");
    const double r = diameter_mm / 2.0;
    for (int d = 0; d < 3; ++d) {
        const double extent = static_cast<double>(v.shape[d]) * v.spacing[d];
        if (center_mm[d] - r < 0.0 || center_mm[d] + r > extent)
            throw GeometryError("ROI sphere leaves the volume along axis " + std::to_string(d));
    }
}

RoiStats roi_suv_stats(const Volume& v, const RoiSphere& roi) {
    roi.validate(v);
    const double r2 = std::pow(roi.diameter_mm / 2.0, 2);
    RoiStats s;
    s.suv_max = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
    // Only scan the sphere's bounding box.
    Index lo[3], hi[3];
    for (int d = 0; d < 3; ++d) {
        const double r = roi.diameter_mm / 2.0;
        lo[d] = std::max<Index>(0, static_cast<Index>(std::floor((roi.center_mm[d] - r) / v.spacing[d])) - 1);
        hi[d] = std::min<Index>(v.shape[d] - 1, static_cast<Index>(std::ceil((roi.center_mm[d] + r) / v.spacing[d])) + 1);
    }
    for (Index z = lo[2]; z <= hi[2]; ++z)
        for (Index y = lo[1]; y <= hi[1]; ++y)
            for (Index x = lo[0]; x <= hi[0]; ++x) {
                const Eigen::Vector3d c((x + 0.5) * v.spacing.x(), (y + 0.5) * v.spacing.y(), (z + 0.5) * v.spacing.z());
                if ((c - roi.center_mm).squaredNorm() > r2) continue;
                const double val = v(x, y, z);
                s.suv_max = std::max(s.suv_max, val);
                sum += val;
                ++s.voxels;
            }
    if (s.voxels == 0) throw GeometryError("ROI sphere contains no voxel centers");
    s.suv_mean = sum / static_cast<double>(s.voxels);
    return s;
}

double percentage_error(double ref_stat, double pred_stat) {
    if (!(ref_stat > 0.0)) throw ArgumentError("percentage error needs a positive reference");
    return 100.0 * std::abs(pred_stat - ref_stat) / ref_stat;
}

TTest paired_ttest(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ArgumentError("paired t-test needs equal-length samples");
    if (a.size() < 2) throw ArgumentError("paired t-test needs at least 2 pairs");
    const std::size_t n = a.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (!(sd > 0.0)) throw DegenerateStatisticError("paired differences have zero variance");
    TTest r;
    r.dof = static_cast<int>(n - 1);
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    const boost::math::students_t dist(r.dof);
    r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
    return r;
}

std::vector<Fold> kfold_split(Index n, Index k, std::uint64_t seed) {
    if (k < 2) throw ArgumentError("k-fold needs k >= 2");
    if (k > n) throw ArgumentError("k-fold needs n >= k");
    std::vector<Index> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), Index(0));
    Rng rng = make_rng(seed, {0xf01d});
    std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<Fold> folds(static_cast<std::size_t>(k));
    Index pos = 0;
    for (Index f = 0; f < k; ++f) {
        const Index size = n / k + (f < n % k ? 1 : 0);
        auto& fold = folds[static_cast<std::size_t>(f)];
        fold.val.assign(ids.begin() + pos, ids.begin() + pos + size);
        fold.train.assign(ids.begin(), ids.begin() + pos);
        fold.train.insert(fold.train.end(), ids.begin() + pos + size, ids.end());
        std::sort(fold.val.begin(), fold.val.end());
        std::sort(fold.train.begin(), fold.train.end());
        pos += size;
    }
    return folds;
}

MetricTriple evaluate_pair(const Volume& ref, const Volume& pred) {
    return {psnr(ref, pred), ssim(ref, pred), nrmse(ref, pred)};
}

void MetricsReport::aggregate() {
    std::map<int, std::pair<MetricTriple, int>> acc;
    for (const auto& r : rows) {
        auto& [m, n] = acc[r.drf];
        m.psnr += r.synthesized.psnr;
        m.ssim += r.synthesized.ssim;
        m.nrmse += r.synthesized.nrmse;
        ++n;
    }
    per_drf.clear();
    for (const auto& [drf, mn] : acc) {
        const double n = mn.second;
        per_drf[drf] = {mn.first.psnr / n, mn.first.ssim / n, mn.first.nrmse / n};
    }
    weighted_as_tables.reset();
    weighted_as_equation.reset();
    const bool complete = std::all_of(DoseLevel::kReduced.begin(), DoseLevel::kReduced.end(),
                                      [&](int d) { return per_drf.contains(d); });
    if (!complete) return;
    auto column = [&](double MetricTriple::*field) {
        std::map<int, double> m;
        for (const auto& [drf, t] : per_drf) m[drf] = t.*field;
        return m;
    };
    for (auto ordering : {WeightOrdering::AsTables, WeightOrdering::AsEquation}) {
        MetricTriple w{weighted_score(column(&MetricTriple::psnr), ordering),
                       weighted_score(column(&MetricTriple::ssim), ordering),
                       weighted_score(column(&MetricTriple::nrmse), ordering)};
        (ordering == WeightOrdering::AsTables ? weighted_as_tables : weighted_as_equation) = w;
    }
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(10);
    out << "subject,drf,psnr,ssim,nrmse,input_psnr,input_ssim,input_nrmse\n";
    for (const auto& r : rows)
        out << r.subject << ',' << r.drf << ',' << r.synthesized.psnr << ',' << r.synthesized.ssim << ','
            << r.synthesized.nrmse << ',' << r.input.psnr << ',' << r.input.ssim << ',' << r.input.nrmse << '\n';
}

namespace {

json triple_json(const MetricTriple& t) { return {{"psnr", t.psnr}, {"ssim", t.ssim}, {"nrmse", t.nrmse}}; }

MetricTriple triple_from(const json& j) {
    return {j.at("psnr").get<double>(), j.at("ssim").get<double>(), j.at("nrmse").get<double>()};
}

json stats_json(const RoiStats& s) { return {{"suv_max", s.suv_max}, {"suv_mean", s.suv_mean}, {"voxels", s.voxels}}; }

RoiStats stats_from(const json& j) {
    return {j.at("suv_max").get<double>(), j.at("suv_mean").get<double>(), j.at("voxels").get<Index>()};
}

} // namespace

void to_json(json& j, const MetricsReport& r) {
    j = json::object();
    j["definitions"] = {{"psnr_peak", "max(ref) - min(ref)"},
                        {"nrmse_normalizer", "max(ref) - min(ref)"},
                        {"ssim_window", "uniform 7x7x7, K1=0.01, K2=0.03, range of ref"}};
    json per = json::object();
    for (const auto& [drf, t] : r.per_drf) per[std::to_string(drf)] = triple_json(t);
    j["per_drf"] = per;
    json weighted = json::object();
    if (r.weighted_as_tables) weighted["as_tables"] = triple_json(*r.weighted_as_tables);
    if (r.weighted_as_equation) weighted["as_equation"] = triple_json(*r.weighted_as_equation);
    j["weighted"] = weighted;
    json rows = json::array();
    for (const auto& s : r.rows)
        rows.push_back({{"subject", s.subject},
                        {"drf", s.drf},
                        {"synthesized", triple_json(s.synthesized)},
                        {"input", triple_json(s.input)}});
    j["subjects"] = rows;
    if (!r.roi.empty()) {
        json roi = json::array();
        for (const auto& x : r.roi)
            roi.push_back({{"subject", x.subject},
                           {"drf", x.drf},
                           {"reference", stats_json(x.reference)},
                           {"synthesized", stats_json(x.synthesized)},
                           {"max_error_pct", x.max_error_pct},
                           {"mean_error_pct", x.mean_error_pct}});
        j["roi"] = roi;
    }
}

MetricsReport report_from_json(const json& j) {
    MetricsReport r;
    try {
        for (const auto& s : j.at("subjects"))
            r.rows.push_back({s.at("subject").get<std::string>(), s.at("drf").get<int>(), triple_from(s.at("synthesized")),
                              triple_from(s.at("input"))});
        for (const auto& [k, v] : j.at("per_drf").items()) r.per_drf[std::stoi(k)] = triple_from(v);
        const auto& w = j.at("weighted");
        if (w.contains("as_tables")) r.weighted_as_tables = triple_from(w.at("as_tables"));
        if (w.contains("as_equation")) r.weighted_as_equation = triple_from(w.at("as_equation"));
        if (j.contains("roi"))
            for (const auto& x : j.at("roi"))
                r.roi.push_back({x.at("subject").get<std::string>(), x.at("drf").get<int>(),
                                 stats_from(x.at("reference")), stats_from(x.at("synthesized")),
                                 x.at("max_error_pct").get<double>(), x.at("mean_error_pct").get<double>()});
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed metrics report: ") + e.what());
    }
    return r;
}

} // namespace aegan
