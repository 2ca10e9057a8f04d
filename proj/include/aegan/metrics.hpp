#pragma once

#include "aegan/volume.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace aegan {

/// Returned by psnr() for identical volumes.
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// 20 log10(range(ref) / sqrt(MSE)).
double psnr(const Volume& ref, const Volume& pred);

struct SsimOptions {
    Index window = 7;
    double k1 = 0.01;
    double k2 = 0.03;
    /// Overrides range(ref) as the dynamic range.
    std::optional<double> data_range;
};

/// Mean local SSIM over every valid position of a uniform cubic window.
double ssim(const Volume& ref, const Volume& pred, const SsimOptions& opts = {});

/// 100 * RMSE / range(ref).
double nrmse(const Volume& ref, const Volume& pred);

enum class WeightOrdering { AsEquation, AsTables };

std::string to_string(WeightOrdering o);

/// Convex combination of per-DRF scores with weights 35/25/20/15/5 %.
/// AsEquation puts 35 % on DRF 100; AsTables puts it on DRF 4.
double weighted_score(const std::map<int, double>& per_drf, WeightOrdering ordering = WeightOrdering::AsTables);

struct RoiSphere {
    Eigen::Vector3d center_mm = Eigen::Vector3d::Zero();
    double diameter_mm = 20.0;

    /// Diameter within 20 +- 1 mm and the sphere inside the volume.
    void validate(const Volume& v) const;
};

struct RoiStats {
    double suv_max = 0;
    double suv_mean = 0;
    Index voxels = 0;
};

/// Max and mean over voxels whose centers lie inside the sphere.
RoiStats roi_suv_stats(const Volume& v, const RoiSphere& roi);

double percentage_error(double ref_stat, double pred_stat);

struct TTest {
    double t = 0;
    double p = 1;
    int dof = 0;
};

/// Two-sided paired t-test with n - 1 degrees of freedom.
TTest paired_ttest(std::span<const double> a, std::span<const double> b);

struct Fold {
    std::vector<Index> train;
    std::vector<Index> val;
};

/// Seeded k-fold partition of 0..n-1; the first n % k folds get one extra.
std::vector<Fold> kfold_split(Index n, Index k, std::uint64_t seed);

struct MetricTriple {
    double psnr = 0;
    double ssim = 0;
    double nrmse = 0;
};

MetricTriple evaluate_pair(const Volume& ref, const Volume& pred);

struct SubjectMetrics {
    std::string subject;
    int drf = 1;
    MetricTriple synthesized;
    MetricTriple input;
};

struct RoiRecord {
    std::string subject;
    int drf = 1;
    RoiStats reference;
    RoiStats synthesized;
    double max_error_pct = 0;
    double mean_error_pct = 0;
};

struct MetricsReport {
    std::vector<SubjectMetrics> rows;
    std::map<int, MetricTriple> per_drf;
    std::optional<MetricTriple> weighted_as_tables;
    std::optional<MetricTriple> weighted_as_equation;
    std::vector<RoiRecord> roi;

    /// Fills per_drf as subject means, and both weighted scores when all
    /// five reduced DRFs are present.
    void aggregate();
    void write_csv(const std::filesystem::path& path) const;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);

} // namespace aegan
