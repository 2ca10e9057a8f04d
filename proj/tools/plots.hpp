#pragma once

#include "aegan/metrics.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace plots {

struct Series {
    std::string label;
    aegan::MetricsReport report;
};

/// Grouped bars of PSNR, SSIM and NRMSE per DRF, one series per report.
void metrics_by_drf(const std::vector<Series>& series, const std::filesystem::path& path);
/// Both weighted scores per report; missing scores are left blank.
void weighted_scores(const std::vector<Series>& series, const std::filesystem::path& path);
/// Gain over the low-dose input (PSNR, SSIM) per DRF for each report.
void ssp_comparison(const std::vector<Series>& series, const std::filesystem::path& path);
/// Box plots of SUVmax and SUVmean percentage errors per report.
void roi_error_box(const std::vector<Series>& series, const std::filesystem::path& path);

} // namespace plots
