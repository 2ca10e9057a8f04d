#pragma once

#include "aegan/volume.hpp"

#include <nlohmann/json_fwd.hpp>

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace aegan {

struct Ellipsoid {
    std::string name;
    Eigen::Vector3d center_mm = Eigen::Vector3d::Zero();
    Eigen::Vector3d radii_mm = Eigen::Vector3d::Ones();
    double suv = 1.0;
};

struct Sphere {
    Eigen::Vector3d center_mm = Eigen::Vector3d::Zero();
    double radius_mm = 1.0;
    double suv = 1.0;
};

/// Scanner presets: "A" is an isotropic 1.65 mm grid, "B" the anisotropic
/// 1.667 x 1.667 x 2.886 mm grid with a lower count calibration.
struct ScannerProfile {
    std::string name;
    Eigen::Vector3d spacing;
    double counts_per_suv;
};

const ScannerProfile& scanner_profile(const std::string& name);

struct PhantomSpec {
    Extent3 shape{64, 64, 32};
    Eigen::Vector3d spacing = Eigen::Vector3d::Constant(1.65);
    double background_suv = 1.0;
    std::vector<Ellipsoid> organs;
    std::vector<Sphere> lesions;
    double counts_per_suv = 100.0;
    std::string scanner_profile = "A";
    /// Relative SD of per-voxel heterogeneity inside organs; 0 disables it.
    double texture_sd = 0.0;

    void validate() const;
    /// Replaces spacing and counts_per_suv with the named profile's values.
    PhantomSpec with_profile(const std::string& profile) const;
};

void to_json(nlohmann::json& j, const PhantomSpec& spec);
/// Strict parse; unknown keys and missing "shape" raise SchemaError under `path`.
PhantomSpec parse_phantom_spec(const nlohmann::json& j, const std::string& path);
void from_json(const nlohmann::json& j, PhantomSpec& spec);

/// World coordinate (mm) of a voxel center; the grid starts at the origin.
inline Eigen::Vector3d voxel_center_mm(const Eigen::Vector3d& spacing, Index x, Index y, Index z) {
    return Eigen::Vector3d((x + 0.5) * spacing.x(), (y + 0.5) * spacing.y(), (z + 0.5) * spacing.z());
}

/// Background plus each object's (suv - background) weighted by a linear
/// one-voxel edge ramp. drf = 1.
Volume generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

/// Poisson thinning of a calibrated count image:
/// out = Poisson(v * counts_per_suv / drf) * drf / counts_per_suv.
Volume simulate_low_dose(const Volume& full, DoseLevel drf, const PhantomSpec& spec, std::uint64_t seed);

/// Randomized subject specs drawn around `base` (shape, spacing, counts kept).
PhantomSpec random_subject_spec(const PhantomSpec& base, std::uint64_t seed);

struct DatasetOptions {
    Index n_subjects = 3;
    std::vector<DoseLevel> drfs = all_reduced_doses();
    PhantomSpec base;
    std::uint64_t seed = 0;
    SplitRatios ratios;
    VolumeFormat format = VolumeFormat::Raw;
};

/// Writes `<out>/sub-NNN_full.<ext>`, `<out>/sub-NNN_drfD.<ext>` and
/// `<out>/manifest.json`. Returns the manifest.
DatasetManifest build_dataset(const DatasetOptions& options, const std::filesystem::path& out_dir);

} // namespace aegan
