#pragma once

#include "aegan/tensor.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace aegan {

/// Dose reduction factor. 1 is full dose.
class DoseLevel {
public:
    static constexpr std::array<int, 6> kAllowed{1, 4, 10, 20, 50, 100};
    static constexpr std::array<int, 5> kReduced{4, 10, 20, 50, 100};

    constexpr DoseLevel() = default;
    /// Throws ArgumentError for values outside {1, 4, 10, 20, 50, 100}.
    explicit DoseLevel(int value);

    static constexpr DoseLevel full() { return DoseLevel(); }

    constexpr int value() const noexcept { return value_; }
    constexpr bool is_full() const noexcept { return value_ == 1; }

    friend constexpr auto operator<=>(const DoseLevel&, const DoseLevel&) = default;

private:
    int value_ = 1;
};

std::vector<DoseLevel> all_reduced_doses();

/// 3-D grid of SUV voxels, x fastest, z slowest.
struct Volume {
    Extent3 shape{1, 1, 1};
    Eigen::Vector3d spacing = Eigen::Vector3d::Ones();
    DoseLevel drf;
    std::string id;
    Eigen::ArrayXf voxels = Eigen::ArrayXf::Zero(1);

    Volume() = default;
    Volume(Extent3 shape_, Eigen::Vector3d spacing_, float fill = 0.0f, DoseLevel drf_ = DoseLevel(), std::string id_ = {});

    Index index(Index x, Index y, Index z) const noexcept { return (z * shape.y + y) * shape.x + x; }
    float& operator()(Index x, Index y, Index z) noexcept { return voxels[index(x, y, z)]; }
    float operator()(Index x, Index y, Index z) const noexcept { return voxels[index(x, y, z)]; }
    Index size() const noexcept { return voxels.size(); }

    /// Throws ValidationError if any invariant is broken.
    void validate() const;
};

bool same_grid(const Volume& a, const Volume& b) noexcept;

enum class VolumeFormat { Raw, Nifti, NiftiGz };

/// Format from the extension: .vol, .nii, .nii.gz.
VolumeFormat format_from_path(const std::filesystem::path& path);

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

/// NIfTI-1 single-file (.nii / .nii.gz). `drf` and `id` are carried in the
/// header's description field.
Volume load_nifti(const std::filesystem::path& path);
void save_nifti(const Volume& v, const std::filesystem::path& path);

inline constexpr double kDefaultSuvScale = 20.0;

Volume normalize_suv(const Volume& v, double scale = kDefaultSuvScale);
Volume denormalize_suv(const Volume& v, double scale = kDefaultSuvScale);

enum class Bucket { Train, Val, Test };

const char* to_string(Bucket b) noexcept;
Bucket bucket_from_string(const std::string& s);

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

using SplitMap = std::map<std::string, Bucket>;

/// Largest-remainder bucket sizes for `count` items; ties go to the earlier bucket.
std::array<Index, 3> split_sizes(Index count, const SplitRatios& ratios);

/// Seeded subject-level split. Deterministic; a partition of `subjects`.
SplitMap split_dataset(std::span<const std::string> subjects, const SplitRatios& ratios, std::uint64_t seed);

struct ManifestEntry {
    std::string subject;
    std::filesystem::path full;
    std::map<int, std::filesystem::path> low;
    /// World-space (mm) liver center and radii, if the generator recorded them.
    std::vector<double> liver_center_mm;
    std::vector<double> liver_radii_mm;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    SplitMap split;

    /// Paths are stored relative to the manifest directory.
    void save(const std::filesystem::path& path) const;
    static DatasetManifest load(const std::filesystem::path& path);

    std::vector<const ManifestEntry*> subjects_in(Bucket b) const;
    const ManifestEntry& entry(const std::string& subject) const;

    void validate() const;
};

} // namespace aegan
