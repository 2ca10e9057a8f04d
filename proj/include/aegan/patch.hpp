#pragma once

#include "aegan/volume.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace aegan {

struct PatchGridSpec {
    Extent3 patch_shape{32, 32, 16};
    Extent3 stride{16, 16, 8};

    void validate() const;
};

/// A dense sub-block of a parent volume, x fastest.
struct Patch {
    Extent3 origin{0, 0, 0};
    Extent3 shape{1, 1, 1};
    Eigen::ArrayXf values;

    Index index(Index x, Index y, Index z) const noexcept { return (z * shape.y + y) * shape.x + x; }
    float operator()(Index x, Index y, Index z) const noexcept { return values[index(x, y, z)]; }
    float& operator()(Index x, Index y, Index z) noexcept { return values[index(x, y, z)]; }
};

struct PatchPair {
    Patch low;
    Patch std;
    Extent3 origin{0, 0, 0};
    std::string subject;
    DoseLevel drf;
};

/// Regular lattice 0, s, 2s, ... on one axis with the last origin clamped to n - p.
std::vector<Index> lattice_origins(Index length, Index patch, Index stride);

Patch crop(const Volume& v, Extent3 origin, Extent3 shape);

std::vector<Patch> extract_patches(const Volume& v, const PatchGridSpec& grid);

/// Uniform mean over every patch covering each voxel. Throws CoverageError
/// if any voxel is uncovered. The result has unit spacing and full dose tag;
/// callers copy metadata from the source volume.
Volume merge_patches(const std::vector<Patch>& patches, Extent3 out_shape);

PatchPair random_crop_pair(const Volume& low, const Volume& std, Extent3 patch_shape, std::uint64_t seed);

} // namespace aegan
