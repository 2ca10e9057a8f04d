#include "aegan/patch.hpp"

#include "aegan/error.hpp"
#include "aegan/rng.hpp"

#include <random>

namespace aegan {

void PatchGridSpec::validate() const {
    for (int d = 0; d < 3; ++d) {
        if (patch_shape[d] < 1) throw ArgumentError("patch shape must be positive, got " + to_string(patch_shape));
        if (stride[d] < 1 || stride[d] > patch_shape[d])
            throw ArgumentError("stride " + to_string(stride) + " must satisfy 1 <= stride <= patch " +
                                to_string(patch_shape));
    }
}

std::vector<Index> lattice_origins(Index length, Index patch, Index stride) {
    if (patch > length)
        throw ArgumentError("patch extent " + std::to_string(patch) + " exceeds volume extent " + std::to_string(length));
    std::vector<Index> out;
    for (Index o = 0;; o += stride) {
        if (o + patch >= length) {
            out.push_back(length - patch);
            break;
        }
        out.push_back(o);
    }
    return out;
}

Patch crop(const Volume& v, Extent3 origin, Extent3 shape) {
    for (int d = 0; d < 3; ++d)
        if (origin[d] < 0 || origin[d] + shape[d] > v.shape[d])
            throw ArgumentError("crop " + to_string(origin) + "+" + to_string(shape) + " exceeds volume " +
                                to_string(v.shape));
    Patch p{origin, shape, Eigen::ArrayXf(shape.volume())};
    for (Index z = 0; z < shape.z; ++z)
        for (Index y = 0; y < shape.y; ++y) {
            const Index src = v.index(origin.x, origin.y + y, origin.z + z);
            p.values.segment(p.index(0, y, z), shape.x) = v.voxels.segment(src, shape.x);
        }
    return p;
}

std::vector<Patch> extract_patches(const Volume& v, const PatchGridSpec& grid) {
    grid.validate();
    const auto xs = lattice_origins(v.shape.x, grid.patch_shape.x, grid.stride.x);
    const auto ys = lattice_origins(v.shape.y, grid.patch_shape.y, grid.stride.y);
    const auto zs = lattice_origins(v.shape.z, grid.patch_shape.z, grid.stride.z);
    std::vector<Patch> out;
    out.reserve(xs.size() * ys.size() * zs.size());
    for (Index z : zs)
        for (Index y : ys)
            for (Index x : xs) out.push_back(crop(v, Extent3{x, y, z}, grid.patch_shape));
    return out;
}

Volume merge_patches(const std::vector<Patch>& patches, Extent3 out_shape) {
    // Double accumulation keeps k identical float copies summing exactly.
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(out_shape.volume());
    Eigen::ArrayXi count = Eigen::ArrayXi::Zero(out_shape.volume());
    Volume out(out_shape, Eigen::Vector3d::Ones());
    for (const auto& p : patches) {
        if (p.values.size() != p.shape.volume()) throw ArgumentError("patch payload does not match its shape");
        for (int d = 0; d < 3; ++d)
            if (p.origin[d] < 0 || p.origin[d] + p.shape[d] > out_shape[d])
                throw ArgumentError("patch at " + to_string(p.origin) + " exceeds output " + to_string(out_shape));
        for (Index z = 0; z < p.shape.z; ++z)
            for (Index y = 0; y < p.shape.y; ++y) {
                const Index dst = out.index(p.origin.x, p.origin.y + y, p.origin.z + z);
                sum.segment(dst, p.shape.x) += p.values.segment(p.index(0, y, z), p.shape.x).cast<double>();
                count.segment(dst, p.shape.x) += 1;
            }
    }
    const auto holes = (count == 0).count();
    if (holes > 0) throw CoverageError("merge left " + std::to_string(holes) + " uncovered voxel(s)");
    out.voxels = (sum / count.cast<double>()).cast<float>();
    return out;
}

PatchPair random_crop_pair(const Volume& low, const Volume& std, Extent3 patch_shape, std::uint64_t seed) {
    if (!same_grid(low, std))
        throw ArgumentError("paired crop needs equal shapes, got " + to_string(low.shape) + " and " + to_string(std.shape));
    Rng rng = make_rng(seed, {0xc209});
    Extent3 origin;
    for (int d = 0; d < 3; ++d) {
        if (patch_shape[d] < 1 || patch_shape[d] > low.shape[d])
            throw ArgumentError("patch " + to_string(patch_shape) + " does not fit volume " + to_string(low.shape));
        origin[d] = std::uniform_int_distribution<Index>(0, low.shape[d] - patch_shape[d])(rng);
    }
    PatchPair pair;
    pair.origin = origin;
    pair.low = crop(low, origin, patch_shape);
    pair.std = crop(std, origin, patch_shape);
    pair.subject = std.id.empty() ? low.id : std.id;
    pair.drf = low.drf;
    return pair;
}

} // namespace aegan
