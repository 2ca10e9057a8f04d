#include "aegan/phantom.hpp"

#include "aegan/error.hpp"
#include "aegan/json_reader.hpp"
#include "aegan/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

namespace aegan {

using nlohmann::json;
namespace fs = std::filesystem;

const ScannerProfile& scanner_profile(const std::string& name) {
    static const ScannerProfile a{"A", Eigen::Vector3d(1.65, 1.65, 1.65), 100.0};
    static const ScannerProfile b{"B", Eigen::Vector3d(1.667, 1.667, 2.886), 60.0};
    if (name == "A") return a;
    if (name == "B") return b;
    throw ConfigError("unknown scanner profile '" + name + "' (expected A or B)");
}

namespace {

bool inside_bounds(const Eigen::Vector3d& lo, const Eigen::Vector3d& hi, const Eigen::Vector3d& extent) {
    constexpr double tol = 1e-9;
    return (lo.array() >= -tol).all() && (hi.array() <= extent.array() + tol).all();
}

Eigen::Vector3d extent_mm(const PhantomSpec& s) {
    return Eigen::Vector3d(s.shape.x * s.spacing.x(), s.shape.y * s.spacing.y(), s.shape.z * s.spacing.z());
}

} // namespace

void PhantomSpec::validate() const {
    if (shape.x < 1 || shape.y < 1 || shape.z < 1) throw ValidationError("phantom shape must be positive");
    if (!(spacing.array() > 0.0).all()) throw ValidationError("phantom spacing must be positive");
    if (!(background_suv >= 0.0)) throw ValidationError("background SUV must be >= 0");
    if (!(counts_per_suv > 0.0)) throw ValidationError("counts_per_suv must be > 0");
    if (!(texture_sd >= 0.0)) throw ValidationError("texture_sd must be >= 0");
    (void)aegan::scanner_profile(scanner_profile);
    const Eigen::Vector3d ext = extent_mm(*this);
    for (const auto& o : organs) {
        if (!(o.suv >= 0.0)) throw ValidationError("organ '" + o.name + "' has negative SUV");
        if (!(o.radii_mm.array() > 0.0).all()) throw ValidationError("organ '" + o.name + "' radii must be > 0");
        if (!inside_bounds(o.center_mm - o.radii_mm, o.center_mm + o.radii_mm, ext))
            throw ValidationError("organ '" + o.name + "' lies outside the volume bounds");
    }
    for (const auto& l : lesions) {
        if (!(l.suv >= 0.0)) throw ValidationError("lesion has negative SUV");
        if (!(l.radius_mm > 0.0)) throw ValidationError("lesion radius must be > 0");
        const Eigen::Vector3d r = Eigen::Vector3d::Constant(l.radius_mm);
        if (!inside_bounds(l.center_mm - r, l.center_mm + r, ext))
            throw ValidationError("lesion lies outside the volume bounds");
    }
}

PhantomSpec PhantomSpec::with_profile(const std::string& profile) const {
    const auto& p = aegan::scanner_profile(profile);
    PhantomSpec out = *this;
    out.scanner_profile = p.name;
    out.spacing = p.spacing;
    out.counts_per_suv = p.counts_per_suv;
    return out;
}

namespace {

json vec_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d read_vec(JsonReader& r, const std::string& key) {
    const auto a = r.get<std::vector<double>>(key);
    if (a.size() != 3) r.fail(key, "expected 3 numbers");
    return Eigen::Vector3d(a[0], a[1], a[2]);
}

} // namespace

void to_json(json& j, const PhantomSpec& s) {
    json organs = json::array();
    for (const auto& o : s.organs)
        organs.push_back({{"name", o.name}, {"center_mm", vec_json(o.center_mm)}, {"radii_mm", vec_json(o.radii_mm)},
                          {"suv", o.suv}});
    json lesions = json::array();
    for (const auto& l : s.lesions)
        lesions.push_back({{"center_mm", vec_json(l.center_mm)}, {"radius_mm", l.radius_mm}, {"suv", l.suv}});
    j = json{{"shape", {s.shape.x, s.shape.y, s.shape.z}},
             {"spacing", vec_json(s.spacing)},
             {"background_suv", s.background_suv},
             {"organs", organs},
             {"lesions", lesions},
             {"counts_per_suv", s.counts_per_suv},
             {"scanner_profile", s.scanner_profile},
             {"texture_sd", s.texture_sd}};
}

PhantomSpec parse_phantom_spec(const json& j, const std::string& path) {
    JsonReader r(j, path);
    PhantomSpec s;
    const auto shape = r.get<std::vector<Index>>("shape");
    if (shape.size() != 3) r.fail("shape", "expected 3 integers");
    s.shape = Extent3{shape[0], shape[1], shape[2]};
    s.scanner_profile = r.get_or<std::string>("scanner_profile", "A");
    const auto& profile = scanner_profile(s.scanner_profile);
    s.spacing = r.has("spacing") ? read_vec(r, "spacing") : profile.spacing;
    s.counts_per_suv = r.get_or<double>("counts_per_suv", profile.counts_per_suv);
    s.background_suv = r.get_or<double>("background_suv", 1.0);
    s.texture_sd = r.get_or<double>("texture_sd", 0.0);
    for (auto& o : r.objects("organs")) {
        Ellipsoid e;
        e.name = o.get_or<std::string>("name", "organ");
        e.center_mm = read_vec(o, "center_mm");
        e.radii_mm = read_vec(o, "radii_mm");
        e.suv = o.get<double>("suv");
        o.finish();
        s.organs.push_back(e);
    }
    for (auto& o : r.objects("lesions")) {
        Sphere l;
        l.center_mm = read_vec(o, "center_mm");
        l.radius_mm = o.get<double>("radius_mm");
        l.suv = o.get<double>("suv");
        o.finish();
        s.lesions.push_back(l);
    }
    r.finish();
    return s;
}

void from_json(const json& j, PhantomSpec& s) { s = parse_phantom_spec(j, "phantom"); }

namespace {

// Linear ramp of one voxel width centered on the surface; `dir_radius` is the
// object's radius along the ray from its center through the voxel.
double edge_weight(const Eigen::Vector3d& offset, const Eigen::Vector3d& radii, const Eigen::Vector3d& spacing) {
    const double dist = offset.norm();
    if (dist == 0.0) return 1.0;
    const double rho = offset.cwiseQuotient(radii).norm();
    const double dir_radius = dist / rho;
    const Eigen::Vector3d u = offset / dist;
    const double h = u.cwiseProduct(spacing).norm();
    return std::clamp((dir_radius - dist) / h + 0.5, 0.0, 1.0);
}

void splat(Volume& v, const Eigen::Vector3d& center, const Eigen::Vector3d& radii, double delta,
           const Eigen::ArrayXf* texture) {
    const Eigen::Vector3d& sp = v.spacing;
    Index lo[3], hi[3];
    for (int d = 0; d < 3; ++d) {
        lo[d] = std::max<Index>(0, static_cast<Index>(std::floor((center[d] - radii[d]) / sp[d] - 1.0)));
        hi[d] = std::min<Index>(v.shape[d] - 1, static_cast<Index>(std::ceil((center[d] + radii[d]) / sp[d] + 1.0)));
    }
    for (Index z = lo[2]; z <= hi[2]; ++z)
        for (Index y = lo[1]; y <= hi[1]; ++y)
            for (Index x = lo[0]; x <= hi[0]; ++x) {
                const double w = edge_weight(voxel_center_mm(sp, x, y, z) - center, radii, sp);
                if (w <= 0.0) continue;
                const Index i = v.index(x, y, z);
                const double t = texture ? 1.0 + static_cast<double>((*texture)[i]) : 1.0;
                v.voxels[i] += static_cast<float>(w * delta * t);
            }
}

} // namespace

Volume generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
    spec.validate();
    Volume v(spec.shape, spec.spacing, 0.0f, DoseLevel::full());

    Eigen::ArrayXf texture;
    if (spec.texture_sd > 0.0) {
        Rng rng = make_rng(seed, {0x7e7});
        std::normal_distribution<double> n(0.0, spec.texture_sd);
        texture.resize(v.size());
        for (Index i = 0; i < texture.size(); ++i) texture[i] = static_cast<float>(n(rng));
    }

    for (const auto& o : spec.organs)
        splat(v, o.center_mm, o.radii_mm, o.suv - spec.background_suv, texture.size() ? &texture : nullptr);
    for (const auto& l : spec.lesions)
        splat(v, l.center_mm, Eigen::Vector3d::Constant(l.radius_mm), l.suv - spec.background_suv, nullptr);
    v.voxels = (v.voxels + static_cast<float>(spec.background_suv)).max(0.0f);
    return v;
}

Volume simulate_low_dose(const Volume& full, DoseLevel drf, const PhantomSpec& spec, std::uint64_t seed) {
    if (!full.drf.is_full()) throw ArgumentError("simulate_low_dose expects a full-dose volume");
    if (!(spec.counts_per_suv > 0.0)) throw ValidationError("counts_per_suv must be > 0");
    full.validate();
    if (drf.is_full()) return full;

    Volume out = full;
    out.drf = drf;
    const double to_counts = spec.counts_per_suv / drf.value();
    Rng rng = make_rng(seed, {static_cast<std::uint64_t>(drf.value())});
    std::poisson_distribution<long long> poisson;
    for (Index i = 0; i < full.size(); ++i) {
        const double lambda = static_cast<double>(full.voxels[i]) * to_counts;
        if (lambda <= 0.0) {
            out.voxels[i] = 0.0f;
            continue;
        }
        poisson.param(std::poisson_distribution<long long>::param_type(lambda));
        out.voxels[i] = static_cast<float>(static_cast<double>(poisson(rng)) / to_counts);
    }
    return out;
}

PhantomSpec random_subject_spec(const PhantomSpec& base, std::uint64_t seed) {
    Rng rng(seed);
    auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };

    PhantomSpec s = base;
    s.organs.clear();
    s.lesions.clear();
    s.background_suv = uni(0.5, 1.5);
    const Eigen::Vector3d ext = extent_mm(s);

    auto fit = [&](Eigen::Vector3d c, Eigen::Vector3d r) {
        // Shrink radii until the ellipsoid's bounding box is inside the volume.
        for (int d = 0; d < 3; ++d) r[d] = std::min({r[d], c[d] - 1e-6, ext[d] - c[d] - 1e-6});
        return r;
    };

    Ellipsoid liver;
    liver.name = "liver";
    liver.center_mm = Eigen::Vector3d(uni(0.30, 0.40) * ext.x(), uni(0.40, 0.60) * ext.y(), uni(0.40, 0.60) * ext.z());
    liver.radii_mm = fit(liver.center_mm,
                         Eigen::Vector3d(uni(0.18, 0.24) * ext.x(), uni(0.20, 0.28) * ext.y(), uni(0.25, 0.35) * ext.z()));
    liver.suv = uni(2.0, 3.0);
    s.organs.push_back(liver);

    Ellipsoid kidney;
    kidney.name = "kidney";
    kidney.center_mm = Eigen::Vector3d(uni(0.70, 0.80) * ext.x(), uni(0.30, 0.70) * ext.y(), uni(0.40, 0.60) * ext.z());
    kidney.radii_mm =
        fit(kidney.center_mm, Eigen::Vector3d(uni(0.06, 0.10) * ext.x(), uni(0.08, 0.12) * ext.y(), uni(0.15, 0.25) * ext.z()));
    kidney.suv = uni(3.0, 5.0);
    s.organs.push_back(kidney);

    std::uniform_int_distribution<int> n_lesions(1, 3);
    const int count = n_lesions(rng);
    for (int k = 0; k < count; ++k) {
        Sphere l;
        l.radius_mm = uni(3.0, 8.0);
        l.radius_mm = std::min(l.radius_mm, 0.45 * ext.minCoeff());
        for (int d = 0; d < 3; ++d) l.center_mm[d] = uni(l.radius_mm + 1e-3, ext[d] - l.radius_mm - 1e-3);
        l.suv = uni(4.0, 12.0);
        s.lesions.push_back(l);
    }
    s.validate();
    return s;
}

namespace {

std::string extension(VolumeFormat f) {
    switch (f) {
    case VolumeFormat::Raw: return ".vol";
    case VolumeFormat::Nifti: return ".nii";
    case VolumeFormat::NiftiGz: return ".nii.gz";
    }
    return ".vol";
}

std::string subject_id(Index i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sub-%03lld", static_cast<long long>(i));
    return buf;
}

} // namespace

DatasetManifest build_dataset(const DatasetOptions& opt, const fs::path& out_dir) {
    if (opt.n_subjects < 3) throw ConfigError("build_dataset needs at least 3 subjects");
    if (opt.drfs.empty()) throw ConfigError("build_dataset needs at least one DRF");
    for (auto d : opt.drfs)
        if (d.is_full()) throw ConfigError("DRF list must not contain the full dose");
    opt.base.validate();

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create dataset directory " + out_dir.string());

    DatasetManifest m;
    std::vector<std::string> ids;
    const std::string ext = extension(opt.format);
    for (Index i = 0; i < opt.n_subjects; ++i) {
        const std::uint64_t subject_seed = derive_seed(opt.seed, {static_cast<std::uint64_t>(i)});
        const PhantomSpec spec = random_subject_spec(opt.base, subject_seed);
        Volume full = generate_phantom(spec, subject_seed);
        full.id = subject_id(i);

        ManifestEntry e;
        e.subject = full.id;
        e.full = out_dir / (e.subject + "_full" + ext);
        save_volume(full, e.full);
        for (auto drf : opt.drfs) {
            Volume low = simulate_low_dose(full, drf, spec, derive_seed(subject_seed, {0x10e}));
            const auto path = out_dir / (e.subject + "_drf" + std::to_string(drf.value()) + ext);
            save_volume(low, path);
            e.low[drf.value()] = path;
        }
        const auto& liver = spec.organs.front();
        e.liver_center_mm = {liver.center_mm.x(), liver.center_mm.y(), liver.center_mm.z()};
        e.liver_radii_mm = {liver.radii_mm.x(), liver.radii_mm.y(), liver.radii_mm.z()};
        ids.push_back(e.subject);
        m.entries.push_back(std::move(e));
    }
    m.split = split_dataset(ids, opt.ratios, opt.seed);
    m.save(out_dir / "manifest.json");
    return m;
}

} // namespace aegan
