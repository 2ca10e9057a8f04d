#include "aegan/volume.hpp"

#include "aegan/error.hpp"
#include "aegan/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

namespace aegan {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "raw volume I/O assumes a little-endian host");

DoseLevel::DoseLevel(int value) : value_(value) {
    if (std::find(kAllowed.begin(), kAllowed.end(), value) == kAllowed.end())
        throw ArgumentError("invalid dose level " + std::to_string(value) + " (allowed: 1, 4, 10, 20, 50, 100)");
}

std::vector<DoseLevel> all_reduced_doses() {
    std::vector<DoseLevel> out;
    for (int d : DoseLevel::kReduced) out.emplace_back(d);
    return out;
}

Volume::Volume(Extent3 shape_, Eigen::Vector3d spacing_, float fill, DoseLevel drf_, std::string id_)
    : shape(shape_), spacing(std::move(spacing_)), drf(drf_), id(std::move(id_)),
      voxels(Eigen::ArrayXf::Constant(shape_.volume(), fill)) {}

void Volume::validate() const {
    if (shape.x < 1 || shape.y < 1 || shape.z < 1)
        throw ValidationError("volume '" + id + "' has empty shape " + to_string(shape));
    if (voxels.size() != shape.volume())
        throw ValidationError("volume '" + id + "' voxel count does not match shape " + to_string(shape));
    if (!(spacing.array() > 0.0).all() || !spacing.allFinite())
        throw ValidationError("volume '" + id + "' spacing must be strictly positive");
    const auto bad = (!voxels.isFinite() || voxels < 0.0f).count();
    if (bad > 0)
        throw ValidationError("volume '" + id + "' has " + std::to_string(bad) +
                              " invalid voxel(s) (negative or non-finite)");
}

bool same_grid(const Volume& a, const Volume& b) noexcept { return a.shape == b.shape; }

VolumeFormat format_from_path(const fs::path& path) {
    const std::string name = path.filename().string();
    auto ends_with = [&](std::string_view suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".vol")) return VolumeFormat::Raw;
    if (ends_with(".nii.gz")) return VolumeFormat::NiftiGz;
    if (ends_with(".nii")) return VolumeFormat::Nifti;
    throw IoError("unsupported volume format: " + path.string());
}

namespace {

fs::path sidecar_path(const fs::path& path) { return fs::path(path.string() + ".json"); }

Volume load_raw(const fs::path& path) {
    std::ifstream meta_in(sidecar_path(path));
    if (!meta_in) throw IoError("cannot open " + sidecar_path(path).string());
    json meta;
    try {
        meta_in >> meta;
    } catch (const json::exception& e) {
        throw IoError("malformed sidecar " + sidecar_path(path).string() + ": " + e.what());
    }

    Volume v;
    try {
        const auto shape = meta.at("shape").get<std::array<Index, 3>>();
        const auto spacing = meta.at("spacing").get<std::array<double, 3>>();
        v.shape = Extent3{shape[0], shape[1], shape[2]};
        v.spacing = Eigen::Vector3d(spacing[0], spacing[1], spacing[2]);
        v.drf = DoseLevel(meta.at("drf").get<int>());
        v.id = meta.value("id", std::string{});
    } catch (const json::exception& e) {
        throw IoError("bad sidecar " + sidecar_path(path).string() + ": " + e.what());
    }
    if (v.shape.x < 1 || v.shape.y < 1 || v.shape.z < 1) throw ValidationError("empty shape in " + path.string());

    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    v.voxels.resize(v.shape.volume());
    const auto bytes = static_cast<std::streamsize>(v.voxels.size() * sizeof(float));
    in.read(reinterpret_cast<char*>(v.voxels.data()), bytes);
    if (in.gcount() != bytes) throw IoError("truncated payload in " + path.string());
    v.validate();
    return v;
}

void save_raw(const Volume& v, const fs::path& path) {
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        out.write(reinterpret_cast<const char*>(v.voxels.data()),
                  static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
        if (!out) throw IoError("write failed for " + path.string());
    }
    json meta{{"shape", {v.shape.x, v.shape.y, v.shape.z}},
              {"spacing", {v.spacing.x(), v.spacing.y(), v.spacing.z()}},
              {"drf", v.drf.value()},
              {"id", v.id}};
    std::ofstream out(sidecar_path(path), std::ios::trunc);
    if (!out) throw IoError("cannot write " + sidecar_path(path).string());
    out << meta.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + sidecar_path(path).string());
}

} // namespace

Volume load_volume(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("no such file: " + path.string());
    switch (format_from_path(path)) {
    case VolumeFormat::Raw: return load_raw(path);
    case VolumeFormat::Nifti:
    case VolumeFormat::NiftiGz: return load_nifti(path);
    }
    throw IoError("unsupported volume format: " + path.string());
}

void save_volume(const Volume& v, const fs::path& path) {
    if (v.voxels.size() != v.shape.volume()) throw ValidationError("volume voxel count does not match its shape");
    const auto parent = path.parent_path();
    if (!parent.empty() && !fs::is_directory(parent)) throw IoError("parent directory missing: " + parent.string());
    switch (format_from_path(path)) {
    case VolumeFormat::Raw: save_raw(v, path); return;
    case VolumeFormat::Nifti:
    case VolumeFormat::NiftiGz: save_nifti(v, path); return;
    }
}

Volume normalize_suv(const Volume& v, double scale) {
    if (!(scale > 0.0)) throw ArgumentError("SUV scale must be positive");
    Volume out = v;
    out.voxels = (v.voxels.cast<double>() / scale).cast<float>();
    return out;
}

Volume denormalize_suv(const Volume& v, double scale) {
    if (!(scale > 0.0)) throw ArgumentError("SUV scale must be positive");
    Volume out = v;
    out.voxels = (v.voxels.cast<double>() * scale).cast<float>();
    return out;
}

const char* to_string(Bucket b) noexcept {
    switch (b) {
    case Bucket::Train: return "train";
    case Bucket::Val: return "val";
    case Bucket::Test: return "test";
    }
    return "?";
}

Bucket bucket_from_string(const std::string& s) {
    if (s == "train") return Bucket::Train;
    if (s == "val") return Bucket::Val;
    if (s == "test") return Bucket::Test;
    throw ConfigError("unknown split bucket '" + s + "'");
}

std::array<Index, 3> split_sizes(Index count, const SplitRatios& r) {
    const std::array<double, 3> ratios{r.train, r.val, r.test};
    for (double x : ratios)
        if (!(x > 0.0)) throw ConfigError("split ratios must be positive");
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
    if (count < 3) throw ConfigError("need at least 3 subjects to fill train/val/test, got " + std::to_string(count));

    std::array<Index, 3> sizes{};
    std::array<double, 3> remainder{};
    Index assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = ratios[i] * static_cast<double>(count);
        sizes[i] = static_cast<Index>(std::floor(exact + 1e-9));
        remainder[i] = exact - static_cast<double>(sizes[i]);
        assigned += sizes[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b] + 1e-12; });
    for (Index k = 0; assigned < count; ++k, ++assigned) ++sizes[order[k % 3]];
    return sizes;
}

SplitMap split_dataset(std::span<const std::string> subjects, const SplitRatios& ratios, std::uint64_t seed) {
    const auto sizes = split_sizes(static_cast<Index>(subjects.size()), ratios);
    std::vector<std::string> shuffled(subjects.begin(), subjects.end());
    std::sort(shuffled.begin(), shuffled.end());
    if (std::adjacent_find(shuffled.begin(), shuffled.end()) != shuffled.end())
        throw ConfigError("duplicate subject ids in split input");
    Rng rng = make_rng(seed, {0x5917});
    std::shuffle(shuffled.begin(), shuffled.end(), rng);

    SplitMap out;
    std::size_t i = 0;
    for (int b = 0; b < 3; ++b)
        for (Index k = 0; k < sizes[b]; ++k) out.emplace(shuffled[i++], static_cast<Bucket>(b));
    return out;
}

void DatasetManifest::save(const fs::path& path) const {
    const fs::path base = path.parent_path();
    json subjects = json::array();
    for (const auto& e : entries) {
        json low = json::object();
        for (const auto& [drf, p] : e.low) low[std::to_string(drf)] = fs::relative(p, base).generic_string();
        json s{{"id", e.subject}, {"full", fs::relative(e.full, base).generic_string()}, {"low", low}};
        if (!e.liver_center_mm.empty()) {
            s["liver_center_mm"] = e.liver_center_mm;
            s["liver_radii_mm"] = e.liver_radii_mm;
        }
        subjects.push_back(std::move(s));
    }
    json split = json::object();
    for (const auto& [id, b] : this->split) split[id] = to_string(b);

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << json{{"schema", 1}, {"subjects", subjects}, {"split", split}}.dump(2) << '\n';
    if (!out) throw IoError("write failed for manifest " + path.string());
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    const fs::path base = path.parent_path();
    DatasetManifest m;
    try {
        json j;
        in >> j;
        for (const auto& s : j.at("subjects")) {
            ManifestEntry e;
            e.subject = s.at("id").get<std::string>();
            e.full = base / s.at("full").get<std::string>();
            for (const auto& [k, v] : s.at("low").items()) e.low[std::stoi(k)] = base / v.get<std::string>();
            if (s.contains("liver_center_mm")) {
                e.liver_center_mm = s.at("liver_center_mm").get<std::vector<double>>();
                e.liver_radii_mm = s.at("liver_radii_mm").get<std::vector<double>>();
            }
            m.entries.push_back(std::move(e));
        }
        for (const auto& [k, v] : j.at("split").items()) m.split[k] = bucket_from_string(v.get<std::string>());
    } catch (const json::exception& e) {
        throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

std::vector<const ManifestEntry*> DatasetManifest::subjects_in(Bucket b) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries) {
        auto it = split.find(e.subject);
        if (it != split.end() && it->second == b) out.push_back(&e);
    }
    return out;
}

const ManifestEntry& DatasetManifest::entry(const std::string& subject) const {
    for (const auto& e : entries)
        if (e.subject == subject) return e;
    throw DataError("subject '" + subject + "' not in manifest");
}

void DatasetManifest::validate() const {
    for (const auto& e : entries) {
        if (e.full.empty()) throw ValidationError("subject '" + e.subject + "' has no full-dose volume");
        if (e.low.empty()) throw ValidationError("subject '" + e.subject + "' has no low-dose volume");
        for (const auto& [drf, p] : e.low) (void)DoseLevel(drf);
        if (!split.contains(e.subject)) throw ValidationError("subject '" + e.subject + "' missing from split");
    }
}

} // namespace aegan
