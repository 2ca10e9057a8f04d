#include "aegan/error.hpp"
#include "aegan/patch.hpp"
#include "aegan/phantom.hpp"
#include "aegan/rng.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

using namespace aegan;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("aegan_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Volume random_volume(Extent3 shape, Rng& rng, float hi = 10.0f) {
    Volume v(shape, Eigen::Vector3d(1.5, 2.0, 2.5), 0.0f, DoseLevel(20), "rand");
    std::uniform_real_distribution<float> u(0.0f, hi);
    for (Index i = 0; i < v.size(); ++i) v.voxels[i] = u(rng);
    return v;
}

} // namespace

TEST_CASE("dose levels are restricted to the six allowed values") {
    for (int d : {1, 4, 10, 20, 50, 100}) CHECK(DoseLevel(d).value() == d);
    for (int d : {0, 2, 5, 25, 1000}) CHECK_THROWS_AS(DoseLevel{d}, ArgumentError);
}

TEST_CASE("raw volume round trip") {
    const auto dir = scratch("raw");
    SUBCASE("zeros read back as zeros") {
        Volume z({2, 2, 2}, Eigen::Vector3d::Ones());
        save_volume(z, dir / "z.vol");
        CHECK(fs::file_size(dir / "z.vol") == 8 * sizeof(float));
        std::ifstream in(dir / "z.vol", std::ios::binary);
        std::vector<char> bytes(32);
        in.read(bytes.data(), 32);
        CHECK(std::all_of(bytes.begin(), bytes.end(), [](char c) { return c == 0; }));
        const auto back = load_volume(dir / "z.vol");
        CHECK(back.shape == Extent3{2, 2, 2});
        CHECK((back.voxels == 0.0f).all());
    }
    SUBCASE("random payload, spacing, drf and id survive exactly") {
        Rng rng = make_rng(1);
        for (auto fmt : {"r.vol", "r.nii", "r.nii.gz"}) {
            auto v = random_volume({7, 5, 3}, rng);
            v.drf = DoseLevel(100);
            save_volume(v, dir / fmt);
            const auto back = load_volume(dir / fmt);
            CAPTURE(fmt);
            CHECK(back.shape == v.shape);
            CHECK((back.voxels == v.voxels).all());
            CHECK(back.spacing.isApprox(v.spacing, 1e-6));
            CHECK(back.drf.value() == 100);
            CHECK(back.id == v.id);
        }
    }
    SUBCASE("a NaN voxel is reported as one invalid voxel") {
        Volume v({2, 2, 2}, Eigen::Vector3d::Ones(), 1.0f);
        v.voxels[3] = std::numeric_limits<float>::quiet_NaN();
        save_volume(Volume({2, 2, 2}, Eigen::Vector3d::Ones()), dir / "n.vol");
        std::fstream f(dir / "n.vol", std::ios::binary | std::ios::in | std::ios::out);
        f.write(reinterpret_cast<const char*>(v.voxels.data()), 32);
        f.close();
        try {
            (void)load_volume(dir / "n.vol");
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find(" 1 ") != std::string::npos);
        }
    }
    SUBCASE("missing file and bad parent are I/O errors") {
        CHECK_THROWS_AS(load_volume(dir / "absent.vol"), IoError);
        CHECK_THROWS_AS(save_volume(Volume(), dir / "no" / "such.vol"), IoError);
    }
}

TEST_CASE("SUV normalization") {
    Volume v({3, 3, 3}, Eigen::Vector3d::Ones(), 20.0f);
    CHECK((normalize_suv(v, 20.0).voxels == 1.0f).all());
    Rng rng = make_rng(2);
    const auto r = random_volume({4, 4, 4}, rng);
    CHECK((normalize_suv(r, 1.0).voxels == r.voxels).all());
    const auto back = denormalize_suv(normalize_suv(r, 20.0), 20.0);
    CHECK(((back.voxels - r.voxels).abs() <= 1e-6f * r.voxels.abs().max(1e-30f)).all());
    CHECK_THROWS_AS(normalize_suv(v, 0.0), ArgumentError);
    CHECK_THROWS_AS(normalize_suv(v, -1.0), ArgumentError);
}

TEST_CASE("dataset split uses largest-remainder sizes and partitions the subjects") {
    // 398 * (0.8, 0.1, 0.1) = (318.4, 39.8, 39.8): floors sum to 396, the two
    // spare subjects go to the .8 remainders.
    CHECK(split_sizes(398, {}) == std::array<Index, 3>{318, 40, 40});
    CHECK(split_sizes(10, {}) == std::array<Index, 3>{8, 1, 1});

    std::vector<std::string> ids;
    for (int i = 0; i < 10; ++i) ids.push_back("s" + std::to_string(i));
    const auto a = split_dataset(ids, {}, 7);
    const auto b = split_dataset(ids, {}, 7);
    CHECK(a == b);
    std::array<int, 3> counts{};
    for (const auto& id : ids) counts[static_cast<std::size_t>(a.at(id))]++;
    CHECK(counts == std::array<int, 3>{8, 1, 1});
    CHECK(a.size() == ids.size());

    CHECK_THROWS_AS(split_dataset(std::vector<std::string>{"a", "b"}, {}, 0), ConfigError);
    CHECK_THROWS_AS(split_dataset(ids, {0.5, 0.5, 0.5}, 0), ConfigError);
}

TEST_CASE("phantom construction") {
    PhantomSpec spec;
    spec.shape = {40, 40, 24};
    spec.spacing = Eigen::Vector3d::Constant(1.65);
    SUBCASE("empty spec is the background") {
        const auto v = generate_phantom(spec, 0);
        CHECK((v.voxels == 1.0f).all());
        CHECK(v.drf.is_full());
    }
    SUBCASE("a sphere's center voxel carries its SUV") {
        // Center on a voxel center: (20 + 0.5) * 1.65.
        spec.lesions.push_back({Eigen::Vector3d(20.5, 20.5, 12.5) * 1.65, 5.0, 8.0});
        const auto v = generate_phantom(spec, 0);
        CHECK(v(20, 20, 12) == doctest::Approx(8.0).epsilon(1e-6));
    }
    SUBCASE("excess integral matches the analytic ellipsoid volume") {
        const Eigen::Vector3d radii(14.0, 10.0, 8.0);
        spec.organs.push_back({"liver", Eigen::Vector3d(33.0, 33.0, 19.8), radii, 5.0});
        const auto v = generate_phantom(spec, 0);
        const double voxel_mm3 = spec.spacing.prod();
        const double measured = (v.voxels.cast<double>() - 1.0).sum() * voxel_mm3;
        const double analytic = 4.0 / 3.0 * std::numbers::pi * radii.prod() * (5.0 - 1.0);
        CHECK(std::abs(measured - analytic) / analytic < 0.05);
    }
    SUBCASE("objects outside the bounds are rejected") {
        spec.organs.push_back({"liver", Eigen::Vector3d(5.0, 33.0, 19.8), Eigen::Vector3d(14, 10, 8), 5.0});
        CHECK_THROWS_AS(generate_phantom(spec, 0), ValidationError);
    }
    SUBCASE("generation is deterministic") {
        const auto s = random_subject_spec(spec, 3);
        CHECK((generate_phantom(s, 9).voxels == generate_phantom(s, 9).voxels).all());
    }
}

TEST_CASE("Poisson thinning preserves the mean and scales the variance by the DRF") {
    PhantomSpec spec;
    spec.shape = {128, 128, 64};
    spec.counts_per_suv = 100.0;
    Volume full(spec.shape, spec.spacing, 4.0f);
    // Full-dose counting noise: Var = v / counts_per_suv.
    const double base_var = 4.0 / spec.counts_per_suv;
    for (int drf : {4, 100}) {
        const auto low = simulate_low_dose(full, DoseLevel(drf), spec, 11);
        const Eigen::ArrayXd x = low.voxels.cast<double>();
        const double mean = x.mean();
        const double var = (x - mean).square().sum() / static_cast<double>(x.size() - 1);
        CAPTURE(drf);
        CHECK(std::abs(mean - 4.0) / 4.0 < 0.01);
        CHECK(std::abs(var / base_var / drf - 1.0) < 0.05);
        CHECK(low.drf.value() == drf);
    }
    const auto same = simulate_low_dose(full, DoseLevel(1), spec, 11);
    CHECK((same.voxels == full.voxels).all());
    const auto a = simulate_low_dose(full, DoseLevel(10), spec, 5);
    const auto b = simulate_low_dose(full, DoseLevel(10), spec, 5);
    CHECK((a.voxels == b.voxels).all());
    Volume neg = full;
    neg.voxels[0] = -1.0f;
    CHECK_THROWS_AS(simulate_low_dose(neg, DoseLevel(4), spec, 0), ValidationError);
}

TEST_CASE("dataset builder writes one full and one low volume per DRF") {
    const auto dir = scratch("ds");
    DatasetOptions opt;
    opt.n_subjects = 3;
    opt.drfs = {DoseLevel(4), DoseLevel(100)};
    opt.base.shape = {32, 32, 16};
    opt.seed = 4;
    const auto m = build_dataset(opt, dir);
    CHECK(m.entries.size() == 3);
    int files = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".vol") ++files;
    CHECK(files == 9);
    for (const auto& e : m.entries) CHECK(e.low.size() == 2);

    const auto dir2 = scratch("ds2");
    const auto m2 = build_dataset(opt, dir2);
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        CHECK((load_volume(m.entries[i].low.at(4)).voxels == load_volume(m2.entries[i].low.at(4)).voxels).all());

    const auto loaded = DatasetManifest::load(dir / "manifest.json");
    CHECK(loaded.entries.size() == 3);
    CHECK(loaded.split == m.split);

    opt.drfs = all_reduced_doses();
    opt.n_subjects = 3;
    const auto m3 = build_dataset(opt, scratch("ds3"));
    std::set<int> keys;
    for (const auto& [d, p] : m3.entries.front().low) keys.insert(d);
    CHECK(keys == std::set<int>{4, 10, 20, 50, 100});
}

TEST_CASE("patch lattice") {
    Volume v({64, 64, 32}, Eigen::Vector3d::Ones());
    CHECK(extract_patches(v, {{32, 32, 16}, {32, 32, 16}}).size() == 8);
    CHECK(extract_patches(v, {{32, 32, 16}, {16, 16, 8}}).size() == 27);
    CHECK(lattice_origins(50, 32, 32) == std::vector<Index>{0, 18});
    CHECK(lattice_origins(20, 16, 32 / 2) == std::vector<Index>{0, 4});
    Volume w({50, 50, 20}, Eigen::Vector3d::Ones());
    const auto ps = extract_patches(w, {{32, 32, 16}, {32, 32, 16}});
    CHECK(ps.size() == 8);
    CHECK(ps.back().origin == Extent3{18, 18, 4});
    CHECK_THROWS_AS(extract_patches(w, {{64, 32, 16}, {32, 32, 16}}), ArgumentError);
}

TEST_CASE("merge averages overlaps") {
    Patch a{{0, 0, 0}, {4, 4, 4}, Eigen::ArrayXf::Constant(64, 1.0f)};
    Patch b{{0, 0, 0}, {4, 4, 4}, Eigen::ArrayXf::Constant(64, 3.0f)};
    CHECK((merge_patches({a, b}, {4, 4, 4}).voxels == 2.0f).all());

    SUBCASE("origin-sum fill against brute force") {
        Volume v({64, 64, 32}, Eigen::Vector3d::Ones());
        auto ps = extract_patches(v, {{32, 32, 16}, {16, 16, 8}});
        for (auto& p : ps) p.values.setConstant(static_cast<float>(p.origin.x + p.origin.y + p.origin.z));
        const auto m = merge_patches(ps, v.shape);
        const Extent3 probes[] = {{0, 0, 0}, {20, 20, 10}, {63, 63, 31}, {31, 16, 8}, {47, 5, 23}};
        for (const auto& q : probes) {
            double sum = 0;
            int n = 0;
            for (const auto& p : ps)
                if (q.x >= p.origin.x && q.x < p.origin.x + 32 && q.y >= p.origin.y && q.y < p.origin.y + 32 &&
                    q.z >= p.origin.z && q.z < p.origin.z + 16) {
                    sum += p.origin.x + p.origin.y + p.origin.z;
                    ++n;
                }
            CHECK(m(q.x, q.y, q.z) == doctest::Approx(sum / n).epsilon(1e-7));
        }
    }
    SUBCASE("holes are a coverage error") {
        CHECK_THROWS_AS(merge_patches({a}, {8, 4, 4}), CoverageError);
    }
    SUBCASE("merge is linear") {
        Rng rng = make_rng(8);
        Volume v({20, 18, 10}, Eigen::Vector3d::Ones());
        const PatchGridSpec g{{8, 8, 4}, {5, 3, 3}};
        auto p = extract_patches(v, g), q = p, mix = p;
        std::normal_distribution<float> n;
        for (std::size_t i = 0; i < p.size(); ++i) {
            for (Index k = 0; k < p[i].values.size(); ++k) {
                p[i].values[k] = n(rng);
                q[i].values[k] = n(rng);
            }
            mix[i].values = 2.0f * p[i].values - 0.5f * q[i].values;
        }
        const auto lhs = merge_patches(mix, v.shape).voxels;
        const auto rhs = 2.0f * merge_patches(p, v.shape).voxels - 0.5f * merge_patches(q, v.shape).voxels;
        CHECK(((lhs - rhs).abs() < 1e-5f).all());
    }
}

TEST_CASE("merge of extracted patches is the identity for random grids") {
    Rng rng = make_rng(42);
    std::uniform_int_distribution<Index> dim(1, 40);
    for (int trial = 0; trial < 50; ++trial) {
        const Extent3 shape{dim(rng), dim(rng), dim(rng) / 2 + 1};
        Extent3 patch, stride;
        for (int d = 0; d < 3; ++d) {
            patch[d] = std::uniform_int_distribution<Index>(1, shape[d])(rng);
            stride[d] = std::uniform_int_distribution<Index>(1, patch[d])(rng);
        }
        const auto v = random_volume(shape, rng);
        const auto m = merge_patches(extract_patches(v, {patch, stride}), shape);
        CAPTURE(trial);
        CHECK((m.voxels == v.voxels).all());
    }
}

TEST_CASE("paired random crops") {
    Rng rng = make_rng(5);
    const auto lo = random_volume({32, 32, 16}, rng), hi = random_volume({32, 32, 16}, rng);
    for (std::uint64_t s = 0; s < 20; ++s) CHECK(random_crop_pair(lo, hi, {32, 32, 16}, s).origin == Extent3{0, 0, 0});

    const auto big_lo = random_volume({64, 64, 32}, rng), big_hi = random_volume({64, 64, 32}, rng);
    const auto p1 = random_crop_pair(big_lo, big_hi, {32, 32, 16}, 77);
    const auto p2 = random_crop_pair(big_lo, big_hi, {32, 32, 16}, 77);
    CHECK(p1.origin == p2.origin);
    CHECK((p1.low.values == crop(big_lo, p1.origin, {32, 32, 16}).values).all());
    CHECK((p1.std.values == crop(big_hi, p1.origin, {32, 32, 16}).values).all());
    CHECK_THROWS_AS(random_crop_pair(big_lo, hi, {8, 8, 8}, 0), ArgumentError);

    SUBCASE("origins are uniform per axis") {
        Volume a({64, 64, 32}, Eigen::Vector3d::Ones()), b = a;
        std::array<std::vector<int>, 3> hist{std::vector<int>(33), std::vector<int>(33), std::vector<int>(17)};
        const int draws = 10000;
        for (int i = 0; i < draws; ++i) {
            const auto o = random_crop_pair(a, b, {32, 32, 16}, static_cast<std::uint64_t>(i)).origin;
            for (int d = 0; d < 3; ++d) hist[static_cast<std::size_t>(d)][static_cast<std::size_t>(o[d])]++;
        }
        for (const auto& h : hist) {
            const double expected = static_cast<double>(draws) / static_cast<double>(h.size());
            double chi2 = 0;
            for (int c : h) chi2 += (c - expected) * (c - expected) / expected;
            const boost::math::chi_squared dist(static_cast<double>(h.size() - 1));
            CHECK(boost::math::cdf(boost::math::complement(dist, chi2)) > 0.01);
        }
    }
}
