#include "aegan/error.hpp"
#include "aegan/gan.hpp"
#include "aegan/metrics.hpp"
#include "aegan/nn/networks.hpp"
#include "aegan/nn/ops.hpp"
#include "aegan/patch.hpp"
#include "aegan/phantom.hpp"
#include "aegan/rng.hpp"
#include "aegan/ssp.hpp"

#include "fd_check.hpp"
#include "published_scores.hpp"

#include <CLI11.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

using namespace aegan;
using nn::Var;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
};

std::string fmt(double v, int digits = 6) {
    std::ostringstream s;
    s << std::setprecision(digits) << v;
    return s.str();
}

std::map<int, double> drf_map(const std::array<double, 5>& s) {
    return {{4, s[0]}, {10, s[1]}, {20, s[2]}, {50, s[3]}, {100, s[4]}};
}

// ---------------------------------------------------------------------------

Outcome weighted_reproduction() {
    double worst = 0;
    std::string where;
    int cells = 0;
    for (const auto& r : kPublishedRows) {
        const std::pair<const std::array<double, 5>*, double> cols[3] = {
            {&r.psnr, r.psnr_avg}, {&r.nrmse, r.nrmse_avg}, {&r.ssim, r.ssim_avg}};
        for (const auto& [row, avg] : cols) {
            const double err = std::abs(weighted_score(drf_map(*row), WeightOrdering::AsTables) - avg);
            ++cells;
            if (err > worst) {
                worst = err;
                where = std::string(r.dataset) + "/" + r.method;
            }
        }
    }
    const double psnr = weighted_score(drf_map({60.344, 58.298, 56.752, 54.795, 53.079}));
    const double nrmse = weighted_score(drf_map({0.144, 0.172, 0.195, 0.240, 0.294}));
    return {worst <= 0.002 && std::abs(psnr - 57.919) <= 0.002 && std::abs(nrmse - 0.183) <= 0.002,
            std::to_string(cells) + " AVG cells, max |err| " + fmt(worst, 3) + " (" + where + "); SS-AEGAN Siemens PSNR " +
                fmt(psnr, 7) + ", IBRB Siemens NRMSE " + fmt(nrmse, 4)};
}

Outcome ordering_discrepancy() {
    const auto row = drf_map({60.344, 58.298, 56.752, 54.795, 53.079});
    const double eq = weighted_score(row, WeightOrdering::AsEquation);
    const double tab = weighted_score(row, WeightOrdering::AsTables);
    return {std::abs(eq - 55.389) <= 0.001 && std::abs(eq - tab) > 0.002,
            "as_equation " + fmt(eq, 7) + " vs as_tables " + fmt(tab, 7)};
}

Outcome loss_closed_forms() {
    std::vector<std::pair<std::string, double>> errs;
    auto add = [&](const std::string& name, double got, double want) { errs.emplace_back(name, std::abs(got - want)); };

    const std::vector<double> z3{0, 0, 0}, z4{0, 0, 0, 0};
    const std::vector<double> p3{std::log(0.7), std::log(0.2), std::log(0.1)};
    const std::vector<double> p4{std::log(0.1), std::log(0.6), std::log(0.2), std::log(0.1)};
    add("classification ln3", loss_classification(z3, 2), std::log(3.0));
    add("classification -ln0.7", loss_classification(p3, 0), -std::log(0.7));
    add("rotation ln4", loss_rotation(z4, 3), std::log(4.0));
    add("rotation -ln0.6", loss_rotation(p4, 1), -std::log(0.6));

    const int pair4[4] = {1, 0, 3, 2};
    add("cpc ln3", loss_cpc({{1, 1}, {1, 1}, {1, 1}, {1, 1}}, pair4, 0.5), std::log(3.0));
    add("cpc ln(1+2e^-2)", loss_cpc({{1, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 1, 0}}, pair4, 0.5),
        std::log(1 + 2 * std::exp(-2.0)));

    Patch a{{0, 0, 0}, {8, 8, 8}, Eigen::ArrayXf::Constant(512, 1.25f)};
    Patch b = a;
    b.values += 0.5f;
    add("restoration d", loss_restoration(a, b), 0.5);
    add("ssp total", ssp_total_loss({1, 1, 1, 1}, {1, 1, 1, 1}), 4.0);

    const Extent3 e{32, 32, 16};
    const Var<double> vs(Tensor<double>(1, 1, e, 1.0)), vl(Tensor<double>(1, 1, e, 0.25)),
        p(Tensor<double>(1, 1, e, 1.5));
    add("content gap 0.5", content_loss(p, vs).value().item(), 0.5);
    const auto zero_gate = combine(p, vl, Var<double>(Tensor<double>(1, 1, e, 0.0)), ResidualMode::AE);
    add("residual gate 0", residual_loss(zero_gate, vs, vl).value().item(), 0.75);

    nn::Discriminator<double> d(nn::NetworkSpec::discriminator(2), 1);
    for (auto& prm : d.state().params)
        if (prm.name.starts_with("block4.conv")) prm.var.mutable_value().array().setZero();
    const auto adv = adversarial_losses(d, vl, vs, p);
    add("adversarial d (D=0.5)", adv.d_loss.value().item(), 0.5);
    add("adversarial g (D=0.5)", adv.g_loss.value().item(), 0.25);
    add("total 311", total_generator_loss({1, 1, 1}, 300, 10, 1), 311.0);

    double worst = 0;
    std::string which;
    for (const auto& [n, e2] : errs)
        if (e2 >= worst) {
            worst = e2;
            which = n;
        }
    return {worst < 1e-6, std::to_string(errs.size()) + " cases, max |err| " + fmt(worst, 3) + " (" + which + ")"};
}

Outcome residual_algebra() {
    Rng rng = make_rng(4);
    const Extent3 e{32, 32, 16};
    auto float_valued = [&](Index n) {
        Tensor<double> t(n, 1, e);
        std::uniform_real_distribution<float> u(-2.0f, 3.0f);
        for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
        return t;
    };
    auto dyadic = [&](Index n) {
        Tensor<double> t(n, 1, e);
        std::uniform_int_distribution<int> k(-32, 32);
        for (Index i = 0; i < t.size(); ++i) t[i] = k(rng) / 8.0;
        return t;
    };
    auto same = [](const Tensor<double>& a, const Tensor<double>& b) { return (a.array() == b.array()).all(); };
    int ok_one = 0, ok_zero = 0, ok_res = 0;
    const int trials = 20;
    const double steps[6] = {-2, -1, -0.5, 0.5, 1, 2};
    std::uniform_int_distribution<int> pick(0, 5);
    for (int t = 0; t < trials; ++t) {
        const Var<double> p(float_valued(2)), vl(float_valued(2));
        ok_one += same(combine(p, vl, Var<double>(Tensor<double>(2, 1, e, 1.0)), ResidualMode::AE).refined.value(),
                       p.value());
        ok_zero += same(combine(p, vl, Var<double>(Tensor<double>(2, 1, e, 0.0)), ResidualMode::AE).refined.value(),
                        vl.value());

        const Tensor<double> l = dyadic(2), s = dyadic(2);
        Tensor<double> pp = l, gate = l;
        for (Index i = 0; i < l.size(); ++i) {
            const double rt = steps[pick(rng)];
            pp[i] = l[i] + rt;
            gate[i] = (s[i] - l[i]) / rt;
        }
        const Var<double> lv(l), sv(s);
        const auto bundle = combine(Var<double>(pp), lv, Var<double>(gate), ResidualMode::AE);
        ok_res += residual_loss(bundle, sv, lv).value().item() == 0.0 && same(bundle.refined.value(), s);
    }
    return {ok_one == trials && ok_zero == trials && ok_res == trials,
            "exact on " + std::to_string(ok_one) + "/" + std::to_string(ok_zero) + "/" + std::to_string(ok_res) +
                " of " + std::to_string(trials) + " random tensor pairs (gate 1 / gate 0 / zero residual loss)"};
}

Outcome metric_oracles() {
    Rng rng = make_rng(5);
    Volume v({16, 16, 16}, Eigen::Vector3d::Ones());
    std::uniform_real_distribution<float> u(0.0f, 5.0f);
    for (Index i = 0; i < v.size(); ++i) v.voxels[i] = u(rng);
    const bool identity = psnr(v, v) == kInfinitePsnr && ssim(v, v) == 1.0 && nrmse(v, v) == 0.0;

    Volume ref({16, 16, 16}, Eigen::Vector3d::Ones(), 0.0f);
    ref(1, 2, 3) = 10.0f;
    Volume off = ref;
    off.voxels += 1.0f;
    const double db = psnr(ref, off);

    const Volume one({8, 8, 8}, Eigen::Vector3d::Ones(), 1.0f), half({8, 8, 8}, Eigen::Vector3d::Ones(), 0.5f);
    SsimOptions o;
    o.data_range = 1.0;
    const double c1 = 1e-4;
    const double closed = (2 * 0.5 + c1) / (1.25 + c1);
    const double s = ssim(one, half, o);

    Eigen::ArrayXf noise(v.size());
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (Index i = 0; i < noise.size(); ++i) noise[i] = g(rng);
    bool monotone = true;
    double lp = kInfinitePsnr, ln = 0;
    for (int k = 1; k <= 10; ++k) {
        Volume pr = v;
        pr.voxels += 0.1f * static_cast<float>(k) * noise;
        const double pk = psnr(v, pr), nk = nrmse(v, pr);
        monotone = monotone && pk < lp && nk > ln;
        lp = pk;
        ln = nk;
    }
    return {identity && std::abs(db - 20.0) < 1e-9 && std::abs(s - closed) < 1e-5 && monotone,
            std::string("identity ") + (identity ? "exact" : "broken") + ", offset case " + fmt(db, 12) +
                " dB, constant-pair SSIM " + fmt(s, 7) + " (closed form " + fmt(closed, 7) + "), noise sweep " +
                (monotone ? "monotone" : "not monotone")};
}

Outcome patch_round_trip() {
    Rng rng = make_rng(6);
    int exact = 0, clamped = 0;
    for (int t = 0; t < 50; ++t) {
        Extent3 shape, patch, stride;
        for (int a = 0; a < 3; ++a) {
            shape[a] = std::uniform_int_distribution<Index>(4, 40)(rng);
            patch[a] = std::uniform_int_distribution<Index>(1, shape[a])(rng);
            stride[a] = std::uniform_int_distribution<Index>(1, patch[a])(rng);
        }
        Volume v(shape, Eigen::Vector3d(1.2, 1.5, 2.0));
        std::uniform_real_distribution<float> u(-3.0f, 7.0f);
        for (Index i = 0; i < v.size(); ++i) v.voxels[i] = u(rng);
        const PatchGridSpec grid{patch, stride};
        bool clamp = false;
        for (int a = 0; a < 3; ++a) clamp = clamp || (shape[a] - patch[a]) % stride[a] != 0;
        clamped += clamp;
        exact += (merge_patches(extract_patches(v, grid), shape).voxels == v.voxels).all();
    }
    return {exact == 50, std::to_string(exact) + "/50 exact, " + std::to_string(clamped) + " with a clamped last patch"};
}

Outcome dose_statistics() {
    PhantomSpec spec;
    spec.counts_per_suv = 100;
    Volume flat({128, 128, 64}, Eigen::Vector3d::Constant(1.65), 4.0f);
    bool stats = true;
    std::string detail;
    for (int drf : {4, 100}) {
        const Volume low = simulate_low_dose(flat, DoseLevel(drf), spec, 17);
        const double mean = low.voxels.cast<double>().mean();
        const double var = (low.voxels.cast<double>() - mean).square().mean();
        // Counts are Poisson(4 * 100 / drf), rescaled: var = 4 * drf / 100.
        const double ratio = var / (4.0 * drf / spec.counts_per_suv);
        const double mean_err = std::abs(mean - 4.0) / 4.0;
        stats = stats && mean_err < 0.01 && std::abs(ratio - 1) < 0.05;
        detail += "DRF " + std::to_string(drf) + ": mean err " + fmt(100 * mean_err, 3) + "%, var/expected " +
                  fmt(ratio, 4) + "; ";
    }
    const PhantomSpec subject = random_subject_spec(spec, 3);
    const Volume full = generate_phantom(subject, 3);
    std::vector<double> avg;
    for (int drf : DoseLevel::kReduced) {
        double s = 0;
        for (int seed = 0; seed < 10; ++seed) s += nrmse(full, simulate_low_dose(full, DoseLevel(drf), subject, 100 + seed));
        avg.push_back(s / 10);
    }
    const bool ordered = std::is_sorted(avg.begin(), avg.end());
    detail += "NRMSE by DRF";
    for (double a : avg) detail += " " + fmt(a, 4);
    return {stats && ordered, detail + (ordered ? " (non-decreasing)" : " (NOT ordered)")};
}

Outcome shapes_and_gradients() {
    using test::random_tensor;
    int shapes_ok = 0;
    nn::PixelNet<float> pix(nn::NetworkSpec::pixel_net(2), 2);
    nn::AeNet<float> ae(nn::NetworkSpec::ae_net(2), 3);
    const Extent3 shapes[5] = {{32, 32, 16}, {64, 32, 16}, {32, 64, 32}, {96, 32, 16}, {64, 64, 48}};
    for (Extent3 e : shapes) {
        Var<float> x(Tensor<float>(2, 1, e, 1.0f));
        shapes_ok += pix(x).value().same_shape(x.value()) && ae(x).value().same_shape(x.value());
    }

    Rng rng = make_rng(8);
    int missing = 0, total = 0;
    auto count = [&](auto& net) {
        for (auto& p : net.state().params) {
            ++total;
            if (!p.var.has_grad() || p.var.grad().array().abs().maxCoeff() == 0.0) ++missing;
        }
    };
    const auto x = random_tensor(2, 1, {32, 32, 16}, rng, 0.0, 2.0);
    nn::PixelNet<double> p(nn::NetworkSpec::pixel_net(4), 1);
    nn::backward(test::project(p(Var<double>(x))));
    count(p);
    nn::AeNet<double> a(nn::NetworkSpec::ae_net(4), 2);
    nn::backward(test::project(a(Var<double>(x))));
    count(a);
    nn::Discriminator<double> d(nn::NetworkSpec::discriminator(4), 3);
    nn::backward(nn::mean(d(Var<double>(random_tensor(2, 2, {32, 32, 16}, rng, 0.0, 2.0)))));
    count(d);

    auto spec = nn::NetworkSpec::pixel_net(2);
    spec.depth_strides = {{2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}};
    nn::PixelNet<double> tiny(spec, 11);
    tiny.set_training(false);
    auto f = [&](const std::vector<Var<double>>& v) { return nn::mean_abs(tiny(v[0])); };
    const double fd = test::max_fd_error(f, {random_tensor(1, 1, {8, 8, 8}, rng, 0.0, 1.0)}, rng, 20, 1e-6);

    return {shapes_ok == 5 && missing == 0 && fd < 1e-3,
            std::to_string(shapes_ok) + "/5 shapes preserved, " + std::to_string(total - missing) + "/" +
                std::to_string(total) + " parameters with nonzero gradient, FD rel err " + fmt(fd, 3)};
}

// ---------------------------------------------------------------------------
// Desk-scale training shared by the last two criteria.

std::vector<PairSource> desk_subjects() {
    PhantomSpec base;
    std::vector<PairSource> out;
    for (int s = 0; s < 4; ++s) {
        const auto spec = random_subject_spec(base, 100 + s);
        PairSource p;
        p.id = "s" + std::to_string(s);
        p.full = generate_phantom(spec, 200 + s);
        for (int d : DoseLevel::kReduced)
            p.low.emplace(d, simulate_low_dose(p.full, DoseLevel(d), spec, 300 + s * 10 + d));
        out.push_back(std::move(p));
    }
    return out;
}

TrainConfig desk_config() {
    TrainConfig c;
    c.set_base_channels(8);
    c.patch_shape = {32, 32, 16};
    c.max_epochs = 4;
    c.steps_per_epoch = 50;
    c.seed = 7;
    return c;
}

double mean_content(const std::vector<StepRecord>& s, std::size_t from, std::size_t n) {
    double a = 0;
    for (std::size_t i = from; i < from + n; ++i) a += s[i].content;
    return a / static_cast<double>(n);
}

struct HeldOut {
    Volume full, low;
};

HeldOut held_out() {
    const auto spec = random_subject_spec(PhantomSpec(), 999);
    HeldOut h;
    h.full = generate_phantom(spec, 998);
    h.low = simulate_low_dose(h.full, DoseLevel(100), spec, 997);
    return h;
}

Outcome training_sanity() {
    const auto subjects = desk_subjects();
    TrainConfig full_cfg = desk_config();
    Trainer full(full_cfg, subjects);
    full.run();
    TrainConfig pix_cfg = desk_config();
    pix_cfg.residual_mode = ResidualMode::None;
    pix_cfg.use_discriminator = false;
    Trainer pix(pix_cfg, subjects);
    pix.run();

    const auto& st = full.log().steps;
    const double first = mean_content(st, 0, 10), last = mean_content(st, st.size() - 10, 10);
    const double ratio = last / first;

    const HeldOut h = held_out();
    const PatchGridSpec grid{{32, 32, 16}, {16, 16, 8}};
    const double in_db = psnr(h.full, h.low);
    const double full_db = psnr(h.full, infer_volume(full.model(), h.low, grid));
    const double pix_db = psnr(h.full, infer_volume(pix.model(), h.low, grid));

    const bool a = ratio < 0.2, b = full_db > in_db, c = full_db >= pix_db;
    return {a && b && c, std::string("content ratio ") + fmt(ratio, 4) + (a ? " ok" : " FAIL") + "; held-out DRF 100 PSNR " +
                             fmt(in_db, 4) + " -> " + fmt(full_db, 4) + " dB" + (b ? " ok" : " FAIL") +
                             "; ablation full " + fmt(full_db, 4) + " vs pixel-only " + fmt(pix_db, 4) + " dB" +
                             (c ? " ok" : " FAIL")};
}

// First step whose trailing 10-step mean content loss is below `threshold`.
int steps_to(const std::vector<StepRecord>& s, double threshold) {
    for (std::size_t i = 9; i < s.size(); ++i)
        if (mean_content(s, i - 9, 10) < threshold) return static_cast<int>(i + 1);
    return std::numeric_limits<int>::max();
}

Outcome ssp_sanity() {
    std::string detail;

    // Rotation head on phantoms with an in-plane intensity ramp.
    PhantomSpec spec;
    std::vector<SspSource> ramps;
    for (int s = 0; s < 4; ++s) {
        Volume full(spec.shape, spec.spacing, 0.0f);
        for (Index z = 0; z < full.shape.z; ++z)
            for (Index y = 0; y < full.shape.y; ++y)
                for (Index x = 0; x < full.shape.x; ++x)
                    full(x, y, z) = 0.5f + 3.0f * static_cast<float>(x) / static_cast<float>(full.shape.x) + 0.5f * s;
        for (int d : {4, 20, 100})
            ramps.push_back({simulate_low_dose(full, DoseLevel(d), spec, 10 * s + d), "ramp" + std::to_string(s)});
    }
    SspConfig rot_cfg;
    rot_cfg.steps = 500;
    rot_cfg.optimizer.lr = 1e-3;
    rot_cfg.seed = 3;
    nn::PixelEncoder<float> rot_enc(nn::NetworkSpec::pixel_net(8), 1);
    nn::SspHeads<float> rot_heads(nn::NetworkSpec::pixel_net(8), 2);
    const auto rot = pretrain(rot_enc, rot_heads, ramps, rot_cfg);
    double acc = 0;
    for (std::size_t i = rot.log.size() - 50; i < rot.log.size(); ++i) acc += rot.log[i].rotation_accuracy / 50;
    const bool a = acc >= 0.95;
    detail += "rotation accuracy over steps 451-500 " + fmt(100 * acc, 4) + "%" + (a ? " ok" : " FAIL");

    // Aligned positives against random codes.
    Rng rng = make_rng(10);
    std::normal_distribution<double> g(0, 1);
    std::vector<std::vector<double>> good, random;
    std::vector<int> partner;
    for (int i = 0; i < 8; ++i) {
        std::vector<double> c(16);
        for (auto& x : c) x = g(rng);
        good.push_back(c);
        good.push_back(c);
        partner.push_back(2 * i + 1);
        partner.push_back(2 * i);
    }
    for (int i = 0; i < 16; ++i) {
        std::vector<double> c(16);
        for (auto& x : c) x = g(rng);
        random.push_back(c);
    }
    bool b = true;
    for (double sigma : {0.1, 0.5, 1.0}) b = b && loss_cpc(good, partner, sigma) < loss_cpc(random, partner, sigma);
    detail += std::string("; CPC aligned < random for sigma 0.1/0.5/1 ") + (b ? "ok" : "FAIL");

    // Warm start against scratch on the desk-scale run.
    const auto subjects = desk_subjects();
    std::vector<SspSource> lows;
    for (const auto& s : subjects)
        for (const auto& [d, v] : s.low) lows.push_back({v, s.id});
    SspConfig pre_cfg = rot_cfg;
    pre_cfg.seed = 4;
    nn::PixelEncoder<float> enc(nn::NetworkSpec::pixel_net(8), 5);
    nn::SspHeads<float> heads(nn::NetworkSpec::pixel_net(8), 6);
    pretrain(enc, heads, lows, pre_cfg);
    const fs::path dir = fs::temp_directory_path() / "aegan_acceptance";
    fs::create_directories(dir);
    save_encoder(dir / "encoder.ckpt", enc, nlohmann::json::object());

    Trainer scratch(desk_config(), subjects);
    scratch.run();
    TrainConfig warm_cfg = desk_config();
    warm_cfg.pretrained_encoder = dir / "encoder.ckpt";
    Trainer warm(warm_cfg, subjects);
    warm.run();
    const double threshold = 0.2 * mean_content(scratch.log().steps, 0, 10);
    const int s_scratch = steps_to(scratch.log().steps, threshold), s_warm = steps_to(warm.log().steps, threshold);
    auto show = [](int s) { return s == std::numeric_limits<int>::max() ? std::string("never") : std::to_string(s); };
    const bool c = s_warm <= s_scratch && s_warm != std::numeric_limits<int>::max();
    detail += "; first-10 content warm " + fmt(mean_content(warm.log().steps, 0, 10), 5) + " scratch " +
              fmt(mean_content(scratch.log().steps, 0, 10), 5);
    detail += "; steps to content < " + fmt(threshold, 4) + ": warm " + show(s_warm) + ", scratch " + show(s_scratch) +
              (c ? " ok" : " FAIL");
    return {a && b && c, detail};
}

Outcome statistics_oracles() {
    const std::vector<double> a{3, 4, 5, 7}, b{2, 3, 4, 5};
    const auto r = paired_ttest(a, b);
    // differences 1, 1, 1, 2: mean 1.25, sd 0.5, t = 5
    const double s3 = std::sqrt(3.0);
    const double cdf3 = 0.5 + (5.0 / (s3 * (1 + 25.0 / 3)) + std::atan(5.0 / s3)) / std::numbers::pi;
    const bool t1 = std::abs(r.t - 5.0) < 1e-6 && std::abs(r.p - 2 * (1 - cdf3)) < 1e-6;

    const std::vector<double> c{12, 15, 13, 17, 11}, d{10, 11, 10, 12, 10};
    const double t5 = 3.0 / (std::sqrt(2.5) / std::sqrt(5.0));
    const double q = t5 * t5 / 4;
    const double cdf4 = 0.5 + 0.375 * (t5 / std::sqrt(1 + q)) * (1 - t5 * t5 / (12 * (1 + q)));
    const auto r5 = paired_ttest(c, d);
    const bool t2 = std::abs(r5.t - t5) < 1e-6 && std::abs(r5.p - 2 * (1 - cdf4)) < 1e-6;

    const auto folds = kfold_split(28, 5, 2024);
    std::vector<std::size_t> sizes;
    std::set<Index> ids;
    for (const auto& f : folds) {
        sizes.push_back(f.val.size());
        ids.insert(f.val.begin(), f.val.end());
    }
    const bool k = sizes == std::vector<std::size_t>{6, 6, 6, 5, 5} && ids.size() == 28;
    std::string sz;
    for (auto s : sizes) sz += (sz.empty() ? "" : ",") + std::to_string(s);
    return {t1 && t2 && k, "t " + fmt(r.t, 8) + " p " + fmt(r.p, 8) + "; t " + fmt(r5.t, 8) + " p " + fmt(r5.p, 8) +
                               "; folds {" + sz + "}"};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    bool report_only = false;
    std::vector<int> only;
    app.add_flag("--report-only", report_only, "Exit 0 whenever every criterion ran, even if some failed");
    app.add_option("--only", only, "Criterion ids to run");
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> all = {
        {1, "weighted-score reproduction", 1, weighted_reproduction},
        {2, "weight-ordering discrepancy", 1, ordering_discrepancy},
        {3, "loss closed forms", 5, loss_closed_forms},
        {4, "residual algebra", 5, residual_algebra},
        {5, "metric oracles", 30, metric_oracles},
        {6, "patch round trip", 30, patch_round_trip},
        {7, "dose simulator statistics", 120, dose_statistics},
        {8, "shape and gradient suite", 120, shapes_and_gradients},
        {9, "training sanity", 900, training_sanity},
        {10, "ssp sanity", 900, ssp_sanity},
        {11, "statistics oracles", 1, statistics_oracles},
    };

    int failed = 0, errors = 0;
    for (const auto& c : all) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
            ++errors;
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs < c.budget_s;
        const bool pass = o.pass && in_time;
        failed += !pass;
        std::cout << "CRITERION " << std::setw(2) << c.id << ' ' << (pass ? "PASS" : "FAIL") << "  " << c.name << ": "
                  << o.detail << " [" << fmt(secs, 3) << " s of " << c.budget_s << " s"
                  << (in_time ? "" : ", over budget") << "]" << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : std::string("all criteria passed")) << '\n';
    if (report_only) return errors ? 1 : 0;
    return failed ? 1 : 0;
}
