#include "aegan/error.hpp"
#include "aegan/gan.hpp"
#include "aegan/nn/autograd.hpp"
#include "aegan/nn/ops.hpp"
#include "aegan/phantom.hpp"
#include "aegan/rng.hpp"
#include "aegan/ssp.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace aegan;
using nn::Var;
namespace fs = std::filesystem;

namespace {

constexpr Extent3 kPatch{32, 32, 16};

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("aegan_gan_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Float-valued entries, so sums and differences of two of them are exact in double.
Tensor<double> float_valued(Index n, Rng& rng, double lo = -2.0, double hi = 3.0) {
    Tensor<double> t(n, 1, kPatch);
    std::uniform_real_distribution<float> u(static_cast<float>(lo), static_cast<float>(hi));
    for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

// Multiples of 1/8 in [-4, 4].
Tensor<double> dyadic(Index n, Rng& rng) {
    Tensor<double> t(n, 1, kPatch);
    std::uniform_int_distribution<int> k(-32, 32);
    for (Index i = 0; i < t.size(); ++i) t[i] = k(rng) / 8.0;
    return t;
}

template <typename S>
bool equal(const Tensor<S>& a, const Tensor<S>& b) {
    return a.same_shape(b) && (a.array() == b.array()).all();
}

Tensor<double> constant(Index n, double v) { return Tensor<double>(n, 1, kPatch, v); }

template <typename S>
Var<S>& param(nn::Module<S>& m, const std::string& name) {
    static std::vector<nn::NamedParam<S>> keep;
    keep = m.state().params;
    for (auto& p : keep)
        if (p.name == name) return p.var;
    FAIL("no parameter " << name);
    return keep.front().var;
}

// Final block outputs a fixed logit, so D returns sigmoid(logit) for every input.
template <typename S>
void force_constant(nn::Discriminator<S>& d, double logit) {
    param(d, "block4.conv.weight").mutable_value().array().setZero();
    param(d, "block4.conv.bias").mutable_value().array().setConstant(static_cast<S>(logit));
}

// Routes the candidate channel through the centre taps with a large final gain:
// D is ~1 on a candidate of +1 and ~0 on a candidate of -1.
template <typename S>
void force_sign_detector(nn::Discriminator<S>& d) {
    d.set_training(false);
    for (auto& p : d.state().params) {
        auto& t = p.var.mutable_value();
        if (p.name.ends_with(".gamma")) t.array().setOnes();
        else t.array().setZero();
    }
    for (int k = 0; k < 5; ++k) {
        auto& w = param(d, "block" + std::to_string(k) + ".conv.weight").mutable_value();
        w(0, k == 0 ? 1 : 0, 1, 1, 1) = k == 4 ? S(1e5) : S(1);
    }
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.set_base_channels(2);
    c.patch_shape = kPatch;
    c.batch_size = 2;
    c.steps_per_epoch = 2;
    c.max_epochs = 1;
    c.val_patches = 2;
    c.drf_mix = {DoseLevel(4), DoseLevel(100)};
    c.seed = 5;
    return c;
}

std::vector<PairSource> tiny_sources(int n) {
    PhantomSpec base;
    std::vector<PairSource> out;
    for (int s = 0; s < n; ++s) {
        const auto spec = random_subject_spec(base, 40 + s);
        PairSource p;
        p.id = "s" + std::to_string(s);
        p.full = generate_phantom(spec, 50 + s);
        for (int d : {4, 100}) p.low.emplace(d, simulate_low_dose(p.full, DoseLevel(d), spec, 60 + s * 7 + d));
        out.push_back(std::move(p));
    }
    return out;
}

} // namespace

TEST_CASE("content loss") {
    Rng rng = make_rng(1);
    const Var<double> a(float_valued(2, rng));
    CHECK(content_loss(a, a).value().item() == 0.0);
    CHECK(content_loss(Var<double>(constant(2, 1.5)), Var<double>(constant(2, 1.0))).value().item() == 0.5);
    const Var<double> b(float_valued(2, rng));
    double s = 0;
    for (Index i = 0; i < a.value().size(); ++i) s += std::abs(a.value()[i] - b.value()[i]);
    CHECK(std::abs(content_loss(a, b).value().item() - s / static_cast<double>(a.value().size())) < 1e-7);
    CHECK_THROWS_AS(content_loss(a, Var<double>(Tensor<double>(1, 1, kPatch))), ArgumentError);
}

TEST_CASE("residual target") {
    Rng rng = make_rng(2);
    const auto v_l = float_valued(2, rng), v_s = float_valued(2, rng);
    CHECK((residual_target(v_s, v_s).array() == 0.0).all());
    CHECK((residual_target(constant(1, 2.0), constant(1, 0.5)).array() == 1.5).all());
    Tensor<double> sum = v_l;
    sum.array() += residual_target(v_s, v_l).array();
    CHECK(equal(sum, v_s));
    CHECK_THROWS_AS(residual_target(v_s, Tensor<double>(1, 1, kPatch)), ArgumentError);
}

TEST_CASE("gate algebra is exact") {
    Rng rng = make_rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const Var<double> p(float_valued(2, rng)), v_l(float_valued(2, rng));
        const auto ones = combine(p, v_l, Var<double>(constant(2, 1.0)), ResidualMode::AE);
        CHECK(equal(ones.refined.value(), p.value()));
        const auto zeros = combine(p, v_l, Var<double>(constant(2, 0.0)), ResidualMode::AE);
        CHECK(equal(zeros.refined.value(), v_l.value()));
        const auto none = combine(p, v_l, Var<double>(), ResidualMode::None);
        CHECK(equal(none.refined.value(), p.value()));

        const Var<double> g(float_valued(2, rng));
        const auto ae = combine(p, v_l, g, ResidualMode::AE);
        Tensor<double> expect = v_l.value();
        expect.array() += g.value().array() * (p.value().array() - v_l.value().array());
        CHECK(equal(ae.refined.value(), expect));
        const auto ar = combine(p, v_l, g, ResidualMode::AR);
        expect.array() = p.value().array() + g.value().array();
        CHECK(equal(ar.refined.value(), expect));
        CHECK(equal(ar.r_tilde.value(), p.value()));
    }
}

TEST_CASE("zero residual loss implies the refined volume equals the target") {
    Rng rng = make_rng(4);
    const double steps[6] = {-2, -1, -0.5, 0.5, 1, 2};
    std::uniform_int_distribution<int> pick(0, 5);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor<double> v_l = dyadic(2, rng), v_s = dyadic(2, rng);
        Tensor<double> p = v_l, gate = v_l;
        for (Index i = 0; i < p.size(); ++i) {
            const double rt = steps[pick(rng)];
            p[i] = v_l[i] + rt;
            gate[i] = (v_s[i] - v_l[i]) / rt;
        }
        const Var<double> vl(v_l), vs(v_s);
        const auto b = combine(Var<double>(p), vl, Var<double>(gate), ResidualMode::AE);
        CHECK(residual_loss(b, vs, vl).value().item() == 0.0);
        CHECK(equal(b.refined.value(), v_s));
    }
}

TEST_CASE("residual loss") {
    Rng rng = make_rng(5);
    const Var<double> p(float_valued(2, rng)), v_l(float_valued(2, rng)), v_s(float_valued(2, rng));
    const auto zero_gate = combine(p, v_l, Var<double>(constant(2, 0.0)), ResidualMode::AE);
    const auto r = residual_target(v_s.value(), v_l.value());
    CHECK(std::abs(residual_loss(zero_gate, v_s, v_l).value().item() - r.array().abs().mean()) < 1e-12);

    const Var<double> g(float_valued(2, rng));
    const auto ae = combine(p, v_l, g, ResidualMode::AE);
    double s = 0;
    for (Index i = 0; i < r.size(); ++i) s += std::abs(r[i] - g.value()[i] * (p.value()[i] - v_l.value()[i]));
    CHECK(std::abs(residual_loss(ae, v_s, v_l).value().item() - s / static_cast<double>(r.size())) < 1e-7);

    const auto ar = combine(p, v_l, g, ResidualMode::AR);
    s = 0;
    for (Index i = 0; i < r.size(); ++i) s += std::abs(v_s.value()[i] - p.value()[i] - g.value()[i]);
    CHECK(std::abs(residual_loss(ar, v_s, v_l).value().item() - s / static_cast<double>(r.size())) < 1e-7);

    const auto none = combine(p, v_l, Var<double>(), ResidualMode::None);
    CHECK_THROWS_AS(residual_loss(none, v_s, v_l), ConfigError);
}

TEST_CASE("refine through a real AE-Net") {
    Rng rng = make_rng(6);
    nn::AeNet<double> ae(nn::NetworkSpec::ae_net(2), 9);
    const Var<double> p(float_valued(2, rng)), v_l(float_valued(2, rng));
    param(ae, "head.weight").mutable_value().array().setZero();
    param(ae, "head.bias").mutable_value().array().setConstant(1.0);
    CHECK(equal(refine(p, v_l, &ae, ResidualMode::AE).refined.value(), p.value()));
    param(ae, "head.bias").mutable_value().array().setZero();
    CHECK(equal(refine(p, v_l, &ae, ResidualMode::AE).refined.value(), v_l.value()));
    CHECK(equal(refine(p, v_l, &ae, ResidualMode::AR).refined.value(), p.value()));
    CHECK(equal(refine(p, v_l, static_cast<nn::AeNet<double>*>(nullptr), ResidualMode::None).refined.value(), p.value()));
    CHECK_THROWS_AS(refine(p, v_l, static_cast<nn::AeNet<double>*>(nullptr), ResidualMode::AE), ConfigError);
}

TEST_CASE("adversarial losses") {
    Rng rng = make_rng(7);
    nn::Discriminator<double> d(nn::NetworkSpec::discriminator(2), 3);
    const Var<double> v_l(float_valued(2, rng, 0, 1)), v_s(float_valued(2, rng, 0, 1)), fake(float_valued(2, rng, 0, 1));

    SUBCASE("D = 0.5 everywhere") {
        force_constant(d, 0.0);
        const auto l = adversarial_losses(d, v_l, v_s, fake);
        CHECK(std::abs(l.d_loss.value().item() - 0.5) < 1e-12);
        CHECK(std::abs(l.g_loss.value().item() - 0.25) < 1e-12);
    }
    SUBCASE("D = c everywhere") {
        const double c = 0.3;
        force_constant(d, std::log(c / (1 - c)));
        const auto l = adversarial_losses(d, v_l, v_s, fake);
        CHECK(std::abs(l.d_loss.value().item() - ((c - 1) * (c - 1) + c * c)) < 1e-12);
        CHECK(std::abs(l.g_loss.value().item() - (c - 1) * (c - 1)) < 1e-12);
    }
    SUBCASE("perfect and fooled discriminators") {
        force_sign_detector(d);
        const Var<double> pos(constant(2, 1.0)), neg(constant(2, -1.0));
        const auto perfect = adversarial_losses(d, v_l, pos, neg);
        CHECK(perfect.d_loss.value().item() < 1e-12);
        CHECK(std::abs(perfect.g_loss.value().item() - 1.0) < 1e-12);
        const auto fooled = adversarial_losses(d, v_l, pos, pos);
        CHECK(fooled.g_loss.value().item() < 1e-12);
    }
    SUBCASE("non-negative, and d_loss ignores the generator graph") {
        const Var<double> g(fake.value(), true);
        const auto l = adversarial_losses(d, v_l, v_s, g);
        CHECK(l.d_loss.value().item() >= 0);
        CHECK(l.g_loss.value().item() >= 0);
        nn::backward(l.d_loss);
        CHECK_FALSE(g.has_grad());
        nn::backward(l.g_loss);
        CHECK(g.has_grad());
    }
}

TEST_CASE("total generator loss") {
    CHECK(total_generator_loss({1, 1, 1}, 300, 10, 1) == 311.0);
    CHECK(total_generator_loss({0, 0, 0}, 300, 10, 1) == 0.0);
    TrainConfig c;
    CHECK(total_generator_loss({1, 1, 1}, c) == 311.0);
    c.residual_mode = ResidualMode::None;
    CHECK(total_generator_loss({1, 1, 1}, c) == 301.0);
    c.use_discriminator = false;
    CHECK(total_generator_loss({1, 1, 1}, c) == 300.0);
    const GeneratorParts p{0.25, 0.5, 2.0};
    CHECK(total_generator_loss(p, 600, 10, 1) - total_generator_loss(p, 300, 10, 1) == doctest::Approx(300 * 0.25));
    CHECK(total_generator_loss(p, 300, 20, 1) - total_generator_loss(p, 300, 10, 1) == doctest::Approx(10 * 0.5));
}

TEST_CASE("learning-rate schedule") {
    const TrainConfig cfg;
    SUBCASE("five stale epochs decay by ten") {
        auto s = lr_schedule_step(LrState::initial(cfg), 1.0, cfg);
        for (int i = 0; i < 4; ++i) {
            s = lr_schedule_step(s, 1.0, cfg);
            CHECK(s.lr == 2e-4);
        }
        s = lr_schedule_step(s, 1.0, cfg);
        CHECK(s.lr == doctest::Approx(2e-5).epsilon(1e-12));
        CHECK(s.stale_epochs == 0);
        CHECK_FALSE(s.stop);
    }
    SUBCASE("falling below the threshold stops") {
        LrState s = LrState::initial(cfg);
        s.decays = 2;
        s.lr = cfg.lr0 * 0.01;
        s.best = 0.5;
        for (int i = 0; i < 4; ++i) CHECK_FALSE((s = lr_schedule_step(s, 0.6, cfg)).stop);
        s = lr_schedule_step(s, 0.6, cfg);
        CHECK(s.lr == doctest::Approx(2e-7).epsilon(1e-12));
        CHECK(s.stop);
    }
    SUBCASE("steady improvement keeps lr0") {
        LrState s = LrState::initial(cfg);
        for (int e = 0; e < 100; ++e) s = lr_schedule_step(s, 1.0 / (e + 1), cfg);
        CHECK(s.lr == cfg.lr0);
        CHECK(s.decays == 0);
    }
    SUBCASE("every lr is lr0 * 0.1^k and never grows") {
        Rng rng = make_rng(8);
        std::uniform_real_distribution<double> u(0, 1);
        LrState s = LrState::initial(cfg);
        double last = s.lr;
        for (int e = 0; e < 200 && !s.stop; ++e) {
            s = lr_schedule_step(s, u(rng), cfg);
            CHECK(s.lr <= last);
            CHECK(s.lr == cfg.lr0 * std::pow(0.1, s.decays));
            last = s.lr;
        }
    }
}

TEST_CASE("train config") {
    TrainConfig c;
    CHECK(c.lambda_content == 300);
    CHECK(c.lambda_residual == 10);
    CHECK(c.lambda_adversarial == 1);
    CHECK(c.lr0 == 2e-4);
    CHECK(c.batch_size == 4);
    CHECK(c.max_epochs == 100);
    CHECK_NOTHROW(c.validate());

    c.residual_mode = ResidualMode::AR;
    c.drf_mix = drf_mix_preset("10-50");
    c.set_base_channels(4);
    nlohmann::json j = c;
    const TrainConfig back = parse_train_config(j, "");
    CHECK(back.residual_mode == ResidualMode::AR);
    CHECK(back.drf_mix == c.drf_mix);
    CHECK(back.pixel == c.pixel);
    CHECK(nlohmann::json(back) == j);

    j["bogus"] = 1;
    CHECK_THROWS_AS(parse_train_config(j, ""), SchemaError);
    CHECK_THROWS_AS(parse_train_config({{"lr0", "fast"}}, ""), SchemaError);
    CHECK_THROWS_AS(parse_train_config({{"lr0", 1e-7}}, ""), SchemaError);
    CHECK_THROWS_AS(parse_train_config({{"residual_mode", "XY"}}, ""), SchemaError);

    CHECK(drf_mix_preset("4-20") == std::vector<DoseLevel>{DoseLevel(4), DoseLevel(10), DoseLevel(20)});
    CHECK(drf_mix_preset("10-100").size() == 4);
    CHECK(drf_mix_preset("all").size() == 5);
    CHECK(drf_mix_preset("50") == std::vector<DoseLevel>{DoseLevel(50)});
    CHECK_THROWS_AS(drf_mix_preset("3-7"), ArgumentError);

    TrainConfig bad;
    bad.lr_decay_factor = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig();
    bad.lambda_residual = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("inference passes the input through when the gate is zero") {
    TrainConfig c = tiny_config();
    SynthesisModel m(c);
    param(*m.ae(), "head.weight").mutable_value().array().setZero();
    param(*m.ae(), "head.bias").mutable_value().array().setZero();
    PhantomSpec spec;
    const Volume full = generate_phantom(spec, 1);
    Volume low = simulate_low_dose(full, DoseLevel(100), spec, 2);
    low.id = "probe";
    REQUIRE(low.shape == Extent3{64, 64, 32});
    const Volume out = infer_volume(m, low, {kPatch, {16, 16, 8}});
    CHECK(out.shape == low.shape);
    CHECK(out.drf == low.drf);
    CHECK(out.id == "probe");
    CHECK((out.voxels == low.voxels).all());

    CHECK_THROWS_AS(infer_volume(m, low, {{24, 24, 12}, {12, 12, 6}}), ArgumentError);
    const Volume small({16, 16, 16}, Eigen::Vector3d::Ones(), 1.0f);
    CHECK_THROWS_AS(infer_volume(m, small, {kPatch, {16, 16, 8}}), ArgumentError);
}

TEST_CASE("trainer logs, determinism and checkpoints") {
    const auto sources = tiny_sources(2);
    const fs::path dir = scratch("trainer");

    SUBCASE("logged columns follow the config") {
        TrainConfig ae = tiny_config();
        Trainer t(ae, sources);
        t.run();
        REQUIRE(t.log().epochs.size() == 1);
        CHECK(t.log().steps.size() == 2);
        CHECK(t.log().steps[0].residual > 0);
        CHECK(t.log().steps[0].d_loss > 0);
        write_train_log(t.log(), ae, dir / "ae.csv");

        TrainConfig none = tiny_config();
        none.residual_mode = ResidualMode::None;
        Trainer u(none, sources);
        u.run();
        CHECK(u.log().steps[0].residual == 0);
        write_train_log(u.log(), none, dir / "none.csv");

        auto header = [](const fs::path& p) {
            std::ifstream in(p);
            std::string h;
            std::getline(in, h);
            return h;
        };
        CHECK(header(dir / "ae.csv") == "epoch,lr,L_content,L_residual,d_loss,g_loss,val_loss,val_psnr");
        CHECK(header(dir / "none.csv") == "epoch,lr,L_content,d_loss,g_loss,val_loss,val_psnr");
    }
    SUBCASE("identical seeds give identical epoch-1 losses") {
        TrainConfig c = tiny_config();
        Trainer a(c, sources), b(c, sources);
        const auto ea = a.run_epoch(), eb = b.run_epoch();
        CHECK(std::abs(ea.content - eb.content) <= 1e-6);
        CHECK(std::abs(ea.residual - eb.residual) <= 1e-6);
        CHECK(std::abs(ea.d_loss - eb.d_loss) <= 1e-6);
        CHECK(std::abs(ea.val_loss - eb.val_loss) <= 1e-6);
        c.seed = 6;
        Trainer other(c, sources);
        CHECK(other.run_epoch().content != ea.content);
    }
    SUBCASE("checkpoint round trip") {
        Trainer t(tiny_config(), sources);
        t.run();
        t.save_checkpoint(dir / "model.ckpt");
        SynthesisModel loaded = SynthesisModel::load(dir / "model.ckpt");
        CHECK(nlohmann::json(loaded.config()) == nlohmann::json(t.model().config()));
        const PhantomSpec spec;
        const Volume low = simulate_low_dose(sources[0].full, DoseLevel(4), spec, 9);
        const Volume a = infer_volume(t.model(), low, {kPatch, {16, 16, 8}});
        const Volume b = infer_volume(loaded, low, {kPatch, {16, 16, 8}});
        CHECK((a.voxels == b.voxels).all());
        CHECK_THROWS_AS(SynthesisModel::load(dir / "missing.ckpt"), Error);
    }
    SUBCASE("pretrained encoder must match the pixel spec") {
        nn::PixelEncoder<float> wide(nn::NetworkSpec::pixel_net(4), 1);
        save_encoder(dir / "wide.ckpt", wide, nlohmann::json::object());
        TrainConfig c = tiny_config();
        c.pretrained_encoder = dir / "wide.ckpt";
        CHECK_THROWS_AS(Trainer(c, sources), CheckpointError);

        nn::PixelEncoder<float> fit(nn::NetworkSpec::pixel_net(2), 77);
        save_encoder(dir / "fit.ckpt", fit, nlohmann::json::object());
        c.pretrained_encoder = dir / "fit.ckpt";
        Trainer t(c, sources);
        const auto mine = t.model().pixel().encoder().parameters();
        const auto theirs = fit.parameters();
        REQUIRE(mine.size() == theirs.size());
        for (std::size_t i = 0; i < mine.size(); ++i) CHECK(equal(mine[i].value(), theirs[i].value()));
    }
    SUBCASE("every DRF in the mix needs a subject") {
        TrainConfig c = tiny_config();
        c.drf_mix = {DoseLevel(50)};
        CHECK_THROWS_AS(Trainer(c, sources), DataError);
        CHECK_THROWS_AS(Trainer(tiny_config(), {}), DataError);
    }
}
