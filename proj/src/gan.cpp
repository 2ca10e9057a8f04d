#include "aegan/gan.hpp"

#include "aegan/error.hpp"
#include "aegan/json_reader.hpp"
#include "aegan/metrics.hpp"
#include "aegan/nn/ops.hpp"
#include "aegan/rng.hpp"
#include "aegan/ssp.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace aegan {

using nlohmann::json;
using nn::Var;

std::string to_string(ResidualMode m) {
    switch (m) {
    case ResidualMode::AE: return "AE";
    case ResidualMode::AR: return "AR";
    case ResidualMode::None: return "none";
    }
    return "?";
}

ResidualMode residual_mode_from_string(const std::string& s) {
    if (s == "AE") return ResidualMode::AE;
    if (s == "AR") return ResidualMode::AR;
    if (s == "none") return ResidualMode::None;
    throw ArgumentError("unknown residual mode '" + s + "' (expected AE, AR or none)");
}

std::vector<DoseLevel> drf_mix_preset(const std::string& name) {
    auto levels = [](std::initializer_list<int> v) {
        std::vector<DoseLevel> out;
        for (int d : v) out.emplace_back(d);
        return out;
    };
    if (name == "4-20") return levels({4, 10, 20});
    if (name == "10-50") return levels({10, 20, 50});
    if (name == "10-100") return levels({10, 20, 50, 100});
    if (name == "all") return all_reduced_doses();
    for (int d : DoseLevel::kReduced)
        if (name == std::to_string(d)) return levels({d});
    throw ArgumentError("unknown DRF mix '" + name + "'");
}

void TrainConfig::set_base_channels(int c) {
    pixel.base_channels = c;
    ae.base_channels = c;
    discriminator.base_channels = c;
}

void TrainConfig::validate() const {
    if (lambda_content < 0 || lambda_residual < 0 || lambda_adversarial < 0)
        throw ConfigError("loss weights must be >= 0");
    if (!(lr_stop_threshold > 0) || !(lr0 > lr_stop_threshold))
        throw ConfigError("need lr0 > lr_stop_threshold > 0");
    if (!(lr_decay_factor > 0 && lr_decay_factor < 1)) throw ConfigError("lr_decay_factor must be in (0, 1)");
    if (lr_patience_epochs < 1) throw ConfigError("lr_patience_epochs must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must be in [0, 1)");
    if (max_epochs < 1 || steps_per_epoch < 1) throw ConfigError("max_epochs and steps_per_epoch must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (val_patches < 0) throw ConfigError("val_patches must be >= 0");
    if (drf_mix.empty()) throw ConfigError("drf_mix is empty");
    for (const auto& d : drf_mix)
        if (d.is_full()) throw ConfigError("drf_mix may only hold reduced doses");
    if (!(suv_scale > 0)) throw ConfigError("suv_scale must be > 0");
    if (pixel.kind != nn::NetworkKind::PixelNet || ae.kind != nn::NetworkKind::AeNet ||
        discriminator.kind != nn::NetworkKind::Discriminator)
        throw ConfigError("network specs have the wrong kinds");
    try {
        pixel.validate();
        pixel.check_patch(patch_shape);
        if (residual_mode != ResidualMode::None) {
            ae.validate();
            ae.check_patch(patch_shape);
        }
        if (use_discriminator) {
            discriminator.validate();
            discriminator.check_patch(patch_shape);
        }
    } catch (const SpecError& e) {
        throw ConfigError(e.what());
    }
}

void to_json(json& j, const TrainConfig& c) {
    json mix = json::array();
    for (const auto& d : c.drf_mix) mix.push_back(d.value());
    j = json{{"lambda_content", c.lambda_content},
             {"lambda_residual", c.lambda_residual},
             {"lambda_adversarial", c.lambda_adversarial},
             {"residual_mode", to_string(c.residual_mode)},
             {"use_discriminator", c.use_discriminator},
             {"lr0", c.lr0},
             {"lr_decay_factor", c.lr_decay_factor},
             {"lr_patience_epochs", c.lr_patience_epochs},
             {"lr_stop_threshold", c.lr_stop_threshold},
             {"beta1", c.beta1},
             {"beta2", c.beta2},
             {"max_epochs", c.max_epochs},
             {"steps_per_epoch", c.steps_per_epoch},
             {"batch_size", c.batch_size},
             {"val_patches", c.val_patches},
             {"drf_mix", mix},
             {"patch_shape", {c.patch_shape.x, c.patch_shape.y, c.patch_shape.z}},
             {"networks", {{"pixel", c.pixel}, {"ae", c.ae}, {"discriminator", c.discriminator}}},
             {"suv_scale", c.suv_scale},
             {"seed", c.seed}};
    if (c.pretrained_encoder) j["pretrained_encoder"] = c.pretrained_encoder->string();
}

TrainConfig parse_train_config(const json& j, const std::string& path) {
    JsonReader r(j, path);
    TrainConfig c;
    c.lambda_content = r.get_or<double>("lambda_content", c.lambda_content);
    c.lambda_residual = r.get_or<double>("lambda_residual", c.lambda_residual);
    c.lambda_adversarial = r.get_or<double>("lambda_adversarial", c.lambda_adversarial);
    if (r.has("residual_mode")) {
        try {
            c.residual_mode = residual_mode_from_string(r.get<std::string>("residual_mode"));
        } catch (const ArgumentError& e) {
            r.fail("residual_mode", e.what());
        }
    }
    c.use_discriminator = r.get_or<bool>("use_discriminator", c.use_discriminator);
    c.lr0 = r.get_or<double>("lr0", c.lr0);
    c.lr_decay_factor = r.get_or<double>("lr_decay_factor", c.lr_decay_factor);
    c.lr_patience_epochs = r.get_or<int>("lr_patience_epochs", c.lr_patience_epochs);
    c.lr_stop_threshold = r.get_or<double>("lr_stop_threshold", c.lr_stop_threshold);
    c.beta1 = r.get_or<double>("beta1", c.beta1);
    c.beta2 = r.get_or<double>("beta2", c.beta2);
    c.max_epochs = r.get_or<int>("max_epochs", c.max_epochs);
    c.steps_per_epoch = r.get_or<int>("steps_per_epoch", c.steps_per_epoch);
    c.batch_size = r.get_or<int>("batch_size", c.batch_size);
    c.val_patches = r.get_or<int>("val_patches", c.val_patches);
    if (r.has("drf_mix")) {
        const auto& v = j.at("drf_mix");
        try {
            if (v.is_string()) {
                c.drf_mix = drf_mix_preset(r.get<std::string>("drf_mix"));
            } else {
                c.drf_mix.clear();
                for (int d : r.get<std::vector<int>>("drf_mix")) c.drf_mix.emplace_back(d);
            }
        } catch (const ArgumentError& e) {
            r.fail("drf_mix", e.what());
        }
    }
    if (r.has("pretrained_encoder")) c.pretrained_encoder = r.get<std::string>("pretrained_encoder");
    if (r.has("patch_shape")) c.patch_shape = r.extent("patch_shape");
    if (r.has("base_channels")) c.set_base_channels(r.get<int>("base_channels"));
    if (r.has("networks")) {
        auto nets = r.child("networks");
        if (nets.has("pixel")) c.pixel = nn::parse_network_spec(j.at("networks").at("pixel"), nets.key_path("pixel"));
        if (nets.has("ae")) c.ae = nn::parse_network_spec(j.at("networks").at("ae"), nets.key_path("ae"));
        if (nets.has("discriminator"))
            c.discriminator =
                nn::parse_network_spec(j.at("networks").at("discriminator"), nets.key_path("discriminator"));
        (void)nets.get_or<json>("pixel", {});
        (void)nets.get_or<json>("ae", {});
        (void)nets.get_or<json>("discriminator", {});
        nets.finish();
    }
    c.suv_scale = r.get_or<double>("suv_scale", c.suv_scale);
    c.seed = r.get_or<std::uint64_t>("seed", c.seed);
    r.finish();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw SchemaError(path.empty() ? "<root>" : path, e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

template <typename Scalar>
void require_same(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
    if (!a.same_shape(b)) throw ArgumentError(std::string(what) + ": shape mismatch");
}

template <typename Scalar>
void require_finite(const Var<Scalar>& v, const char* what) {
    if (!v.value().array().allFinite()) throw NumericError(std::string(what) + " is not finite");
}

} // namespace

template <typename Scalar>
Var<Scalar> content_loss(const Var<Scalar>& p_out, const Var<Scalar>& v_s) {
    require_same(p_out.value(), v_s.value(), "content_loss");
    return nn::mean_abs(nn::sub(p_out, v_s));
}

template <typename Scalar>
Tensor<Scalar> residual_target(const Tensor<Scalar>& v_s, const Tensor<Scalar>& v_l) {
    require_same(v_s, v_l, "residual_target");
    Tensor<Scalar> r = Tensor<Scalar>::zeros_like(v_s);
    r.array() = v_s.array() - v_l.array();
    return r;
}

template <typename Scalar>
ResidualBundle<Scalar> combine(const Var<Scalar>& p_out, const Var<Scalar>& v_l, const Var<Scalar>& gate,
                               ResidualMode mode) {
    require_same(p_out.value(), v_l.value(), "refine");
    ResidualBundle<Scalar> b;
    b.mode = mode;
    b.p_out = p_out;
    switch (mode) {
    case ResidualMode::AE:
        require_same(gate.value(), p_out.value(), "refine gate");
        b.r_tilde = nn::sub(p_out, v_l);
        b.gate = gate;
        b.base = v_l;
        b.correction = nn::mul(gate, b.r_tilde);
        b.refined = nn::add(b.base, b.correction);
        break;
    case ResidualMode::AR:
        require_same(gate.value(), p_out.value(), "refine gate");
        b.r_tilde = p_out;
        b.gate = gate;
        b.base = p_out;
        b.correction = gate;
        b.refined = nn::add(b.base, b.correction);
        break;
    case ResidualMode::None:
        b.base = p_out;
        b.refined = p_out;
        break;
    default: throw ArgumentError("unknown residual mode");
    }
    return b;
}

template <typename Scalar>
ResidualBundle<Scalar> refine(const Var<Scalar>& p_out, const Var<Scalar>& v_l, nn::AeNet<Scalar>* ae,
                              ResidualMode mode) {
    require_same(p_out.value(), v_l.value(), "refine");
    if (mode == ResidualMode::None) return combine(p_out, v_l, Var<Scalar>(), mode);
    if (mode != ResidualMode::AE && mode != ResidualMode::AR) throw ArgumentError("unknown residual mode");
    if (!ae) throw ConfigError("residual mode " + to_string(mode) + " needs an AE-Net");
    const Var<Scalar> input = mode == ResidualMode::AE ? nn::sub(p_out, v_l) : p_out;
    return combine(p_out, v_l, (*ae)(input), mode);
}

template <typename Scalar>
Var<Scalar> residual_loss(const ResidualBundle<Scalar>& bundle, const Var<Scalar>& v_s, const Var<Scalar>& v_l) {
    if (bundle.mode == ResidualMode::None) throw ConfigError("residual loss is undefined without a residual branch");
    const Tensor<Scalar>& base = bundle.mode == ResidualMode::AE ? v_l.value() : bundle.p_out.value();
    const Var<Scalar> target(residual_target(v_s.value(), base));
    return nn::mean_abs(nn::sub(target, bundle.correction));
}

namespace {

/// Scores of concat(v_l, v_s) then concat(v_l, fake), stacked on the batch axis.
template <typename Scalar>
Var<Scalar> joint_scores(nn::Discriminator<Scalar>& disc, const Var<Scalar>& v_l, const Var<Scalar>& v_s,
                         const Var<Scalar>& fake) {
    require_same(v_l.value(), v_s.value(), "adversarial loss");
    require_same(v_l.value(), fake.value(), "adversarial loss");
    const auto scores = disc(nn::concat_batch(nn::concat_channels(v_l, v_s), nn::concat_channels(v_l, fake)));
    require_finite(scores, "discriminator output");
    return scores;
}

/// 1 on the real half of a joint score tensor, 0 on the fake half.
template <typename Scalar>
Var<Scalar> real_half(const Tensor<Scalar>& scores) {
    Tensor<Scalar> t = Tensor<Scalar>::zeros_like(scores);
    t.array().head(t.size() / 2).setOnes();
    return Var<Scalar>(std::move(t));
}

} // namespace

template <typename Scalar>
Var<Scalar> discriminator_loss(nn::Discriminator<Scalar>& disc, const Var<Scalar>& v_l, const Var<Scalar>& v_s,
                               const Var<Scalar>& fake) {
    const auto s = joint_scores(disc, v_l, v_s, fake.detach());
    // Each half's mean is its sum over half the elements, hence the factor 2.
    return nn::scale(nn::mean(nn::square(nn::sub(s, real_half(s.value())))), 2.0);
}

template <typename Scalar>
Var<Scalar> generator_adversarial_loss(nn::Discriminator<Scalar>& disc, const Var<Scalar>& v_l,
                                       const Var<Scalar>& v_s, const Var<Scalar>& refined) {
    const auto s = joint_scores(disc, v_l, v_s, refined);
    Tensor<Scalar> fake_mask = Tensor<Scalar>::zeros_like(s.value());
    fake_mask.array().tail(fake_mask.size() / 2).setOnes();
    const auto err = nn::square(nn::add_scalar(s, -1.0));
    return nn::scale(nn::mean(nn::mul(err, Var<Scalar>(std::move(fake_mask)))), 2.0);
}

template <typename Scalar>
AdversarialLosses<Scalar> adversarial_losses(nn::Discriminator<Scalar>& disc, const Var<Scalar>& v_l,
                                             const Var<Scalar>& v_s, const Var<Scalar>& refined) {
    return {discriminator_loss(disc, v_l, v_s, refined), generator_adversarial_loss(disc, v_l, v_s, refined)};
}

double total_generator_loss(const GeneratorParts& p, double lc, double lr, double la) {
    return lc * p.content + lr * p.residual + la * p.adversarial;
}

double total_generator_loss(const GeneratorParts& p, const TrainConfig& cfg) {
    return total_generator_loss(p, cfg.lambda_content,
                                cfg.residual_mode == ResidualMode::None ? 0.0 : cfg.lambda_residual,
                                cfg.use_discriminator ? cfg.lambda_adversarial : 0.0);
}

#define AEGAN_INSTANTIATE_GAN(S)                                                                                   \
    template Var<S> content_loss(const Var<S>&, const Var<S>&);                                                    \
    template Tensor<S> residual_target(const Tensor<S>&, const Tensor<S>&);                                        \
    template ResidualBundle<S> combine(const Var<S>&, const Var<S>&, const Var<S>&, ResidualMode);                 \
    template ResidualBundle<S> refine(const Var<S>&, const Var<S>&, nn::AeNet<S>*, ResidualMode);                  \
    template Var<S> residual_loss(const ResidualBundle<S>&, const Var<S>&, const Var<S>&);                         \
    template Var<S> discriminator_loss(nn::Discriminator<S>&, const Var<S>&, const Var<S>&, const Var<S>&);       \
    template Var<S> generator_adversarial_loss(nn::Discriminator<S>&, const Var<S>&, const Var<S>&, const Var<S>&);\
    template AdversarialLosses<S> adversarial_losses(nn::Discriminator<S>&, const Var<S>&, const Var<S>&,         \
                                                     const Var<S>&);

AEGAN_INSTANTIATE_GAN(float)
AEGAN_INSTANTIATE_GAN(double)

// ---------------------------------------------------------------------------
// Schedule

LrState LrState::initial(const TrainConfig& cfg) {
    LrState s;
    s.lr = cfg.lr0;
    return s;
}

LrState lr_schedule_step(const LrState& state, double val_loss, const TrainConfig& cfg) {
    LrState s = state;
    if (val_loss < s.best) {
        s.best = val_loss;
        s.stale_epochs = 0;
    } else if (++s.stale_epochs >= cfg.lr_patience_epochs) {
        ++s.decays;
        s.stale_epochs = 0;
        s.lr = cfg.lr0 * std::pow(cfg.lr_decay_factor, s.decays);
    }
    s.stop = s.lr < cfg.lr_stop_threshold;
    return s;
}

// ---------------------------------------------------------------------------
// Model

SynthesisModel::SynthesisModel(const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    pixel_ = std::make_unique<nn::PixelNet<float>>(cfg_.pixel, derive_seed(cfg_.seed, {1}));
    if (cfg_.residual_mode != ResidualMode::None) {
        ae_ = std::make_unique<nn::AeNet<float>>(cfg_.ae, derive_seed(cfg_.seed, {2}));
        // AE mode starts from the identity gate, so refined = p_out at step 0.
        if (cfg_.residual_mode == ResidualMode::AE) ae_->head().bias().mutable_value().array().setConstant(1.0f);
    }
    if (cfg_.use_discriminator)
        disc_ = std::make_unique<nn::Discriminator<float>>(cfg_.discriminator, derive_seed(cfg_.seed, {3}));
}

void SynthesisModel::set_training(bool on) {
    pixel_->set_training(on);
    if (ae_) ae_->set_training(on);
    if (disc_) disc_->set_training(on);
}

ResidualBundle<float> SynthesisModel::forward(const Var<float>& v_l) {
    return refine(pixel_->operator()(v_l), v_l, ae_.get(), cfg_.residual_mode);
}

void SynthesisModel::store(nn::Checkpoint& ck) {
    ck.meta["kind"] = "synthesis_model";
    ck.meta["config"] = cfg_;
    auto ps = pixel_->state();
    nn::store_state(ck, "pixel", ps);
    if (ae_) {
        auto s = ae_->state();
        nn::store_state(ck, "ae", s);
    }
    if (disc_) {
        auto s = disc_->state();
        nn::store_state(ck, "disc", s);
    }
}

SynthesisModel SynthesisModel::load(const nn::Checkpoint& ck) {
    if (!ck.meta.contains("config") || ck.meta.value("kind", "") != "synthesis_model")
        throw CheckpointError("checkpoint does not hold a synthesis model");
    TrainConfig cfg;
    try {
        cfg = parse_train_config(ck.meta.at("config"), "config");
    } catch (const SchemaError& e) {
        throw CheckpointError(std::string("stored config is invalid: ") + e.what());
    }
    cfg.pretrained_encoder.reset();
    SynthesisModel m(cfg);
    auto ps = m.pixel_->state();
    nn::restore_state(ck, "pixel", ps);
    if (m.ae_) {
        auto s = m.ae_->state();
        nn::restore_state(ck, "ae", s);
    }
    if (m.disc_) {
        auto s = m.disc_->state();
        nn::restore_state(ck, "disc", s);
    }
    return m;
}

SynthesisModel SynthesisModel::load(const std::filesystem::path& path) { return load(nn::Checkpoint::load(path)); }

Volume infer_volume(SynthesisModel& model, const Volume& v_l, const PatchGridSpec& grid, int batch_size) {
    const TrainConfig& cfg = model.config();
    grid.validate();
    v_l.validate();
    if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
    try {
        cfg.pixel.check_patch(grid.patch_shape);
        if (model.ae()) cfg.ae.check_patch(grid.patch_shape);
    } catch (const SpecError& e) {
        throw ArgumentError(std::string("patch shape does not fit the model: ") + e.what());
    }
    for (int d = 0; d < 3; ++d)
        if (grid.patch_shape[d] > v_l.shape[d])
            throw ArgumentError("patch " + to_string(grid.patch_shape) + " exceeds volume " + to_string(v_l.shape));

    nn::NoGradGuard no_grad;
    model.set_training(false);
    std::vector<Patch> patches = extract_patches(v_l, grid);
    const double scale = cfg.suv_scale;
    for (std::size_t start = 0; start < patches.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(patches.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<const Patch*> chunk;
        for (std::size_t i = start; i < end; ++i) chunk.push_back(&patches[i]);
        const Var<float> x(stack_patches(chunk, scale));
        const auto b = model.forward(x);
        const Index n = static_cast<Index>(b.p_out.value().spatial_size());
        for (std::size_t i = start; i < end; ++i) {
            const Index k = static_cast<Index>(i - start);
            const float* p = b.p_out.value().data() + k * n;
            const float* g = b.gate ? b.gate.value().data() + k * n : nullptr;
            auto& out = patches[i].values;
            for (Index v = 0; v < n; ++v) {
                const double low = out[v];
                double y = 0;
                switch (cfg.residual_mode) {
                case ResidualMode::AE: y = low + static_cast<double>(g[v]) * (scale * p[v] - low); break;
                case ResidualMode::AR: y = scale * (static_cast<double>(p[v]) + static_cast<double>(g[v])); break;
                case ResidualMode::None: y = scale * static_cast<double>(p[v]); break;
                }
                out[v] = static_cast<float>(y);
            }
        }
    }
    Volume merged = merge_patches(patches, v_l.shape);
    merged.spacing = v_l.spacing;
    merged.drf = v_l.drf;
    merged.id = v_l.id;
    return merged;
}

// ---------------------------------------------------------------------------
// Training

std::vector<PairSource> load_pair_sources(const DatasetManifest& manifest, Bucket bucket,
                                          const std::vector<DoseLevel>& drfs) {
    std::vector<PairSource> out;
    for (const ManifestEntry* e : manifest.subjects_in(bucket)) {
        PairSource s;
        s.id = e->subject;
        s.full = load_volume(e->full);
        for (const auto& d : drfs) {
            const auto it = e->low.find(d.value());
            if (it == e->low.end()) continue;
            Volume v = load_volume(it->second);
            if (!same_grid(v, s.full)) throw DataError(e->subject + ": DRF " + std::to_string(d.value()) + " grid differs");
            s.low.emplace(d.value(), std::move(v));
        }
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

std::vector<nn::NamedParam<float>> named(const std::string& prefix, nn::Module<float>& m) {
    std::vector<nn::NamedParam<float>> out;
    for (auto& p : m.state().params) out.push_back({prefix + "/" + p.name, p.var});
    return out;
}

double patch_psnr(const Patch& ref, const Patch& pred) {
    Volume r(ref.shape, Eigen::Vector3d::Ones()), p(pred.shape, Eigen::Vector3d::Ones());
    r.voxels = ref.values;
    p.voxels = pred.values;
    const double v = psnr(r, p);
    return std::isfinite(v) ? v : 100.0;
}

} // namespace

Trainer::Trainer(const TrainConfig& cfg, std::vector<PairSource> train, std::vector<PairSource> val)
    : cfg_(cfg), train_(std::move(train)), val_(std::move(val)), model_(cfg), lr_(LrState::initial(cfg)) {
    if (train_.empty()) throw DataError("no training subjects");
    for (const auto& d : cfg_.drf_mix) {
        const bool any = std::any_of(train_.begin(), train_.end(), [&](const PairSource& s) {
            return s.low.contains(d.value());
        });
        if (!any) throw DataError("no training subject has DRF " + std::to_string(d.value()));
    }
    if (cfg_.pretrained_encoder) load_encoder(*cfg_.pretrained_encoder, model_.pixel().encoder());

    nn::AdamOptions opts{.lr = cfg_.lr0, .beta1 = cfg_.beta1, .beta2 = cfg_.beta2, .eps = 1e-8, .weight_decay = 0.0};
    auto g = named("pixel", model_.pixel());
    if (model_.ae()) {
        auto a = named("ae", *model_.ae());
        g.insert(g.end(), a.begin(), a.end());
    }
    opt_g_ = std::make_unique<nn::Adam<float>>(g, opts);
    if (model_.discriminator()) opt_d_ = std::make_unique<nn::Adam<float>>(named("disc", *model_.discriminator()), opts);

    // Fixed validation pairs, cycling through the DRF mix.
    const auto& pool = val_.empty() ? train_ : val_;
    for (int i = 0; i < cfg_.val_patches; ++i) {
        const int drf = cfg_.drf_mix[static_cast<std::size_t>(i) % cfg_.drf_mix.size()].value();
        std::vector<const PairSource*> have;
        for (const auto& s : pool)
            if (s.low.contains(drf)) have.push_back(&s);
        if (have.empty()) continue;
        const auto* s = have[static_cast<std::size_t>(i) % have.size()];
        val_pairs_.push_back(random_crop_pair(s->low.at(drf), s->full, cfg_.patch_shape,
                                              derive_seed(cfg_.seed, {0x7a1, static_cast<std::uint64_t>(i)})));
    }
}

Trainer::Batch Trainer::sample_batch(std::uint64_t step) {
    std::vector<PatchPair> pairs;
    Batch b;
    for (int k = 0; k < cfg_.batch_size; ++k) {
        const std::uint64_t seed = derive_seed(cfg_.seed, {0xba7c, step, static_cast<std::uint64_t>(k)});
        Rng rng = make_rng(seed);
        const int drf =
            cfg_.drf_mix[std::uniform_int_distribution<std::size_t>(0, cfg_.drf_mix.size() - 1)(rng)].value();
        std::vector<const PairSource*> have;
        for (const auto& s : train_)
            if (s.low.contains(drf)) have.push_back(&s);
        const auto* s = have[std::uniform_int_distribution<std::size_t>(0, have.size() - 1)(rng)];
        pairs.push_back(random_crop_pair(s->low.at(drf), s->full, cfg_.patch_shape, derive_seed(seed, {1})));
        b.drfs.push_back(drf);
    }
    std::vector<const Patch*> low, std;
    for (const auto& p : pairs) {
        low.push_back(&p.low);
        std.push_back(&p.std);
    }
    b.low = stack_patches(low, cfg_.suv_scale);
    b.std = stack_patches(std, cfg_.suv_scale);
    return b;
}

StepRecord Trainer::step() {
    ++step_;
    model_.set_training(true);
    opt_g_->set_lr(lr_.lr);
    if (opt_d_) opt_d_->set_lr(lr_.lr);

    Batch batch = sample_batch(static_cast<std::uint64_t>(step_));
    const Var<float> v_l(std::move(batch.low));
    const Var<float> v_s(std::move(batch.std));
    const auto bundle = model_.forward(v_l);

    StepRecord rec;
    rec.step = step_;
    rec.epoch = epoch_ + 1;
    rec.drfs = std::move(batch.drfs);

    auto* disc = model_.discriminator();
    if (disc) {
        opt_d_->zero_grad();
        const auto d_loss = discriminator_loss(*disc, v_l, v_s, bundle.refined);
        nn::backward(d_loss);
        opt_d_->step();
        rec.d_loss = d_loss.value().item();
    }

    std::vector<Var<float>> terms;
    std::vector<double> weights;
    GeneratorParts parts;
    terms.push_back(content_loss(bundle.p_out, v_s));
    weights.push_back(cfg_.lambda_content);
    parts.content = terms.back().value().item();
    if (cfg_.residual_mode != ResidualMode::None) {
        terms.push_back(residual_loss(bundle, v_s, v_l));
        weights.push_back(cfg_.lambda_residual);
        parts.residual = terms.back().value().item();
    }
    if (disc) {
        terms.push_back(generator_adversarial_loss(*disc, v_l, v_s, bundle.refined));
        weights.push_back(cfg_.lambda_adversarial);
        parts.adversarial = terms.back().value().item();
    }
    const auto total = nn::weighted_sum(std::span<const Var<float>>(terms), std::span<const double>(weights));
    rec.total = total_generator_loss(parts, cfg_);
    if (!std::isfinite(rec.total)) throw NumericError("generator loss is not finite at step " + std::to_string(step_));
    opt_g_->zero_grad();
    nn::backward(total);
    opt_g_->step();

    rec.content = parts.content;
    rec.residual = parts.residual;
    rec.g_loss = parts.adversarial;
    log_.steps.push_back(rec);
    return rec;
}

std::pair<double, double> Trainer::validate() {
    if (val_pairs_.empty()) return {0.0, 0.0};
    nn::NoGradGuard no_grad;
    model_.set_training(false);
    double loss = 0, db = 0;
    for (const auto& pair : val_pairs_) {
        const Patch* lp = &pair.low;
        const Patch* sp = &pair.std;
        const Var<float> v_l(stack_patches(std::span<const Patch* const>(&lp, 1), cfg_.suv_scale));
        const Var<float> v_s(stack_patches(std::span<const Patch* const>(&sp, 1), cfg_.suv_scale));
        const auto b = model_.forward(v_l);
        loss += nn::mean_abs(nn::sub(b.refined, v_s)).value().item();
        Patch out = pair.std;
        out.values = b.refined.value().array() * static_cast<float>(cfg_.suv_scale);
        db += patch_psnr(pair.std, out);
    }
    model_.set_training(true);
    const double n = static_cast<double>(val_pairs_.size());
    return {loss / n, db / n};
}

EpochRecord Trainer::run_epoch() {
    const std::size_t first = log_.steps.size();
    for (int s = 0; s < cfg_.steps_per_epoch; ++s) step();
    ++epoch_;
    EpochRecord e;
    e.epoch = epoch_;
    e.lr = lr_.lr;
    const double n = static_cast<double>(log_.steps.size() - first);
    for (std::size_t i = first; i < log_.steps.size(); ++i) {
        const auto& r = log_.steps[i];
        e.content += r.content / n;
        e.residual += r.residual / n;
        e.d_loss += r.d_loss / n;
        e.g_loss += r.g_loss / n;
    }
    std::tie(e.val_loss, e.val_psnr) = validate();
    lr_ = lr_schedule_step(lr_, e.val_loss, cfg_);
    log_.epochs.push_back(e);
    return e;
}

const TrainLog& Trainer::run() {
    while (epoch_ < cfg_.max_epochs) {
        run_epoch();
        if (lr_.stop) {
            log_.stopped_by_schedule = true;
            break;
        }
    }
    return log_;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) {
    nn::Checkpoint ck;
    model_.store(ck);
    nn::StateList<float> g;
    opt_g_->collect(g);
    nn::store_state(ck, "opt_g", g);
    if (opt_d_) {
        nn::StateList<float> d;
        opt_d_->collect(d);
        nn::store_state(ck, "opt_d", d);
    }
    ck.meta["epochs"] = epoch_;
    ck.meta["steps"] = step_;
    ck.meta["lr"] = lr_.lr;
    ck.save(path);
}

void write_train_log(const TrainLog& log, const TrainConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    const bool res = cfg.residual_mode != ResidualMode::None;
    const bool adv = cfg.use_discriminator;
    out << "epoch,lr,L_content";
    if (res) out << ",L_residual";
    if (adv) out << ",d_loss,g_loss";
    out << ",val_loss,val_psnr\n";
    out.precision(9);
    for (const auto& e : log.epochs) {
        out << e.epoch << ',' << e.lr << ',' << e.content;
        if (res) out << ',' << e.residual;
        if (adv) out << ',' << e.d_loss << ',' << e.g_loss;
        out << ',' << e.val_loss << ',' << e.val_psnr << '\n';
    }
}

} // namespace aegan
