#include "aegan/ssp.hpp"

#include "aegan/error.hpp"
#include "aegan/json_reader.hpp"
#include "aegan/nn/checkpoint.hpp"
#include "aegan/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace aegan {

using nlohmann::json;
using nn::Var;

int drl_class_of(DoseLevel drf) {
    switch (drf.value()) {
    case 4:
    case 10: return 0;
    case 20:
    case 50: return 1;
    case 100: return 2;
    default: throw ArgumentError("full-dose volumes have no dose-reduction class");
    }
}

Patch rotate_patch(const Patch& p, int k) {
    if (p.shape.x != p.shape.y)
        throw ArgumentError("rotation needs a square in-plane patch, got " + to_string(p.shape));
    if (k < 0 || k > 3) throw ArgumentError("rotation class must be 0..3, got " + std::to_string(k));
    Patch cur = p;
    const Index w = p.shape.x;
    for (int r = 0; r < k; ++r) {
        Patch next = cur;
        for (Index z = 0; z < p.shape.z; ++z)
            for (Index y = 0; y < w; ++y)
                for (Index x = 0; x < w; ++x) next(x, y, z) = cur(y, w - 1 - x, z);
        cur = std::move(next);
    }
    return cur;
}

namespace {

template <typename F>
void for_each_voxel(const Patch& p, const Cuboid& c, F&& f) {
    for (Index z = c.origin.z; z < c.origin.z + c.shape.z; ++z)
        for (Index y = c.origin.y; y < c.origin.y + c.shape.y; ++y)
            for (Index x = c.origin.x; x < c.origin.x + c.shape.x; ++x) f(p.index(x, y, z));
}

Index uniform_index(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

} // namespace

CutoutResult cutout_perturb(const Patch& p, std::uint64_t seed, double dropout_fraction) {
    for (int d = 0; d < 3; ++d)
        if (p.shape[d] < 8) throw ArgumentError("cutout needs >= 8 voxels per axis, got " + to_string(p.shape));
    if (!(dropout_fraction > 0.0 && dropout_fraction < 1.0))
        throw ArgumentError("dropout fraction must lie in (0, 1)");

    Rng rng = make_rng(seed, {0xc07});
    CutoutResult res{p, {}};
    auto& fate = res.mask.fate;
    fate = decltype(res.mask.fate)::Zero(p.shape.volume());
    const Index total = p.shape.volume();
    const Index lo = static_cast<Index>(std::ceil((dropout_fraction - 0.01) * static_cast<double>(total)));
    const Index hi = static_cast<Index>(std::floor((dropout_fraction + 0.01) * static_cast<double>(total)));
    auto fresh = [&](const Cuboid& c) {
        Index n = 0;
        for_each_voxel(p, c, [&](Index i) { n += fate[i] == 0; });
        return n;
    };

    Index dropped = 0;
    while (dropped < lo) {
        Cuboid c;
        for (int d = 0; d < 3; ++d) {
            c.shape[d] = uniform_index(rng, std::max<Index>(1, p.shape[d] / 8), std::max<Index>(1, p.shape[d] / 3));
            c.origin[d] = uniform_index(rng, 0, p.shape[d] - c.shape[d]);
        }
        Index added = fresh(c);
        while (dropped + added > hi) {
            int axis = 0;
            for (int d = 1; d < 3; ++d)
                if (c.shape[d] > c.shape[axis]) axis = d;
            c.shape[axis] = std::max<Index>(1, c.shape[axis] / 2);
            added = fresh(c);
        }
        if (added == 0) continue;
        for_each_voxel(p, c, [&](Index i) {
            fate[i] = static_cast<std::uint8_t>(VoxelFate::Dropped);
            res.patch.values[i] = 0.0f;
        });
        dropped += added;
        res.mask.dropout.push_back(c);
    }

    // Local shuffles on small cuboids that avoid every touched voxel.
    for (int attempt = 0; attempt < 200 && res.mask.shuffle.size() < 4; ++attempt) {
        Cuboid c;
        for (int d = 0; d < 3; ++d) {
            c.shape[d] = uniform_index(rng, 2, std::min<Index>(4, p.shape[d]));
            c.origin[d] = uniform_index(rng, 0, p.shape[d] - c.shape[d]);
        }
        if (fresh(c) != c.shape.volume()) continue;
        std::vector<Index> idx;
        for_each_voxel(p, c, [&](Index i) { idx.push_back(i); });
        std::vector<float> vals;
        for (Index i : idx) vals.push_back(p.values[i]);
        std::shuffle(vals.begin(), vals.end(), rng);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            res.patch.values[idx[k]] = vals[k];
            fate[idx[k]] = static_cast<std::uint8_t>(VoxelFate::Shuffled);
        }
        res.mask.shuffle.push_back(c);
    }

    if (std::bernoulli_distribution(0.5)(rng)) {
        const Index band = std::max<Index>(1, std::min({p.shape.x, p.shape.y, p.shape.z}) / 8);
        const float vmin = p.values.minCoeff();
        const float vmax = p.values.maxCoeff();
        std::uniform_real_distribution<float> noise(vmin, std::max(vmax, std::nextafter(vmin, vmin + 1.0f)));
        res.mask.outpainted = true;
        res.mask.band = band;
        for (Index z = 0; z < p.shape.z; ++z)
            for (Index y = 0; y < p.shape.y; ++y)
                for (Index x = 0; x < p.shape.x; ++x) {
                    const bool border = x < band || y < band || z < band || x >= p.shape.x - band ||
                                        y >= p.shape.y - band || z >= p.shape.z - band;
                    const Index i = p.index(x, y, z);
                    if (!border || fate[i] != 0) continue;
                    res.patch.values[i] = noise(rng);
                    fate[i] = static_cast<std::uint8_t>(VoxelFate::OutPainted);
                }
    }
    return res;
}

SspView make_view(const Patch& source, DoseLevel drf, const std::string& source_id, std::uint64_t seed,
                  double dropout_fraction) {
    Rng rng = make_rng(seed, {0x50e});
    SspView v;
    v.rotation_class = static_cast<int>(uniform_index(rng, 0, 3));
    v.drl_class = drl_class_of(drf);
    v.original = rotate_patch(source, v.rotation_class);
    auto cut = cutout_perturb(v.original, derive_seed(seed, {0xc07}), dropout_fraction);
    v.patch = std::move(cut.patch);
    v.mask = std::move(cut.mask);
    v.source = source_id;
    return v;
}

// ---------------------------------------------------------------------------
// Losses

template <typename Scalar>
Var<Scalar> loss_classification(const Var<Scalar>& logits, std::span<const int> labels) {
    if (logits.value().rows().cols() != 3) throw ArgumentError("classification loss expects 3 logits per sample");
    return nn::cross_entropy(logits, labels);
}

template <typename Scalar>
Var<Scalar> loss_rotation(const Var<Scalar>& logits, std::span<const int> labels) {
    if (logits.value().rows().cols() != 4) throw ArgumentError("rotation loss expects 4 logits per sample");
    return nn::cross_entropy(logits, labels);
}

template <typename Scalar>
Var<Scalar> loss_cpc(const Var<Scalar>& codes, std::span<const int> partner, double sigma) {
    return nn::nt_xent(codes, partner, sigma);
}

template <typename Scalar>
Var<Scalar> loss_restoration(const Var<Scalar>& restored, const Var<Scalar>& original) {
    if (!restored.value().same_shape(original.value())) throw ArgumentError("restoration loss: shape mismatch");
    return nn::mean_abs(nn::sub(restored, original));
}

template Var<float> loss_classification(const Var<float>&, std::span<const int>);
template Var<double> loss_classification(const Var<double>&, std::span<const int>);
template Var<float> loss_rotation(const Var<float>&, std::span<const int>);
template Var<double> loss_rotation(const Var<double>&, std::span<const int>);
template Var<float> loss_cpc(const Var<float>&, std::span<const int>, double);
template Var<double> loss_cpc(const Var<double>&, std::span<const int>, double);
template Var<float> loss_restoration(const Var<float>&, const Var<float>&);
template Var<double> loss_restoration(const Var<double>&, const Var<double>&);

namespace {

Var<double> row_vector(std::span<const double> v) {
    Tensor<double> t = Tensor<double>::vector(1, static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) t[static_cast<Index>(i)] = v[i];
    return Var<double>(t);
}

} // namespace

double loss_classification(std::span<const double> logits, int label) {
    const int l[] = {label};
    return loss_classification(row_vector(logits), std::span<const int>(l)).value().item();
}

double loss_rotation(std::span<const double> logits, int label) {
    const int l[] = {label};
    return loss_rotation(row_vector(logits), std::span<const int>(l)).value().item();
}

double loss_cpc(const std::vector<std::vector<double>>& codes, std::span<const int> partner, double sigma) {
    if (codes.empty()) throw ArgumentError("cpc loss needs at least one positive pair");
    const Index d = static_cast<Index>(codes.front().size());
    Tensor<double> t = Tensor<double>::vector(static_cast<Index>(codes.size()), d);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (static_cast<Index>(codes[i].size()) != d) throw ArgumentError("cpc codes differ in length");
        for (Index k = 0; k < d; ++k) t.rows()(static_cast<Index>(i), k) = codes[i][static_cast<std::size_t>(k)];
    }
    return loss_cpc(Var<double>(t), partner, sigma).value().item();
}

double loss_restoration(const Patch& restored, const Patch& original) {
    if (!(restored.shape == original.shape)) throw ArgumentError("restoration loss: shape mismatch");
    return (restored.values.cast<double>() - original.values.cast<double>()).abs().mean();
}

double ssp_total_loss(const SspParts& parts, const std::array<double, 4>& l) {
    const double total =
        l[0] * parts.classification + l[1] * parts.rotation + l[2] * parts.cpc + l[3] * parts.restoration;
    if (!std::isfinite(total)) throw NumericError("non-finite pre-training loss");
    return total;
}

// ---------------------------------------------------------------------------
// Config

void SspConfig::validate() const {
    for (double l : lambdas)
        if (!(l >= 0.0)) throw ConfigError("ssp lambdas must be >= 0");
    if (!(sigma > 0.0)) throw ConfigError("ssp sigma must be > 0");
    if (!(dropout_fraction > 0.0 && dropout_fraction < 1.0)) throw ConfigError("dropout_fraction must lie in (0, 1)");
    if (batch_size < 1) throw ConfigError("ssp batch_size must be >= 1");
    if (steps < 0) throw ConfigError("ssp steps must be >= 0");
    if (patch_shape.x != patch_shape.y) throw ConfigError("ssp patches must be square in-plane");
    if (!(optimizer.lr > 0.0)) throw ConfigError("ssp learning rate must be > 0");
    if (!(suv_scale > 0.0)) throw ConfigError("suv_scale must be > 0");
    if (std::none_of(tasks.begin(), tasks.end(), [](bool t) { return t; }))
        throw ConfigError("at least one pre-training task must be enabled");
}

namespace {
constexpr const char* kTaskNames[4] = {"drl", "rotation", "cpc", "restoration"};
}

void to_json(json& j, const SspConfig& c) {
    json tasks = json::array();
    for (int i = 0; i < 4; ++i)
        if (c.tasks[static_cast<std::size_t>(i)]) tasks.push_back(kTaskNames[i]);
    j = json{{"lambdas", c.lambdas},
             {"tasks", tasks},
             {"sigma", c.sigma},
             {"dropout_fraction", c.dropout_fraction},
             {"batch_size", c.batch_size},
             {"steps", c.steps},
             {"patch_shape", {c.patch_shape.x, c.patch_shape.y, c.patch_shape.z}},
             {"lr", c.optimizer.lr},
             {"weight_decay", c.optimizer.weight_decay},
             {"suv_scale", c.suv_scale}};
}

SspConfig parse_ssp_config(const json& j, const std::string& path) {
    JsonReader r(j, path);
    SspConfig c;
    if (r.has("lambdas")) {
        const auto l = r.get<std::vector<double>>("lambdas");
        if (l.size() != 4) r.fail("lambdas", "expected 4 weights");
        std::copy(l.begin(), l.end(), c.lambdas.begin());
    }
    if (r.has("tasks")) {
        c.tasks = {false, false, false, false};
        for (const auto& name : r.get<std::vector<std::string>>("tasks")) {
            const auto it = std::find_if(std::begin(kTaskNames), std::end(kTaskNames),
                                         [&](const char* n) { return name == n; });
            if (it == std::end(kTaskNames)) r.fail("tasks", "unknown task '" + name + "'");
            c.tasks[static_cast<std::size_t>(it - std::begin(kTaskNames))] = true;
        }
    }
    c.sigma = r.get_or<double>("sigma", c.sigma);
    c.dropout_fraction = r.get_or<double>("dropout_fraction", c.dropout_fraction);
    c.batch_size = r.get_or<int>("batch_size", c.batch_size);
    c.steps = r.get_or<int>("steps", c.steps);
    if (r.has("patch_shape")) c.patch_shape = r.extent("patch_shape");
    c.optimizer.lr = r.get_or<double>("lr", c.optimizer.lr);
    c.optimizer.weight_decay = r.get_or<double>("weight_decay", c.optimizer.weight_decay);
    c.suv_scale = r.get_or<double>("suv_scale", c.suv_scale);
    r.finish();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw SchemaError(path, e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Training

Tensor<float> stack_patches(std::span<const Patch* const> patches, double scale) {
    if (patches.empty()) throw ArgumentError("no patches to stack");
    const Extent3 shape = patches.front()->shape;
    Tensor<float> t(static_cast<Index>(patches.size()), 1, shape);
    const float inv = static_cast<float>(1.0 / scale);
    for (std::size_t n = 0; n < patches.size(); ++n) {
        if (!(patches[n]->shape == shape)) throw ArgumentError("cannot stack patches of different shapes");
        t.sample(static_cast<Index>(n)).row(0) = patches[n]->values.matrix().transpose() * inv;
    }
    return t;
}

namespace {

double accuracy(const Tensor<float>& logits, const std::vector<int>& labels) {
    const auto m = logits.rows();
    int hits = 0;
    for (Index n = 0; n < m.rows(); ++n) {
        Index arg = 0;
        m.row(n).maxCoeff(&arg);
        hits += arg == labels[static_cast<std::size_t>(n)];
    }
    return static_cast<double>(hits) / static_cast<double>(m.rows());
}

} // namespace

SspResult pretrain(nn::PixelEncoder<float>& encoder, nn::SspHeads<float>& heads, const std::vector<SspSource>& sources,
                   const SspConfig& cfg) {
    cfg.validate();
    if (sources.empty()) throw ConfigError("pre-training dataset is empty");
    heads.check_encoder(encoder);
    encoder.spec().check_patch(cfg.patch_shape);
    for (const auto& s : sources) (void)drl_class_of(s.volume.drf);

    std::vector<nn::NamedParam<float>> params;
    for (auto& p : encoder.state().params) params.push_back({"encoder." + p.name, p.var});
    for (auto& p : heads.state().params) params.push_back({"heads." + p.name, p.var});
    nn::Adam<float> opt(params, cfg.optimizer);
    encoder.set_training(true);
    heads.set_training(true);

    const int n = cfg.batch_size;
    std::vector<int> partner(static_cast<std::size_t>(2 * n));
    for (int i = 0; i < n; ++i) {
        partner[static_cast<std::size_t>(i)] = i + n;
        partner[static_cast<std::size_t>(i + n)] = i;
    }

    SspResult result;
    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<SspView> views(static_cast<std::size_t>(2 * n));
        for (int b = 0; b < n; ++b) {
            const std::uint64_t s = derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b)});
            Rng rng = make_rng(s);
            const auto& src = sources[static_cast<std::size_t>(uniform_index(rng, 0, Index(sources.size()) - 1))];
            Extent3 origin;
            for (int d = 0; d < 3; ++d) {
                if (cfg.patch_shape[d] > src.volume.shape[d])
                    throw ConfigError("ssp patch " + to_string(cfg.patch_shape) + " exceeds volume " +
                                      to_string(src.volume.shape));
                origin[d] = uniform_index(rng, 0, src.volume.shape[d] - cfg.patch_shape[d]);
            }
            const Patch patch = crop(src.volume, origin, cfg.patch_shape);
            for (int v = 0; v < 2; ++v)
                views[static_cast<std::size_t>(b + v * n)] =
                    make_view(patch, src.volume.drf, src.id, derive_seed(s, {static_cast<std::uint64_t>(v + 1)}),
                              cfg.dropout_fraction);
        }
        std::vector<const Patch*> inputs, targets;
        std::vector<int> drl, rot;
        for (const auto& v : views) {
            inputs.push_back(&v.patch);
            targets.push_back(&v.original);
            drl.push_back(v.drl_class);
            rot.push_back(v.rotation_class);
        }
        const Var<float> x(stack_patches(inputs, cfg.suv_scale));
        const auto out = heads(encoder(x), cfg.tasks[3]);

        std::vector<Var<float>> terms;
        std::vector<double> weights;
        SspLogRow row;
        row.step = step;
        if (cfg.tasks[0]) {
            terms.push_back(loss_classification(out.drl_logits, std::span<const int>(drl)));
            weights.push_back(cfg.lambdas[0]);
            row.parts.classification = terms.back().value().item();
        }
        if (cfg.tasks[1]) {
            terms.push_back(loss_rotation(out.rotation_logits, std::span<const int>(rot)));
            weights.push_back(cfg.lambdas[1]);
            row.parts.rotation = terms.back().value().item();
        }
        if (cfg.tasks[2]) {
            terms.push_back(loss_cpc(out.cpc_codes, std::span<const int>(partner), cfg.sigma));
            weights.push_back(cfg.lambdas[2]);
            row.parts.cpc = terms.back().value().item();
        }
        if (cfg.tasks[3]) {
            terms.push_back(loss_restoration(out.restored, Var<float>(stack_patches(targets, cfg.suv_scale))));
            weights.push_back(cfg.lambdas[3]);
            row.parts.restoration = terms.back().value().item();
        }
        const auto total = nn::weighted_sum(std::span<const Var<float>>(terms), std::span<const double>(weights));
        row.total = ssp_total_loss(row.parts, cfg.lambdas);
        row.rotation_accuracy = accuracy(out.rotation_logits.value(), rot);
        row.drl_accuracy = accuracy(out.drl_logits.value(), drl);

        opt.zero_grad();
        nn::backward(total);
        opt.step();
        result.log.push_back(row);
    }
    return result;
}

void write_ssp_log(const std::vector<SspLogRow>& log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,L_class,L_rot,L_CPC,L_Res,total\n";
    out.precision(9);
    for (const auto& r : log)
        out << r.step << ',' << r.parts.classification << ',' << r.parts.rotation << ',' << r.parts.cpc << ','
            << r.parts.restoration << ',' << r.total << '\n';
}

void save_encoder(const std::filesystem::path& path, nn::PixelEncoder<float>& encoder, const json& extra_meta) {
    nn::Checkpoint ck;
    ck.meta = extra_meta.is_object() ? extra_meta : json::object();
    ck.meta["kind"] = "pixel_encoder";
    ck.meta["encoder_spec"] = encoder.spec();
    auto state = encoder.state();
    nn::store_state(ck, "encoder", state);
    ck.save(path);
}

void load_encoder(const std::filesystem::path& path, nn::PixelEncoder<float>& encoder) {
    const auto ck = nn::Checkpoint::load(path);
    if (!ck.meta.contains("encoder_spec")) throw CheckpointError(path.string() + " holds no encoder spec");
    nn::NetworkSpec stored;
    try {
        stored = nn::parse_network_spec(ck.meta["encoder_spec"], "encoder_spec");
    } catch (const SchemaError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
    auto want = encoder.spec();
    stored.kind = want.kind;
    if (!(stored == want)) throw CheckpointError(path.string() + ": encoder spec does not match the target network");
    auto state = encoder.state();
    nn::restore_state(ck, "encoder", state);
}

} // namespace aegan
