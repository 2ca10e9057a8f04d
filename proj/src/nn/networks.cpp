#include "aegan/nn/networks.hpp"

#include "aegan/error.hpp"
#include "aegan/json_reader.hpp"

#include <nlohmann/json.hpp>

namespace aegan::nn {

using nlohmann::json;

std::string to_string(NetworkKind kind) {
    switch (kind) {
    case NetworkKind::PixelNet: return "pixel_net";
    case NetworkKind::AeNet: return "ae_net";
    case NetworkKind::Discriminator: return "discriminator";
    case NetworkKind::SspHeads: return "ssp_heads";
    }
    return "?";
}

NetworkKind network_kind_from_string(const std::string& s) {
    if (s == "pixel_net") return NetworkKind::PixelNet;
    if (s == "ae_net") return NetworkKind::AeNet;
    if (s == "discriminator") return NetworkKind::Discriminator;
    if (s == "ssp_heads") return NetworkKind::SspHeads;
    throw SpecError("unknown network kind '" + s + "'");
}

namespace {

std::vector<Extent3> halving_schedule(int levels, bool flat_last) {
    std::vector<Extent3> s(static_cast<std::size_t>(levels), Extent3{2, 2, 2});
    if (flat_last) s.back() = Extent3{2, 2, 1};
    return s;
}

} // namespace

NetworkSpec NetworkSpec::pixel_net(int base_channels) {
    return {NetworkKind::PixelNet, base_channels, halving_schedule(5, true), 1, 0.2, false};
}
NetworkSpec NetworkSpec::ae_net(int base_channels) {
    return {NetworkKind::AeNet, base_channels, halving_schedule(4, false), 1, 0.2, false};
}
NetworkSpec NetworkSpec::discriminator(int base_channels) {
    return {NetworkKind::Discriminator, base_channels, halving_schedule(5, true), 2, 0.2, false};
}
NetworkSpec NetworkSpec::ssp_heads(int base_channels) {
    return {NetworkKind::SspHeads, base_channels, halving_schedule(5, true), 1, 0.2, false};
}

int NetworkSpec::levels() const { return kind == NetworkKind::AeNet ? 4 : 5; }

void NetworkSpec::validate() const {
    const std::string who = to_string(kind);
    if (static_cast<int>(depth_strides.size()) != levels())
        throw SpecError(who + " needs " + std::to_string(levels()) + " stride levels, got " +
                        std::to_string(depth_strides.size()));
    for (const auto& s : depth_strides)
        if (s.x < 1 || s.y < 1 || s.z < 1) throw SpecError(who + " stride " + aegan::to_string(s) + " must be >= 1");
    if (base_channels < 1) throw SpecError(who + " base_channels must be >= 1");
    if (in_channels < 1) throw SpecError(who + " in_channels must be >= 1");
    if (!(negative_slope >= 0.0)) throw SpecError(who + " negative_slope must be >= 0");
}

std::vector<Extent3> NetworkSpec::level_extents(Extent3 patch) const {
    validate();
    std::vector<Extent3> out;
    Extent3 e = patch;
    for (const auto& s : depth_strides) {
        for (int d = 0; d < 3; ++d) {
            if (e[d] % s[d] != 0 || e[d] / s[d] < 1)
                throw SpecError(to_string(kind) + " stride schedule does not divide patch " + aegan::to_string(patch) +
                                " (axis " + std::to_string(d) + " reaches " + std::to_string(e[d]) + " before stride " +
                                std::to_string(s[d]) + ")");
            e[d] /= s[d];
        }
        out.push_back(e);
    }
    return out;
}

void NetworkSpec::check_patch(Extent3 patch) const { (void)level_extents(patch); }

void to_json(json& j, const NetworkSpec& s) {
    json strides = json::array();
    for (const auto& e : s.depth_strides) strides.push_back({e.x, e.y, e.z});
    j = json{{"kind", to_string(s.kind)},
             {"base_channels", s.base_channels},
             {"depth_strides", strides},
             {"in_channels", s.in_channels},
             {"negative_slope", s.negative_slope},
             {"score", s.score_map ? "map" : "mean"}};
}

NetworkSpec parse_network_spec(const json& j, const std::string& path) {
    JsonReader r(j, path);
    const auto kind = network_kind_from_string(r.get<std::string>("kind"));
    NetworkSpec s;
    switch (kind) {
    case NetworkKind::PixelNet: s = NetworkSpec::pixel_net(); break;
    case NetworkKind::AeNet: s = NetworkSpec::ae_net(); break;
    case NetworkKind::Discriminator: s = NetworkSpec::discriminator(); break;
    case NetworkKind::SspHeads: s = NetworkSpec::ssp_heads(); break;
    }
    s.base_channels = r.get_or<int>("base_channels", s.base_channels);
    if (r.has("depth_strides")) {
        const auto raw = r.get<std::vector<std::vector<Index>>>("depth_strides");
        s.depth_strides.clear();
        for (const auto& v : raw) {
            if (v.size() != 3) r.fail("depth_strides", "each stride needs 3 integers");
            s.depth_strides.push_back({v[0], v[1], v[2]});
        }
    }
    s.in_channels = r.get_or<int>("in_channels", s.in_channels);
    s.negative_slope = r.get_or<double>("negative_slope", s.negative_slope);
    const auto score = r.get_or<std::string>("score", "mean");
    if (score != "mean" && score != "map") r.fail("score", "expected \"mean\" or \"map\"");
    s.score_map = score == "map";
    r.finish();
    try {
        s.validate();
    } catch (const SpecError& e) {
        throw SchemaError(path, e.what());
    }
    return s;
}

std::vector<Index> pixel_channels(int base_channels) {
    const Index c = base_channels;
    return {c, 2 * c, 4 * c, 8 * c, 8 * c};
}

// ---------------------------------------------------------------------------

template <typename Scalar>
PixelEncoder<Scalar>::PixelEncoder(const NetworkSpec& spec, std::uint64_t seed)
    : spec_(spec), channels_(pixel_channels(spec.base_channels)) {
    spec_.validate();
    Rng rng = make_rng(seed, {0xe1c});
    for (std::size_t i = 0; i < 5; ++i) {
        const Index in = i == 0 ? spec_.in_channels : channels_[i - 1];
        const bool has_norm = i > 0 && i < 4;
        convs_.emplace_back(in, channels_[i], spec_.depth_strides[i], !has_norm);
        convs_.back().init(rng);
        if (has_norm) {
            norms_.emplace_back(channels_[i]);
            norms_.back().init(rng);
        }
    }
}

template <typename Scalar>
std::vector<Var<Scalar>> PixelEncoder<Scalar>::operator()(const Var<Scalar>& x) {
    std::vector<Var<Scalar>> f;
    f.push_back(convs_[0](x));
    for (std::size_t i = 1; i < 5; ++i) {
        auto h = convs_[i](leaky_relu(f.back(), spec_.negative_slope));
        if (i < 4) h = norms_[i - 1](h, this->training_);
        f.push_back(h);
    }
    return f;
}

template <typename Scalar>
void PixelEncoder<Scalar>::collect(const std::string& prefix, StateList<Scalar>& out) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        const std::string level = this->join(prefix, "level" + std::to_string(i));
        convs_[i].collect(level + ".conv", out);
        if (i > 0 && i < 4) norms_[i - 1].collect(level + ".bn", out);
    }
}

template <typename Scalar>
PixelDecoder<Scalar>::PixelDecoder(const NetworkSpec& spec, Index out_channels, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    const auto ch = pixel_channels(spec_.base_channels);
    Rng rng = make_rng(seed, {0xdec});
    // Block order runs from the bottleneck up; block j undoes encoder level 4 - j.
    for (int level = 4; level >= 0; --level) {
        const Index in = level == 4 ? ch[4] : 2 * ch[static_cast<std::size_t>(level)];
        const Index out = level > 0 ? ch[static_cast<std::size_t>(level - 1)] : out_channels;
        convs_.emplace_back(in, out, spec_.depth_strides[static_cast<std::size_t>(level)], level == 0);
        convs_.back().init(rng);
        if (level > 0) {
            norms_.emplace_back(out);
            norms_.back().init(rng);
        }
    }
}

template <typename Scalar>
Var<Scalar> PixelDecoder<Scalar>::operator()(const std::vector<Var<Scalar>>& f) {
    if (f.size() != 5) throw SpecError("pixel decoder expects 5 encoder features, got " + std::to_string(f.size()));
    Var<Scalar> h = f[4];
    for (std::size_t j = 0; j < 5; ++j) {
        const std::size_t level = 4 - j;
        if (j > 0) h = concat_channels(h, f[level]);
        h = convs_[j](relu(h));
        if (level > 0) h = norms_[j](h, this->training_);
    }
    return h;
}

template <typename Scalar>
void PixelDecoder<Scalar>::collect(const std::string& prefix, StateList<Scalar>& out) {
    for (std::size_t j = 0; j < convs_.size(); ++j) {
        const std::string level = this->join(prefix, "level" + std::to_string(4 - j));
        convs_[j].collect(level + ".deconv", out);
        if (j < 4) norms_[j].collect(level + ".bn", out);
    }
}

template <typename Scalar>
PixelNet<Scalar>::PixelNet(const NetworkSpec& spec, std::uint64_t seed)
    : encoder_(spec, derive_seed(seed, {1})), decoder_(spec, spec.in_channels, derive_seed(seed, {2})) {
    if (spec.kind != NetworkKind::PixelNet && spec.kind != NetworkKind::SspHeads)
        throw SpecError("pixel net built from a " + to_string(spec.kind) + " spec");
}

template <typename Scalar>
Var<Scalar> PixelNet<Scalar>::operator()(const Var<Scalar>& x) {
    spec().check_patch(x.value().extent());
    return decoder_(encoder_(x));
}

template <typename Scalar>
void PixelNet<Scalar>::collect(const std::string& prefix, StateList<Scalar>& out) {
    encoder_.collect(this->join(prefix, "encoder"), out);
    decoder_.collect(this->join(prefix, "decoder"), out);
}

template <typename Scalar>
void PixelNet<Scalar>::set_training(bool on) {
    this->training_ = on;
    encoder_.set_training(on);
    decoder_.set_training(on);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
AeNet<Scalar>::AeNet(const NetworkSpec& spec, std::uint64_t seed) : spec_(spec) {
    if (spec.kind != NetworkKind::AeNet) throw SpecError("ae net built from a " + to_string(spec.kind) + " spec");
    spec_.validate();
    Rng rng = make_rng(seed, {0xae});
    std::vector<Index> ch;
    for (int k = 0; k < 4; ++k) ch.push_back(Index(spec_.base_channels) << k);
    for (std::size_t k = 0; k < 4; ++k) {
        enc_convs_.emplace_back(k == 0 ? spec_.in_channels : ch[k - 1], ch[k], Extent3{1, 1, 1}, false);
        enc_convs_.back().init(rng);
        enc_norms_.emplace_back(ch[k]);
        enc_norms_.back().init(rng);
    }
    for (std::size_t j = 0; j < 4; ++j) {
        const std::size_t k = 3 - j;
        const Index in = j == 0 ? ch[3] : ch[k + 1];
        up_convs_.emplace_back(in, ch[k], spec_.depth_strides[k], false);
        up_convs_.back().init(rng);
        dec_convs_.emplace_back(2 * ch[k], ch[k], Extent3{1, 1, 1}, false);
        dec_convs_.back().init(rng);
        dec_norms_.emplace_back(ch[k]);
        dec_norms_.back().init(rng);
    }
    head_ = Conv3d<Scalar>(ch[0], spec_.in_channels, Extent3{1, 1, 1}, true, 1);
    head_.init(rng);
}

template <typename Scalar>
Var<Scalar> AeNet<Scalar>::operator()(const Var<Scalar>& x) {
    spec_.check_patch(x.value().extent());
    std::vector<Var<Scalar>> skips;
    Var<Scalar> h = x;
    for (std::size_t k = 0; k < 4; ++k) {
        h = leaky_relu(enc_norms_[k](enc_convs_[k](h), this->training_), spec_.negative_slope);
        skips.push_back(h);
        h = max_pool3d(h, spec_.depth_strides[k]);
    }
    for (std::size_t j = 0; j < 4; ++j) {
        const std::size_t k = 3 - j;
        h = concat_channels(up_convs_[j](h), skips[k]);
        h = relu(dec_norms_[j](dec_convs_[j](h), this->training_));
    }
    return head_(h);
}

template <typename Scalar>
void AeNet<Scalar>::collect(const std::string& prefix, StateList<Scalar>& out) {
    for (std::size_t k = 0; k < 4; ++k) {
        const std::string p = this->join(prefix, "enc" + std::to_string(k));
        enc_convs_[k].collect(p + ".conv", out);
        enc_norms_[k].collect(p + ".bn", out);
    }
    for (std::size_t j = 0; j < 4; ++j) {
        const std::string p = this->join(prefix, "dec" + std::to_string(j));
        up_convs_[j].collect(p + ".up", out);
        dec_convs_[j].collect(p + ".conv", out);
        dec_norms_[j].collect(p + ".bn", out);
    }
    head_.collect(this->join(prefix, "head"), out);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Discriminator<Scalar>::Discriminator(const NetworkSpec& spec, std::uint64_t seed) : spec_(spec) {
    if (spec.kind != NetworkKind::Discriminator)
        throw SpecError("discriminator built from a " + to_string(spec.kind) + " spec");
    spec_.validate();
    Rng rng = make_rng(seed, {0xd15});
    const Index c = spec_.base_channels;
    const Index ch[5] = {c, 2 * c, 4 * c, 8 * c, 1};
    for (std::size_t k = 0; k < 5; ++k) {
        convs_.emplace_back(k == 0 ? spec_.in_channels : ch[k - 1], ch[k], spec_.depth_strides[k], true);
        convs_.back().init(rng);
        if (k < 4) {
            norms_.emplace_back(ch[k]);
            norms_.back().init(rng);
        }
    }
}

template <typename Scalar>
Var<Scalar> Discriminator<Scalar>::map(const Var<Scalar>& pair) {
    if (pair.value().channels() != spec_.in_channels)
        throw SpecError("discriminator expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                        std::to_string(pair.value().channels()));
    spec_.check_patch(pair.value().extent());
    Var<Scalar> h = pair;
    for (std::size_t k = 0; k < 4; ++k)
        h = norms_[k](leaky_relu(convs_[k](h), spec_.negative_slope), this->training_);
    return sigmoid(convs_[4](h));
}

template <typename Scalar>
Var<Scalar> Discriminator<Scalar>::operator()(const Var<Scalar>& pair) {
    auto m = map(pair);
    return spec_.score_map ? m : global_avg_pool(m);
}

template <typename Scalar>
void Discriminator<Scalar>::collect(const std::string& prefix, StateList<Scalar>& out) {
    for (std::size_t k = 0; k < convs_.size(); ++k) {
        const std::string p = this->join(prefix, "block" + std::to_string(k));
        convs_[k].collect(p + ".conv", out);
        if (k < 4) norms_[k].collect(p + ".bn", out);
    }
}

// ---------------------------------------------------------------------------

template <typename Scalar>
SspHeads<Scalar>::SspHeads(const NetworkSpec& encoder_spec, std::uint64_t seed)
    : spec_(encoder_spec), channels_(pixel_channels(encoder_spec.base_channels)),
      restoration_(encoder_spec, encoder_spec.in_channels, derive_seed(seed, {4})) {
    if (spec_.kind != NetworkKind::PixelNet && spec_.kind != NetworkKind::SspHeads)
        throw SpecError("ssp heads need a pixel encoder spec, got " + to_string(spec_.kind));
    Rng rng = make_rng(seed, {0x55b});
    Index pooled = 0;
    for (Index c : channels_) pooled += c;
    drl_hidden_ = Linear<Scalar>(pooled, kDrlHidden);
    drl_out_ = Linear<Scalar>(kDrlHidden, kDrlClasses);
    rotation_ = Linear<Scalar>(channels_.back(), kRotations);
    cpc_ = Linear<Scalar>(channels_.back(), kCodeLength);
    for (auto* l : {&drl_hidden_, &drl_out_, &rotation_, &cpc_}) l->init(rng);
}

template <typename Scalar>
void SspHeads<Scalar>::check_encoder(const PixelEncoder<Scalar>& encoder) const {
    if (encoder.channels() != channels_ || encoder.spec().in_channels != spec_.in_channels ||
        encoder.spec().depth_strides != spec_.depth_strides)
        throw SpecError("ssp heads do not match the encoder's channel plan");
}

template <typename Scalar>
SspOutputs<Scalar> SspHeads<Scalar>::operator()(const std::vector<Var<Scalar>>& f, bool restore) {
    if (f.size() != channels_.size()) throw SpecError("ssp heads expect 5 encoder features");
    std::vector<Var<Scalar>> pooled;
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (f[i].value().channels() != channels_[i])
            throw SpecError("encoder level " + std::to_string(i) + " has " + std::to_string(f[i].value().channels()) +
                            " channels, heads expect " + std::to_string(channels_[i]));
        pooled.push_back(global_avg_pool(f[i]));
    }
    SspOutputs<Scalar> out;
    const auto multi = concat_channels<Scalar>(std::span<const Var<Scalar>>(pooled));
    out.drl_logits = drl_out_(leaky_relu(drl_hidden_(multi), spec_.negative_slope));
    out.rotation_logits = rotation_(pooled.back());
    out.cpc_codes = cpc_(pooled.back());
    if (restore) out.restored = restoration_(f);
    return out;
}

template <typename Scalar>
void SspHeads<Scalar>::collect(const std::string& prefix, StateList<Scalar>& out) {
    drl_hidden_.collect(this->join(prefix, "drl.hidden"), out);
    drl_out_.collect(this->join(prefix, "drl.out"), out);
    rotation_.collect(this->join(prefix, "rotation"), out);
    cpc_.collect(this->join(prefix, "cpc"), out);
    restoration_.collect(this->join(prefix, "restoration"), out);
}

template <typename Scalar>
void SspHeads<Scalar>::set_training(bool on) {
    this->training_ = on;
    restoration_.set_training(on);
}

template class PixelEncoder<float>;
template class PixelEncoder<double>;
template class PixelDecoder<float>;
template class PixelDecoder<double>;
template class PixelNet<float>;
template class PixelNet<double>;
template class AeNet<float>;
template class AeNet<double>;
template class Discriminator<float>;
template class Discriminator<double>;
template class SspHeads<float>;
template class SspHeads<double>;

} // namespace aegan::nn
