#pragma once

#include "aegan/nn/layers.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace aegan::nn {

enum class NetworkKind { PixelNet, AeNet, Discriminator, SspHeads };

std::string to_string(NetworkKind kind);
NetworkKind network_kind_from_string(const std::string& s);

/// Declarative architecture description.
///
/// `depth_strides` holds one stride per level: 5 encoder strides for
/// Pixel-Net and the SSP encoder, 4 pooling strides for AE-Net, and 5 conv
/// strides for the discriminator.
struct NetworkSpec {
    NetworkKind kind = NetworkKind::PixelNet;
    int base_channels = 16;
    std::vector<Extent3> depth_strides;
    int in_channels = 1;
    double negative_slope = 0.2;
    /// Discriminator only: return the sigmoid map instead of its mean.
    bool score_map = false;

    static NetworkSpec pixel_net(int base_channels = 16);
    static NetworkSpec ae_net(int base_channels = 16);
    static NetworkSpec discriminator(int base_channels = 16);
    static NetworkSpec ssp_heads(int base_channels = 16);

    int levels() const;
    void validate() const;
    /// Throws SpecError unless every level's stride product divides `patch`.
    void check_patch(Extent3 patch) const;
    /// Spatial extent after each level, finest first.
    std::vector<Extent3> level_extents(Extent3 patch) const;

    bool operator==(const NetworkSpec&) const = default;
};

void to_json(nlohmann::json& j, const NetworkSpec& spec);
NetworkSpec parse_network_spec(const nlohmann::json& j, const std::string& path);

template <typename Scalar>
class Module {
public:
    virtual ~Module() = default;

    virtual void collect(const std::string& prefix, StateList<Scalar>& out) = 0;
    virtual void set_training(bool on) { training_ = on; }
    bool training() const noexcept { return training_; }

    StateList<Scalar> state() {
        StateList<Scalar> s;
        collect("", s);
        return s;
    }
    std::vector<Var<Scalar>> parameters() {
        std::vector<Var<Scalar>> out;
        for (auto& p : state().params) out.push_back(p.var);
        return out;
    }
    Index parameter_count() {
        Index n = 0;
        for (auto& p : state().params) n += p.var.value().size();
        return n;
    }
    void zero_grad() {
        for (auto& p : state().params) p.var.zero_grad();
    }

protected:
    static std::string join(const std::string& prefix, const std::string& name) {
        return prefix.empty() ? name : prefix + "." + name;
    }

    bool training_ = true;
};

/// Five-level strided encoder; level 0 is a bare convolution, levels 1-4 are
/// LeakyReLU -> Conv -> BatchNorm with no BatchNorm on level 4.
template <typename Scalar>
class PixelEncoder : public Module<Scalar> {
public:
    explicit PixelEncoder(const NetworkSpec& spec, std::uint64_t seed = 0);

    /// Outputs of every level, finest first.
    std::vector<Var<Scalar>> operator()(const Var<Scalar>& x);
    void collect(const std::string& prefix, StateList<Scalar>& out) override;

    const NetworkSpec& spec() const noexcept { return spec_; }
    const std::vector<Index>& channels() const noexcept { return channels_; }

private:
    NetworkSpec spec_;
    std::vector<Index> channels_;
    std::vector<Conv3d<Scalar>> convs_;
    std::vector<BatchNorm3d<Scalar>> norms_;
};

/// Mirror of the encoder: ReLU -> ConvTranspose -> BatchNorm per level,
/// consuming concat(previous, encoder skip); the last block has no
/// BatchNorm and a linear `out_channels` output.
template <typename Scalar>
class PixelDecoder : public Module<Scalar> {
public:
    PixelDecoder(const NetworkSpec& spec, Index out_channels = 1, std::uint64_t seed = 0);

    Var<Scalar> operator()(const std::vector<Var<Scalar>>& features);
    void collect(const std::string& prefix, StateList<Scalar>& out) override;

private:
    NetworkSpec spec_;
    std::vector<ConvTranspose3d<Scalar>> convs_;
    std::vector<BatchNorm3d<Scalar>> norms_;
};

template <typename Scalar>
class PixelNet : public Module<Scalar> {
public:
    explicit PixelNet(const NetworkSpec& spec, std::uint64_t seed = 0);

    Var<Scalar> operator()(const Var<Scalar>& x);
    void collect(const std::string& prefix, StateList<Scalar>& out) override;
    void set_training(bool on) override;

    PixelEncoder<Scalar>& encoder() noexcept { return encoder_; }
    const NetworkSpec& spec() const noexcept { return encoder_.spec(); }

private:
    PixelEncoder<Scalar> encoder_;
    PixelDecoder<Scalar> decoder_;
};

/// V-shaped residual estimator: 4 x (Conv -> BN -> LeakyReLU, max-pool) then
/// 4 x (ConvTranspose stride 2, concat skip, Conv -> BN -> ReLU) and a
/// 1x1x1 output convolution with bias.
template <typename Scalar>
class AeNet : public Module<Scalar> {
public:
    explicit AeNet(const NetworkSpec& spec, std::uint64_t seed = 0);

    Var<Scalar> operator()(const Var<Scalar>& x);
    void collect(const std::string& prefix, StateList<Scalar>& out) override;

    const NetworkSpec& spec() const noexcept { return spec_; }
    /// Final 1x1x1 projection; zero its weight to make the output its bias.
    Conv3d<Scalar>& head() noexcept { return head_; }

private:
    NetworkSpec spec_;
    std::vector<Conv3d<Scalar>> enc_convs_;
    std::vector<BatchNorm3d<Scalar>> enc_norms_;
    std::vector<ConvTranspose3d<Scalar>> up_convs_;
    std::vector<Conv3d<Scalar>> dec_convs_;
    std::vector<BatchNorm3d<Scalar>> dec_norms_;
    Conv3d<Scalar> head_;
};

/// Five strided blocks, Conv -> LeakyReLU -> BN, the last one Conv ->
/// sigmoid. Input is the 2-channel (lPET, candidate) pair.
template <typename Scalar>
class Discriminator : public Module<Scalar> {
public:
    explicit Discriminator(const NetworkSpec& spec, std::uint64_t seed = 0);

    /// Sigmoid map (N, 1, ...).
    Var<Scalar> map(const Var<Scalar>& pair);
    /// Per-sample mean of the map (N, 1, 1, 1, 1), or the map itself when
    /// `spec.score_map` is set.
    Var<Scalar> operator()(const Var<Scalar>& pair);
    void collect(const std::string& prefix, StateList<Scalar>& out) override;

    const NetworkSpec& spec() const noexcept { return spec_; }

private:
    NetworkSpec spec_;
    std::vector<Conv3d<Scalar>> convs_;
    std::vector<BatchNorm3d<Scalar>> norms_;
};

template <typename Scalar>
struct SspOutputs {
    Var<Scalar> drl_logits;      // (N, 3)
    Var<Scalar> rotation_logits; // (N, 4)
    Var<Scalar> cpc_codes;       // (N, 512)
    Var<Scalar> restored;        // input shape
};

/// The four upstream heads attached to a Pixel-Net encoder.
template <typename Scalar>
class SspHeads : public Module<Scalar> {
public:
    static constexpr Index kDrlClasses = 3;
    static constexpr Index kRotations = 4;
    static constexpr Index kCodeLength = 512;
    static constexpr Index kDrlHidden = 64;

    SspHeads(const NetworkSpec& encoder_spec, std::uint64_t seed = 0);

    /// Throws SpecError if `encoder` was built from a different channel plan.
    void check_encoder(const PixelEncoder<Scalar>& encoder) const;
    /// `restore = false` skips the restoration decoder.
    SspOutputs<Scalar> operator()(const std::vector<Var<Scalar>>& features, bool restore = true);
    void collect(const std::string& prefix, StateList<Scalar>& out) override;
    void set_training(bool on) override;

private:
    NetworkSpec spec_;
    std::vector<Index> channels_;
    Linear<Scalar> drl_hidden_;
    Linear<Scalar> drl_out_;
    Linear<Scalar> rotation_;
    Linear<Scalar> cpc_;
    PixelDecoder<Scalar> restoration_;
};

/// Channel plan of the Pixel-Net encoder levels.
std::vector<Index> pixel_channels(int base_channels);

} // namespace aegan::nn
