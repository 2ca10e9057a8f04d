#pragma once

#include "aegan/nn/networks.hpp"
#include "aegan/nn/optim.hpp"
#include "aegan/patch.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace aegan {

/// {4, 10} -> 0, {20, 50} -> 1, {100} -> 2. Full dose has no class.
int drl_class_of(DoseLevel drf);

/// Exact k * 90 degree rotation about the depth axis. k = 1 maps
/// out(x, y, z) = in(y, W - 1 - x, z). Needs a square in-plane shape.
Patch rotate_patch(const Patch& p, int k);

struct Cuboid {
    Extent3 origin{0, 0, 0};
    Extent3 shape{1, 1, 1};
};

enum class VoxelFate : std::uint8_t { Kept = 0, Dropped = 1, Shuffled = 2, OutPainted = 3 };

struct MaskRecord {
    std::vector<Cuboid> dropout;
    std::vector<Cuboid> shuffle;
    bool outpainted = false;
    Index band = 0;
    /// Per-voxel outcome, same layout as the patch.
    Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> fate;

    Index count(VoxelFate f) const { return (fate == static_cast<std::uint8_t>(f)).count(); }
};

struct CutoutResult {
    Patch patch;
    MaskRecord mask;
};

/// Cuboid dropout to `dropout_fraction` +- 1% of the voxels, local shuffling
/// inside small cuboids disjoint from the dropout, then (with probability
/// 0.5) uniform-noise out-painting of a border band over voxels not yet
/// touched. Needs at least 8 voxels per axis.
CutoutResult cutout_perturb(const Patch& p, std::uint64_t seed, double dropout_fraction = 0.30);

struct SspView {
    Patch patch;     // rotated then perturbed
    Patch original;  // rotated only; the restoration target
    int rotation_class = 0;
    int drl_class = 0;
    MaskRecord mask;
    std::string source;
};

SspView make_view(const Patch& source, DoseLevel drf, const std::string& source_id, std::uint64_t seed,
                  double dropout_fraction = 0.30);

// Losses. Var forms are batch means; the double forms take one sample.

template <typename Scalar>
nn::Var<Scalar> loss_classification(const nn::Var<Scalar>& logits, std::span<const int> labels);
template <typename Scalar>
nn::Var<Scalar> loss_rotation(const nn::Var<Scalar>& logits, std::span<const int> labels);
/// Codes (2N, D); partner[i] is the other view of i's source.
template <typename Scalar>
nn::Var<Scalar> loss_cpc(const nn::Var<Scalar>& codes, std::span<const int> partner, double sigma);
template <typename Scalar>
nn::Var<Scalar> loss_restoration(const nn::Var<Scalar>& restored, const nn::Var<Scalar>& original);

double loss_classification(std::span<const double> logits, int label);
double loss_rotation(std::span<const double> logits, int label);
double loss_cpc(const std::vector<std::vector<double>>& codes, std::span<const int> partner, double sigma);
double loss_restoration(const Patch& restored, const Patch& original);

struct SspParts {
    double classification = 0;
    double rotation = 0;
    double cpc = 0;
    double restoration = 0;
};
double ssp_total_loss(const SspParts& parts, const std::array<double, 4>& lambdas);

struct SspConfig {
    std::array<double, 4> lambdas{1.0, 1.0, 1.0, 1.0};
    /// Which upstream tasks contribute: DRL, rotation, CPC, restoration.
    std::array<bool, 4> tasks{true, true, true, true};
    double sigma = 0.5;
    double dropout_fraction = 0.30;
    int batch_size = 4;
    int steps = 500;
    Extent3 patch_shape{32, 32, 16};
    nn::AdamOptions optimizer{.lr = 2e-4, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 1e-2};
    double suv_scale = kDefaultSuvScale;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const SspConfig& cfg);
SspConfig parse_ssp_config(const nlohmann::json& j, const std::string& path);

/// One low-dose volume available for pre-training.
struct SspSource {
    Volume volume;
    std::string id;
};

struct SspLogRow {
    int step = 0;
    SspParts parts;
    double total = 0;
    double rotation_accuracy = 0;
    double drl_accuracy = 0;
};

struct SspResult {
    std::vector<SspLogRow> log;
};

/// Runs `cfg.steps` AdamW steps of the four-head objective on random crops
/// drawn from `sources`, two views per crop. Updates `encoder` and `heads`.
SspResult pretrain(nn::PixelEncoder<float>& encoder, nn::SspHeads<float>& heads, const std::vector<SspSource>& sources,
                   const SspConfig& cfg);

void write_ssp_log(const std::vector<SspLogRow>& log, const std::filesystem::path& path);

/// Encoder-only checkpoint with an embedded spec copy.
void save_encoder(const std::filesystem::path& path, nn::PixelEncoder<float>& encoder,
                  const nlohmann::json& extra_meta);
/// Throws CheckpointError if the stored spec differs from `encoder.spec()`.
void load_encoder(const std::filesystem::path& path, nn::PixelEncoder<float>& encoder);

/// Stack patches into a (N, 1, shape) tensor, dividing by `scale`.
Tensor<float> stack_patches(std::span<const Patch* const> patches, double scale);

} // namespace aegan
